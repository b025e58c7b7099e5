import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowagent.fields import FlowState, GridSpec, ScalarField
from flowagent.knowledge import HashingEmbedder
from flowagent.projector import (
    CLASS_TEXTS,
    ProjectorParams,
    alignment_grad,
    alignment_loss,
    cross_attend,
    extract_topology,
    load_params,
    logit_bound,
    patch_embed,
    project,
    render_descriptors,
    save_params,
    synthetic_descriptor_set,
    train_projector,
)
from flowagent.simulator import gaussian_vortex

from conftest import vort_state


def small_instance(seed, N=2, P=3, d=4, d_v=5, M=3):
    rng = np.random.default_rng(seed)
    params = ProjectorParams(rng.standard_normal((N, d)), rng.standard_normal((d_v, d)),
                             rng.standard_normal((d_v, d)), 0.07)
    X = rng.standard_normal((P, d_v))
    T = rng.standard_normal((M, d))
    pos = rng.integers(0, M, N)
    return params, X, T, pos


def loss_of(params, X, T, pos, tau_c=None):
    return alignment_loss(cross_attend(params, X).H_vis, T, pos, params.tau_c if tau_c is None else tau_c)


def numeric_grad(params, X, T, pos, name, h=1e-5):
    W = getattr(params, name)
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        old = W[idx]
        W[idx] = old + h
        up = loss_of(params, X, T, pos)
        W[idx] = old - h
        down = loss_of(params, X, T, pos)
        W[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def test_patch_embedding_shape():
    enc = patch_embed(np.zeros((32, 32)), patch=8, d_v=16, seed=1)
    assert enc.vectors.shape == (16, 16)
    with pytest.raises(ValueError):
        patch_embed(np.zeros((30, 32)), patch=8)


def test_attention_rows_sum_to_one():
    for seed in range(20):
        params, X, _, _ = small_instance(seed, N=4, P=7)
        A = cross_attend(params, X * 10).attention
        assert np.abs(A.sum(axis=1) - 1).max() < 1e-9


def test_single_patch_tokens_equal_value_row():
    params, X, _, _ = small_instance(0, P=1)
    H = cross_attend(params, X).H_vis
    assert np.allclose(H, np.repeat(X @ params.W_V, params.N, axis=0), atol=1e-14)


def test_zero_queries_give_uniform_attention():
    params, X, _, _ = small_instance(1, P=6)
    params.Q[:] = 0.0
    tok = cross_attend(params, X)
    assert np.allclose(tok.attention, 1 / 6, atol=1e-15)
    assert np.allclose(tok.H_vis, (X @ params.W_V).mean(axis=0), atol=1e-14)


def test_cross_attend_shape_mismatch():
    params, X, _, _ = small_instance(0)
    with pytest.raises(ValueError):
        cross_attend(params, X[:, :3])


def test_uniform_similarity_loss_is_n_log_m():
    rng = np.random.default_rng(0)
    H = rng.standard_normal((3, 6))
    T = np.repeat(rng.standard_normal((1, 6)), 5, axis=0)
    assert abs(alignment_loss(H, T, [0, 2, 4], 0.07) - 3 * math.log(5)) < 1e-9


def test_sharp_limit_loss_vanishes():
    # positive similarity 1, negatives -1, small temperature
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    T = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    T2 = np.array([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    assert 0 < alignment_loss(H[:1], T2, [0], 0.01) < 1e-6
    assert alignment_loss(H, T, [0, 2], 0.01) > 0


def test_loss_rejects_zero_norm():
    with pytest.raises(ValueError):
        alignment_loss(np.zeros((1, 3)), np.eye(3), [0])
    with pytest.raises(ValueError):
        alignment_loss(np.ones((1, 3)), np.eye(3)[:1], [0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_match_finite_differences(seed):
    params, X, T, pos = small_instance(seed)
    g = alignment_grad(params, X, T, pos)
    assert g.loss == pytest.approx(loss_of(params, X, T, pos), rel=1e-12)
    for name in ("Q", "W_K", "W_V"):
        num = numeric_grad(params, X, T, pos, name)
        ana = getattr(g, name)
        rel = np.linalg.norm(ana - num) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
        assert rel < 1e-4, (name, rel)


def test_constant_loss_configuration_has_zero_gradient():
    params, X, T, pos = small_instance(3, M=4)
    T = np.repeat(T[:1], 4, axis=0)
    g = alignment_grad(params, X, T, pos)
    assert g.loss == pytest.approx(params.N * math.log(4), abs=1e-9)
    assert g.norm() < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_text_scale_invariance(seed, c):
    params, X, T, pos = small_instance(seed)
    a = alignment_grad(params, X, T, pos)
    b = alignment_grad(params, X, c * T, pos)
    assert abs(a.loss - b.loss) < 1e-10
    for name in ("Q", "W_K", "W_V"):
        assert np.abs(getattr(a, name) - getattr(b, name)).max() < 1e-10 * max(1.0, np.abs(getattr(a, name)).max())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.01, 0.07, 0.5]))
def test_loss_upper_bound(seed, tau):
    params, X, T, pos = small_instance(seed, N=3, M=5)
    H = cross_attend(params, X).H_vis
    assert alignment_loss(H, T, pos, tau) <= logit_bound(H, T, tau) + 1e-9


def test_training_halves_loss():
    fields, labels = synthetic_descriptor_set(6, 32, seed=0)
    encs = [patch_embed(f, 8, 32, 0) for f in fields]
    emb = HashingEmbedder(64)
    T = np.stack([emb.embed(t) for t in CLASS_TEXTS.values()])
    res = train_projector(ProjectorParams.init(4, 64, 32, 0), encs, labels, T, steps=200, lr=1e-2)
    assert res.losses[-1] <= 0.5 * res.losses[0]


def test_checkpoint_round_trip(tmp_path):
    p = ProjectorParams.init(3, 8, 5, seed=2)
    save_params(p, tmp_path / "ckpt", patch=8, seed=2)
    q, header = load_params(tmp_path / "ckpt")
    assert header == {"N": 3, "d": 8, "d_v": 5, "p": 8, "seed": 2, "tau_c": 0.07}
    for name in ("Q", "W_K", "W_V"):
        assert np.array_equal(getattr(p, name), getattr(q, name))


# -- topology ----------------------------------------------------------------


def vortices(state):
    return [d for d in extract_topology(state) if d.kind == "vortex"]


def test_zero_field_has_no_structures(grid64):
    state = vort_state(grid64, np.zeros(grid64.shape))
    assert extract_topology(state) == []
    assert render_descriptors([]) == "no salient structures detected"


@pytest.mark.parametrize("amp", [3.0, -2.0])
def test_single_gaussian_vortex(grid64, amp):
    w = gaussian_vortex(grid64, amp, 0.4)
    vs = vortices(vort_state(grid64, w))
    assert len(vs) == 1
    assert vs[0].location == (32, 32)
    assert vs[0].sign == (1 if amp > 0 else -1)
    assert vs[0].magnitude == pytest.approx(abs(amp))


def test_two_opposite_vortices_ordered_by_magnitude(grid64):
    w = gaussian_vortex(grid64, -2.0, 0.4, (np.pi / 2, np.pi / 2)) + gaussian_vortex(grid64, 3.0, 0.4, (1.5 * np.pi, 1.5 * np.pi))
    vs = vortices(vort_state(grid64, w))
    assert [d.sign for d in vs] == [1, -1]
    assert vs[0].location == (48, 48) and vs[1].location == (16, 16)
    text = render_descriptors(vs)
    assert text.splitlines()[0].startswith("- cyclonic vortex at (x=4.7124, y=4.7124), core vorticity 3.0000")
    assert "anticyclonic vortex at (x=1.5708, y=1.5708), core vorticity -2.0000" in text


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 63), st.integers(0, 63))
def test_topology_translation_equivariance(dr, dc):
    g = GridSpec(64, 64)
    w = gaussian_vortex(g, 3.0, 0.4, (1.0, 2.0)) - gaussian_vortex(g, 2.0, 0.5, (4.0, 4.5))
    a = extract_topology(vort_state(g, w))
    b = extract_topology(vort_state(g, np.roll(w, (dr, dc), axis=(0, 1))))
    key = lambda ds: sorted((d.kind, d.location, round(d.magnitude, 9)) for d in ds)
    shifted = [(d.kind, ((d.location[0] + dr) % 64, (d.location[1] + dc) % 64), round(d.magnitude, 9)) for d in a]
    assert key(b) == sorted(shifted)


def test_shear_layer_detected(grid64):
    X, Y = grid64.coords()
    # thin jet: u = tanh-like profile, vorticity concentrated along y = pi
    w = -2.0 / np.cosh((Y - np.pi) / 0.2) ** 2 / 0.2 * 0.2
    kinds = {d.kind for d in extract_topology(vort_state(grid64, w))}
    assert "shear_line" in kinds


def test_project_with_params(grid64):
    w = gaussian_vortex(grid64, 3.0, 0.4)
    p = ProjectorParams.init(4, 16, 32, 0)
    tok = project(vort_state(grid64, w), p)
    assert tok.H_vis.shape == (4, 16) and np.all(np.isfinite(tok.H_vis))
    assert "cyclonic vortex" in tok.rendered_text
