import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowagent.fields import GridSpec, ScalarField
from flowagent.probe import (
    Intervention,
    InterventionError,
    apply_intervention,
    causal_sensitivity,
    counterfactual_rollout,
    sensitivity_score,
)
from flowagent.simulator import (
    SimulatorConfig,
    decode,
    encode,
    gaussian_vortex,
    member_seed,
    perturb_latent,
    random_vorticity,
    rollout,
)
from flowagent.weather import toy_weather_state

CFG = SimulatorConfig(nu=1e-3, dt=0.01, steps_per_output=5, n_outputs=2)


def test_zero_full_grid(grid32):
    s = apply_intervention(random_vorticity(grid32, 0), Intervention("vorticity", "zero"))
    assert not s["vorticity"].values.any() and not s["u"].values.any()


def test_scale_one_is_identity(grid32):
    x = random_vorticity(grid32, 0)
    s = apply_intervention(x, Intervention.identity())
    for name in ("vorticity", "u", "v"):
        assert np.array_equal(s[name].values, x[name].values)


def test_add_on_box_touches_exactly_100_cells(grid32):
    x = toy_weather_state(grid32, 0)
    s = apply_intervention(x, Intervention("temperature", "add", 2.0, (4, 14, 10, 20)))
    diff = s["temperature"].values - x["temperature"].values
    changed = diff != 0
    assert changed.sum() == 100
    assert np.allclose(diff[changed], 2.0, atol=1e-12)
    # every cell outside the box is bit-identical
    assert np.array_equal(s["temperature"].values[~changed], x["temperature"].values[~changed])
    assert np.array_equal(s["vorticity"].values, x["vorticity"].values)


def test_velocity_intervention_drops_stale_vorticity(grid32):
    x = random_vorticity(grid32, 0)
    s = apply_intervention(x, Intervention("u", "scale", 2.0))
    assert "vorticity" not in s and "u" in s


@pytest.mark.parametrize("bad", [
    dict(channel="vorticity", op="rotate"),
    dict(channel="vorticity", op="scale", value=-1.0),
    dict(channel="vorticity", op="add", region=(5, 5, 0, 3)),
])
def test_invalid_interventions(bad):
    with pytest.raises(InterventionError):
        Intervention(**bad)


def test_unknown_channel_and_out_of_grid(grid32):
    x = random_vorticity(grid32, 0)
    with pytest.raises(InterventionError):
        apply_intervention(x, Intervention("salinity", "zero"))
    with pytest.raises(InterventionError):
        apply_intervention(x, Intervention("vorticity", "zero", region=(0, 40, 0, 4)))


def test_flag_and_json_parsing():
    i = Intervention.from_flag("vorticity:add:0.5:0,8,4,12")
    assert (i.channel, i.op, i.value, i.region) == ("vorticity", "add", 0.5, (0, 8, 4, 12))
    j = Intervention.from_json('{"channel": "u", "op": "zero", "region": "full", "label": "calm"}')
    assert j.region is None and j.label == "calm"
    assert Intervention.from_dict(j.to_dict()) == j


def test_sensitivity_closed_forms():
    assert sensitivity_score(0.0, 0.3) == 0.0
    assert abs(sensitivity_score(0.37, 0.37) - 0.5) < 1e-9
    assert sensitivity_score(1.0, 0.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sensitivity_score(-1.0, 1.0)


@settings(max_examples=100)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 1e6))
def test_sensitivity_bounded_and_monotone(d1, d2, sigma):
    lo, hi = sorted((d1, d2))
    a, b = sensitivity_score(lo, sigma), sensitivity_score(hi, sigma)
    assert 0.0 <= a <= b <= 1.0


def test_identity_intervention_zero_sensitivity(grid32):
    res = counterfactual_rollout(random_vorticity(grid32, 0), Intervention.identity(), 4, 0.03, 5, CFG)
    assert all(not d.values.any() for d in res.delta)
    assert res.sensitivity == 0.0 == causal_sensitivity(res)


def test_paired_seeds_rerun_member0(grid32):
    x = random_vorticity(grid32, 0)
    iv = Intervention("vorticity", "scale", 1.5)
    res = counterfactual_rollout(x, iv, 3, 0.03, 5, CFG)
    assert res.factual.seeds == res.counterfactual.seeds == tuple(member_seed(CFG.seed, k) for k in range(3))
    for ens, init in ((res.factual, x), (res.counterfactual, apply_intervention(x, iv))):
        z = perturb_latent(encode(init), 0.03, ens.seeds[0])
        again = decode(rollout(z, CFG, 2, 5)[-1])
        assert np.array_equal(again["vorticity"].values, ens.members[0][-1]["vorticity"].values)


def test_permuting_members_leaves_delta_and_s(grid32):
    x = random_vorticity(grid32, 0)
    iv = Intervention("vorticity", "scale", 1.2)
    seeds = [member_seed(0, k) for k in range(4)]
    a = counterfactual_rollout(x, iv, 4, 0.03, 5, CFG, member_seeds=seeds)
    b = counterfactual_rollout(x, iv, 4, 0.03, 5, CFG, member_seeds=[seeds[i] for i in (2, 0, 3, 1)])
    for da, db in zip(a.delta, b.delta):
        assert np.abs(da.values - db.values).max() < 1e-13
    assert a.sensitivity == pytest.approx(b.sensitivity, abs=1e-12)


def test_scaling_family_monotone(grid32):
    x = random_vorticity(grid32, 0)
    S = [counterfactual_rollout(x, Intervention("vorticity", "scale", c), 4, 0.03, 5, CFG).sensitivity
         for c in (1.1, 1.5, 2.0)]
    assert S[0] <= S[1] <= S[2]
    assert all(0 <= s <= 1 for s in S)


def test_zeroed_forcing_delta_sits_on_forcing_support():
    g = GridSpec(64, 64)
    calm = random_vorticity(g, 0, rms=0.05)
    src = gaussian_vortex(g, 2.0, 0.4, (np.pi, np.pi))
    forced = calm.with_channels(forcing=ScalarField(g, src, "forcing", "1"))
    res = counterfactual_rollout(forced, Intervention("forcing", "zero"), 4, 0.01, 10, CFG)
    d = np.abs(res.delta[-1].values)
    inside = src > 0.1 * src.max()
    assert d.mean() > 0
    assert d[inside].mean() > 10 * d[~inside].mean()
    r, c = np.unravel_index(np.argmax(d), d.shape)
    assert inside[r, c]
