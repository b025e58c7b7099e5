"""Visual-symbolic projection of flow states.

Two outputs per state: attention-pooled tokens (a query bank cross-attending
over linear patch embeddings) that can be aligned to text embeddings with an
InfoNCE-style loss, and discrete structures (vortices, stagnation points,
shear lines) rendered as text for the agent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .fields import FlowState, ddx, ddy

TAU_C_DEFAULT = 0.07


# -- patch embedding and attention -------------------------------------------


@dataclass(frozen=True)
class PatchEncoding:
    vectors: np.ndarray  # (P, d_v)
    patch: int
    seed: int

    @property
    def n_patches(self) -> int:
        return self.vectors.shape[0]


def patch_embed(values: np.ndarray, patch: int = 8, d_v: int = 32, seed: int = 0) -> PatchEncoding:
    """Non-overlapping ``patch x patch`` tiles through a fixed seeded linear map."""
    H, W = values.shape
    if H % patch or W % patch:
        raise ValueError(f"patch size {patch} must divide the grid {H}x{W}")
    tiles = values.reshape(H // patch, patch, W // patch, patch).transpose(0, 2, 1, 3).reshape(-1, patch * patch)
    proj = np.random.default_rng(seed).standard_normal((patch * patch, d_v)) / patch
    return PatchEncoding(tiles @ proj, patch, seed)


def embed_state(x: FlowState, patch: int = 8, d_v: int = 32, seed: int = 0, channel: str = "vorticity") -> PatchEncoding:
    values = x.vorticity_field().values if channel == "vorticity" else x[channel].values
    return patch_embed(values, patch, d_v, seed)


@dataclass
class ProjectorParams:
    Q: np.ndarray    # (N, d)
    W_K: np.ndarray  # (d_v, d)
    W_V: np.ndarray  # (d_v, d)
    tau_c: float = TAU_C_DEFAULT

    def __post_init__(self):
        if self.Q.ndim != 2 or self.Q.shape[0] < 1:
            raise ValueError("query bank must be a non-empty (N, d) matrix")
        d = self.Q.shape[1]
        if self.W_K.shape[1] != d or self.W_V.shape[1] != d or self.W_K.shape != self.W_V.shape:
            raise ValueError(f"projection shapes {self.W_K.shape}, {self.W_V.shape} do not match d={d}")
        if not self.tau_c > 0:
            raise ValueError("temperature must be positive")
        for name in ("Q", "W_K", "W_V"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def N(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def d_v(self) -> int:
        return self.W_K.shape[0]

    @classmethod
    def init(cls, N: int = 4, d: int = 16, d_v: int = 32, seed: int = 0, tau_c: float = TAU_C_DEFAULT):
        rng = np.random.default_rng(seed)
        return cls(
            rng.standard_normal((N, d)),
            rng.standard_normal((d_v, d)) / math.sqrt(d_v),
            rng.standard_normal((d_v, d)) / math.sqrt(d_v),
            tau_c,
        )

    def copy(self) -> "ProjectorParams":
        return ProjectorParams(self.Q.copy(), self.W_K.copy(), self.W_V.copy(), self.tau_c)


@dataclass
class SemanticTokenSequence:
    H_vis: np.ndarray
    attention: np.ndarray | None = None
    rendered_text: str = ""
    descriptors: list = field(default_factory=list)


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=1, keepdims=True)


def cross_attend(params: ProjectorParams, v: PatchEncoding | np.ndarray) -> SemanticTokenSequence:
    """``softmax(Q (v W_K)^T / sqrt(d)) (v W_V)``, softmax over patches per query."""
    V_in = v.vectors if isinstance(v, PatchEncoding) else np.asarray(v)
    if V_in.ndim != 2 or V_in.shape[1] != params.d_v:
        raise ValueError(f"patch vectors have shape {V_in.shape}, expected (P, {params.d_v})")
    K = V_in @ params.W_K
    Vv = V_in @ params.W_V
    A = _softmax_rows(params.Q @ K.T / math.sqrt(params.d))
    return SemanticTokenSequence(A @ Vv, A)


# -- alignment loss and gradients --------------------------------------------


def _unit_rows(X: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm {what} vector: cosine similarity is undefined")
    return X / norms[:, None], norms


def _check_inputs(H: np.ndarray, T: np.ndarray, pos: np.ndarray, tau_c: float):
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(T))):
        raise ValueError("embeddings must be finite")
    if T.ndim != 2 or T.shape[0] < 2:
        raise ValueError("need at least two candidate text embeddings")
    if H.shape[1] != T.shape[1]:
        raise ValueError(f"token dim {H.shape[1]} != text dim {T.shape[1]}")
    if pos.shape != (H.shape[0],) or pos.min() < 0 or pos.max() >= T.shape[0]:
        raise ValueError("positive index must name one text row per token")
    if not tau_c > 0:
        raise ValueError("temperature must be positive")


def alignment_loss(H_vis: np.ndarray, text_embs: np.ndarray, pos, tau_c: float = TAU_C_DEFAULT) -> float:
    """``-sum_i log softmax_j(cos(h_i, t_j) / tau_c)[pos_i]``."""
    H = np.asarray(H_vis, dtype=float)
    T = np.asarray(text_embs, dtype=float)
    pos = np.broadcast_to(np.asarray(pos, dtype=int), (H.shape[0],))
    _check_inputs(H, T, pos, tau_c)
    Hn, _ = _unit_rows(H, "token")
    Tn, _ = _unit_rows(T, "text")
    logits = Hn @ Tn.T / tau_c
    return float(np.sum(_nll(logits, pos)))


def _nll(logits: np.ndarray, pos: np.ndarray) -> np.ndarray:
    # log(sum_j exp(l_j - l_pos)); log1p keeps precision when the positive dominates.
    rows = np.arange(len(pos))
    diff = logits - logits[rows, pos][:, None]
    diff[rows, pos] = -np.inf
    top = diff.max(axis=1)
    out = np.empty(len(pos))
    small = top <= 0
    out[small] = np.log1p(np.exp(diff[small]).sum(axis=1))
    big = ~small
    if np.any(big):
        t = top[big][:, None]
        out[big] = top[big] + np.log(np.exp(-t[:, 0]) + np.exp(diff[big] - t).sum(axis=1))
    return out


@dataclass
class AlignmentGrad:
    loss: float
    Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    def norm(self) -> float:
        return float(math.sqrt(sum(np.sum(g**2) for g in (self.Q, self.W_K, self.W_V))))


def alignment_grad(params: ProjectorParams, v: PatchEncoding | np.ndarray, text_embs: np.ndarray, pos,
                   tau_c: float | None = None) -> AlignmentGrad:
    """Loss and analytic gradients w.r.t. ``Q``, ``W_K`` and ``W_V``."""
    tau_c = params.tau_c if tau_c is None else tau_c
    X = v.vectors if isinstance(v, PatchEncoding) else np.asarray(v, dtype=float)
    T = np.asarray(text_embs, dtype=float)
    sqrt_d = math.sqrt(params.d)

    K = X @ params.W_K
    V = X @ params.W_V
    A = _softmax_rows(params.Q @ K.T / sqrt_d)
    H = A @ V
    pos = np.broadcast_to(np.asarray(pos, dtype=int), (H.shape[0],))
    _check_inputs(H, T, pos, tau_c)

    Hn, hnorm = _unit_rows(H, "token")
    Tn, _ = _unit_rows(T, "text")
    S = Hn @ Tn.T
    logits = S / tau_c
    P = _softmax_rows(logits)
    rows = np.arange(len(pos))
    loss = float(np.sum(_nll(logits, pos)))

    G = P.copy()
    G[rows, pos] -= 1.0
    G /= tau_c
    # d cos(h, t)/dh = (t_hat - cos * h_hat) / |h|
    dH = (G @ Tn - np.sum(G * S, axis=1, keepdims=True) * Hn) / hnorm[:, None]

    dA = dH @ V.T
    dV = A.T @ dH
    dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True)) / sqrt_d
    dQ = dS @ K
    dK = dS.T @ params.Q
    return AlignmentGrad(loss, dQ, X.T @ dK, X.T @ dV)


def logit_bound(H_vis: np.ndarray, text_embs: np.ndarray, tau_c: float) -> float:
    """Upper bound ``N log M + N (s_max - s_min) / tau_c`` on the alignment loss."""
    Hn, _ = _unit_rows(np.asarray(H_vis, dtype=float), "token")
    Tn, _ = _unit_rows(np.asarray(text_embs, dtype=float), "text")
    S = Hn @ Tn.T
    N, M = S.shape
    return N * math.log(M) + N * (S.max() - S.min()) / tau_c


# -- training ----------------------------------------------------------------

CLASS_TEXTS = {
    "vortex": "vortex: a coherent rotating eddy with a strong vorticity core",
    "stagnation_point": "stagnation point: a saddle where the velocity vanishes between cells",
    "shear_line": "shear line: a thin layer of strong velocity shear separating opposing flows",
}


def synthetic_descriptor_set(n_per_class: int = 6, size: int = 32, seed: int = 0):
    """Labelled vorticity fields for the three structure classes.

    Returns ``(fields, labels)`` with labels indexing ``CLASS_TEXTS`` order.
    """
    rng = np.random.default_rng(seed)
    L = 2 * math.pi
    x = np.arange(size) * L / size
    X, Y = np.meshgrid(x, x)
    fields, labels = [], []
    for _ in range(n_per_class):
        cx, cy = rng.uniform(0, L, 2)
        sigma = rng.uniform(0.35, 0.7)
        dx = (X - cx + L / 2) % L - L / 2
        dy = (Y - cy + L / 2) % L - L / 2
        fields.append(rng.choice([-1, 1]) * rng.uniform(1.0, 2.0) * np.exp(-(dx**2 + dy**2) / (2 * sigma**2)))
        labels.append(0)

        k = int(rng.integers(2, 4))
        px, py = rng.uniform(0, L, 2)
        fields.append(rng.uniform(0.5, 1.0) * np.sin(k * (X - px)) * np.sin(k * (Y - py)))
        labels.append(1)

        y0 = rng.uniform(0, L)
        width = rng.uniform(0.15, 0.3)
        coord = Y if rng.random() < 0.5 else X
        d = (coord - y0 + L / 2) % L - L / 2
        fields.append(rng.choice([-1, 1]) * rng.uniform(1.0, 2.0) / np.cosh(d / width) ** 2)
        labels.append(2)
    return fields, np.array(labels)


@dataclass
class TrainingResult:
    params: ProjectorParams
    losses: list[float]


def batch_loss_and_grad(params: ProjectorParams, encodings: Sequence[PatchEncoding], labels,
                        text_embs: np.ndarray) -> AlignmentGrad:
    """Mean of per-sample losses/gradients; accumulation is in index order."""
    total = None
    for enc, lab in zip(encodings, labels):
        g = alignment_grad(params, enc, text_embs, int(lab))
        if total is None:
            total = g
        else:
            total = AlignmentGrad(total.loss + g.loss, total.Q + g.Q, total.W_K + g.W_K, total.W_V + g.W_V)
    n = len(encodings)
    return AlignmentGrad(total.loss / n, total.Q / n, total.W_K / n, total.W_V / n)


def train_projector(params: ProjectorParams, encodings: Sequence[PatchEncoding], labels, text_embs: np.ndarray,
                    steps: int = 200, lr: float = 1e-2) -> TrainingResult:
    """Plain gradient descent with a fixed step size."""
    p = params.copy()
    losses = []
    for _ in range(steps):
        g = batch_loss_and_grad(p, encodings, labels, text_embs)
        losses.append(g.loss)
        p.Q -= lr * g.Q
        p.W_K -= lr * g.W_K
        p.W_V -= lr * g.W_V
    losses.append(batch_loss_and_grad(p, encodings, labels, text_embs).loss)
    return TrainingResult(p, losses)


def save_params(params: ProjectorParams, stem: str | Path, patch: int, seed: int) -> tuple[Path, Path]:
    """Raw little-endian float64 dump of Q, W_K, W_V (in that order) plus JSON header."""
    stem = Path(stem)
    data = np.concatenate([params.Q.ravel(), params.W_K.ravel(), params.W_V.ravel()]).astype("<f8")
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(data.tobytes())
    header = {"N": params.N, "d": params.d, "d_v": params.d_v, "p": patch, "seed": seed, "tau_c": params.tau_c}
    json_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return bin_path, json_path


def load_params(stem: str | Path) -> tuple[ProjectorParams, dict]:
    stem = Path(stem)
    h = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    n_q, n_w = h["N"] * h["d"], h["d_v"] * h["d"]
    if raw.size != n_q + 2 * n_w:
        raise ValueError(f"{stem}: checkpoint size {raw.size} does not match header")
    Q = raw[:n_q].reshape(h["N"], h["d"]).copy()
    W_K = raw[n_q:n_q + n_w].reshape(h["d_v"], h["d"]).copy()
    W_V = raw[n_q + n_w:].reshape(h["d_v"], h["d"]).copy()
    return ProjectorParams(Q, W_K, W_V, h["tau_c"]), h


# -- topology ----------------------------------------------------------------

KIND_ORDER = ("vortex", "stagnation_point", "shear_line")


@dataclass(frozen=True)
class TopologicalDescriptor:
    kind: str
    location: tuple[int, int]  # (row, col)
    position: tuple[float, float]  # (x, y) in domain units
    magnitude: float
    sign: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "row": self.location[0], "col": self.location[1],
                "x": self.position[0], "y": self.position[1], "magnitude": self.magnitude, "sign": self.sign}


@dataclass(frozen=True)
class TopologyThresholds:
    """``None`` entries fall back to field-relative defaults."""

    vortex: float | None = None      # default 2 * std(vorticity)
    stagnation: float | None = None  # default 0.05 * max(speed)
    shear: float | None = None       # default 2 * std(strain)


def strain_magnitude(ux, uy, vx, vy) -> np.ndarray:
    return np.sqrt((ux - vy) ** 2 + (vx + uy) ** 2)


def _periodic_components(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return labels
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    H, W = mask.shape
    edges = []
    for c in range(W):
        for dc in (-1, 0, 1):
            edges.append(((H - 1, c), (0, (c + dc) % W)))
    for r in range(H):
        for dr in (-1, 0, 1):
            edges.append(((r, W - 1), ((r + dr) % H, 0)))
    for (r1, c1), (r2, c2) in edges:
        a, b = labels[r1, c1], labels[r2, c2]
        if a and b:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(n + 1)])
    return roots[labels]


def extract_topology(x: FlowState, thresholds: TopologyThresholds | None = None) -> list[TopologicalDescriptor]:
    """Vortices, stagnation points and shear lines of a state.

    Vortices are periodic 3x3 local maxima of ``|omega|`` above the vortex
    threshold, stagnation points are local minima of speed below the
    stagnation threshold, and each connected set of strain ridge cells above
    the shear threshold yields one shear line located at its strongest cell.
    Ordering: kind (vortex, stagnation_point, shear_line), then magnitude
    descending, then row-major position.
    """
    th = thresholds or TopologyThresholds()
    grid = x.grid
    omega = x.vorticity_field().values
    vel = x.velocity()
    speed = np.hypot(vel.u, vel.v)
    strain = strain_magnitude(ddx(vel.u, grid), ddy(vel.u, grid), ddx(vel.v, grid), ddy(vel.v, grid))

    th_w = 2 * omega.std() if th.vortex is None else th.vortex
    th_u = 0.05 * speed.max() if th.stagnation is None else th.stagnation
    th_s = 2 * strain.std() if th.shear is None else th.shear

    def pos(r, c):
        return (float(c * grid.dx), float(r * grid.dy))

    out: list[TopologicalDescriptor] = []
    absw = np.abs(omega)
    peaks = (absw == ndimage.maximum_filter(absw, size=3, mode="wrap")) & (absw > th_w)
    for r, c in zip(*np.nonzero(peaks)):
        out.append(TopologicalDescriptor("vortex", (int(r), int(c)), pos(r, c), float(absw[r, c]),
                                         1 if omega[r, c] > 0 else -1))

    troughs = (speed == ndimage.minimum_filter(speed, size=3, mode="wrap")) & (speed < th_u)
    for r, c in zip(*np.nonzero(troughs)):
        out.append(TopologicalDescriptor("stagnation_point", (int(r), int(c)), pos(r, c), float(speed[r, c])))

    ridge_x = (strain >= np.roll(strain, 1, 1)) & (strain >= np.roll(strain, -1, 1))
    ridge_y = (strain >= np.roll(strain, 1, 0)) & (strain >= np.roll(strain, -1, 0))
    ridges = (ridge_x | ridge_y) & (strain > th_s)
    labels = _periodic_components(ridges)
    for lab in np.unique(labels[labels > 0]):
        cells = np.argwhere(labels == lab)
        vals = strain[cells[:, 0], cells[:, 1]]
        best = max(range(len(cells)), key=lambda i: (vals[i], -cells[i][0], -cells[i][1]))
        r, c = cells[best]
        out.append(TopologicalDescriptor("shear_line", (int(r), int(c)), pos(r, c), float(vals[best])))

    out.sort(key=lambda d: (KIND_ORDER.index(d.kind), -d.magnitude, d.location[0], d.location[1]))
    return out


def describe(d: TopologicalDescriptor) -> str:
    where = f"(x={d.position[0]:.4f}, y={d.position[1]:.4f})"
    if d.kind == "vortex":
        spin = "cyclonic" if d.sign > 0 else "anticyclonic"
        return f"{spin} vortex at {where}, core vorticity {d.sign * d.magnitude:.4f}"
    if d.kind == "stagnation_point":
        return f"stagnation point at {where}, local speed {d.magnitude:.4f}"
    return f"shear line through {where}, peak strain {d.magnitude:.4f}"


def render_descriptors(descriptors: Sequence[TopologicalDescriptor], per_kind: int | None = None) -> str:
    """One line per descriptor; ``per_kind`` caps how many of each kind are listed."""
    if not descriptors:
        return "no salient structures detected"
    lines = []
    seen: dict[str, int] = {}
    for d in descriptors:
        seen[d.kind] = seen.get(d.kind, 0) + 1
        if per_kind is None or seen[d.kind] <= per_kind:
            lines.append(f"- {describe(d)}")
    return "\n".join(lines)


def project(x: FlowState, params: ProjectorParams | None = None, patch: int = 8, d_v: int = 32, seed: int = 0,
            thresholds: TopologyThresholds | None = None, per_kind: int | None = 3) -> SemanticTokenSequence:
    """Full projection: pooled tokens (when ``params`` given) plus rendered structures."""
    descriptors = extract_topology(x, thresholds)
    text = render_descriptors(descriptors, per_kind)
    if params is None:
        return SemanticTokenSequence(np.zeros((0, 0)), None, text, descriptors)
    tokens = cross_attend(params, embed_state(x, patch, params.d_v, seed))
    tokens.rendered_text = text
    tokens.descriptors = descriptors
    return tokens
