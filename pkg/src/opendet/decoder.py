"""DETR-style decoder, set matching and detection losses.

Class scores are per-class sigmoids. The classification loss is a focal loss
whose positive target is softened by a depth score ``s = exp(-|C_pred - C_gt|)``;
with ``s = 1`` it is exactly the standard sigmoid focal loss.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geom
from .errors import DomainError, ShapeError
from .posembed import pe3d_tape

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class DflParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise DomainError(f"gamma must be nonnegative, got {self.gamma}")


@dataclass(frozen=True)
class LossWeights:
    pde: float = 1.0
    ode: float = 5.0
    dfl: float = 2.0
    reg: float = 0.25

    def __post_init__(self):
        if min(self.pde, self.ode, self.dfl, self.reg) < 0.0:
            raise DomainError("loss weights must be nonnegative")


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 3
    queries: int = 32
    dim: int = 64
    ffn_dim: int = 128
    n_classes: int = 3
    dim_per_axis: int = 16
    cls_prior: float = 0.01
    spatial_prior: float = 50.0  # initial beta; 0 disables the distance term


# ---------------------------------------------------------------- depth-aware focal loss

def depth_score(pred_center, gt_center):
    """``exp(-||pred - gt||_2)`` over the last axis."""
    diff = np.asarray(pred_center, dtype=np.float64) - np.asarray(gt_center, dtype=np.float64)
    return np.exp(-np.linalg.norm(diff, axis=-1))


def dfl(p_hat, t, s, params=DflParams()):
    """Elementwise depth-aware focal loss on probabilities.

    ``alpha' = alpha t s + (1 - alpha)(1 - t s)`` and
    ``loss = -alpha' |t s - p|^gamma log|1 - t - p|`` with ``p`` clamped to
    ``[1e-12, 1 - 1e-12]``.
    """
    p = np.clip(np.asarray(p_hat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(t, dtype=np.float64)
    q = t * np.asarray(s, dtype=np.float64)
    a = params.alpha * q + (1.0 - params.alpha) * (1.0 - q)
    return -a * np.abs(q - p) ** params.gamma * np.log(np.abs(1.0 - t - p))


def focal_loss(p_hat, t, params=DflParams()):
    """Standard sigmoid focal loss, written independently of :func:`dfl`."""
    p = np.clip(np.asarray(p_hat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = -params.alpha * (1.0 - p) ** params.gamma * np.log(p)
    neg = -(1.0 - params.alpha) * p ** params.gamma * np.log(1.0 - p)
    return np.where(np.asarray(t) > 0.5, pos, neg)


def dfl_grad_p(p_hat, t, s, params=DflParams()):
    """Analytic d(dfl)/dp (zero where the clamp is active)."""
    p_raw = np.asarray(p_hat, dtype=np.float64)
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(t, dtype=np.float64)
    q = t * np.asarray(s, dtype=np.float64)
    a = params.alpha * q + (1.0 - params.alpha) * (1.0 - q)
    g = params.gamma
    diff = p - q
    arg = 1.0 - t - p
    mag = np.abs(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_pow = np.where(mag > 0, g * mag ** (g - 1.0) * np.sign(diff), 0.0) if g != 0 else 0.0
    grad = -a * (d_pow * np.log(np.abs(arg)) + mag ** g * (-1.0 / arg))
    live = (p_raw > PROB_CLAMP) & (p_raw < 1.0 - PROB_CLAMP)
    return grad * live


def dfl_logits(logits, t, s, params=DflParams()):
    """Tape op: elementwise DFL of ``sigmoid(logits)`` against fixed targets."""
    x = logits.data
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    loss = dfl(p, t, s, params)

    def grad_fn(g):
        return (g * dfl_grad_p(p, t, s, params) * p * (1.0 - p),)

    return ad.make_node(loss, (logits,), grad_fn)


def total_loss(l_pde, l_ode, l_dfl, l_reg, weights=LossWeights()):
    """Weighted sum of the four loss terms (floats or scalar Tensors)."""
    for name, val in (("pde", l_pde), ("ode", l_ode), ("dfl", l_dfl), ("reg", l_reg)):
        raw = val.data if isinstance(val, ad.Tensor) else np.asarray(val)
        if not np.all(np.isfinite(raw)) or np.any(raw < 0):
            raise DomainError(f"loss component {name} must be finite and nonnegative, got {raw}")
    return weights.pde * l_pde + weights.ode * l_ode + weights.dfl * l_dfl + weights.reg * l_reg


# ---------------------------------------------------------------- assignment

def _solve(cost):
    """Shortest augmenting path assignment for ``cost`` with rows <= cols.

    Returns ``(col_of_row, u, v)`` with dual potentials satisfying
    ``cost[i, j] - u[i] - v[j] >= 0`` and equality on assigned pairs.
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0] - u[i0] - v
            free = ~used
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            cand[0] = inf
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def hungarian(cost):
    """Minimum-cost assignment of every column (ground truth) to a distinct row.

    ``cost`` is ``[rows, cols]`` with ``rows >= cols``. Returns an int array
    ``a`` with ``a[j]`` the row assigned to column ``j``. Among optimal
    assignments the lexicographically smallest vector ``a`` is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return np.zeros(0, dtype=np.int64)
    if n_rows < n_cols:
        raise ShapeError(f"need rows >= cols, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DomainError("cost matrix has non-finite entries")
    # columns are the smaller side: solve the transposed problem
    assign, u, v = _solve(cost.T)
    best = cost[assign, np.arange(n_cols)].sum()
    tol = 1e-9 * max(1.0, np.abs(cost).max()) * n_cols
    reduced = cost.T - u[:, None] - v[None, :]  # [cols, rows]

    fixed = {}
    slack = 0.0
    for j in range(n_cols):
        current = assign[j]
        for r in range(current):
            if r in fixed.values() or slack + reduced[j, r] > tol:
                continue
            trial = dict(fixed)
            trial[j] = r
            total, rest = _restricted(cost, trial)
            if total <= best + tol:
                assign = rest
                break
        fixed[j] = int(assign[j])
        slack += reduced[j, assign[j]]
    return assign.astype(np.int64)


def _restricted(cost, fixed):
    """Optimal assignment with some (column -> row) pairs forced."""
    n_rows, n_cols = cost.shape
    free_cols = [j for j in range(n_cols) if j not in fixed]
    free_rows = [r for r in range(n_rows) if r not in fixed.values()]
    out = np.full(n_cols, -1, dtype=np.int64)
    total = 0.0
    for j, r in fixed.items():
        out[j] = r
        total += cost[r, j]
    if free_cols:
        sub = cost[np.ix_(free_rows, free_cols)]
        sub_assign, _, _ = _solve(sub.T)
        for k, j in enumerate(free_cols):
            out[j] = free_rows[sub_assign[k]]
            total += cost[out[j], j]
    return total, out


def assignment_cost(cost, assign):
    cost = np.asarray(cost)
    return float(cost[assign, np.arange(len(assign))].sum()) if len(assign) else 0.0


# ---------------------------------------------------------------- detections and targets

@dataclass
class Detection:
    scores: np.ndarray  # per-class probabilities
    center: np.ndarray  # LiDAR frame, meters
    size: np.ndarray  # l, w, h meters
    yaw: float

    @property
    def label(self):
        return int(np.argmax(self.scores))

    @property
    def score(self):
        return float(np.max(self.scores))


def box_targets(gts):
    """``[G, 8]`` regression targets: center, log size, sin yaw, cos yaw."""
    if not gts:
        return np.zeros((0, 8))
    return np.stack([np.concatenate([b.center, np.log(b.size), [np.sin(b.yaw), np.cos(b.yaw)]])
                     for b in gts])


def match_cost(probs, reg, gts, weights=LossWeights(), dfl_params=DflParams()):
    """``[Q, G]`` cost: weighted DFL of each query on each gt's class (depth
    score from the two centers) plus weighted L1 over box parameters."""
    probs = np.asarray(probs, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    if not gts:
        return np.zeros((len(probs), 0))
    targets = box_targets(gts)
    cls = np.array([b.cls for b in gts])
    s = depth_score(reg[:, None, :3], targets[None, :, :3])
    cls_cost = dfl(probs[:, cls], 1.0, s, dfl_params)
    l1 = np.abs(reg[:, None, :] - targets[None]).sum(-1)
    return weights.dfl * cls_cost + weights.reg * l1


# ---------------------------------------------------------------- decoder network

def _lin(p, name):
    return ad.LinearParams(p[f"{name}.w"], p[f"{name}.b"])


def init_decoder_params(rng, channels, dcfg, prange=None):
    prange = geom.PerceptionRange() if prange is None else prange
    d, f = dcfg.dim, dcfg.ffn_dim
    store = {}
    store["dec.in.w"], store["dec.in.b"] = ad.init_linear(rng, channels, d)
    store["dec.query"] = 0.1 * rng.standard_normal((dcfg.queries, d))
    anchors = rng.uniform(0.0, 1.0, size=(dcfg.queries, 3))
    anchors[:, 2] = geom.normalize_center(np.array([0.0, 0.0, 1.0]), prange)[2]
    store["dec.anchor"] = anchors
    store.update(ad.init_mlp(rng, "dec.qpos", [3 * dcfg.dim_per_axis, d, d]))
    for layer in range(dcfg.layers):
        for block in ("sa", "ca"):
            for proj in ("q", "k", "v", "o"):
                w, b = ad.init_linear(rng, d, d)
                store[f"dec.{layer}.{block}.{proj}.w"] = w
                store[f"dec.{layer}.{block}.{proj}.b"] = b
        store.update(ad.init_mlp(rng, f"dec.{layer}.ffn", [d, f, d]))
        if dcfg.spatial_prior > 0:
            store[f"dec.{layer}.ca.logbeta"] = np.array(np.log(dcfg.spatial_prior))
        for ln in ("ln1", "ln2", "ln3"):
            store[f"dec.{layer}.{ln}.g"] = np.ones(d)
            store[f"dec.{layer}.{ln}.b"] = np.zeros(d)
    store["dec.cls.w"] = np.zeros((d, dcfg.n_classes))
    store["dec.cls.b"] = np.full(dcfg.n_classes, np.log(dcfg.cls_prior / (1.0 - dcfg.cls_prior)))
    store["dec.reg.w"] = np.zeros((d, 8))
    from .synthscene import CLASS_SIZES
    store["dec.reg.b"] = np.concatenate([np.zeros(3), np.log(CLASS_SIZES.mean(axis=0)), [0.0, 1.0]])
    return store


@dataclass
class DecoderOutput:
    logits: object  # [Q, n_classes] Tensor
    reg: object  # [Q, 8] Tensor: center (m), log size, sin, cos
    attention: np.ndarray  # last-layer cross-attention weights [Q, T]
    refs: list  # normalized reference points per layer, [Q, 3] each

    def detections(self):
        probs = 1.0 / (1.0 + np.exp(-self.logits.data))
        out = []
        for i in range(len(probs)):
            r = self.reg.data[i]
            sc = r[6:8]
            norm = np.hypot(*sc)
            yaw = float(np.arctan2(sc[0] / norm, sc[1] / norm)) if norm > 0 else 0.0
            out.append(Detection(probs[i], r[:3].copy(), np.exp(r[3:6]), yaw))
        return out


def decoder_forward(p, values, key_pe, key_pos, dcfg, prange=None, frozen_refs=None):
    """Run the decoder over ``T`` tokens.

    ``values`` ``[T, C]`` are raw image features, ``key_pe`` ``[T, D]`` the
    position embedding added on the key side, ``key_pos`` ``[T, 3]`` the
    normalized 3D locations the embedding encodes. Each layer runs query
    self-attention, cross-attention (keys = projected features + PE,
    values = projected features) and an FFN. The cross-attention weights
    read out a soft reference point from ``key_pos``; the next layer's query
    position is encoded from it and the box center is regressed as an
    offset from the last one.

    With ``spatial_prior > 0`` the cross-attention logits also receive
    ``-beta * |ref - key_pos|^2`` (learned ``beta`` per layer), a spatially
    modulated attention that lets queries lock onto nearby keys early in
    training.

    Reference points passed between layers carry no gradient. ``frozen_refs``
    (the ``refs`` of an earlier output) replays those constants instead of
    recomputing them.
    """
    prange = geom.PerceptionRange() if prange is None else prange
    tape = p["dec.in.w"].tape
    vals = values if isinstance(values, ad.Tensor) else tape.constant(values)
    pe = key_pe if isinstance(key_pe, ad.Tensor) else tape.constant(key_pe)
    if vals.shape[0] != pe.shape[0] or pe.shape[-1] != dcfg.dim:
        raise ShapeError(f"values {vals.shape} and key PE {pe.shape} do not line up")
    key_pos = np.asarray(key_pos, dtype=np.float64)
    pos = tape.constant(key_pos)
    scale = 1.0 / np.sqrt(dcfg.dim)

    feats = ad.linear_forward(vals, _lin(p, "dec.in"))
    keys = feats + pe
    q = p["dec.query"]
    ref = p["dec.anchor"]
    refs = [ref.data.copy()]
    attn_w = None
    ref_out = ref
    for layer in range(dcfg.layers):
        name = f"dec.{layer}"
        qpos = ad.mlp_forward(pe3d_tape(ref, dcfg.dim_per_axis), ad.layers_from(p, "dec.qpos", 2))
        qk = q + qpos
        sa, _ = ad.attention(ad.linear_forward(qk, _lin(p, f"{name}.sa.q")),
                             ad.linear_forward(qk, _lin(p, f"{name}.sa.k")),
                             ad.linear_forward(q, _lin(p, f"{name}.sa.v")), scale)
        q = ad.layer_norm(q + ad.linear_forward(sa, _lin(p, f"{name}.sa.o")),
                          p[f"{name}.ln1.g"], p[f"{name}.ln1.b"])
        bias = None
        if dcfg.spatial_prior > 0:
            diff = ad.reshape(ref, (ref.shape[0], 1, 3)) - key_pos[None]
            bias = -(ad.exp(p[f"{name}.ca.logbeta"]) * (diff * diff).sum(axis=-1))
        ca, attn_w = ad.attention(ad.linear_forward(q + qpos, _lin(p, f"{name}.ca.q")),
                                  ad.linear_forward(keys, _lin(p, f"{name}.ca.k")),
                                  ad.linear_forward(feats, _lin(p, f"{name}.ca.v")), scale, bias)
        q = ad.layer_norm(q + ad.linear_forward(ca, _lin(p, f"{name}.ca.o")),
                          p[f"{name}.ln2.g"], p[f"{name}.ln2.b"])
        q = ad.layer_norm(q + ad.mlp_forward(q, ad.layers_from(p, f"{name}.ffn", 2)),
                          p[f"{name}.ln3.g"], p[f"{name}.ln3.b"])
        ref_out = attn_w @ pos
        refs.append(ref_out.data.copy())
        ref = tape.constant(ref_out.data if frozen_refs is None else frozen_refs[layer + 1])
    logits = ad.linear_forward(q, _lin(p, "dec.cls"))
    raw = ad.linear_forward(q, _lin(p, "dec.reg"))
    center_norm = ref_out + raw[:, 0:3]
    center = center_norm * prange.extent + np.asarray(prange.lo)
    reg = ad.concat([center, raw[:, 3:8]], axis=-1)
    return DecoderOutput(logits, reg, None if attn_w is None else attn_w.data, refs)


def set_loss(out, gts, weights=LossWeights(), dfl_params=DflParams(), fixed=None):
    """Hungarian-matched ``(L_DFL, L_reg, assignment, soft_targets)``.

    Unmatched queries are negatives for every class; matched queries are
    positives for their gt's class with target ``s`` from the current center,
    treated as a constant. Both terms are normalized by the number of ground
    truths. ``fixed = (assignment, soft_targets)`` skips matching and reuses
    an earlier result.
    """
    n_q, n_cls = out.logits.shape
    targets = box_targets(gts)
    norm = 1.0 / max(len(gts), 1)
    if fixed is None:
        probs = 1.0 / (1.0 + np.exp(-out.logits.data))
        assign = hungarian(match_cost(probs, out.reg.data, gts, weights, dfl_params))
        s = np.zeros((n_q, n_cls))
        for j, i in enumerate(assign):
            s[i, gts[j].cls] = depth_score(out.reg.data[i, :3], targets[j, :3])
    else:
        assign, s = fixed
    t = np.zeros((n_q, n_cls))
    for j, i in enumerate(assign):
        t[i, gts[j].cls] = 1.0
    l_dfl = dfl_logits(out.logits, t, s, dfl_params).sum() * norm
    if len(assign):
        l_reg = ad.abs_(out.reg[assign] - targets).sum() * norm
    else:
        l_reg = ad.mul(out.reg.sum(), 0.0)
    return l_dfl, l_reg, assign, s


def write_attention_csv(path, weights, n_views, height, width):
    """CSV rows ``(query, view, row, col, weight)`` for ``[Q, V*H*W]`` weights."""
    w = np.asarray(weights)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["query", "view", "row", "col", "weight"])
        for qi in range(w.shape[0]):
            grid = w[qi].reshape(n_views, height, width)
            for v in range(n_views):
                for r in range(height):
                    for c in range(width):
                        out.writerow([qi, v, r, c, repr(float(grid[v, r, c]))])
