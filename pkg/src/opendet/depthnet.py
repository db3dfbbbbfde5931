"""Pixel-wise (surface) and object-wise (center) depth encoders.

Parameters live in a flat ``{name: array}`` store; the forward functions take
the tape-bound version of that store (``{name: Tensor}``). Feature grids are
``[V, C, H, W]`` arrays; per-pixel quantities are flattened to
``[V, H*W, ...]`` in row-major pixel order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geom
from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class DepthConfig:
    d_min: float = 1.0
    d_max: float = 75.0
    n_bins: int = 16

    def __post_init__(self):
        if not 0.0 < self.d_min < self.d_max:
            raise DomainError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.n_bins < 2:
            raise DomainError("n_bins must be at least 2")

    @property
    def span(self):
        return self.d_max - self.d_min

    @property
    def midpoint(self):
        return 0.5 * (self.d_min + self.d_max)

    def bin_centers(self):
        width = self.span / self.n_bins
        return self.d_min + width * (np.arange(self.n_bins) + 0.5)


@dataclass(frozen=True)
class OdeConfig:
    k: int = 13
    embed_dim: int = 32
    hidden: int = 64
    offset_radius: float = 1.0


@dataclass
class ObjectDepthPred:
    depth: object  # [V, HW] Tensor, meters
    offset: object  # [V, HW, 2] Tensor, pixels relative to the pixel center
    center: np.ndarray  # [V, HW, 2] absolute (u, v)


def to_tokens(features):
    """``[V, C, H, W]`` -> ``[V, H*W, C]`` (numpy)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 4:
        raise ShapeError(f"expected [V, C, H, W] features, got {f.shape}")
    v, c, h, w = f.shape
    return np.ascontiguousarray(f.transpose(0, 2, 3, 1).reshape(v, h * w, c))


def intrinsic_vector(cam, width, height):
    k = cam.intrinsic
    return np.array([k[0, 0] / width, k[1, 1] / height, k[0, 2] / width, k[1, 2] / height])


# ---------------------------------------------------------------- PDE

def init_pde_params(rng, channels, dcfg, hidden=32):
    store = ad.init_mlp(rng, "pde.kmlp", [4, hidden, channels], zero_last=True)
    store.update(ad.init_mlp(rng, "pde.head", [channels, hidden, 1 + dcfg.n_bins]))
    return store


def pde_branches(p, tokens, kvecs, dcfg):
    """Regression and probabilistic depth ``([V, HW], [V, HW])`` tensors."""
    tape = p["pde.head.0.w"].tape
    x = tokens if isinstance(tokens, ad.Tensor) else tape.constant(tokens)
    kv = tape.constant(np.asarray(kvecs)[:, None, :])
    mod = ad.mlp_forward(kv, ad.layers_from(p, "pde.kmlp", 2)) + 1.0
    out = ad.mlp_forward(x * mod, ad.layers_from(p, "pde.head", 2))
    reg = ad.sigmoid(out[..., 0]) * dcfg.span + dcfg.d_min
    probs = ad.softmax(out[..., 1:], axis=-1)
    prob = probs @ dcfg.bin_centers()
    return reg, prob


def pde_forward(p, features, cams, dcfg):
    """Fused surface depth ``[V, H*W]``: mean of the regression and
    bin-expectation branches, conditioned on each view's intrinsics."""
    features = np.asarray(features)
    v, _, h, w = features.shape
    if len(cams) != v:
        raise ShapeError(f"{v} feature views but {len(cams)} cameras")
    kvecs = np.stack([intrinsic_vector(c, w, h) for c in cams])
    reg, prob = pde_branches(p, to_tokens(features), kvecs, dcfg)
    return (reg + prob) * 0.5


def pde_loss(depth, target, mask):
    """Mean L1 over pixels with a valid surface target."""
    m = np.asarray(mask, dtype=np.float64).reshape(depth.shape)
    n = max(m.sum(), 1.0)
    return (ad.abs_(depth - np.asarray(target).reshape(depth.shape)) * m).sum() * (1.0 / n)


# ---------------------------------------------------------------- ODE

def make_reference_points(depth, cam):
    """Lift an ``[H, W]`` depth map to camera-frame points ``[H, W, 3]`` at
    pixel centers ``(n + 0.5, m + 0.5)``."""
    depth = np.asarray(depth, dtype=np.float64)
    uv = geom.pixel_centers(*depth.shape)
    return geom.pixel_to_camera(np.concatenate([uv, depth[..., None]], axis=-1), cam)


def init_ode_params(rng, channels, dcfg, ocfg):
    k = ocfg.k
    w, _ = ad.init_linear(rng, channels, 3 * k)
    # start the k samples on a small fixed pattern around the reference point
    pattern = np.zeros((k, 3))
    if k > 1:
        dirs = rng.normal(size=(k - 1, 3))
        pattern[1:] = ocfg.offset_radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    store = {
        "ode.offset.w": 0.01 * w,
        "ode.offset.b": pattern.ravel(),
        "ode.attn.w": np.zeros((channels, k)),
        "ode.attn.b": np.zeros(k),
    }
    store["ode.phi.w"], store["ode.phi.b"] = ad.init_linear(rng, 2 * channels, ocfg.embed_dim)
    store.update(ad.init_mlp(rng, "ode.ffn", [ocfg.embed_dim + channels, ocfg.hidden, 3]))
    return store


def _prev_matrices(cams_now, cams_prev):
    """Per-view maps from current camera frame to previous-frame pixels."""
    return np.stack([cp.intrinsic @ cp.extrinsic @ cn.extrinsic_inv
                     for cn, cp in zip(cams_now, cams_prev)])


def ode_depth_embedding(p, refpoints, features_now, features_prev, cams_now, cams_prev, ocfg,
                        return_aux=False):
    """Per-pixel depth embedding ``[V, HW, E]``.

    ``refpoints`` are camera-frame points ``[V, HW, 3]``. A linear head on the
    pixel feature predicts ``k`` camera-frame offsets; every sample point is
    projected into the current and previous frame, features are bilinearly
    sampled from both and concatenated, and the ``k`` concatenations are
    averaged with softmax attention weights before the final linear map.
    ``features_prev=None`` (first frame) contributes zero vectors.
    """
    tape = p["ode.phi.w"].tape
    feats_now = np.asarray(features_now, dtype=np.float64)
    v, c, h, w = feats_now.shape
    k = ocfg.k
    tokens = tape.constant(to_tokens(feats_now))
    ref = np.asarray(refpoints, dtype=np.float64).reshape(v, h * w, 1, 3)

    offsets = ad.linear_forward(tokens, ad.LinearParams(p["ode.offset.w"], p["ode.offset.b"]))
    samples = ad.reshape(offsets, (v, h * w, k, 3)) + ref
    m_now = np.stack([cam.intrinsic for cam in cams_now])
    coords_now, valid_now = ad.perspective_project(samples, m_now)
    s_now = ad.bilinear_sample(tape.constant(feats_now), ad.reshape(coords_now, (v, h * w * k, 2)))
    s_now = ad.reshape(s_now, (v, h * w, k, c))
    if features_prev is None:
        s_prev = tape.constant(np.zeros((v, h * w, k, c)))
        coords_prev = valid_prev = None
    else:
        coords_prev, valid_prev = ad.perspective_project(samples, _prev_matrices(cams_now, cams_prev))
        s_prev = ad.bilinear_sample(tape.constant(np.asarray(features_prev, dtype=np.float64)),
                                    ad.reshape(coords_prev, (v, h * w * k, 2)))
        s_prev = ad.reshape(s_prev, (v, h * w, k, c))
    cat = ad.concat([s_now, s_prev], axis=-1)
    attn = ad.softmax(ad.linear_forward(tokens, ad.LinearParams(p["ode.attn.w"], p["ode.attn.b"])), axis=-1)
    agg = (cat * ad.reshape(attn, (v, h * w, k, 1))).sum(axis=2)
    emb = ad.linear_forward(agg, ad.LinearParams(p["ode.phi.w"], p["ode.phi.b"]))
    if not return_aux:
        return emb
    return emb, {"attn": attn.data, "samples": samples.data, "coords_now": coords_now.data,
                 "valid_now": valid_now, "coords_prev": None if coords_prev is None else coords_prev.data,
                 "valid_prev": valid_prev, "aggregate": agg.data}


def ode_predict(p, embedding, features, dcfg):
    """Object depth (sigmoid into ``[d_min, d_max]``) and center offset per pixel."""
    tape = p["ode.ffn.0.w"].tape
    feats = np.asarray(features, dtype=np.float64)
    v, _, h, w = feats.shape
    x = ad.concat([embedding, tape.constant(to_tokens(feats))], axis=-1)
    out = ad.mlp_forward(x, ad.layers_from(p, "ode.ffn", 2))
    depth = ad.sigmoid(out[..., 0]) * dcfg.span + dcfg.d_min
    offset = out[..., 1:3]
    base = geom.pixel_centers(h, w).reshape(1, h * w, 2)
    return ObjectDepthPred(depth, offset, offset.data + base)


def ode_loss(pred, center_depth, center_uv, mask):
    """L1 on center depth plus L1 on the center offset over assigned pixels.

    ``center_depth`` and ``mask`` are ``[V, H, W]``; ``center_uv`` is
    ``[V, H, W, 2]`` absolute pixel coordinates.
    """
    cuv = np.asarray(center_uv, dtype=np.float64)
    v, h, w, _ = cuv.shape
    m = np.asarray(mask, dtype=np.float64).reshape(v, h * w)
    n = max(m.sum(), 1.0)
    target_offset = cuv.reshape(v, h * w, 2) - geom.pixel_centers(h, w).reshape(1, h * w, 2)
    target_offset = target_offset * m[..., None]
    d_term = (ad.abs_(pred.depth - np.asarray(center_depth).reshape(v, h * w)) * m).sum()
    c_term = (ad.abs_(pred.offset - target_offset) * m[..., None]).sum()
    return (d_term + c_term) * (1.0 / n)
