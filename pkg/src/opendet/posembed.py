"""Position embeddings added to image features on the decoder key side.

Three generators share one output dimension so the decoder never needs to
know which one produced its keys:

``object``  encodes the 3D object center predicted per pixel by the ODE,
``point``   encodes the pixel's own surface point from the PDE depth map,
``ray``     encodes a fixed set of depth candidates along the pixel ray.

Each variant also reports the normalized 3D location it encodes (for ``ray``
the mean of its candidates), which the decoder uses as key positions.
The geometry stage is plain numpy; only the MLP is differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geom
from .errors import DomainError

VARIANTS = ("ray", "point", "object")


@dataclass(frozen=True)
class PeConfig:
    variant: str = "object"
    dim_per_axis: int = 16
    freq_base: float = 10000.0
    ray_candidates: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown PE variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dim_per_axis % 2:
            raise DomainError("dim_per_axis must be even")
        if self.ray_candidates < 1:
            raise DomainError("ray_candidates must be at least 1")

    def raw_dim(self):
        per_point = 3 * self.dim_per_axis
        return per_point * (self.ray_candidates if self.variant == "ray" else 1)


def frequencies(dim_per_axis, base=10000.0):
    if dim_per_axis <= 0 or dim_per_axis % 2:
        raise DomainError(f"dim_per_axis must be a positive even count, got {dim_per_axis}")
    i = np.arange(dim_per_axis // 2)
    return base ** (-2.0 * i / dim_per_axis)


def pe3d(norm, dim_per_axis, base=10000.0):
    """Sinusoidal encoding of normalized ``(..., 3)`` coordinates.

    For each axis value ``x`` the entries are ``sin(2 pi x w_i), cos(2 pi x w_i)``
    interleaved over ``i``; the three axis blocks are concatenated x, y, z.
    """
    w = frequencies(dim_per_axis, base)
    ang = 2.0 * np.pi * np.asarray(norm, dtype=np.float64)[..., None] * w
    pairs = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return pairs.reshape(pairs.shape[:-3] + (3 * dim_per_axis,))


def pe3d_tape(norm, dim_per_axis, base=10000.0):
    """Differentiable pe3d for a ``(..., 3)`` Tensor."""
    w = frequencies(dim_per_axis, base)
    lead = norm.shape[:-1]
    ang = ad.reshape(norm, lead + (3, 1)) * (2.0 * np.pi * w)
    pairs = ad.stack([ad.sin(ang), ad.cos(ang)], axis=-1)
    return ad.reshape(pairs, lead + (3 * dim_per_axis,))


def init_pe_params(rng, pcfg, model_dim, prefix="pe.mlp"):
    """Two-layer MLP, hidden width four times the model dimension."""
    return ad.init_mlp(rng, prefix, [pcfg.raw_dim(), 4 * model_dim, model_dim])


def pe_mlp(p, raw, prefix="pe.mlp"):
    tape = p[f"{prefix}.0.w"].tape
    x = raw if isinstance(raw, ad.Tensor) else tape.constant(raw)
    return ad.mlp_forward(x, ad.layers_from(p, prefix, 2))


# ---------------------------------------------------------------- geometry stages

def lift_to_lidar(uv, depth, cam):
    """Pixel ``(x, y)`` with depth ``d`` -> LiDAR point ``E^-1 K^-1 (x d, y d, d, 1)``."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    uvd = np.concatenate([uv, d[..., None]], axis=-1)
    return geom.camera_to_lidar(geom.pixel_to_camera(uvd, cam), cam)


def ray_candidate_depths(n, d_min, d_max):
    return d_min + (d_max - d_min) * (np.arange(n) + 0.5) / n


def ray_points(uv, cam, n, d_min, d_max):
    """LiDAR points ``(..., n, 3)`` at uniformly spaced candidate depths."""
    uv = np.asarray(uv, dtype=np.float64)
    depths = ray_candidate_depths(n, d_min, d_max)
    uvb = np.broadcast_to(uv[..., None, :], uv.shape[:-1] + (n, 2))
    db = np.broadcast_to(depths, uv.shape[:-1] + (n,))
    return lift_to_lidar(uvb, db, cam)


def object_raw(center_uv, depth, cam, prange, pcfg):
    centers = lift_to_lidar(center_uv, depth, cam)
    norm = geom.normalize_center(centers, prange)
    return pe3d(norm, pcfg.dim_per_axis, pcfg.freq_base), norm


def ray_raw(uv, cam, prange, pcfg, d_min, d_max):
    pts = ray_points(uv, cam, pcfg.ray_candidates, d_min, d_max)
    norm = geom.normalize_center(pts, prange)
    raw = pe3d(norm, pcfg.dim_per_axis, pcfg.freq_base)
    raw = raw.reshape(raw.shape[:-2] + (-1,))
    return raw, norm.mean(axis=-2)


# ---------------------------------------------------------------- per-pixel entries

def ope(p, center_uv, depth, cam, prange, pcfg):
    """Object-wise embedding from a predicted center ``(x, y)`` and depth."""
    raw, _ = object_raw(center_uv, depth, cam, prange, pcfg)
    return pe_mlp(p, raw)


def point_pe(p, uv, surface_depth, cam, prange, pcfg):
    """Point-aware embedding from the pixel's own coordinates and surface depth."""
    return ope(p, uv, surface_depth, cam, prange, pcfg)


def ray_pe(p, uv, cam, prange, pcfg, d_min, d_max):
    """Ray-aware embedding from depth candidates along the pixel ray."""
    raw, _ = ray_raw(uv, cam, prange, pcfg, d_min, d_max)
    return pe_mlp(p, raw)


# ---------------------------------------------------------------- whole feature grids

def grid_raw(variant, cams, height, width, prange, pcfg, d_min, d_max,
             surface_depth=None, object_depth=None, object_center=None):
    """Raw sinusoidal inputs ``[V, HW, raw]`` and normalized key positions
    ``[V, HW, 3]`` for every pixel of every view."""
    uv = geom.pixel_centers(height, width).reshape(-1, 2)
    raws, norms = [], []
    for v, cam in enumerate(cams):
        if variant == "ray":
            raw, norm = ray_raw(uv, cam, prange, pcfg, d_min, d_max)
        elif variant == "point":
            raw, norm = object_raw(uv, np.asarray(surface_depth)[v].reshape(-1), cam, prange, pcfg)
        elif variant == "object":
            raw, norm = object_raw(np.asarray(object_center)[v].reshape(-1, 2),
                                   np.asarray(object_depth)[v].reshape(-1), cam, prange, pcfg)
        else:
            raise DomainError(f"unknown PE variant {variant!r}")
        raws.append(raw)
        norms.append(norm)
    return np.stack(raws), np.stack(norms)
