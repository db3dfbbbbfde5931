"""Deterministic synthetic multi-view scenes with LiDAR-like and box-like depth targets.

Every scene has two timesteps. Boxes live in a fixed LiDAR (world) frame and
move along their heading between timesteps; the camera rig moves with the
configured ego motion. Rendering casts one ray per pixel center and records

* the surface depth of the first box the ray hits (what LiDAR would see),
* the depth and pixel position of that box's projected 3D center (what a
  box annotation provides),
* a feature vector standing in for backbone output.

Ray parameters are expressed in camera depth, so the intersection parameter
is the surface depth directly.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .autodiff import atomic_write
from .errors import FormatError, GenerationError

CLASS_NAMES = ("car", "van", "truck")
CLASS_SIZES = np.array([[4.4, 1.9, 1.6], [5.6, 2.2, 2.3], [7.5, 2.6, 3.0]])
N_ATTRS = 11


@dataclass(frozen=True)
class SceneConfig:
    n_views: int = 4
    channels: int = 16
    height: int = 16
    width: int = 32
    fov_deg: float = 90.0  # horizontal
    vfov_deg: float = 30.0
    camera_height: float = 1.5
    min_boxes: int = 2
    max_boxes: int = 6
    min_distance: float = 10.0
    max_speed: float = 4.0
    dt: float = 0.5
    ego_motion: tuple = (1.0, 0.0, 0.0)  # dx, dy (m), dyaw (rad) per timestep
    noise: float = 0.1
    feature_seed: int = 7
    max_tries: int = 2000
    range_lo: tuple = (-50.0, -50.0, -5.0)
    range_hi: tuple = (50.0, 50.0, 3.0)

    @property
    def perception_range(self):
        return geom.PerceptionRange(self.range_lo, self.range_hi)


@dataclass
class GroundTruthBox:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    cls: int
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    track_id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.yaw = float(self.yaw)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.size))

    def rotation(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self):
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return self.center + (signs * self.size / 2) @ self.rotation().T

    def advanced(self, dt):
        moved = self.center.copy()
        moved[:2] += self.velocity * dt
        return GroundTruthBox(moved, self.size.copy(), self.yaw, self.cls,
                              self.velocity.copy(), self.track_id)

    def __eq__(self, other):
        return (isinstance(other, GroundTruthBox) and self.cls == other.cls
                and self.track_id == other.track_id and self.yaw == other.yaw
                and np.array_equal(self.center, other.center)
                and np.array_equal(self.size, other.size)
                and np.array_equal(self.velocity, other.velocity))


@dataclass
class RenderedView:
    """Per-camera render. ``assign`` holds the hit box index or -1."""

    features: np.ndarray  # [C, H, W]
    surface_depth: np.ndarray  # [H, W], 0 where invalid
    surface_mask: np.ndarray  # [H, W] bool
    center_depth: np.ndarray  # [H, W], 0 where unassigned
    center_uv: np.ndarray  # [H, W, 2] pixel coordinates (u, v)
    assign: np.ndarray  # [H, W] int
    front_face: np.ndarray  # [H, W] bool

    @property
    def assign_mask(self):
        return self.assign >= 0

    def __eq__(self, other):
        return isinstance(other, RenderedView) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__dataclass_fields__)


@dataclass
class Scene:
    seed: int
    boxes: list  # [timestep][box]
    cameras: list  # [timestep][view]
    views: list = None  # [timestep][view] RenderedView once rendered

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.seed == other.seed
                and self.boxes == other.boxes and self.cameras == other.cameras
                and self.views == other.views)


# ---------------------------------------------------------------- generation

def rig_cameras(cfg, ego_xy=(0.0, 0.0), ego_yaw=0.0):
    fx = (cfg.width / 2) / np.tan(np.radians(cfg.fov_deg) / 2)
    fy = (cfg.height / 2) / np.tan(np.radians(cfg.vfov_deg) / 2)
    k = geom.pinhole_intrinsic(fx, fy, cfg.width / 2, cfg.height / 2)
    pos = (ego_xy[0], ego_xy[1], cfg.camera_height)
    return [geom.CameraParams(k, geom.look_extrinsic(pos, ego_yaw + 2 * np.pi * v / cfg.n_views))
            for v in range(cfg.n_views)]


def _ego_poses(cfg):
    dx, dy, dyaw = cfg.ego_motion
    return [((0.0, 0.0), 0.0), ((dx, dy), dyaw)]


def boxes_separated(a, b):
    return np.linalg.norm(a.center - b.center) > 0.5 * (a.diagonal + b.diagonal)


def generate_scene(cfg, seed):
    """Sample boxes and rigs for both timesteps; deterministic in ``seed``."""
    if cfg.min_boxes < 1 or cfg.max_boxes < cfg.min_boxes:
        raise GenerationError(f"box count range [{cfg.min_boxes}, {cfg.max_boxes}] is invalid")
    rng = np.random.default_rng(seed)
    poses = _ego_poses(cfg)
    prange = cfg.perception_range
    lo, hi = np.asarray(prange.lo), np.asarray(prange.hi)
    margin = 0.5 * CLASS_SIZES.max() * 1.1
    n_boxes = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    placed = []
    tries = 0
    while len(placed) < n_boxes:
        tries += 1
        if tries > cfg.max_tries:
            raise GenerationError(f"placed {len(placed)} of {n_boxes} boxes in {cfg.max_tries} tries")
        cls = int(rng.integers(len(CLASS_SIZES)))
        size = CLASS_SIZES[cls] * rng.uniform(0.9, 1.1, size=3)
        xy = rng.uniform(lo[:2] + margin, hi[:2] - margin)
        yaw = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0.0, cfg.max_speed)
        box = GroundTruthBox(np.array([xy[0], xy[1], size[2] / 2]), size, yaw, cls,
                             speed * np.array([np.cos(yaw), np.sin(yaw)]), len(placed))
        later = box.advanced(cfg.dt)
        ok = all(prange.contains(b.center) for b in (box, later))
        ok = ok and all(np.hypot(*(b.center[:2] - np.asarray(p[0]))) >= cfg.min_distance
                        for b, p in ((box, poses[0]), (later, poses[1])))
        ok = ok and all(boxes_separated(box, o) and boxes_separated(later, o.advanced(cfg.dt))
                        for o in placed)
        if ok:
            placed.append(box)
    boxes = [placed, [b.advanced(cfg.dt) for b in placed]]
    cameras = [rig_cameras(cfg, xy, yaw) for xy, yaw in poses]
    return Scene(int(seed), boxes, cameras)


def scene_seed(seed, index):
    """Per-scene u64 seed derived from (dataset seed, scene index)."""
    words = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


# ---------------------------------------------------------------- rendering

def feature_mixer(cfg):
    """Fixed attribute->feature mixing shared by all scenes of a config."""
    rng = np.random.default_rng(cfg.feature_seed)
    mix = rng.normal(0.0, 0.6, size=(N_ATTRS, cfg.channels))
    bias = rng.normal(0.0, 0.2, size=cfg.channels)
    return mix, bias


def ray_box_hits(origin, dirs, box):
    """Slab test of rays ``origin + t * dirs`` against an oriented box.

    Returns ``(t_enter, hit, face_axis, face_sign, local_hit)``; ``t_enter``
    is +inf where the ray misses or starts inside the box.
    """
    rot = box.rotation()
    o = (origin - box.center) @ rot
    d = dirs @ rot
    half = box.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    parallel = d == 0.0
    inside_slab = np.abs(o) <= half
    tnear = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tfar = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = tnear.max(axis=-1)
    t_exit = tfar.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_enter > 0.0)
    axis = tnear.argmax(axis=-1)
    with np.errstate(invalid="ignore"):
        local = o + np.where(hit, t_enter, 0.0)[..., None] * d
    sign = np.sign(np.take_along_axis(local, axis[..., None], -1)[..., 0])
    return np.where(hit, t_enter, np.inf), hit, axis, sign, local


def front_faces(box, cam):
    """``(3, 2)`` bool table: face (axis, sign<0 / sign>0) has all four corners
    nearer to the camera than the box center."""
    rot = box.rotation()
    half = box.size / 2
    center_depth = geom.lidar_to_camera(box.center, cam)[2]
    table = np.zeros((3, 2), dtype=bool)
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for j, s in enumerate((-1.0, 1.0)):
            pts = []
            for s1 in (-1, 1):
                for s2 in (-1, 1):
                    local = np.zeros(3)
                    local[axis] = s * half[axis]
                    local[others[0]] = s1 * half[others[0]]
                    local[others[1]] = s2 * half[others[1]]
                    pts.append(box.center + rot @ local)
            depths = geom.lidar_to_camera(np.array(pts), cam)[:, 2]
            table[axis, j] = bool(np.all(depths < center_depth))
    return table


def render_view(cfg, boxes, cam, rng, mixer=None):
    h, w = cfg.height, cfg.width
    uv = geom.pixel_centers(h, w).reshape(-1, 2)
    rays_cam = uv @ cam.intrinsic_inv[:2, :2].T + cam.intrinsic_inv[:2, 2]
    rays_cam = np.concatenate([rays_cam, np.ones((len(uv), 1))], axis=1)
    dirs = rays_cam @ cam.extrinsic_inv[:3, :3].T
    origin = cam.center

    n_pix = h * w
    depth = np.full(n_pix, np.inf)
    assign = np.full(n_pix, -1, dtype=np.int64)
    face_axis = np.zeros(n_pix, dtype=np.int64)
    face_sign = np.zeros(n_pix)
    local_hit = np.zeros((n_pix, 3))
    for i, box in enumerate(boxes):
        t, hit, axis, sign, local = ray_box_hits(origin, dirs, box)
        closer = hit & (t < depth)
        depth[closer] = t[closer]
        assign[closer] = i
        face_axis[closer] = axis[closer]
        face_sign[closer] = sign[closer]
        local_hit[closer] = local[closer]

    valid = assign >= 0
    surface = np.where(valid, depth, 0.0)
    center_depth = np.zeros(n_pix)
    center_uv = np.zeros((n_pix, 2))
    front = np.zeros(n_pix, dtype=bool)
    attrs = np.zeros((n_pix, N_ATTRS))
    for i, box in enumerate(boxes):
        sel = assign == i
        if not sel.any():
            continue
        cuvd = geom.lidar_to_pixel(box.center, cam)
        center_depth[sel] = cuvd[2]
        center_uv[sel] = cuvd[:2]
        table = front_faces(box, cam)
        front[sel] = table[face_axis[sel], (face_sign[sel] > 0).astype(int)]
        hit_world = origin + surface[sel, None] * dirs[sel]
        offset_cam = (hit_world - box.center) @ cam.extrinsic[:3, :3].T
        attrs[sel, box.cls] = 1.0
        attrs[sel, 3:6] = local_hit[sel] / (box.size / 2)
        attrs[sel, 6:9] = offset_cam / 5.0
        attrs[sel, 9] = 10.0 / surface[sel]
        attrs[sel, 10] = 1.0
    mix, bias = feature_mixer(cfg) if mixer is None else mixer
    feats = np.tanh(attrs @ mix + bias) + cfg.noise * rng.standard_normal((n_pix, cfg.channels))
    return RenderedView(
        features=np.ascontiguousarray(feats.T.reshape(cfg.channels, h, w)),
        surface_depth=surface.reshape(h, w),
        surface_mask=valid.reshape(h, w),
        center_depth=center_depth.reshape(h, w),
        center_uv=center_uv.reshape(h, w, 2),
        assign=assign.reshape(h, w),
        front_face=front.reshape(h, w),
    )


def render_views(cfg, scene, timestep):
    """Render every camera of ``scene`` at ``timestep``."""
    mixer = feature_mixer(cfg)
    return [render_view(cfg, scene.boxes[timestep], cam,
                        np.random.default_rng([scene.seed, timestep + 1, v]), mixer)
            for v, cam in enumerate(scene.cameras[timestep])]


def make_scene(cfg, seed):
    scene = generate_scene(cfg, seed)
    scene.views = [render_views(cfg, scene, t) for t in range(2)]
    return scene


def _make_indexed(args):
    cfg, seed, index = args
    return make_scene(cfg, scene_seed(seed, index))


def worker_count():
    env = os.environ.get("OPENDET_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def generate_dataset(cfg, seed, count, workers=None):
    """Generate and render ``count`` scenes; output independent of worker count."""
    workers = worker_count() if workers is None else workers
    jobs = [(cfg, seed, i) for i in range(count)]
    if workers <= 1 or count <= 1:
        return [_make_indexed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, count)) as pool:
        return list(pool.map(_make_indexed, jobs, chunksize=max(1, count // (4 * workers))))


# ---------------------------------------------------------------- dataset file

DATASET_MAGIC = b"OPENSCN1"
DATASET_VERSION = 1


@dataclass
class Dataset:
    n_views: int
    channels: int
    height: int
    width: int
    perception_range: geom.PerceptionRange
    scenes: list

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]


def _box_record(box):
    vals = np.concatenate([box.center, box.size, [box.yaw], box.velocity, [0.0, float(box.track_id)]])
    return struct.pack("<11d", *vals) + struct.pack("<I", box.cls)


def encode_dataset(dataset):
    out = [DATASET_MAGIC,
           struct.pack("<6I", DATASET_VERSION, len(dataset.scenes), dataset.n_views,
                       dataset.channels, dataset.height, dataset.width),
           struct.pack("<6d", *dataset.perception_range.lo, *dataset.perception_range.hi)]
    for scene in dataset.scenes:
        out.append(struct.pack("<Q", scene.seed))
        for t in range(2):
            for cam in scene.cameras[t]:
                out.append(cam.to_array().astype("<f8").tobytes())
            out.append(struct.pack("<I", len(scene.boxes[t])))
            out.extend(_box_record(b) for b in scene.boxes[t])
            for view in scene.views[t]:
                out.append(view.features.astype("<f8").tobytes())
                out.append(view.surface_depth.astype("<f8").tobytes())
                out.append(view.surface_mask.astype(np.uint8).tobytes())
                out.append(view.center_depth.astype("<f8").tobytes())
                out.append(view.center_uv.astype("<f8").tobytes())
                out.append((view.assign + 1).astype(np.uint8).tobytes())
                out.append(view.front_face.astype(np.uint8).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated dataset while reading {what}", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, shape, what):
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n, what), dtype=dtype).reshape(shape).copy()


def decode_dataset(blob):
    r = _Reader(blob)
    if r.take(8, "magic") != DATASET_MAGIC:
        raise FormatError("bad dataset magic", 0)
    version, count, n_views, channels, h, w = r.unpack("<6I", "header")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version} (byte-swapped file?)", 8)
    rng_vals = r.unpack("<6d", "perception range")
    prange = geom.PerceptionRange(rng_vals[:3], rng_vals[3:])
    scenes = []
    for s in range(count):
        (seed,) = r.unpack("<Q", f"scene {s} seed")
        boxes, cameras, views = [], [], []
        for t in range(2):
            cams = [geom.CameraParams.from_array(r.array("<f8", (32,), f"scene {s} camera"))
                    for _ in range(n_views)]
            (n_boxes,) = r.unpack("<I", f"scene {s} box count")
            bxs = []
            for _ in range(n_boxes):
                vals = r.unpack("<11d", f"scene {s} box")
                (cls,) = r.unpack("<I", f"scene {s} box class")
                bxs.append(GroundTruthBox(vals[0:3], vals[3:6], vals[6], int(cls),
                                          vals[7:9], int(vals[10])))
            vws = []
            for _ in range(n_views):
                vws.append(RenderedView(
                    features=r.array("<f8", (channels, h, w), "features").astype(np.float64),
                    surface_depth=r.array("<f8", (h, w), "surface depth").astype(np.float64),
                    surface_mask=r.array(np.uint8, (h, w), "surface mask").astype(bool),
                    center_depth=r.array("<f8", (h, w), "center depth").astype(np.float64),
                    center_uv=r.array("<f8", (h, w, 2), "center pixels").astype(np.float64),
                    assign=r.array(np.uint8, (h, w), "assignment").astype(np.int64) - 1,
                    front_face=r.array(np.uint8, (h, w), "front-face mask").astype(bool),
                ))
            boxes.append(bxs)
            cameras.append(cams)
            views.append(vws)
        scenes.append(Scene(int(seed), boxes, cameras, views))
    if r.pos != len(blob):
        raise FormatError("trailing bytes after last scene", r.pos)
    return Dataset(n_views, channels, h, w, prange, scenes)


def dataset_from_scenes(cfg, scenes):
    return Dataset(cfg.n_views, cfg.channels, cfg.height, cfg.width, cfg.perception_range, list(scenes))


def write_dataset(dataset, path):
    atomic_write(path, encode_dataset(dataset))


def read_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
