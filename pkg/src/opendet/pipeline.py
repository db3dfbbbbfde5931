"""End-to-end model: depth encoders, position embedding, decoder, training
and evaluation over synthetic datasets."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import depthnet as dn
from . import evalmetrics as em
from . import posembed as pe
from .errors import ShapeError
from .synthscene import SceneConfig


# ---------------------------------------------------------------- config plumbing

def scene_config(cfg):
    return SceneConfig(n_views=cfg.scene_views, channels=cfg.scene_channels,
                       height=cfg.scene_height, width=cfg.scene_width,
                       fov_deg=cfg.scene_fov_deg, vfov_deg=cfg.scene_vfov_deg,
                       min_boxes=cfg.scene_min_boxes, max_boxes=cfg.scene_max_boxes,
                       min_distance=cfg.scene_min_distance, noise=cfg.scene_noise)


@dataclass(frozen=True)
class ModelSpec:
    depth: dn.DepthConfig
    ode: dn.OdeConfig
    pe: pe.PeConfig
    decoder: dec.DecoderConfig
    dfl: dec.DflParams
    weights: dec.LossWeights

    @classmethod
    def from_run(cls, cfg):
        return cls(
            depth=dn.DepthConfig(cfg.depth_d_min, cfg.depth_d_max, cfg.depth_bins),
            ode=dn.OdeConfig(k=cfg.ode_k, embed_dim=cfg.ode_embed_dim, hidden=cfg.ode_hidden),
            pe=pe.PeConfig(cfg.pe_variant, cfg.pe_dim_per_axis, ray_candidates=cfg.pe_ray_candidates),
            decoder=dec.DecoderConfig(layers=cfg.decoder_layers, queries=cfg.decoder_queries,
                                      dim=cfg.decoder_dim, ffn_dim=cfg.decoder_ffn_dim,
                                      spatial_prior=cfg.decoder_spatial_prior,
                                      dim_per_axis=cfg.pe_dim_per_axis),
            dfl=dec.DflParams(cfg.loss_alpha, cfg.loss_gamma),
            weights=dec.LossWeights(cfg.loss_pde, cfg.loss_ode, cfg.loss_dfl, cfg.loss_reg),
        )


def init_params(cfg, channels, prange):
    """Parameter store; each module draws from its own seeded stream so the
    PE variant does not perturb the other modules' initial weights."""
    spec = ModelSpec.from_run(cfg)
    store = {}
    store.update(dn.init_pde_params(np.random.default_rng([cfg.seed, 11]), channels, spec.depth))
    store.update(dn.init_ode_params(np.random.default_rng([cfg.seed, 12]), channels, spec.depth, spec.ode))
    store.update(pe.init_pe_params(np.random.default_rng([cfg.seed, 13]), spec.pe, spec.decoder.dim))
    store.update(dec.init_decoder_params(np.random.default_rng([cfg.seed, 14]), channels,
                                         spec.decoder, prange))
    return store


def check_dataset(cfg, dataset, need_scenes=None):
    want = (cfg.scene_views, cfg.scene_channels, cfg.scene_height, cfg.scene_width)
    got = (dataset.n_views, dataset.channels, dataset.height, dataset.width)
    if want != got:
        raise ShapeError(f"dataset has (views, channels, height, width) = {got}, config wants {want}")
    if need_scenes is not None and len(dataset) < need_scenes:
        raise ShapeError(f"dataset has {len(dataset)} scenes, config needs {need_scenes}")


def dataset_hash(blob):
    """Git blob hash of the encoded dataset bytes."""
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


# ---------------------------------------------------------------- per-scene inputs

@dataclass
class SceneInputs:
    """Arrays for the current timestep (1) with timestep 0 as the previous frame."""
    features: np.ndarray  # [V, C, H, W]
    features_prev: np.ndarray
    cams: list
    cams_prev: list
    surface_depth: np.ndarray  # [V, H, W]
    surface_mask: np.ndarray
    center_depth: np.ndarray
    center_uv: np.ndarray  # [V, H, W, 2]
    assign: np.ndarray  # [V, H, W]
    boxes: list

    @classmethod
    def from_scene(cls, scene):
        now, prev = scene.views[1], scene.views[0]
        return cls(
            features=np.stack([v.features for v in now]),
            features_prev=np.stack([v.features for v in prev]),
            cams=list(scene.cameras[1]), cams_prev=list(scene.cameras[0]),
            surface_depth=np.stack([v.surface_depth for v in now]),
            surface_mask=np.stack([v.surface_mask for v in now]),
            center_depth=np.stack([v.center_depth for v in now]),
            center_uv=np.stack([v.center_uv for v in now]),
            assign=np.stack([v.assign for v in now]),
            boxes=list(scene.boxes[1]),
        )

    @property
    def assign_mask(self):
        return self.assign >= 0


@dataclass
class ForwardResult:
    surface: object  # [V, HW] Tensor
    ode: dn.ObjectDepthPred
    out: dec.DecoderOutput
    l_pde: object
    l_ode: object
    l_dfl: object
    l_reg: object
    total: object
    assign: np.ndarray
    frozen: dict  # every value used without gradient, for replay


def forward_scene(p, inputs, spec, prange, frozen=None):
    """Full forward pass and losses for one scene on the tape of ``p``.

    Geometry fed downstream of a depth head (ODE reference points, PE inputs)
    uses detached predictions, so each depth head learns from its own loss.
    Passing ``frozen`` from an earlier result replays all such detached values
    (and the matching), which makes the loss a smooth function of ``p`` for
    gradient checks.
    """
    v, c, h, w = inputs.features.shape
    surface = dn.pde_forward(p, inputs.features, inputs.cams, spec.depth)
    l_pde = dn.pde_loss(surface, inputs.surface_depth, inputs.surface_mask)
    surf = surface.data if frozen is None else frozen["surface"]

    refs = np.stack([dn.make_reference_points(surf[i].reshape(h, w), cam)
                     for i, cam in enumerate(inputs.cams)]).reshape(v, h * w, 3)
    emb = dn.ode_depth_embedding(p, refs, inputs.features, inputs.features_prev,
                                 inputs.cams, inputs.cams_prev, spec.ode)
    obj = dn.ode_predict(p, emb, inputs.features, spec.depth)
    l_ode = dn.ode_loss(obj, inputs.center_depth, inputs.center_uv, inputs.assign_mask)

    obj_depth = obj.depth.data if frozen is None else frozen["object_depth"]
    obj_center = obj.center if frozen is None else frozen["object_center"]
    raw, key_pos = pe.grid_raw(spec.pe.variant, inputs.cams, h, w, prange, spec.pe,
                               spec.depth.d_min, spec.depth.d_max,
                               surface_depth=surf, object_depth=obj_depth, object_center=obj_center)
    key_pe = pe.pe_mlp(p, raw.reshape(v * h * w, -1))
    values = dn.to_tokens(inputs.features).reshape(v * h * w, c)
    out = dec.decoder_forward(p, values, key_pe, key_pos.reshape(-1, 3), spec.decoder, prange,
                              frozen_refs=None if frozen is None else frozen["refs"])
    l_dfl, l_reg, assign, soft = dec.set_loss(out, inputs.boxes, spec.weights, spec.dfl,
                                              fixed=None if frozen is None else frozen["matching"])
    total = dec.total_loss(l_pde, l_ode, l_dfl, l_reg, spec.weights)
    kept = {"surface": surf, "object_depth": obj_depth, "object_center": obj_center,
            "refs": out.refs, "matching": (assign, soft)}
    return ForwardResult(surface, obj, out, l_pde, l_ode, l_dfl, l_reg, total, assign, kept)


# ---------------------------------------------------------------- training

def clip_gradients(grads, max_norm):
    if max_norm <= 0:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def train(cfg, dataset, log=None):
    """Train on the first ``data.n_train`` scenes; returns ``(params, losses)``.

    Each epoch visits the training scenes once in a seeded shuffled order,
    one optimizer step per scene.
    """
    check_dataset(cfg, dataset, cfg.data_n_train)
    spec = ModelSpec.from_run(cfg)
    prange = dataset.perception_range
    params = init_params(cfg, dataset.channels, prange)
    opt = ad.Adam(params, lr=cfg.optim_lr, beta1=cfg.optim_beta1, beta2=cfg.optim_beta2,
                  eps=cfg.optim_eps, weight_decay=cfg.optim_weight_decay)
    inputs = [SceneInputs.from_scene(dataset[i]) for i in range(cfg.data_n_train)]
    total_steps = cfg.train_epochs * len(inputs)
    losses = []
    step = 0
    for epoch in range(cfg.train_epochs):
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(inputs))
        for idx in order:
            tape = ad.Tape()
            p = tape.bind(params)
            res = forward_scene(p, inputs[idx], spec, prange)
            grads = clip_gradients(ad.backward(tape, res.total), cfg.optim_grad_clip)
            # cosine decay to a tenth of the base rate
            lr = cfg.optim_lr * (0.55 + 0.45 * np.cos(np.pi * step / max(total_steps, 1)))
            opt.step(grads, lr)
            losses.append((float(res.l_pde.data), float(res.l_ode.data), float(res.l_dfl.data),
                           float(res.l_reg.data), float(res.total.data)))
            step += 1
            if log is not None and step % 50 == 0:
                log(f"step {step}/{total_steps} loss {np.mean([l[4] for l in losses[-50:]]):.4f}")
    return params, losses


# ---------------------------------------------------------------- evaluation

@dataclass
class SceneEval:
    index: int
    translation: list  # [(pred center, gt center)]
    detections: list  # [(label, score, center)]
    gts: list  # [(label, center)]
    surface: tuple  # (pred, gt, distance) over labelled pixels
    objectwise: tuple
    attention: np.ndarray


def evaluate_scene(params, scene, index, cfg, prange):
    spec = ModelSpec.from_run(cfg)
    inputs = SceneInputs.from_scene(scene)
    tape = ad.Tape()
    p = {k: tape.constant(v) for k, v in params.items()}
    res = forward_scene(p, inputs, spec, prange)
    dets = res.out.detections()
    pairs = [(dets[i].center, inputs.boxes[j].center) for j, i in enumerate(res.assign)]
    v, _, h, w = inputs.features.shape
    box_dist = np.array([em.horizontal_distance(b.center) for b in inputs.boxes] + [0.0])
    pix_dist = box_dist[inputs.assign].reshape(v, h * w)
    smask = inputs.surface_mask.reshape(v, h * w)
    amask = inputs.assign_mask.reshape(v, h * w)
    surface = (res.surface.data[smask], inputs.surface_depth.reshape(v, h * w)[smask], pix_dist[smask])
    objectwise = (res.ode.depth.data[amask], inputs.center_depth.reshape(v, h * w)[amask], pix_dist[amask])
    return SceneEval(index, pairs,
                     [(d.label, d.score, d.center) for d in dets],
                     [(b.cls, b.center) for b in inputs.boxes],
                     surface, objectwise, res.out.attention)


def evaluate(params, cfg, dataset, indices=None):
    """Metric report for one model over ``indices`` (default: the eval split)."""
    check_dataset(cfg, dataset)
    if indices is None:
        indices = range(cfg.data_n_train, min(len(dataset), cfg.data_n_train + cfg.data_n_eval))
    evals = [evaluate_scene(params, dataset[i], i, cfg, dataset.perception_range) for i in indices]
    return build_report(cfg.pe_variant, evals, cfg.eval_ap_threshold, bool(cfg.eval_class_aware))


def build_report(variant, evals, ap_threshold, class_aware=False):
    rep = em.Report()
    pairs = [pr for e in evals for pr in e.translation]
    pred_c = np.array([a for a, _ in pairs]).reshape(-1, 3)
    gt_c = np.array([b for _, b in pairs]).reshape(-1, 3)
    for bucket, val in em.bucketed(em.translation_error, em.horizontal_distance(gt_c),
                                   pred_c, gt_c).items():
        rep.add(variant, "translation_error", bucket, val)

    for bucket in em.BUCKETS:
        dets = [(e.index, lab, s, c) for e in evals for lab, s, c in e.detections
                if em.horizontal_distance(c) > bucket]
        gts = [(e.index, lab, c) for e in evals for lab, c in e.gts if em.horizontal_distance(c) > bucket]
        rep.add(variant, "center_ap", bucket, em.center_distance_ap(dets, gts, ap_threshold, class_aware))

    for kind in ("surface", "objectwise"):
        pred = np.concatenate([getattr(e, kind)[0] for e in evals]) if evals else np.zeros(0)
        gt = np.concatenate([getattr(e, kind)[1] for e in evals]) if evals else np.zeros(0)
        dist = np.concatenate([getattr(e, kind)[2] for e in evals]) if evals else np.zeros(0)
        res = em.bucketed(lambda a, b: em.depth_errors(a, b), dist, pred, gt)
        for bucket, r in res.items():
            rep.add(variant, f"{kind}_depth_l1", bucket, None if r is None else r.l1)
            rep.add(variant, f"{kind}_depth_absrel", bucket, None if r is None else r.absrel)
    return rep
