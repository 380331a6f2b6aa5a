"""Two-stage training: skeleton extraction from video, then skeleton-constrained generation."""
from __future__ import annotations

import copy
import dataclasses
import logging
import zlib
from dataclasses import dataclass
from dataclasses import field as dc_field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import gradtape as gt
from .gradtape import AdamW, DivergenceError, InvalidInput, ParamStore
from .neuralfield import CanonicalField, FieldConfig
from .objectives import (LossWeights, OracleFailure, bone_loss, csd_term, recon_loss, reg_loss, skel_loss,
                         timestep_schedule)
from .renderer import CORRECTION_KEY, FlowTarget, RenderSettings, camera_near_far, orthogonal_views, render_rays
from .skeleton import EmptyMesh, SkeletonGraph, extract_skeleton, marching_cubes
from .synthetic import Dataset
from .warpfield import SkinningModel, WarpConfig, cycle_sq_errors

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    """Training diverged again after the one allowed rollback."""


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class StageConfig:
    stage: str = "extract"                  # extract | generate
    iters: int = 2000
    seed: int = 0
    lr: float = 5e-4
    weights: LossWeights = dc_field(default_factory=LossWeights)
    reg_weight_extract: float = 1.0
    bandwidth_warmup: float = 0.3            # fraction of extraction over which k_act ramps 0 -> K
    freeze: tuple = ("camera", "embed")
    images_per_batch: int = 32
    rays_per_image: int = 128
    fg_fraction: float = 0.5                 # share of rays drawn inside the silhouette
    n_samples: int = 64
    stratified: bool = True
    csd: bool = True
    csd_size: int = 64
    csd_samples: int = 48
    cfg_scale: float | None = None           # None: 100 for extraction, 30 for generation
    csd_elevation: tuple = (-0.2, 0.6)
    csd_distance: float = 3.0
    azimuth_offset: float = 0.0              # aligns canonical forward with the oracle's front view
    fov_deg: float = 40.0
    gen_schedule: str = "gen-geometry"
    bone_reinit: float = 0.1                 # fraction of extraction at which bones move to k-means centres
    points_per_step: int = 256
    mesh_resolution: int = 64
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    proxy_radius: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 50
    skeleton_mode: str = "auto"
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    warp: WarpConfig = dc_field(default_factory=WarpConfig)

    def __post_init__(self):
        if self.stage not in ("extract", "generate"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.iters < 0:
            raise ConfigError("iteration count must be nonnegative")
        if self.gen_schedule not in ("gen-geometry", "gen-texture"):
            raise ConfigError(f"unknown generation schedule {self.gen_schedule!r}")

    @property
    def guidance(self) -> float:
        if self.cfg_scale is not None:
            return float(self.cfg_scale)
        return 100.0 if self.stage == "extract" else 30.0

    @classmethod
    def full(cls, stage: str = "extract", **kw) -> "StageConfig":
        """Full-scale preset: 12000 iterations, 128 rays from each of 32 images."""
        base = dict(stage=stage, iters=12000, images_per_batch=32, rays_per_image=128, n_samples=64)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, stage: str = "extract", **kw) -> "StageConfig":
        """Single-CPU preset with small networks and renders."""
        base = dict(stage=stage, iters=2000, images_per_batch=8, rays_per_image=64, n_samples=32, csd_size=16,
                    csd_samples=32, points_per_step=128, mesh_resolution=48, field=FieldConfig.desk(),
                    warp=WarpConfig.desk())
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict, base: "StageConfig | None" = None) -> "StageConfig":
        """Overlay a nested mapping on ``base``; unknown keys raise :class:`ConfigError`."""
        base = base or cls()
        return _overlay(base, d, "")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _overlay(obj, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for k, v in d.items():
        if k not in names:
            raise ConfigError(f"unknown config key {path + k!r}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur):
            changes[k] = _overlay(cur, v, f"{path}{k}.")
        elif isinstance(cur, tuple):
            changes[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            changes[k] = v
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, InvalidInput) as e:
        raise ConfigError(str(e)) from e


class RigModel:
    """Canonical field, skinning warp and per-camera pose corrections sharing one store."""

    def __init__(self, field_cfg: FieldConfig, warp_cfg: WarpConfig, n_cameras: int, seed: int = 0):
        self.field_cfg = field_cfg
        self.warp_cfg = warp_cfg
        self.n_cameras = n_cameras
        self.store = ParamStore()
        rng = substream(seed, "init")
        self.field = CanonicalField(self.store, rng, field_cfg)
        self.skin = SkinningModel(self.store, rng, warp_cfg)
        self.store.add(CORRECTION_KEY, np.zeros((max(n_cameras, 1), 6)))
        self.times = np.zeros(1)
        self.graph: SkeletonGraph | None = None
        self.mesh_scale = 1.0                   # canonical mesh bounding-box diagonal
        self.optimizer: AdamW | None = None

    @property
    def track(self):
        return self.skin.track

    def clone(self) -> "RigModel":
        new = RigModel(self.field_cfg, self.warp_cfg, self.n_cameras)
        new.store = self.store.copy()
        for obj in (new.field, new.skin, new.skin.track, new.skin.embedder):
            obj.store = new.store
        new.skin.bone_mask = None if self.skin.bone_mask is None else self.skin.bone_mask.copy()
        new.times = self.times.copy()
        new.mesh_scale = self.mesh_scale
        new.graph = copy.deepcopy(self.graph)
        return new


@dataclass
class TrainLog:
    losses: list = dc_field(default_factory=list)      # (iteration, kind, value)
    rollbacks: int = 0
    skipped: int = 0
    lr: float = 0.0


class _Trainer:
    """Shared optimizer loop with one rollback on divergence."""

    def __init__(self, model: RigModel, cfg: StageConfig):
        self.model = model
        self.cfg = cfg
        self.opt = AdamW(lr=cfg.lr)
        self.log = TrainLog(lr=cfg.lr)
        self._snap = None
        for g in cfg.freeze:
            if not model.store.names(g):
                raise ConfigError(f"freeze group {g!r} names no parameter block")

    def snapshot(self):
        self._snap = (self.model.store.copy(), copy.deepcopy(self.opt))

    def step(self, i: int, kind: str, loss_fn, freeze=()):
        """Evaluate ``loss_fn(P)`` on a fresh tape and apply one optimizer step."""
        store = self.model.store
        groups = [g for g in freeze if store.names(g)]
        try:
            with store.frozen(*groups) if groups else _null():
                tape = gt.Tape()
                P = store.bind(tape)
                loss = loss_fn(P)
                val = float(np.sum(gt.value(loss)))
                if not np.isfinite(val):
                    raise DivergenceError(f"non-finite loss at iteration {i}")
                grads = gt.backward(loss, P, store)
                self.opt.step(grads, store)
        except OracleFailure as e:
            log.warning("iteration %d: oracle failed (%s); step skipped", i, e)
            self.log.skipped += 1
            return
        except DivergenceError as e:
            if self.log.rollbacks >= 1 or self._snap is None:
                raise NumericalAbort(str(e)) from e
            log.warning("iteration %d: %s; rolling back and halving the learning rate", i, e)
            self.log.rollbacks += 1
            saved, opt = self._snap
            self.model.store._blocks = {n: v.copy() for n, v in saved.items()}
            self.opt = copy.deepcopy(opt)
            self.opt.lr *= 0.5
            self.log.lr = self.opt.lr
            return
        self.log.losses.append((i, kind, val))


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *a):
        return False


# extraction

def _recon_loss_fn(model: RigModel, data: Dataset, cfg: StageConfig, rng: np.random.Generator):
    """Sample a ray batch now; return ``P -> loss`` for it."""
    F, V = data.n_frames, data.n_views
    H, W = data.images.shape[2:4]
    n_img = cfg.images_per_batch
    ids = rng.choice(F * V, n_img, replace=F * V < n_img)
    n_fg = int(round(cfg.fg_fraction * cfg.rays_per_image))
    picks = []
    for idx in ids:
        f, v = divmod(int(idx), V)
        fg = np.argwhere(data.masks[f, v])
        k = n_fg if len(fg) else 0
        yx = np.concatenate([fg[rng.integers(len(fg), size=k)] if k else np.zeros((0, 2), int),
                             np.stack([rng.integers(H, size=cfg.rays_per_image - k),
                                       rng.integers(W, size=cfg.rays_per_image - k)], -1)])
        picks.append((f, v, yx))
    strat_seed = int(rng.integers(2 ** 63))
    settings = RenderSettings(proxy_radius=cfg.proxy_radius, background=cfg.background)
    use_flow = data.flow is not None and F > 1

    def loss_fn(P):
        O, D, near, far, fidx, frot, ftr, fint, fpix, ffi = [], [], [], [], [], [], [], [], [], []
        tgt = {"rgb": [], "alpha": [], "flow": [], "flow_valid": [], "feat": [], "feat_valid": []}
        for f, v, yx in picks:
            cam = data.cameras[f][v]
            uv = yx[:, ::-1] + 0.5
            o, d = cam.rays(uv, P)
            n = len(uv)
            nf = camera_near_far(cam, settings)
            O.append(o)
            D.append(d)
            near.append(np.full(n, nf.near))
            far.append(np.full(n, nf.far))
            fidx.append(np.full(n, f))
            y, x = yx[:, 0], yx[:, 1]
            tgt["rgb"].append(data.images[f, v, y, x])
            tgt["alpha"].append(data.masks[f, v, y, x].astype(float))
            if data.features is not None:
                tgt["feat"].append(data.features[f, v, y, x])
                tgt["feat_valid"].append(data.masks[f, v, y, x])
            if use_flow:
                g = min(f + 1, F - 1)
                cam2 = data.cameras[g][v]
                q, tr = cam2.extrinsics(P)
                frot.append(gt.broadcast_to(q, (n, 4)))
                ftr.append(gt.broadcast_to(tr, (n, 3)))
                fint.append(np.tile([cam2.fx, cam2.fy, cam2.cx, cam2.cy], (n, 1)))
                fpix.append(uv)
                ffi.append(np.full(n, g))
                valid = data.flow_valid[f, v, y, x] if data.flow_valid is not None else np.ones(n, bool)
                tgt["flow"].append(data.flow[f, v, y, x])
                tgt["flow_valid"].append(valid & (f + 1 < F))
        flow_to = None
        if use_flow:
            flow_to = FlowTarget(data.times, np.concatenate(ffi), gt.concat(frot), gt.concat(ftr),
                                 np.concatenate(fint), np.concatenate(fpix))
        out = render_rays(model.field, model.skin, gt.concat(O), gt.concat(D), np.concatenate(near),
                          np.concatenate(far), data.times, np.concatenate(fidx), cfg.n_samples, cfg.stratified,
                          np.random.default_rng(strat_seed), P, flow_to)
        targets = {"rgb": np.concatenate(tgt["rgb"]), "alpha": np.concatenate(tgt["alpha"])}
        renders = {"rgb": out["rgb"] + (1.0 - out["alpha"])[:, None] * np.asarray(cfg.background),
                   "alpha": out["alpha"]}
        if use_flow:
            renders["flow"] = out["flow"]
            targets["flow"] = np.concatenate(tgt["flow"])
            targets["flow_valid"] = np.concatenate(tgt["flow_valid"])
        w = cfg.weights
        loss = recon_loss(renders, targets, w.rgb, w.geo, flow_scale=1.0 / W)
        # cycle points: expected surface points of silhouette rays
        mask = targets["alpha"] > 0.5
        reg_feat = (out["feature"], np.concatenate(tgt["feat"]), np.concatenate(tgt["feat_valid"])) \
            if data.features is not None else (None, None, None)
        cyc = None
        if mask.any():
            surf = gt.value(gt.concat(O)) + gt.value(out["depth"])[:, None] * gt.value(gt.concat(D))
            sel = np.flatnonzero(mask)[: cfg.points_per_step]
            cyc = cycle_sq_errors(model.skin, surf[sel], data.times, np.concatenate(fidx)[sel], P)
        reg = reg_loss(reg_feat[0], reg_feat[1], cyc, reg_feat[2])
        return loss + cfg.reg_weight_extract * reg

    return loss_fn


def _random_points(rng, n, bounds):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    return lo + (hi - lo) * rng.random((n, 3))


def _csd_loss_fn(model: RigModel, oracle, cfg: StageConfig, times, u: float, stage: str, rng, extra=None):
    t = float(times[rng.integers(len(times))])
    az = cfg.azimuth_offset + rng.uniform(0.0, 2 * np.pi)
    el = rng.uniform(*cfg.csd_elevation)
    cams = orthogonal_views(az, el, cfg.csd_distance, cfg.csd_size, cfg.fov_deg)
    T = timestep_schedule(stage, u, rng)
    weight = cfg.weights.csd("extract" if stage == "extract" else "generate", u)
    settings = RenderSettings(n_samples=cfg.csd_samples, proxy_radius=cfg.proxy_radius, background=cfg.background)
    noise_rng = np.random.default_rng(int(rng.integers(2 ** 63)))
    pts = _random_points(rng, cfg.points_per_step, cfg.bounds) * 0.5
    fidx = rng.integers(len(times), size=len(pts))
    reg_w = cfg.reg_weight_extract if stage == "extract" else cfg.weights.reg(u)

    def loss_fn(P):
        loss = reg_w * reg_loss(cycle_sq=cycle_sq_errors(model.skin, pts, times, fidx, P))
        if oracle is not None and cfg.csd and weight > 0:
            loss = loss + csd_term(model.field, model.skin, oracle, t, cams, P, settings, T, weight, noise_rng,
                                   cfg.guidance)
        if extra is not None:
            loss = loss + extra(P)
        return loss

    return loss_fn


def reinit_bones(model: RigModel, rng: np.random.Generator, resolution: int = 32, bounds=None) -> bool:
    """Move rest bones to k-means centres of the current canonical surface."""
    bounds = bounds or ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    try:
        mesh = marching_cubes(model.field, resolution, bounds)
    except EmptyMesh:
        return False
    B = model.track.n_bones
    if len(mesh.vertices) < B:
        return False
    centers, label = kmeans2(mesh.vertices, B, minit="++", seed=rng)
    order = np.lexsort(centers.T[::-1])
    centers = centers[order]
    label = np.argsort(order)[label]
    sig = np.stack([mesh.vertices[label == b].std(0) if np.any(label == b) else np.full(3, 0.1) for b in range(B)])
    st = model.store
    p = model.track.prefix
    st.set(f"{p}.rest_center", centers)
    st.set(f"{p}.rest_rot", np.tile([1.0, 0, 0, 0], (B, 1)))
    st.set(f"{p}.log_sigma", np.log(np.clip(sig, 0.03, 1.0)))
    return True


def train_extraction(data: Dataset, cfg: StageConfig, oracle=None, model: RigModel | None = None,
                     callback=None):
    """Stage 1: fit the articulated model to the video, then build the skeleton.

    Even iterations optimise reconstruction plus regularisation on a ray
    batch; odd ones apply canonical score distillation on four orthogonal
    views (camera and embedder frozen) plus regularisation.

    Returns ``(model, graph, log)``.
    """
    if cfg.iters <= 0:
        raise ConfigError("extraction needs a positive iteration count")
    model = model or RigModel(cfg.field, cfg.warp, data.n_cameras, cfg.seed)
    model.times = data.times.copy()
    tr = _Trainer(model, cfg)
    rng_batch = substream(cfg.seed, "sampling")
    rng_csd = substream(cfg.seed, "oracle")
    rng_bones = substream(cfg.seed, "bones")
    K = model.field.pos_embed.n_freqs
    reinit_at = int(cfg.bone_reinit * cfg.iters) if cfg.bone_reinit >= 0 else -1
    tr.snapshot()
    for i in range(cfg.iters):
        u = i / max(cfg.iters - 1, 1)
        model.field.pos_embed.k_act = K * min(1.0, u / cfg.bandwidth_warmup) if cfg.bandwidth_warmup > 0 else K
        if i == reinit_at and reinit_bones(model, rng_bones, bounds=cfg.bounds):
            tr.opt.reset(model.track.prefix + ".rest")
            tr.opt.reset(model.track.prefix + ".log_sigma")
        if i % 2 == 0:
            tr.step(i, "recon", _recon_loss_fn(model, data, cfg, rng_batch))
        else:
            tr.step(i, "csd", _csd_loss_fn(model, oracle, cfg, data.times, u, "extract", rng_csd),
                    freeze=cfg.freeze)
        if cfg.checkpoint_every and (i + 1) % cfg.checkpoint_every == 0:
            tr.snapshot()
        if callback is not None:
            callback(i, model, tr.log)
    model.field.pos_embed.k_act = K
    graph, mesh, *_ = extract_skeleton(model.field, model.skin, cfg.mesh_resolution, cfg.bounds, data.times,
                                       mode=cfg.skeleton_mode)
    model.graph = graph
    model.mesh_scale = float(np.linalg.norm(np.ptp(mesh.vertices, axis=0)))
    model.optimizer = tr.opt
    return model, graph, tr.log


# generation

def prepare_generation(extracted: RigModel, graph: SkeletonGraph, cfg: StageConfig) -> RigModel:
    """Copy of the extracted model with a fresh sphere field; warp and embeddings carried over."""
    model = extracted.clone()
    model.graph = copy.deepcopy(graph)
    model.field.reinitialize(substream(cfg.seed, "generate-init"))
    model.field.pos_embed.k_act = model.field.pos_embed.n_freqs
    mask = np.ones(model.track.n_bones, dtype=bool)
    mask[graph.orphans] = False
    model.skin.bone_mask = mask if graph.edges else None
    for g in cfg.freeze:
        model.store.freeze(g)
    return model


def train_generation(extracted: RigModel, graph: SkeletonGraph, cfg: StageConfig, oracle=None,
                     callback=None):
    """Stage 2: regrow the canonical field under skeleton, bone, CSD and cycle losses.

    Returns ``(model, log)``.
    """
    model = prepare_generation(extracted, graph, cfg)
    tr = _Trainer(model, cfg)
    rng = substream(cfg.seed, "generate")
    rng_pts = substream(cfg.seed, "generate-points")
    times = model.times
    w = dataclasses.replace(cfg.weights, mesh_scale=model.mesh_scale)
    tr.snapshot()
    for i in range(cfg.iters):
        u = i / max(cfg.iters - 1, 1)
        pts = _random_points(rng_pts, cfg.points_per_step, cfg.bounds) * 0.6

        def extra(P, pts=pts):
            loss = w.balance * w.bone * bone_loss(model.field, model.skin, pts, times, P)
            if graph.edges and (w.skel_t > 0 or w.skel_a > 0):
                loss = loss + w.balance * skel_loss(graph, model.track, times, P, w.skel_t, w.skel_a)
            return loss

        tr.step(i, "generate", _csd_loss_fn(model, oracle, cfg, times, u, cfg.gen_schedule, rng, extra))
        if cfg.checkpoint_every and (i + 1) % cfg.checkpoint_every == 0:
            tr.snapshot()
        if callback is not None:
            callback(i, model, tr.log)
    model.optimizer = tr.opt
    return model, tr.log
