"""Training losses, score oracles and canonical score distillation."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.ndimage import gaussian_filter

from . import gradtape as gt
from .geomcore import qconj, qrotate
from .gradtape import DivergenceError, InvalidInput
from .renderer import Camera, RenderSettings, render_image
from .skeleton import SkeletonGraph, pair_motion

GRAY = 0.5


class OracleFailure(RuntimeError):
    """The score oracle could not produce a residual; the step is skipped."""


@dataclass
class ScoreQuery:
    views: np.ndarray            # (4, H, W, 3)
    poses: np.ndarray            # (4, 7) world-to-camera quaternion + translation
    timestep: float
    time: float = 0.0
    condition: str = ""
    noise: np.ndarray | None = None
    guidance: float = 1.0
    cameras: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=float)
        if self.views.ndim != 4 or self.views.shape[0] != 4:
            raise InvalidInput("a score query needs exactly four views")
        if not 0.0 < self.timestep <= 1.0:
            raise InvalidInput("diffusion timestep must lie in (0, 1]")


@dataclass
class ScoreResidual:
    residual: np.ndarray
    weight: float = 1.0


class ScoreOracle(Protocol):
    def __call__(self, query: ScoreQuery) -> ScoreResidual: ...


def cfg_combine(cond, uncond, scale: float):
    cond = np.asarray(cond, dtype=float)
    uncond = np.asarray(uncond, dtype=float)
    if cond.shape != uncond.shape:
        raise InvalidInput("conditional and unconditional residuals differ in shape")
    return uncond + scale * (cond - uncond)


class GuidedOracle:
    """Base for synthetic oracles with a conditional and an unconditional branch."""

    def cond(self, q: ScoreQuery) -> np.ndarray:
        raise NotImplementedError

    def uncond(self, q: ScoreQuery) -> np.ndarray:
        return q.views - GRAY

    def __call__(self, q: ScoreQuery) -> ScoreResidual:
        c = self.cond(q)
        r = c if q.guidance == 1.0 else cfg_combine(c, self.uncond(q), q.guidance)
        return ScoreResidual(r, 1.0)


class TargetFieldOracle(GuidedOracle):
    """Residual pointing from the render toward a held ground-truth render.

    ``target_fn(cameras, time) -> (4, H, W, 3)`` renders the target.
    """

    def __init__(self, target_fn):
        self.target_fn = target_fn

    def cond(self, q: ScoreQuery) -> np.ndarray:
        if q.cameras is None:
            raise OracleFailure("target-field oracle needs the query cameras")
        target = np.asarray(self.target_fn(q.cameras, q.time), dtype=float)
        return q.views - target.reshape(q.views.shape)


class BlurOracle(GuidedOracle):
    """Residual ``I - blur(I)``, a mode-seeking stand-in for a diffusion prior."""

    def __init__(self, sigma: float = 1.5):
        self.sigma = sigma

    def cond(self, q: ScoreQuery) -> np.ndarray:
        s = self.sigma * (0.5 + q.timestep)
        return q.views - gaussian_filter(q.views, sigma=(0, s, s, 0), mode="nearest")


class ZeroOracle(GuidedOracle):
    def cond(self, q: ScoreQuery) -> np.ndarray:
        return np.zeros_like(q.views)

    def uncond(self, q: ScoreQuery) -> np.ndarray:
        return np.zeros_like(q.views)


# schedules

def timestep_schedule(stage: str, u: float, rng: np.random.Generator | None = None) -> float:
    if not 0.0 <= u <= 1.0:
        raise InvalidInput("iteration fraction must lie in [0, 1]")
    if stage == "extract":
        return 0.5
    if stage == "gen-geometry":
        return 0.8 - 0.3 * u
    if stage == "gen-texture":
        rng = rng if rng is not None else np.random.default_rng()
        return float(0.5 * (1.0 - rng.random()))
    raise InvalidInput(f"unknown stage {stage!r}")


def linear(a: float, b: float, u: float) -> float:
    return a + (b - a) * u


def geometric(a: float, b: float, u: float) -> float:
    return float(a * (b / a) ** u)


@dataclass
class LossWeights:
    rgb: float = 1.0
    geo: float = 0.5
    skel_t: float = 1.0
    skel_a: float = 1.0
    bone: float = 1.0
    reg_start: float = 0.01
    reg_end: float = 1.0
    csd_extract: tuple = (1e-3, 1e-5)
    csd_generate: tuple = (0.0, 1e-4)
    mesh_scale: float = 1.0

    def __post_init__(self):
        vals = [self.rgb, self.geo, self.skel_t, self.skel_a, self.bone, self.reg_start, self.reg_end,
                *self.csd_extract, *self.csd_generate, self.mesh_scale]
        if any(v < 0 for v in vals):
            raise InvalidInput("loss weights must be nonnegative")

    def csd(self, stage: str, u: float) -> float:
        if stage == "extract":
            return geometric(*self.csd_extract, u) if min(self.csd_extract) > 0 else linear(*self.csd_extract, u)
        return linear(*self.csd_generate, u)

    def reg(self, u: float) -> float:
        return geometric(self.reg_start, self.reg_end, u)

    @property
    def balance(self) -> float:
        """Scale for skeleton and bone terms: inverse squared mesh diagonal."""
        return 1.0 / self.mesh_scale ** 2


# losses

def mse(a, b):
    d = a - b
    return gt.mean(d * d)


def recon_loss(renders: dict, targets: dict, w_rgb: float = 1.0, w_geo: float = 0.5, flow_scale: float = 1.0):
    """Photometric MSE plus weighted silhouette and flow-endpoint MSE.

    ``targets`` may carry ``flow_valid``; flow is compared after multiplying
    by ``flow_scale`` (pixels to normalised units).
    """
    if gt.value(renders["rgb"]).size == 0:
        raise InvalidInput("empty batch")
    loss = w_rgb * mse(renders["rgb"], targets["rgb"])
    geo = mse(renders["alpha"], targets["alpha"])
    if "flow" in renders and "flow" in targets:
        valid = np.asarray(targets.get("flow_valid", np.ones(len(targets["flow"]), dtype=bool)), dtype=bool)
        if valid.any():
            d = (renders["flow"] - targets["flow"]) * flow_scale
            geo = geo + gt.sum(gt.sum(d * d, axis=-1) * valid) / float(valid.sum())
    return loss + w_geo * geo


def reg_loss(features=None, target_features=None, cycle_sq=None, feature_valid=None):
    """Feature-matching MSE plus mean squared 3D cycle error."""
    loss = 0.0
    if features is not None and target_features is not None:
        d = features - target_features
        per = gt.sum(d * d, axis=-1) / float(gt.value(d).shape[-1])
        if feature_valid is None:
            loss = loss + gt.mean(per)
        elif np.any(feature_valid):
            loss = loss + gt.sum(per * feature_valid) / float(np.sum(feature_valid))
    if cycle_sq is not None:
        loss = loss + gt.mean(cycle_sq)
    return loss


def hinge_violations(graph: SkeletonGraph, track, frames, P=None):
    """Out-of-range amounts ``(F, E)`` for distance and angle, and the edge list."""
    pairs = graph.edge_list()
    if not pairs:
        return None, None, pairs
    dist, ang = pair_motion(track, pairs, frames, P)
    lo_t = np.array([graph.ranges[p].t_min for p in pairs])
    hi_t = np.array([graph.ranges[p].t_max for p in pairs])
    lo_a = np.array([graph.ranges[p].a_min for p in pairs])
    hi_a = np.array([graph.ranges[p].a_max for p in pairs])
    # constant zero as first argument: ties at the range boundary give zero gradient
    vt = gt.maximum(0.0, gt.maximum(dist - hi_t, lo_t - dist))
    va = gt.maximum(0.0, gt.maximum(ang - hi_a, lo_a - ang))
    return vt, va, pairs


def skel_loss(graph: SkeletonGraph, track, frames, P=None, w_t: float = 1.0, w_a: float = 1.0):
    vt, va, pairs = hinge_violations(graph, track, frames, P)
    if not pairs:
        return 0.0
    s = np.array([graph.edges[p] for p in pairs])
    return w_t * gt.sum(s * vt * vt) + w_a * gt.sum(s * va * va)


def max_violation(graph: SkeletonGraph, track, frames, P=None) -> float:
    vt, va, pairs = hinge_violations(graph, track, frames, P)
    if not pairs:
        return 0.0
    return float(max(gt.value(vt).max(), gt.value(va).max()))


def bone_loss(field, skin, points, times, P=None):
    """Occupancy agreement with the Gaussian bones plus skinning entropy.

    Both terms are means over sample points. Field occupancy is
    ``sigmoid(-d / beta)``; bone occupancy is the max over rest bones of
    ``exp(-0.5 * mahalanobis_sq)``.
    """
    points = np.asarray(points, dtype=float)
    beta = field.beta(P)
    s = -field.sdf(points, P) / beta
    center, rot, sigma = skin.track.rest(P)
    local = qrotate(qconj(rot), points[:, None, :] - center) / sigma
    maha = gt.sum(local * local, axis=-1)
    m = np.argmin(gt.value(maha), axis=1)
    occ_g = gt.exp(-0.5 * maha[np.arange(len(points)), m])
    # BCE with logits: -[q log p + (1 - q) log(1 - p)], p = sigmoid(s)
    bce = occ_g * gt.softplus(-s) + (1.0 - occ_g) * gt.softplus(s)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    fidx = np.arange(len(points)) % len(times)
    logits = skin.logits(points, *skin.track.transforms(times, P), fidx,
                         skin.embedder(times, P) if skin.use_delta else None, P)
    shift = np.max(gt.value(logits), axis=-1, keepdims=True)
    lse = gt.log(gt.sum(gt.exp(logits - shift), axis=-1, keepdims=True)) + shift
    logS = logits - lse
    ent = -gt.sum(gt.exp(logS) * logS, axis=-1)
    return gt.mean(bce) + gt.mean(ent)


# canonical score distillation

def pose_array(cameras) -> np.ndarray:
    return np.stack([np.concatenate([c.rotation, c.translation]) for c in cameras])


def render_views(field, warp, cameras: list[Camera], t: float, P, settings: RenderSettings):
    """Images of all cameras at time ``t`` stacked as ``(V, H*W, 3)`` (tape vars when ``P`` is bound)."""
    return gt.stack([render_image(field, warp, cam, t, settings=settings, P=P)["image"] for cam in cameras])


def csd_surrogate(images, residual, weight: float):
    """Scalar whose image gradient is ``weight * residual`` (the residual is a constant)."""
    r = np.asarray(residual, dtype=float).reshape(gt.value(images).shape)
    return gt.sum(images * (weight * r))


def csd_query(field, warp, cameras, t, P, settings, timestep, rng, guidance=1.0, condition=""):
    images = render_views(field, warp, cameras, t, P, settings)
    n = len(cameras)
    H, W = cameras[0].height, cameras[0].width
    views = gt.value(images).reshape(n, H, W, 3)
    noise = rng.standard_normal(views.shape) if rng is not None else None
    q = ScoreQuery(views, pose_array(cameras), timestep, t, condition, noise, guidance, list(cameras))
    return images, q


def csd_term(field, warp, oracle, t, cameras, P, settings, timestep, weight=1.0, rng=None, guidance=1.0):
    """Render, query the oracle, and return the CSD surrogate scalar.

    Raises :class:`OracleFailure` (skip step) or :class:`DivergenceError`
    (non-finite residual).
    """
    images, q = csd_query(field, warp, cameras, t, P, settings, timestep, rng, guidance)
    res = oracle(q)
    r = np.asarray(res.residual, dtype=float)
    if r.shape != q.views.shape:
        raise OracleFailure(f"residual shape {r.shape} does not match {q.views.shape}")
    if not np.all(np.isfinite(r)):
        raise DivergenceError("non-finite score residual")
    return csd_surrogate(images, r, weight * res.weight)


def csd_grad(field, warp, oracle, t, cameras, store, settings=None, timestep=0.5, weight=1.0, rng=None,
             guidance=1.0, freeze=("camera", "embed")) -> dict:
    """Gradient over all parameter blocks of one CSD step; frozen groups get zeros."""
    settings = settings or RenderSettings()
    groups = [g for g in freeze if store.names(g)]
    with store.frozen(*groups) if groups else contextlib.nullcontext():
        tape = gt.Tape()
        P = store.bind(tape)
        loss = csd_term(field, warp, oracle, t, cameras, P, settings, timestep, weight, rng, guidance)
        return gt.backward(loss, P, store)

