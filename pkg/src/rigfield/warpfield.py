"""Bone transforms over time, Gaussian-bone skinning and blend-skinning warps.

Bone transforms ``Q_b^t`` map camera space at time ``t`` to canonical space.
Batched calls take points ``X`` of shape ``(N, 3)`` with a per-point frame
index ``fidx`` into a vector of times; bone quantities are ``(F, B, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geomcore as gc
from . import gradtape as gt
from .gradtape import InvalidInput, ParamStore
from .neuralfield import FourierEmbedder, Mlp

IDENTITY_DQ = np.array([1.0, 0, 0, 0, 0, 0, 0, 0])


@dataclass
class WarpConfig:
    n_bones: int = 12
    time_freqs: int = 6
    time_code: int = 16
    q_width: int = 64
    q_depth: int = 4
    delta_width: int = 64
    delta_depth: int = 4
    delta_freqs: int = 4
    init_sigma: float = 0.1

    @classmethod
    def desk(cls, **kw) -> "WarpConfig":
        base = dict(n_bones=4, time_freqs=4, time_code=8, q_width=32, q_depth=2, delta_width=16,
                    delta_depth=2, delta_freqs=2)
        base.update(kw)
        return cls(**base)


class TimeEmbedder:
    """Fourier features of ``t`` followed by a learnable linear code."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, n_freqs=6, dim=16, prefix="embed.time"):
        self.store = store
        self.prefix = prefix
        self.fourier = FourierEmbedder(1, n_freqs)
        self.dim = dim
        n = self.fourier.out_dim
        store.add(f"{prefix}.W", rng.normal(0.0, 1.0 / np.sqrt(n), (n, dim)))
        store.add(f"{prefix}.b", np.zeros(dim))

    def __call__(self, times, P=None):
        P = self.store if P is None else P
        t = np.asarray(times, dtype=float).reshape(-1, 1)
        return self.fourier(t) @ P[f"{self.prefix}.W"] + P[f"{self.prefix}.b"]


class BoneTrack:
    """Per-time bone transforms from ``MLP_Q`` plus rest-pose Gaussian bones."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: WarpConfig, embedder: TimeEmbedder,
                 centers=None, prefix="warp"):
        self.store = store
        self.cfg = cfg
        self.prefix = prefix
        self.embedder = embedder
        B = cfg.n_bones
        if B < 1:
            raise InvalidInput("need at least one bone")
        self.mlp_q = Mlp(store, f"{prefix}.mlp_q", [embedder.dim] + [cfg.q_width] * cfg.q_depth + [8 * B], rng,
                         zero_last=True, last_bias=np.tile(IDENTITY_DQ, B))
        if centers is None:
            centers = rng.normal(0.0, 0.1, (B, 3))
        store.add(f"{prefix}.rest_center", np.asarray(centers, dtype=float).reshape(B, 3))
        store.add(f"{prefix}.rest_rot", np.tile([1.0, 0, 0, 0], (B, 1)))
        store.add(f"{prefix}.log_sigma", np.full((B, 3), np.log(cfg.init_sigma)))

    @property
    def n_bones(self) -> int:
        return self.cfg.n_bones

    def transforms(self, times, P=None):
        """Unit dual quaternions ``(real, dual)``, each ``(F, B, 4)``."""
        P = self.store if P is None else P
        raw = self.mlp_q(self.embedder(times, P), P)
        raw = gt.reshape(raw, (len(np.atleast_1d(times)), self.n_bones, 8))
        return gc.dq_normalize(raw[..., :4], raw[..., 4:])

    def rest(self, P=None):
        P = self.store if P is None else P
        return (P[f"{self.prefix}.rest_center"], gc.qnormalize(P[f"{self.prefix}.rest_rot"]),
                gt.exp(P[f"{self.prefix}.log_sigma"]))

    def rest_bones(self) -> list[gc.GaussianBone]:
        c, r, s = (gt.value(a) for a in self.rest())
        return [gc.GaussianBone(gc.RigidTransform(gc.Quaternion.from_array(r[b]), tuple(c[b])), tuple(s[b]))
                for b in range(self.n_bones)]


class ScriptedTrack(BoneTrack):
    """Test double returning fixed transforms from ``fn(times) -> (real, dual)``."""

    def __init__(self, store: ParamStore, fn, centers, sigma=0.1, prefix="scripted"):
        self.store = store
        self.prefix = prefix
        self.fn = fn
        centers = np.asarray(centers, dtype=float)
        self.cfg = WarpConfig(n_bones=len(centers), init_sigma=sigma)
        store.add(f"{prefix}.rest_center", centers)
        store.add(f"{prefix}.rest_rot", np.tile([1.0, 0, 0, 0], (len(centers), 1)))
        store.add(f"{prefix}.log_sigma", np.full((len(centers), 3), np.log(sigma)))

    def transforms(self, times, P=None):
        real, dual = self.fn(np.atleast_1d(np.asarray(times, dtype=float)))
        return np.asarray(real, dtype=float), np.asarray(dual, dtype=float)


@dataclass
class WarpSample:
    x_cam: np.ndarray
    x_canonical: np.ndarray
    weights: np.ndarray
    blended: gc.UnitDualQuaternion


class SkinningModel:
    """Gaussian-bone skinning with a delta-logit network.

    Logits are ``-0.5 * mahalanobis_sq + delta``; weights are their softmax.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: WarpConfig | None = None,
                 track: BoneTrack | None = None, embedder: TimeEmbedder | None = None, centers=None,
                 prefix="warp", use_delta: bool = True):
        self.cfg = cfg = cfg or WarpConfig()
        self.store = store
        self.prefix = prefix
        self.embedder = embedder or TimeEmbedder(store, rng, cfg.time_freqs, cfg.time_code)
        self.track = track or BoneTrack(store, rng, cfg, self.embedder, centers=centers, prefix=prefix)
        self.pos_embed = FourierEmbedder(3, cfg.delta_freqs)
        self.use_delta = use_delta
        self.bone_mask = None        # (B,) bool; masked bones get zero weight
        if use_delta:
            self.delta = Mlp(store, f"{prefix}.mlp_delta",
                             [self.pos_embed.out_dim + self.embedder.dim] + [cfg.delta_width] * cfg.delta_depth
                             + [self.track.n_bones], rng, zero_last=True)

    @property
    def n_bones(self) -> int:
        return self.track.n_bones

    def _frames(self, X, times, fidx):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        n = gt.value(X).shape[0]
        fidx = np.zeros(n, dtype=int) if fidx is None else np.asarray(fidx, dtype=int)
        return times, fidx

    def logits(self, X, real, dual, fidx, code, P):
        """Per-point, per-bone logits for points ``X`` in the frame given by ``(real, dual)[fidx]``."""
        center, rot, sigma = self.track.rest(P)
        if real is None:
            xc = X[:, None, :]
        else:
            if gt.value(real).shape[0] == 1:
                xc = gc.dq_apply(real[0], dual[0], X[:, None, :])
            else:
                xc = gc.dq_apply(real[fidx], dual[fidx], X[:, None, :])
        local = gc.qrotate(gc.qconj(rot), xc - center) / sigma
        out = -0.5 * gt.sum(local * local, axis=-1)
        if self.use_delta:
            n = gt.value(X).shape[0]
            c = code[fidx] if code is not None else np.zeros((n, self.embedder.dim))
            out = out + self.delta(gt.concat([self.pos_embed(X), c], axis=-1), P)
        if self.bone_mask is not None:
            out = out + np.where(self.bone_mask, 0.0, -1e4)
        return out

    def weights(self, X, times=0.0, fidx=None, space: str = "camera", P=None, bones=None):
        """Skinning weights ``(N, B)``; ``space='canonical'`` uses rest bones and a zero time code."""
        P = self.store if P is None else P
        if space == "canonical":
            return gt.softmax(self.logits(X, None, None, None, None, P))
        if space != "camera":
            raise InvalidInput(f"unknown space {space!r}")
        times, fidx = self._frames(X, times, fidx)
        real, dual = bones if bones is not None else self.track.transforms(times, P)
        code = self.embedder(times, P) if self.use_delta else None
        return gt.softmax(self.logits(X, real, dual, fidx, code, P))

    def backward(self, X, times=0.0, fidx=None, P=None, bones=None):
        """Camera-to-canonical warp: ``(X*, weights, blended_real, valid)``.

        Samples whose blend degenerates are replaced by the identity and
        reported as invalid.
        """
        P = self.store if P is None else P
        times, fidx = self._frames(X, times, fidx)
        real, dual = bones if bones is not None else self.track.transforms(times, P)
        w = self.weights(X, times, fidx, "camera", P, bones=(real, dual))
        return (*self._blend_apply(X, w, real, dual, fidx), w)

    def forward(self, Xs, times=0.0, fidx=None, P=None, bones=None):
        """Canonical-to-camera warp using inverse bone transforms and canonical weights."""
        P = self.store if P is None else P
        times, fidx = self._frames(Xs, times, fidx)
        real, dual = bones if bones is not None else self.track.transforms(times, P)
        ireal, idual = gc.dq_inverse(real, dual)
        w = self.weights(Xs, space="canonical", P=P)
        return self._blend_apply(Xs, w, ireal, idual, fidx)[0]

    @staticmethod
    def _blend_apply(X, w, real, dual, fidx):
        rv = gt.value(real)
        signs = np.sign(np.einsum("fbk,fk->fb", rv, rv[:, 0]))
        signs[signs == 0] = 1.0
        sr = real * signs[..., None]
        sd = dual * signs[..., None]
        F = rv.shape[0]
        if F == 1:
            br = w @ sr[0]
            bd = w @ sd[0]
        else:
            br = gt.sum(w[..., None] * sr[fidx], axis=1)
            bd = gt.sum(w[..., None] * sd[fidx], axis=1)
        valid = np.linalg.norm(gt.value(br), axis=-1) > 1e-9
        if not np.all(valid):
            br = gt.where(valid[:, None], br, np.array([1.0, 0, 0, 0]))
            bd = gt.where(valid[:, None], bd, 0.0)
        br, bd = gc.dq_normalize(br, bd)
        return gc.dq_apply(br, bd, X), br, valid


# single-point operations

def bone_transforms(track: BoneTrack, t: float, P=None) -> list[gc.UnitDualQuaternion]:
    real, dual = (gt.value(a) for a in track.transforms([t], P))
    return [gc.UnitDualQuaternion.from_arrays(real[0, b], dual[0, b]) for b in range(track.n_bones)]


def skinning_weights(model: SkinningModel, X, t: float = 0.0, space: str = "camera", P=None) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(1, 3)
    return gt.value(model.weights(X, t, space=space, P=P))[0]


def warp_backward(model: SkinningModel, X, t: float, P=None) -> WarpSample:
    X = np.asarray(X, dtype=float)
    dqs = bone_transforms(model.track, t, P)
    w = skinning_weights(model, X, t, "camera", P)
    blended = gc.dqb_blend([(float(wi), q) for wi, q in zip(w / w.sum(), dqs)])
    return WarpSample(X, blended.apply(X), w, blended)


def warp_forward(model: SkinningModel, Xs, t: float, P=None) -> np.ndarray:
    Xs = np.asarray(Xs, dtype=float)
    dqs = [q.inverse() for q in bone_transforms(model.track, t, P)]
    w = skinning_weights(model, Xs, t, "canonical", P)
    return gc.dqb_blend([(float(wi), q) for wi, q in zip(w / w.sum(), dqs)]).apply(Xs)


def cycle_error(model: SkinningModel, X, t: float, P=None) -> float:
    X = np.asarray(X, dtype=float)
    return float(np.linalg.norm(warp_forward(model, warp_backward(model, X, t, P).x_canonical, t, P) - X))


def cycle_sq_errors(model: SkinningModel, X, times, fidx=None, P=None):
    """Batched, differentiable squared cycle error per point."""
    Xs = model.backward(X, times, fidx, P)[0]
    diff = model.forward(Xs, times, fidx, P) - X
    return gt.sum(diff * diff, axis=-1)
