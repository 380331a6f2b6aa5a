"""Fourier embeddings, small MLPs and the canonical SDF/colour/feature field."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradtape as gt
from .gradtape import InvalidInput, ParamStore

FEATURE_DIM = 16


class FourierEmbedder:
    """Raw input followed by windowed ``sin``/``cos`` at ``2^k * pi`` frequencies.

    Octave ``k`` is weighted by ``(1 - cos(pi * clip(k_act - k, 0, 1))) / 2``,
    so raising ``k_act`` fades octaves in without discontinuities.
    """

    def __init__(self, in_dim: int, n_freqs: int, k_act: float | None = None):
        self.in_dim = in_dim
        self.n_freqs = n_freqs
        self.k_act = float(n_freqs if k_act is None else k_act)
        self.freqs = np.pi * 2.0 ** np.arange(n_freqs)

    @property
    def out_dim(self) -> int:
        return self.in_dim * (2 * self.n_freqs + 1)

    def window(self, k_act: float | None = None) -> np.ndarray:
        k_act = self.k_act if k_act is None else float(k_act)
        if not 0.0 <= k_act <= self.n_freqs:
            raise InvalidInput(f"k_act={k_act} outside [0, {self.n_freqs}]")
        a = np.clip(k_act - np.arange(self.n_freqs), 0.0, 1.0)
        return 0.5 * (1.0 - np.cos(np.pi * a))

    def __call__(self, x, k_act: float | None = None):
        w = np.repeat(self.window(k_act), self.in_dim)
        scaled = gt.reshape(x[..., None, :] * self.freqs[:, None], gt.value(x).shape[:-1] + (self.in_dim * self.n_freqs,))
        return gt.concat([x, gt.sin(scaled) * w, gt.cos(scaled) * w], axis=-1)


ACTIVATIONS = {
    "softplus": gt.softplus,
    "tanh": gt.tanh,
    "linear": lambda x: x,
}


class Mlp:
    """Fully connected network whose weights live in a :class:`ParamStore`.

    ``skips`` lists hidden-layer indices that receive the network input
    concatenated to their own input.
    """

    def __init__(self, store: ParamStore, name: str, widths: list[int], rng: np.random.Generator,
                 activation: str = "softplus", out_activation: str = "linear", skips=(),
                 zero_last: bool = False, last_bias=None):
        self.store = store
        self.name = name
        self.widths = list(widths)
        self.skips = set(skips)
        self.acts = [activation] * (len(widths) - 2) + [out_activation]
        for i in range(len(widths) - 1):
            fan_in = widths[i] + (widths[0] if i in self.skips else 0)
            fan_out = widths[i + 1]
            last = i == len(widths) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
                if last:
                    w *= 0.1
            b = np.zeros(fan_out)
            if last and last_bias is not None:
                b = np.asarray(last_bias, dtype=float).copy()
            store.add(f"{name}.W{i}", w)
            store.add(f"{name}.b{i}", b)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def __call__(self, x, P=None):
        P = self.store if P is None else P
        h = x
        for i in range(self.n_layers):
            if i in self.skips:
                h = gt.concat([h, x], axis=-1)
            h = h @ P[f"{self.name}.W{i}"] + P[f"{self.name}.b{i}"]
            h = ACTIVATIONS[self.acts[i]](h)
        return h


def sdf_to_density(d, beta):
    """Laplace-CDF density ``Psi_beta(-d) / beta``."""
    if np.any(gt.value(beta) <= 0):
        raise InvalidInput("beta must be positive")
    half = 0.5 * gt.exp(-gt.abs(d) / beta)
    cdf = gt.where(gt.value(d) >= 0, half, 1.0 - half)
    return cdf / beta


@dataclass
class FieldConfig:
    geo_width: int = 128
    geo_depth: int = 5
    geo_skip: int = 3
    geo_feat: int = 15
    color_width: int = 64
    color_depth: int = 2
    psi_width: int = 64
    psi_depth: int = 3
    pos_freqs: int = 6
    dir_freqs: int = 2
    init_radius: float = 0.3
    beta_init: float = 0.05

    @classmethod
    def desk(cls, **kw) -> "FieldConfig":
        base = dict(geo_width=32, geo_depth=3, geo_skip=-1, geo_feat=8, color_width=16, color_depth=2,
                    psi_width=16, psi_depth=2, pos_freqs=4, dir_freqs=1)
        base.update(kw)
        return cls(**base)


class CanonicalField:
    """Time-invariant colour, SDF and feature field in canonical space.

    The SDF is ``|X| - init_radius + g(X)`` with the last layer of ``g``
    zero-initialised, so a fresh field is exactly a sphere.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: FieldConfig | None = None,
                 prefix: str = "field"):
        self.cfg = cfg = cfg or FieldConfig()
        self.store = store
        self.prefix = prefix
        self.pos_embed = FourierEmbedder(3, cfg.pos_freqs)
        self.dir_embed = FourierEmbedder(3, cfg.dir_freqs)
        pe = self.pos_embed.out_dim
        skips = (cfg.geo_skip,) if 0 < cfg.geo_skip < cfg.geo_depth else ()
        self.geometry = Mlp(store, f"{prefix}.geo", [pe] + [cfg.geo_width] * cfg.geo_depth + [1 + cfg.geo_feat],
                            rng, skips=skips, zero_last=True)
        self.color = Mlp(store, f"{prefix}.rgb",
                         [cfg.geo_feat + self.dir_embed.out_dim] + [cfg.color_width] * cfg.color_depth + [3], rng)
        self.psi = Mlp(store, f"{prefix}.psi", [pe] + [cfg.psi_width] * cfg.psi_depth + [FEATURE_DIM], rng)
        store.add(f"{prefix}.log_beta", np.array([np.log(cfg.beta_init)]))

    def beta(self, P=None):
        P = self.store if P is None else P
        return gt.exp(P[f"{self.prefix}.log_beta"])[0]

    def _geo(self, X, P):
        h = self.geometry(self.pos_embed(X), P)
        d = gt.norm(X, eps=1e-12) - self.cfg.init_radius + h[..., 0]
        return d, h[..., 1:]

    def sdf(self, X, P=None):
        P = self.store if P is None else P
        return self._geo(X, P)[0]

    def features(self, X, P=None):
        P = self.store if P is None else P
        return self.psi(self.pos_embed(X), P)

    def query(self, X, v, P=None):
        """``(rgb, sdf, psi)`` at canonical points ``X`` seen along ``v``."""
        P = self.store if P is None else P
        d, g = self._geo(X, P)
        c = gt.sigmoid(self.color(gt.concat([g, self.dir_embed(v)], axis=-1), P))
        return c, d, self.features(X, P)

    def reinitialize(self, rng: np.random.Generator):
        """Fresh weights (sphere SDF), keeping the block layout."""
        fresh = ParamStore()
        CanonicalField(fresh, rng, self.cfg, self.prefix)
        for n, v in fresh.items():
            self.store.set(n, v)


class AnalyticField:
    """Field with a closed-form SDF and constant colour/feature.

    Shares the query interface of :class:`CanonicalField` so it can stand in
    for a learned field in renderers and mesh extraction.
    """

    def __init__(self, sdf_fn, color=(0.8, 0.8, 0.8), feature=None, beta: float = 0.02):
        self.sdf_fn = sdf_fn
        self.rgb = np.asarray(color, dtype=float)
        self.feature = np.zeros(FEATURE_DIM) if feature is None else np.asarray(feature, dtype=float)
        self._beta = float(beta)
        self.store = ParamStore()

    def beta(self, P=None):
        return self._beta

    def sdf(self, X, P=None):
        return self.sdf_fn(X)

    def features(self, X, P=None):
        n = gt.value(X).shape[:-1]
        return np.broadcast_to(self.feature, n + (FEATURE_DIM,)).copy()

    def query(self, X, v, P=None):
        n = gt.value(X).shape[:-1]
        return np.broadcast_to(self.rgb, n + (3,)).copy(), self.sdf_fn(X), self.features(X)


def sphere_sdf(radius: float, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=float)
    return lambda X: gt.norm(X - c) - radius


def box_sdf(half_extent):
    h = np.asarray(half_extent, dtype=float)

    def f(X):
        q = np.abs(gt.value(X)) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    return f


def capsule_sdf(X, a, b, radius):
    """Distance to the segment ``a-b`` minus ``radius`` (plain numpy)."""
    X = np.asarray(X, dtype=float)
    a = np.asarray(a, dtype=float)
    ab = np.asarray(b, dtype=float) - a
    h = np.clip(((X - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(X - a - h[..., None] * ab, axis=-1) - radius
