"""Cameras, rays and volume rendering through the warp field."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import geomcore as gc
from . import gradtape as gt
from .gradtape import InvalidInput
from .neuralfield import FEATURE_DIM, sdf_to_density

CORRECTION_KEY = "camera.correction"


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame: int = -1

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInput("focal lengths must be positive")
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), width=64, height=64, fov_deg=40.0, up=(0.0, 1.0, 0.0),
                frame=-1) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        f = np.asarray(target, dtype=float) - eye
        f /= np.linalg.norm(f)
        x = np.cross(f, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(f, [0.0, 0.0, 1.0])
        x /= np.linalg.norm(x)
        y = np.cross(f, x)
        R = np.stack([x, y, f])
        q = quat_from_matrix(R)
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, q, -R @ eye, frame)

    @classmethod
    def orbit(cls, azimuth, elevation=0.0, distance=3.0, target=(0.0, 0.0, 0.0), **kw) -> "Camera":
        """Camera on a sphere around ``target``; azimuth 0 looks from +z."""
        ce = np.cos(elevation)
        eye = np.asarray(target) + distance * np.array([np.sin(azimuth) * ce, np.sin(elevation), np.cos(azimuth) * ce])
        return cls.look_at(eye, target, **kw)

    @property
    def pose(self) -> gc.RigidTransform:
        return gc.RigidTransform(gc.Quaternion.from_array(self.rotation), tuple(self.translation))

    @property
    def center(self) -> np.ndarray:
        return self.pose.inverse().t

    def extrinsics(self, P=None):
        """World-to-camera ``(quaternion, translation)`` including any learned correction."""
        if P is None or self.frame < 0 or CORRECTION_KEY not in P:
            return self.rotation, self.translation
        corr = P[CORRECTION_KEY][self.frame]
        qc = gc.quat_from_rotvec(corr[0:3])
        return gc.qmul(qc, self.rotation), gc.qrotate(qc, self.translation) + corr[3:6]

    def pixel_grid(self, width=None, height=None) -> np.ndarray:
        """Pixel-centre coordinates ``(H*W, 2)`` in row-major order, rescaled to the requested size."""
        W = width or self.width
        H = height or self.height
        u, v = np.meshgrid((np.arange(W) + 0.5) * self.width / W, (np.arange(H) + 0.5) * self.height / H)
        return np.stack([u.ravel(), v.ravel()], -1)

    def rays(self, uv, P=None):
        """World-space ``(origins, unit directions)`` through pixel coordinates ``uv``."""
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        d = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(len(uv))], -1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        q, t = self.extrinsics(P)
        qi = gc.qconj(q)
        origin = -gc.qrotate(qi, t)
        dirs = gc.qrotate(qi, d)
        return gt.broadcast_to(origin, (len(uv), 3)), dirs

    def project(self, X, P=None):
        q, t = self.extrinsics(P)
        return project_points(X, q, t, np.array([self.fx, self.fy, self.cx, self.cy]))


def quat_from_matrix(R) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return np.array([w, x, y, z])


def project_points(X, q, t, intr):
    """Pixel coordinates of world points; ``q, t, intr`` broadcast against ``X``."""
    Xc = gc.qrotate(q, X) + t
    z = Xc[..., 2:3]
    return Xc[..., 0:2] / z * intr[..., 0:2] + intr[..., 2:4]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple = (0.0, 0.0)
    t: float = 0.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        if not 0 < self.near < self.far:
            raise InvalidInput("ray needs 0 < near < far")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise InvalidInput("ray direction must be unit")


@dataclass
class RenderOutput:
    rgb: np.ndarray
    alpha: float
    feature: np.ndarray
    flow: np.ndarray
    depth: float


@dataclass
class NearFar:
    near: float
    far: float
    flagged: bool = False


def near_far(camera_center, proxy_center, proxy_radius: float, margin: float = 1.2, eps: float = 1e-3) -> NearFar:
    """Depth range covering a bounding sphere inflated by ``margin``."""
    D = float(np.linalg.norm(np.asarray(camera_center, dtype=float) - np.asarray(proxy_center, dtype=float)))
    r = margin * proxy_radius
    if proxy_radius <= 0:
        return NearFar(D, D, True)
    if D - r < eps:
        return NearFar(eps, D + r, True)
    return NearFar(D - r, D + r, False)


def sample_depths(near, far, n: int, stratified: bool = False, rng: np.random.Generator | None = None):
    """Per-ray depths ``(R, n)`` and interval lengths; intervals tile ``[near, far]``."""
    if n < 2:
        raise InvalidInput("need at least two samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=float))
    far = np.atleast_1d(np.asarray(far, dtype=float))
    u = np.linspace(0.0, 1.0, n + 1)
    edges = near[:, None] + (far - near)[:, None] * u
    deltas = np.diff(edges, axis=-1)
    if stratified:
        rng = rng if rng is not None else np.random.default_rng(0)
        jitter = rng.random(deltas.shape)
    else:
        jitter = 0.5
    return edges[:, :-1] + jitter * deltas, deltas


def sample_ray(ray: Ray, n: int, stratified: bool = False, rng=None):
    z, delta = sample_depths(ray.near, ray.far, n, stratified, rng)
    pts = ray.origin + z[0, :, None] * ray.direction
    return list(zip(pts, delta[0]))


def composite_weights(sigma, deltas):
    """Alpha-compositing weights ``T_i (1 - exp(-sigma_i delta_i))`` along the last axis."""
    n = gt.value(sigma).shape[-1]
    tau = sigma * deltas
    excl = tau @ np.triu(np.ones((n, n)), k=1)
    return gt.exp(-excl) * (1.0 - gt.exp(-tau))


@dataclass
class FlowTarget:
    """Per-ray destination frame for the flow channel."""

    times: np.ndarray          # (F',) distinct target times
    fidx: np.ndarray           # (R,) index into ``times``
    rot: object                # (R, 4) world-to-camera quaternions at the target frame
    trans: object              # (R, 3)
    intrinsics: np.ndarray     # (R, 4) fx, fy, cx, cy
    pixels: np.ndarray         # (R, 2) source pixel coordinates


def render_rays(field, warp, origins, dirs, near, far, times=0.0, fidx=None, n_samples: int = 64,
                stratified: bool = False, rng=None, P=None, flow_to: FlowTarget | None = None):
    """Volume-render a batch of rays. Returns a dict of per-ray channels.

    ``warp=None`` renders the canonical field directly. Samples whose blend
    degenerates get zero density and are counted in ``degenerate``.
    """
    R = gt.value(origins).shape[0]
    z, deltas = sample_depths(near, far, n_samples, stratified, rng)
    X = origins[:, None, :] + z[..., None] * dirs[:, None, :]
    X = gt.reshape(X, (R * n_samples, 3))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    fidx = np.zeros(R, dtype=int) if fidx is None else np.asarray(fidx, dtype=int)
    pfidx = np.repeat(fidx, n_samples)
    v = gt.reshape(gt.broadcast_to(dirs[:, None, :], (R, n_samples, 3)), (R * n_samples, 3))
    valid = np.ones(R * n_samples, dtype=bool)
    if warp is None:
        Xs = X
    else:
        Xs, br, valid, _ = warp.backward(X, times, pfidx, P)
        v = gc.qrotate(br, v)
    c, d, psi = field.query(Xs, v, P)
    sigma = sdf_to_density(d, field.beta(P))
    if not np.all(valid):
        sigma = sigma * valid
    sigma = gt.reshape(sigma, (R, n_samples))
    w = composite_weights(sigma, deltas)
    wf = gt.reshape(w, (R, n_samples, 1))
    out = {
        "rgb": gt.sum(wf * gt.reshape(c, (R, n_samples, 3)), axis=1),
        "alpha": gt.sum(w, axis=1),
        "feature": gt.sum(wf * gt.reshape(psi, (R, n_samples, FEATURE_DIM)), axis=1),
        "depth": gt.sum(w * z, axis=1),
        "weights": w,
        "degenerate": int((~valid).sum()),
    }
    if flow_to is not None:
        ffidx = np.repeat(flow_to.fidx, n_samples)
        if warp is None:
            Xt = Xs
        else:
            Xt = warp.forward(Xs, flow_to.times, ffidx, P)
        rep = lambda a: gt.reshape(gt.broadcast_to(a[:, None, :], (R, n_samples, gt.value(a).shape[-1])),
                                   (R * n_samples, gt.value(a).shape[-1]))
        uv = project_points(Xt, rep(flow_to.rot), rep(flow_to.trans), rep(flow_to.intrinsics))
        fl = gt.reshape(uv, (R, n_samples, 2)) - flow_to.pixels[:, None, :]
        out["flow"] = gt.sum(wf * fl, axis=1)
    return out


def over_background(rgb, alpha, background=(0.0, 0.0, 0.0)):
    bg = np.asarray(background, dtype=float)
    return rgb + (1.0 - alpha)[..., None] * bg


def render_pixel(field, warp, ray: Ray, t_prime=None, flow_camera: Camera | None = None, n_samples: int = 64,
                 P=None) -> RenderOutput:
    flow_to = None
    if t_prime is not None and flow_camera is not None:
        q, tr = flow_camera.extrinsics(P)
        flow_to = FlowTarget(np.array([t_prime]), np.zeros(1, dtype=int), np.asarray(q)[None], np.asarray(tr)[None],
                             np.array([[flow_camera.fx, flow_camera.fy, flow_camera.cx, flow_camera.cy]]),
                             np.asarray(ray.pixel, dtype=float)[None])
    out = render_rays(field, warp, ray.origin[None], ray.direction[None], [ray.near], [ray.far], times=ray.t,
                      n_samples=n_samples, P=P, flow_to=flow_to)
    flow = gt.value(out["flow"])[0] if "flow" in out else np.zeros(2)
    return RenderOutput(gt.value(out["rgb"])[0], float(gt.value(out["alpha"])[0]), gt.value(out["feature"])[0],
                        flow, float(gt.value(out["depth"])[0]))


@dataclass
class RenderSettings:
    n_samples: int = 64
    stratified: bool = False
    proxy_center: tuple = (0.0, 0.0, 0.0)
    proxy_radius: float = 1.0
    margin: float = 1.2
    background: tuple = (0.0, 0.0, 0.0)
    chunk: int = 4096


def camera_near_far(camera: Camera, settings: RenderSettings) -> NearFar:
    return near_far(camera.center, settings.proxy_center, settings.proxy_radius, settings.margin)


def render_image(field, warp, camera: Camera, t: float = 0.0, resolution=None, t_prime=None,
                 flow_camera: Camera | None = None, settings: RenderSettings | None = None, rng=None, P=None,
                 pixels=None) -> dict:
    """Render a full image (or the given ``pixels``) from ``camera`` at time ``t``.

    When explicit parameters ``P`` are passed (tape-bound or not) the whole
    image is one batch and channels stay flat, ``(H*W, ...)``. Otherwise the
    stored parameters are used chunk by chunk and channels are reshaped to
    ``(H, W, ...)``.
    """
    s = settings or RenderSettings()
    W, H = (camera.width, camera.height) if resolution is None else resolution
    uv = camera.pixel_grid(W, H) if pixels is None else np.asarray(pixels, dtype=float)
    nf = camera_near_far(camera, s)
    taped = P is not None
    chunk = len(uv) if taped else s.chunk
    parts = []
    for i in range(0, len(uv), chunk):
        sl = uv[i:i + chunk]
        o, d = camera.rays(sl, P)
        flow_to = None
        if t_prime is not None and flow_camera is not None:
            q, tr = flow_camera.extrinsics(P)
            n = len(sl)
            flow_to = FlowTarget(np.array([t_prime]), np.zeros(n, dtype=int), gt.broadcast_to(q, (n, 4)),
                                 gt.broadcast_to(tr, (n, 3)),
                                 np.tile([flow_camera.fx, flow_camera.fy, flow_camera.cx, flow_camera.cy], (n, 1)), sl)
        parts.append(render_rays(field, warp, o, d, np.full(len(sl), nf.near), np.full(len(sl), nf.far), times=t,
                                 n_samples=s.n_samples, stratified=s.stratified, rng=rng, P=P, flow_to=flow_to))
    if taped:
        out = parts[0]
        out["image"] = over_background(out["rgb"], out["alpha"], s.background)
        return out
    keys = [k for k in parts[0] if k not in ("weights", "degenerate")]
    out = {k: np.concatenate([gt.value(p[k]) for p in parts]) for k in keys}
    out["image"] = over_background(out["rgb"], out["alpha"], s.background)
    if pixels is None:
        out = {k: v.reshape((H, W) + v.shape[1:]) for k, v in out.items()}
    out["degenerate"] = int(np.sum([p["degenerate"] for p in parts]))
    return out


def orthogonal_views(azimuth: float, elevation: float, distance: float, size: int, fov_deg: float = 40.0,
                     target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Four cameras 90 degrees apart in azimuth, sharing elevation and distance."""
    return [Camera.orbit(azimuth + k * np.pi / 2, elevation, distance, target, width=size, height=size,
                         fov_deg=fov_deg) for k in range(4)]
