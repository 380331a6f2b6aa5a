"""Quaternion, dual-quaternion and rigid-transform algebra.

Quaternions are stored ``(w, x, y, z)``. The batched helpers operate on the
trailing axis of arrays shaped ``(..., 4)`` and accept tape variables as
well as ndarrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradtape as gt
from .gradtape import InvalidInput


class DegenerateBlend(ArithmeticError):
    pass


UNIT_TOL = 1e-6


# batched, tape-compatible algebra

def _qmul_np(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def _qmul_vjp(g, out, a, b):
    # left and right multiplication matrices are orthogonal up to conjugation
    return (gt._unbroadcast(_qmul_np(g, b * _CONJ), a.shape),
            gt._unbroadcast(_qmul_np(a * _CONJ, g), b.shape))


def _cross_vjp(g, out, a, b):
    return gt._unbroadcast(np.cross(b, g), a.shape), gt._unbroadcast(np.cross(g, a), b.shape)


gt.register_op("qmul", _qmul_np, _qmul_vjp)
gt.register_op("cross", lambda a, b: np.cross(a, b), _cross_vjp)


def qmul(a, b):
    """Hamilton product, broadcasting over leading axes."""
    return gt.apply("qmul", a, b)


def qconj(q):
    return q * _CONJ


def cross(a, b):
    return gt.apply("cross", a, b)


def qrotate(q, v):
    """Rotate 3-vectors ``v`` by unit quaternions ``q`` (broadcasting)."""
    w = q[..., 0:1]
    u = q[..., 1:4]
    uv = cross(u, v)
    return v + 2.0 * (w * uv + cross(u, uv))


def qnormalize(q):
    return q / gt.norm(q, keepdims=True)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_rotvec(rv, eps=1e-24):
    """Unit quaternion from an axis-angle vector; smooth through zero."""
    theta = gt.sqrt(gt.sum(rv * rv, axis=-1, keepdims=True) + eps)
    half = 0.5 * theta
    return gt.concat([gt.cos(half), gt.sin(half) / theta * rv], axis=-1)


def dq_from_rt(rot, trans):
    """Dual part ``0.5 * (0, t) * r`` of the rigid motion ``x -> r x + t``."""
    zero = trans[..., 0:1] * 0.0
    return rot, 0.5 * qmul(gt.concat([zero, trans], axis=-1), rot)


def dq_translation(real, dual):
    return 2.0 * qmul(dual, qconj(real))[..., 1:4]


def dq_apply(real, dual, x):
    return qrotate(real, x) + dq_translation(real, dual)


def dq_mul(ar, ad, br, bd):
    return qmul(ar, br), qmul(ar, bd) + qmul(ad, br)


def dq_inverse(real, dual):
    """Inverse of a unit dual quaternion (its quaternion conjugate)."""
    return qconj(real), qconj(dual)


def dq_normalize(real, dual):
    """Project ``(real, dual)`` onto the unit dual quaternions."""
    n = gt.norm(real, keepdims=True)
    r = real / n
    d = dual / n
    return r, d - r * gt.sum(r * d, axis=-1, keepdims=True)


def hemisphere_signs(real) -> np.ndarray:
    """Signs that flip every real part onto the hemisphere of the first."""
    r = gt.value(real)
    s = np.sign(r @ r[0])
    s[s == 0] = 1.0
    return s


def blend_dq(weights, real, dual, signs=None):
    """Normalized weighted sum of ``B`` dual quaternions.

    ``weights`` is ``(..., B)``; ``real`` and ``dual`` are ``(B, 4)``.
    """
    if signs is None:
        signs = hemisphere_signs(real)
    r = weights @ (real * signs[:, None])
    d = weights @ (dual * signs[:, None])
    if np.any(np.linalg.norm(gt.value(r), axis=-1) < 1e-12):
        raise DegenerateBlend("blended real part vanished")
    return dq_normalize(r, d)


def relative_angle_batch(a, b, eps=1e-18):
    """Rotation angle between unit quaternions, ``2 acos|<a, b>|`` in stable form."""
    rel = qmul(qconj(a), b)
    s = gt.sqrt(gt.sum(rel[..., 1:4] * rel[..., 1:4], axis=-1) + eps)
    return 2.0 * gt.atan2(s, gt.abs(rel[..., 0]))


# value types

@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        a = np.asarray(a, dtype=float)
        return cls(*map(float, a))

    @classmethod
    def from_axis_angle(cls, axis, angle) -> "Quaternion":
        return cls.from_array(quat_from_axis_angle(axis, angle))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.linalg.norm(self.array))

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0:
            raise InvalidInput("cannot normalize a zero quaternion")
        return Quaternion.from_array(self.array / n)

    def conj(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(qmul(self.array, other.array))

    def rotate(self, v) -> np.ndarray:
        return qrotate(self.array, np.asarray(v, dtype=float))


def _check_unit(q: Quaternion, tol=UNIT_TOL):
    if abs(q.norm() - 1.0) > tol:
        raise InvalidInput(f"quaternion norm {q.norm():.3g} is not unit")


@dataclass(frozen=True)
class UnitDualQuaternion:
    real: Quaternion = Quaternion()
    dual: Quaternion = Quaternion(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_arrays(cls, real, dual) -> "UnitDualQuaternion":
        return cls(Quaternion.from_array(real), Quaternion.from_array(dual))

    @property
    def arrays(self):
        return self.real.array, self.dual.array

    def __mul__(self, other: "UnitDualQuaternion") -> "UnitDualQuaternion":
        return UnitDualQuaternion.from_arrays(*dq_mul(*self.arrays, *other.arrays))

    def inverse(self) -> "UnitDualQuaternion":
        return UnitDualQuaternion(self.real.conj(), self.dual.conj())

    def apply(self, x) -> np.ndarray:
        return transform_from_dq(self).apply(x)


@dataclass(frozen=True)
class RigidTransform:
    """The map ``x -> rotation * x + translation``."""

    rotation: Quaternion = Quaternion()
    translation: tuple = (0.0, 0.0, 0.0)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=float)

    def apply(self, x) -> np.ndarray:
        return qrotate(self.rotation.array, np.asarray(x, dtype=float)) + self.t

    def apply_inverse(self, x) -> np.ndarray:
        return qrotate(self.rotation.conj().array, np.asarray(x, dtype=float) - self.t)

    def inverse(self) -> "RigidTransform":
        inv = self.rotation.conj()
        return RigidTransform(inv, tuple(-inv.rotate(self.t)))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation * other.rotation, tuple(self.apply(other.t)))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation.array)
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True)
class GaussianBone:
    transform: RigidTransform
    scale: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if np.any(np.asarray(self.scale, dtype=float) <= 0):
            raise InvalidInput("bone scales must be positive")


# operations

def dq_from_transform(t: RigidTransform) -> UnitDualQuaternion:
    _check_unit(t.rotation)
    real = t.rotation.normalized().array
    _, dual = dq_from_rt(real, t.t)
    return UnitDualQuaternion.from_arrays(real, dual)


def transform_from_dq(q: UnitDualQuaternion) -> RigidTransform:
    real, dual = q.arrays
    return RigidTransform(q.real, tuple(dq_translation(real, dual)))


def dqb_blend(pairs: Sequence[tuple[float, UnitDualQuaternion]]) -> UnitDualQuaternion:
    """Dual quaternion blend with hemisphere alignment to the first entry."""
    if not pairs:
        raise InvalidInput("empty blend")
    w = np.array([p[0] for p in pairs], dtype=float)
    if np.any(w < 0):
        raise InvalidInput("blend weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegenerateBlend("blend weights sum to zero")
    if abs(total - 1.0) > 1e-6:
        raise InvalidInput(f"blend weights sum to {total}, expected 1")
    real = np.stack([p[1].real.array for p in pairs])
    dual = np.stack([p[1].dual.array for p in pairs])
    r, d = blend_dq(w, real, dual)
    return UnitDualQuaternion.from_arrays(r, d)


def mahalanobis_sq(bone: GaussianBone, x) -> float:
    local = bone.transform.apply_inverse(x)
    return float(np.sum((local / np.asarray(bone.scale, dtype=float)) ** 2))


def relative_angle(a: Quaternion, b: Quaternion) -> float:
    _check_unit(a)
    _check_unit(b)
    return float(relative_angle_batch(a.array, b.array, eps=0.0))
