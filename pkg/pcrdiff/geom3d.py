"""Rigid-body geometry: quaternions, SE(3) transforms and SVD alignment."""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .exceptions import (
    BadRange,
    DegenerateGeometry,
    DegenerateQuaternion,
    EmptyCloud,
    GimbalLock,
    IoFailure,
    NotARotation,
    ParseError,
    ShapeMismatch,
    WeightUnderflow,
)

FloatArray = NDArray[np.float64]
Cloud = FloatArray
TransformVec7 = FloatArray

QUAT_EPS = 1e-8
GIMBAL_EPS = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Rotation quaternion in (w, x, y, z) order."""

    w: float
    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, values: ArrayLike) -> Quaternion:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape != (4,):
            raise ShapeMismatch(f"quaternion needs 4 components, got {arr.shape}")
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))

    @classmethod
    def identity(cls) -> Quaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self) -> FloatArray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class RigidTransform:
    """Unit canonical rotation plus translation; acts as p -> R p + t."""

    rotation: Quaternion
    translation: tuple[float, float, float]

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(Quaternion.identity(), (0.0, 0.0, 0.0))

    @classmethod
    def from_rt(cls, rotation: ArrayLike, translation: ArrayLike) -> RigidTransform:
        t = np.asarray(translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,):
            raise ShapeMismatch(f"translation needs 3 components, got {t.shape}")
        return cls(matrix_to_quat(rotation), (float(t[0]), float(t[1]), float(t[2])))

    @cached_property
    def rotation_matrix(self) -> FloatArray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> FloatArray:
        return np.array(self.translation, dtype=np.float64)

    def matrix(self) -> FloatArray:
        out = np.eye(4)
        out[:3, :3] = self.rotation_matrix
        out[:3, 3] = self.t
        return out


# ----------------------------------------------------------------------
# Quaternions
# ----------------------------------------------------------------------
def _canonical_quat_array(arr: FloatArray) -> FloatArray:
    norm = float(np.linalg.norm(arr))
    if not np.isfinite(norm) or norm <= QUAT_EPS:
        raise DegenerateQuaternion(f"quaternion norm {norm:.3g} is not above {QUAT_EPS}")
    out = arr / norm
    if out[0] < 0.0:
        out = -out
    elif out[0] == 0.0:
        # q and -q both have w = 0; pick the one whose first non-zero entry is positive
        nonzero = np.flatnonzero(out)
        if nonzero.size and out[nonzero[0]] < 0.0:
            out = -out
    return out


def quat_normalize(q: Quaternion) -> Quaternion:
    """Unit-norm quaternion with w >= 0 describing the same rotation."""
    return Quaternion.from_array(_canonical_quat_array(q.as_array()))


def _quat_quadratic(q: FloatArray) -> FloatArray:
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def _quat_quadratic_partials(q: FloatArray) -> FloatArray:
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[w, -z, y], [z, w, -x], [-y, x, w]],
            [[x, y, z], [y, -x, -w], [z, w, -x]],
            [[-y, x, w], [x, y, z], [-w, z, -y]],
            [[-z, -w, x], [w, -z, y], [x, y, z]],
        ]
    )


def quat_to_matrix(q: Quaternion) -> FloatArray:
    return _quat_quadratic(_canonical_quat_array(q.as_array()))


def matrix_to_quat(rotation: ArrayLike) -> Quaternion:
    """Canonical unit quaternion of a proper rotation matrix (Shepperd's method)."""
    R = np.asarray(rotation, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NotARotation(f"expected a finite 3x3 matrix, got shape {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
        raise NotARotation("matrix is not orthogonal")
    if np.linalg.det(R) <= 0.0:
        raise NotARotation("matrix has a non-positive determinant")
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return Quaternion.from_array(_canonical_quat_array(np.array(q)))


def _quat_mul(a: FloatArray, b: FloatArray) -> FloatArray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


# ----------------------------------------------------------------------
# SE(3)
# ----------------------------------------------------------------------
def as_cloud(points: ArrayLike) -> Cloud:
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ShapeMismatch(f"cloud must have shape (N, 3), got {cloud.shape}")
    if cloud.shape[0] == 0:
        raise EmptyCloud("cloud has no points")
    return cloud


def apply(transform: RigidTransform, points: ArrayLike) -> Cloud:
    cloud = as_cloud(points)
    return cloud @ transform.rotation_matrix.T + transform.t


def compose(second: RigidTransform, first: RigidTransform) -> RigidTransform:
    """Transform that applies ``first`` then ``second``."""
    q = _quat_mul(second.rotation.as_array(), first.rotation.as_array())
    t = second.rotation_matrix @ first.t + second.t
    return RigidTransform(
        Quaternion.from_array(_canonical_quat_array(q)), (float(t[0]), float(t[1]), float(t[2]))
    )


def inverse(transform: RigidTransform) -> RigidTransform:
    q = transform.rotation.as_array() * np.array([1.0, -1.0, -1.0, -1.0])
    t = -(transform.rotation_matrix.T @ transform.t)
    return RigidTransform(
        Quaternion.from_array(_canonical_quat_array(q)), (float(t[0]), float(t[1]), float(t[2]))
    )


def _as_vector(values: ArrayLike, size: int) -> FloatArray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (size,):
        raise ShapeMismatch(f"expected a {size}-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch("vector has non-finite components")
    return arr


def vec7_to_transform(vec: ArrayLike) -> RigidTransform:
    v = _as_vector(vec, 7)
    q = Quaternion.from_array(_canonical_quat_array(v[:4]))
    return RigidTransform(q, (float(v[4]), float(v[5]), float(v[6])))


def transform_to_vec7(transform: RigidTransform) -> TransformVec7:
    return np.concatenate([transform.rotation.as_array(), transform.t])


# ----------------------------------------------------------------------
# Euler angles (intrinsic Z-Y-X: R = Rz(yaw) Ry(pitch) Rx(roll))
# ----------------------------------------------------------------------
def _rz(a: float) -> FloatArray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a: float) -> FloatArray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(a: float) -> FloatArray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _drz(a: float) -> FloatArray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def _dry(a: float) -> FloatArray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drx(a: float) -> FloatArray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def euler_to_matrix(angles: ArrayLike) -> FloatArray:
    yaw, pitch, roll = _as_vector(angles, 3)
    return _rz(yaw) @ _ry(pitch) @ _rx(roll)


def _euler_partials(angles: FloatArray) -> FloatArray:
    yaw, pitch, roll = angles
    rz, ry, rx = _rz(yaw), _ry(pitch), _rx(roll)
    return np.stack([_drz(yaw) @ ry @ rx, rz @ _dry(pitch) @ rx, rz @ ry @ _drx(roll)])


def matrix_to_euler(rotation: ArrayLike, *, strict: bool = True) -> FloatArray:
    """(yaw, pitch, roll) in radians; raises GimbalLock near pitch = +-pi/2 when strict."""
    R = np.asarray(rotation, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeMismatch(f"expected a 3x3 rotation, got {R.shape}")
    pitch = math.asin(min(1.0, max(-1.0, -R[2, 0])))
    if abs(abs(pitch) - math.pi / 2.0) < GIMBAL_EPS:
        if strict:
            raise GimbalLock(f"pitch {pitch:.9f} rad is at gimbal lock")
        # roll is folded into yaw
        return np.array([math.atan2(-R[0, 1], R[1, 1]), pitch, 0.0])
    return np.asarray(Rotation.from_matrix(R).as_euler("ZYX"), dtype=np.float64)


def euler_to_vec6(transform: RigidTransform) -> FloatArray:
    """Z-Y-X Euler angles and translation of ``transform`` as a 6-vector."""
    return np.concatenate([matrix_to_euler(transform.rotation_matrix), transform.t])


def vec6_to_transform(vec: ArrayLike) -> RigidTransform:
    v = _as_vector(vec, 6)
    if abs(abs(v[1]) - math.pi / 2.0) < GIMBAL_EPS:
        raise GimbalLock(f"pitch {v[1]:.9f} rad is at gimbal lock")
    return RigidTransform.from_rt(euler_to_matrix(v[:3]), v[3:])


def random_transform(
    rng: np.random.Generator, rot_max_deg: float, trans_max: float
) -> RigidTransform:
    """Euler angles uniform in [0, rot_max_deg], translation components in [0, trans_max]."""
    if not 0.0 <= rot_max_deg < 180.0:
        raise BadRange(f"rot_max_deg must lie in [0, 180), got {rot_max_deg}")
    if not trans_max >= 0.0:
        raise BadRange(f"trans_max must be non-negative, got {trans_max}")
    angles = np.deg2rad(rng.uniform(0.0, rot_max_deg, size=3))
    translation = rng.uniform(0.0, trans_max, size=3)
    return RigidTransform.from_rt(euler_to_matrix(angles), translation)


# ----------------------------------------------------------------------
# Weighted Kabsch
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class KabschSolution:
    """Closed-form fit plus the intermediates its backward pass needs."""

    rotation: FloatArray
    translation: FloatArray
    u: FloatArray
    singular_values: FloatArray
    vt: FloatArray
    det_sign: float
    mean_src: FloatArray
    mean_dst: FloatArray
    weights: FloatArray
    weight_sum: float

    def transform(self) -> RigidTransform:
        return RigidTransform.from_rt(self.rotation, self.translation)


def solve_kabsch(
    src: ArrayLike, dst: ArrayLike, weights: ArrayLike | None = None
) -> KabschSolution:
    source = as_cloud(src)
    target = as_cloud(dst)
    n = source.shape[0]
    if target.shape[0] != n:
        raise ShapeMismatch(f"src has {n} points but dst has {target.shape[0]}")
    if weights is None:
        raw = np.ones(n)
    else:
        raw = np.asarray(weights, dtype=np.float64).reshape(-1)
        if raw.shape != (n,):
            raise ShapeMismatch(f"expected {n} weights, got {raw.shape}")
        if np.any(raw < 0.0) or not np.all(np.isfinite(raw)):
            raise BadRange("weights must be finite and non-negative")
    total = float(raw.sum())
    if total <= 1e-12:
        raise WeightUnderflow(f"weights sum to {total:.3g}")
    if n < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {n}")
    w = raw / total
    mean_src = w @ source
    mean_dst = w @ target
    centered = source - mean_src
    spread = np.linalg.svd(centered * np.sqrt(w)[:, None], compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateGeometry("source points are collinear or coincident")
    H = (centered * w[:, None]).T @ (target - mean_dst)
    u, s, vt = np.linalg.svd(H)
    det_sign = 1.0 if np.linalg.det(vt.T @ u.T) >= 0.0 else -1.0
    R = vt.T @ np.diag([1.0, 1.0, det_sign]) @ u.T
    t = mean_dst - R @ mean_src
    return KabschSolution(R, t, u, s, vt, det_sign, mean_src, mean_dst, w, total)


def kabsch(
    src: ArrayLike, dst: ArrayLike, weights: ArrayLike | None = None
) -> RigidTransform:
    """Rigid transform minimizing sum_i w_i |R src_i + t - dst_i|^2."""
    return solve_kabsch(src, dst, weights).transform()


def kabsch_backward(
    solution: KabschSolution,
    src: Cloud,
    dst: Cloud,
    grad_rotation: FloatArray,
    grad_translation: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    """Gradients of a loss on (R, t) with respect to ``dst`` and the raw weights."""
    R = solution.rotation
    w = solution.weights
    # t = mu_dst - R mu_src also depends on R
    g_rot = grad_rotation - np.outer(grad_translation, solution.mean_src)
    # R is the special-orthogonal polar factor of H^T = R K with K = U diag(lam) U^T
    lam = solution.singular_values * np.array([1.0, 1.0, solution.det_sign])
    denom = lam[:, None] + lam[None, :]
    denom = np.where(np.abs(denom) < 1e-12, np.copysign(1e-12, denom), denom)
    u = solution.u
    y = u.T @ R.T @ g_rot @ u
    w_mat = u @ (y / denom) @ u.T
    grad_h = (R @ (w_mat - w_mat.T)).T

    centered_src = src - solution.mean_src
    grad_dst = w[:, None] * (centered_src @ grad_h) + w[:, None] * grad_translation
    # d/dw_bar_k of H = src_k dst_k^T - mu_s mu_d^T and of t = mu_d - R mu_s
    g_wbar = (
        np.einsum("ki,ij,kj->k", src, grad_h, dst)
        - src @ (grad_h @ solution.mean_dst)
        - dst @ (grad_h.T @ solution.mean_src)
        + dst @ grad_translation
        - src @ (R.T @ grad_translation)
    )
    grad_weights = (g_wbar - w @ g_wbar) / solution.weight_sum
    return grad_dst, grad_weights


# ----------------------------------------------------------------------
# Diffusion-vector codecs
# ----------------------------------------------------------------------
def _hat(v: FloatArray) -> FloatArray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _vee(m: FloatArray) -> FloatArray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


class TransformCodec:
    """Maps rigid transforms to the real vectors the diffusion runs on."""

    name: str = ""
    dim: int = 0

    def encode(self, transform: RigidTransform) -> FloatArray:
        raise NotImplementedError

    def decode(self, vec: ArrayLike) -> RigidTransform:
        raise NotImplementedError

    def decode_grad(
        self, vec: FloatArray, grad_rotation: FloatArray, grad_translation: FloatArray
    ) -> FloatArray:
        """Pull a gradient on decode(vec)'s (R, t) back onto ``vec``."""
        raise NotImplementedError

    def rotation_tangent(self, transform: RigidTransform) -> FloatArray:
        """d(rotation part of encode) / d(omega) for perturbations R exp([omega]x)."""
        raise NotImplementedError

    def tangent_grad(
        self, transform: RigidTransform, grad_vec: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        """A (dL/dR, dL/dt) pair equivalent to ``grad_vec`` on encode(transform)."""
        R = transform.rotation_matrix
        k = self.dim - 3
        g_omega = self.rotation_tangent(transform).T @ grad_vec[:k]
        return R @ (0.5 * _hat(g_omega)), np.array(grad_vec[k:], dtype=np.float64)


class QuaternionCodec(TransformCodec):
    name = "quat7"
    dim = 7

    def encode(self, transform: RigidTransform) -> FloatArray:
        return transform_to_vec7(transform)

    def decode(self, vec: ArrayLike) -> RigidTransform:
        return vec7_to_transform(vec)

    def decode_grad(
        self, vec: FloatArray, grad_rotation: FloatArray, grad_translation: FloatArray
    ) -> FloatArray:
        q = np.asarray(vec[:4], dtype=np.float64)
        n2 = float(q @ q)
        if n2 <= QUAT_EPS**2:
            raise DegenerateQuaternion(f"quaternion norm {math.sqrt(n2):.3g} is too small")
        quad = _quat_quadratic(q)
        partials = _quat_quadratic_partials(q) / n2 - 2.0 * q[:, None, None] * quad / n2**2
        g_q = np.einsum("kij,ij->k", partials, grad_rotation)
        return np.concatenate([g_q, grad_translation])

    def rotation_tangent(self, transform: RigidTransform) -> FloatArray:
        w, x, y, z = transform.rotation.as_array()
        left = np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])
        return 0.5 * left[:, 1:]


class EulerCodec(TransformCodec):
    name = "euler6"
    dim = 6

    def encode(self, transform: RigidTransform) -> FloatArray:
        return euler_to_vec6(transform)

    def decode(self, vec: ArrayLike) -> RigidTransform:
        return vec6_to_transform(vec)

    def decode_grad(
        self, vec: FloatArray, grad_rotation: FloatArray, grad_translation: FloatArray
    ) -> FloatArray:
        partials = _euler_partials(np.asarray(vec[:3], dtype=np.float64))
        g_angles = np.einsum("kij,ij->k", partials, grad_rotation)
        return np.concatenate([g_angles, grad_translation])

    def rotation_tangent(self, transform: RigidTransform) -> FloatArray:
        angles = matrix_to_euler(transform.rotation_matrix)
        R = euler_to_matrix(angles)
        to_omega = np.stack([_vee(R.T @ d) for d in _euler_partials(angles)], axis=1)
        return np.asarray(np.linalg.inv(to_omega))


QUAT7 = QuaternionCodec()
EULER6 = EulerCodec()
CODECS: dict[str, TransformCodec] = {QUAT7.name: QUAT7, EULER6.name: EULER6}


def codec_for(name: str) -> TransformCodec:
    try:
        return CODECS[name]
    except KeyError as exc:
        known = sorted(CODECS)
        raise BadRange(f"unknown representation {name!r}; expected one of {known}") from exc


# ----------------------------------------------------------------------
# Transform files: one "qw qx qy qz tx ty tz" record per line
# ----------------------------------------------------------------------
def save_transforms(path: str | Path, transforms: Iterable[RigidTransform]) -> None:
    lines = [" ".join(repr(float(v)) for v in transform_to_vec7(g)) for g in transforms]
    try:
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_transforms(path: str | Path) -> list[RigidTransform]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    transforms: list[RigidTransform] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 7:
            raise ParseError(str(path), line_no, f"expected 7 values, got {len(fields)}")
        try:
            values = [float(field) for field in fields]
            transforms.append(vec7_to_transform(values))
        except (ValueError, ShapeMismatch, DegenerateQuaternion) as exc:
            raise ParseError(str(path), line_no, str(exc)) from exc
    return transforms


__all__ = [
    "Quaternion",
    "RigidTransform",
    "TransformVec7",
    "Cloud",
    "quat_normalize",
    "quat_to_matrix",
    "matrix_to_quat",
    "as_cloud",
    "apply",
    "compose",
    "inverse",
    "vec7_to_transform",
    "transform_to_vec7",
    "euler_to_matrix",
    "matrix_to_euler",
    "euler_to_vec6",
    "vec6_to_transform",
    "random_transform",
    "KabschSolution",
    "solve_kabsch",
    "kabsch",
    "kabsch_backward",
    "TransformCodec",
    "QuaternionCodec",
    "EulerCodec",
    "QUAT7",
    "EULER6",
    "codec_for",
    "save_transforms",
    "load_transforms",
]
