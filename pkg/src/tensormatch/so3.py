"""Unit quaternions, Haar sampling of SO(3) and rotation of volumes.

Quaternions are ``(a, b, c, d)`` with ``a`` the real part, stored as float
arrays of shape ``(4,)`` or ``(N, 4)``. ``q`` and ``-q`` are the same rotation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, MissingFileError, VolumeFormatError
from .grid import VolumeGrid

UNIT_TOL = 1e-12


@dataclass(frozen=True)
class UnitQuaternion:
    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        n = self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d
        if abs(n - 1.0) > 1e-9:
            raise ConfigurationError(f"quaternion is not unit norm (|q|^2 = {n})")

    @classmethod
    def from_array(cls, q, normalize: bool = False) -> "UnitQuaternion":
        q = np.asarray(q, dtype=np.float64)
        if normalize:
            q = q / np.linalg.norm(q)
        return cls(*(float(x) for x in q))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    def canonical(self) -> "UnitQuaternion":
        return UnitQuaternion.from_array(canonicalize(self.as_array()))

    def conj(self) -> "UnitQuaternion":
        return UnitQuaternion(self.a, -self.b, -self.c, -self.d)

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return UnitQuaternion.from_array(quat_multiply(self.as_array(), other.as_array()), normalize=True)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self)


def _as_quat_array(q) -> np.ndarray:
    if isinstance(q, UnitQuaternion):
        return q.as_array()
    return np.asarray(q, dtype=np.float64)


def canonicalize(q) -> np.ndarray:
    """Antipodal representative with ``a >= 0`` (first nonzero entry positive on ties)."""
    q = np.array(_as_quat_array(q), dtype=np.float64)
    flat = q.reshape(-1, 4)
    for row in flat:
        nz = np.flatnonzero(row)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return flat.reshape(q.shape)


def quat_multiply(p, q) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    p, q = _as_quat_array(p), _as_quat_array(q)
    a1, b1, c1, d1 = np.moveaxis(p, -1, 0)
    a2, b2, c2, d2 = np.moveaxis(q, -1, 0)
    return np.stack([
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    q = _as_quat_array(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix (or ``(N, 3, 3)`` stack) of unit quaternion(s)."""
    q = _as_quat_array(q)
    norms = np.sum(q * q, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ConfigurationError("quat_to_matrix requires unit quaternions")
    a, b, c, d = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (c * c + d * d), 2 * (b * c - a * d), 2 * (b * d + a * c),
        2 * (b * c + a * d), 1 - 2 * (b * b + d * d), 2 * (c * d - a * b),
        2 * (b * d - a * c), 2 * (c * d + a * b), 1 - 2 * (b * b + c * c),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def angular_distance(p, q) -> float:
    """Rotation angle (radians) between two unit quaternions, sign-blind."""
    dot = abs(float(np.dot(_as_quat_array(p), _as_quat_array(q))))
    return 2.0 * math.acos(min(1.0, dot))


def rng_for(seed: int) -> np.random.Generator:
    # Philox is counter-based, so streams are reproducible across platforms.
    return np.random.Generator(np.random.Philox(int(seed)))


def random_unit_quaternions(n: int, seed: int) -> np.ndarray:
    g = rng_for(seed).standard_normal((n, 4))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(eq=False)
class RotationSet:
    quats: np.ndarray
    weights: np.ndarray
    seed: int | None = None
    kind: str = "haar_random"

    def __post_init__(self):
        self.quats = np.atleast_2d(np.asarray(self.quats, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.quats.ndim != 2 or self.quats.shape[1] != 4 or len(self.quats) == 0:
            raise ConfigurationError(f"rotation set needs a nonempty (N, 4) array, got {self.quats.shape}")
        if self.weights.shape != (len(self.quats),) or np.any(self.weights <= 0):
            raise ConfigurationError("rotation weights must be positive, one per quaternion")
        if np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1.0) > 1e-9):
            raise ConfigurationError("rotation set contains non-unit quaternions")
        if self.kind not in ("haar_random", "grid"):
            raise ConfigurationError(f"unknown rotation set kind {self.kind!r}")

    def __len__(self):
        return len(self.quats)

    @classmethod
    def uniform(cls, quats, seed=None, kind="grid") -> "RotationSet":
        quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
        return cls(quats, np.full(len(quats), 1.0 / len(quats)), seed, kind)

    def with_identity_first(self) -> "RotationSet":
        quats = np.vstack([[1.0, 0.0, 0.0, 0.0], self.quats[1:]])
        return RotationSet(quats, self.weights, self.seed, self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "quats": self.quats.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RotationSet":
        try:
            quats = np.asarray(d["quats"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeFormatError(f"malformed rotation set: {exc}") from exc
        if quats.ndim != 2 or quats.shape[1] != 4:
            raise VolumeFormatError(f"rotation set quats must be (N, 4), got {quats.shape}")
        # Files may carry rounded values; renormalize before validation.
        quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
        return cls.uniform(quats, d.get("seed"), d.get("kind", "grid"))


def sample_haar(n: int, seed: int) -> RotationSet:
    """``n`` i.i.d. Haar-uniform rotations (normalized 4-D Gaussians)."""
    if n < 1:
        raise ConfigurationError(f"need at least one rotation, got {n}")
    return RotationSet(random_unit_quaternions(n, seed), np.full(n, 1.0 / n), int(seed), "haar_random")


def write_rotation_set(rots: RotationSet, path) -> None:
    Path(path).write_text(json.dumps(rots.to_dict()))


def read_rotation_set(path) -> RotationSet:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"missing rotation set {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed rotation set {p}: {exc}") from exc
    return RotationSet.from_dict(d)


def _centered_coords(shape) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) - n // 2 for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)


def rotate_array(t: np.ndarray, q, radius: float | None = None) -> np.ndarray:
    """``t_R(z) = t(Mᵀ z)`` about the centre voxel, trilinear, zero outside.

    With ``radius`` set, ``t`` must vanish beyond it and only output voxels
    that can see its support are interpolated.
    """
    return rotate_many(t, np.asarray(_as_quat_array(q))[None], radius)[0].reshape(t.shape)


def _support(shape, radius):
    z = _centered_coords(shape)
    if radius is None:
        return z, None
    # Trilinear reads reach at most sqrt(3) voxels inward.
    keep = np.flatnonzero(np.sum(z * z, axis=0) <= (radius + math.sqrt(3.0)) ** 2)
    return z[:, keep], keep


def rotate_many(t: np.ndarray, quats: np.ndarray, radius: float | None = None) -> np.ndarray:
    """Rotations of ``t`` for each quaternion, flattened: shape ``(N, t.size)``."""
    z, keep = _support(t.shape, radius)
    center = np.array([n // 2 for n in t.shape], dtype=np.float64)[:, None]
    out = np.zeros((len(quats), t.size))
    mats = quat_to_matrix(quats)
    for i, m in enumerate(mats):
        if np.array_equal(m, np.eye(3)):
            out[i] = t.ravel()
            continue
        vals = ndimage.map_coordinates(t, m.T @ z + center, order=1, mode="constant",
                                       cval=0.0, prefilter=False)
        if keep is None:
            out[i] = vals
        else:
            out[i, keep] = vals
    return out


def rotate_volume(t: VolumeGrid, q) -> VolumeGrid:
    """Rotated copy ``t_R`` of a centre-origin volume."""
    if not t.center_origin:
        raise ConfigurationError("rotate_volume needs a centre-origin volume")
    if any(n % 2 == 0 for n in t.dims):
        raise ConfigurationError(f"rotate_volume needs odd dims, got {t.dims}")
    return t.like(rotate_array(t.data, q))
