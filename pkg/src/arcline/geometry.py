"""Rigid transforms, laser lines and curvilinear transducer geometry.

Units are millimeters and radians throughout. Degrees only show up at the
file / command-line boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
# drift above this triggers a projection back onto SO(3)
REORTHO_DRIFT = 1e-12
# anything further than this from SO(3) is rejected outright
REJECT_DRIFT = 1e-6


def _as_vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(v)}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element acting on points as ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3) or not np.all(np.isfinite(r)):
            raise ValueError("rotation must be a finite 3x3 matrix")
        drift = np.linalg.norm(r.T @ r - np.eye(3))
        if drift > REJECT_DRIFT or np.linalg.det(r) <= 0:
            raise ValueError(f"rotation is not orthonormal (drift {drift:.3g})")
        if drift > REORTHO_DRIFT:
            r = nearest_rotation(r)
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(_as_vec3(self.translation, "translation")))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValueError("homogeneous matrix must be 4x4 or 16 values")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("last row of a rigid homogeneous matrix must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, p) -> np.ndarray:
        """Transform a point (3,) or a stack of points (n, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation.T

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def rotation_angle_to(self, other: RigidTransform) -> float:
        """Geodesic angle (rad) between the two rotations."""
        c = (np.trace(self.rotation.T @ other.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.apply(_as_vec3(p, "p"))


def translate(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), [x, y, z])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class Line3:
    """Parameterized line ``origin + lambda * direction``."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin, "origin")
        d = _as_vec3(self.direction, "direction")
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            raise ValueError("line direction must be non-zero")
        object.__setattr__(self, "origin", _frozen(o))
        object.__setattr__(self, "direction", _frozen(d / norm))

    def transformed(self, t: RigidTransform) -> Line3:
        return Line3(t.apply(self.origin), t.apply_vector(self.direction))

    def distance_to(self, points) -> np.ndarray:
        """Orthogonal distance(s) from point(s) to the infinite line."""
        d = np.asarray(points, dtype=float) - self.origin
        perp = d - np.multiply.outer(d @ self.direction, self.direction)
        return np.linalg.norm(perp, axis=-1)


def laser_point(line: Line3, lam: float) -> np.ndarray:
    if not np.isfinite(lam):
        raise ValueError("lambda must be finite")
    return line.origin + lam * line.direction


@dataclass(frozen=True)
class TrusGeometry:
    """Curvilinear array rotating about its longitudinal (x) axis."""

    n_elements: int = 128
    pitch_mm: float = 0.3
    radius_mm: float = 10.0

    def __post_init__(self):
        if int(self.n_elements) != self.n_elements or self.n_elements < 2:
            raise ValueError("n_elements must be an integer >= 2")
        if not (self.pitch_mm > 0 and self.radius_mm > 0):
            raise ValueError("pitch_mm and radius_mm must be strictly positive")

    @property
    def half_aperture_mm(self) -> float:
        return 0.5 * (self.n_elements - 1) * self.pitch_mm


def lateral_from_index(g: TrusGeometry, index: float) -> float:
    """Lateral coordinate (mm) of element ``index`` counted from one end."""
    return (-0.5 * (g.n_elements - 1) + index) * g.pitch_mm


@dataclass(frozen=True)
class PmObservation:
    """A photoacoustic marker seen in the PA image at a given scan angle."""

    scan_angle_rad: float
    lateral_mm: float
    radius_mm: float

    def __post_init__(self):
        for name in ("scan_angle_rad", "lateral_mm", "radius_mm"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.radius_mm < 0:
            raise ValueError("radius_mm must be >= 0")


def element_position(g: TrusGeometry, theta: float, lateral_mm: float) -> np.ndarray:
    return np.array([lateral_mm, np.sin(theta) * g.radius_mm, np.cos(theta) * g.radius_mm])


def pm_position(g: TrusGeometry, obs: PmObservation, delta_theta: float = 0.0) -> np.ndarray:
    """Source position on the arc of radius ``obs.radius_mm`` around the receiving element."""
    a = obs.scan_angle_rad + delta_theta
    e = element_position(g, obs.scan_angle_rad, obs.lateral_mm)
    return e + np.array([0.0, obs.radius_mm * np.sin(a), obs.radius_mm * np.cos(a)])
