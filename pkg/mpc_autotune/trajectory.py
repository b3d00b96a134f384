"""Task-space reference shapes sampled by a progress variable phi = t / duration."""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .dynamics import rpy_to_matrix


class ShapeKind(str, Enum):
    SQUARE = "square"
    HEXAGON = "hexagon"
    CIRCLE = "circle"


_SIDES = {ShapeKind.SQUARE: 4, ShapeKind.HEXAGON: 6}


class ShapeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ShapeKind = ShapeKind.HEXAGON
    size: float = Field(default=0.10, gt=0, description="side length (polygons) or radius (circle), m")
    center: tuple[float, float, float] | None = Field(
        default=None, description="None: placed at the episode's initial end-effector position"
    )
    plane_rpy: tuple[float, float, float] = Field(
        default=(0.0, 0.0, 0.0), description="rotation of the drawing plane; identity is the world xy-plane"
    )
    duration: float = Field(default=30.0, gt=0, description="s")
    orientation_rpy: tuple[float, float, float] | None = Field(
        default=None, description="fixed R_des; None holds the episode's initial orientation"
    )

    @property
    def origin(self) -> np.ndarray:
        return np.zeros(3) if self.center is None else np.asarray(self.center, dtype=float)

    @property
    def plane_rotation(self) -> np.ndarray:
        return rpy_to_matrix(np.array(self.plane_rpy))

    @property
    def R_des(self) -> np.ndarray:
        return _geometry(self).R_des

    def vertices(self) -> np.ndarray:
        """Polygon vertices in order; the first is where phi = 0 starts."""
        sides = _SIDES[self.kind]
        circumradius = self.size / (2.0 * np.sin(np.pi / sides))
        angles = 2.0 * np.pi * np.arange(sides) / sides
        local = np.stack([np.cos(angles), np.sin(angles), np.zeros(sides)], axis=1) * circumradius
        return self.origin + local @ self.plane_rotation.T

    def perimeter(self) -> float:
        if self.kind is ShapeKind.CIRCLE:
            return 2.0 * np.pi * self.size
        return _SIDES[self.kind] * self.size

    def start_point(self) -> np.ndarray:
        return sample_reference(self, 0.0).p_des


@dataclass(frozen=True, eq=False)
class ReferenceSample:
    p_des: np.ndarray
    R_des: np.ndarray
    v_des: np.ndarray


@dataclass(frozen=True, eq=False)
class _Geometry:
    origin: np.ndarray
    rotation: np.ndarray
    R_des: np.ndarray
    speed: float
    starts: np.ndarray | None
    edges: np.ndarray | None
    directions: np.ndarray | None


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=64)
def _geometry(spec: ShapeSpec) -> _Geometry:
    R_des = _readonly(rpy_to_matrix(np.array(spec.orientation_rpy or (0.0, 0.0, 0.0))))
    speed = spec.perimeter() / spec.duration
    if spec.kind is ShapeKind.CIRCLE:
        return _Geometry(spec.origin, spec.plane_rotation, R_des, speed, None, None, None)
    starts = spec.vertices()
    edges = np.roll(starts, -1, axis=0) - starts
    directions = edges / np.linalg.norm(edges, axis=1, keepdims=True)
    return _Geometry(
        spec.origin, spec.plane_rotation, R_des, speed,
        _readonly(starts), _readonly(edges), _readonly(directions),
    )


def _positions_and_velocities(spec: ShapeSpec, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions and velocities at each progress value in ``phi``, shape (M, 3)."""
    geo = _geometry(spec)
    if spec.kind is ShapeKind.CIRCLE:
        angle = 2.0 * np.pi * phi
        zeros = np.zeros_like(angle)
        local = spec.size * np.stack([np.cos(angle), np.sin(angle), zeros], axis=1)
        tangent = np.stack([-np.sin(angle), np.cos(angle), zeros], axis=1)
        return geo.origin + local @ geo.rotation.T, geo.speed * (tangent @ geo.rotation.T)
    sides = len(geo.starts)
    position = phi * sides
    edge = np.minimum(np.floor(position).astype(int), sides - 1)
    frac = (position - edge)[:, None]
    return geo.starts[edge] + frac * geo.edges[edge], geo.speed * geo.directions[edge]


def sample_reference(spec: ShapeSpec, t: float) -> ReferenceSample:
    if not 0.0 <= t <= spec.duration:
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    p, v = _positions_and_velocities(spec, np.array([t / spec.duration]))
    return ReferenceSample(p_des=p[0], R_des=_geometry(spec).R_des, v_des=v[0])


def trajectory_to_ocp_references(spec: ShapeSpec, t0: float, N: int, dt: float) -> list[ReferenceSample]:
    """N + 1 samples at t0, t0 + dt, ...; times past the end clamp to the final point."""
    times = np.clip(t0 + dt * np.arange(N + 1), 0.0, spec.duration)
    p, v = _positions_and_velocities(spec, times / spec.duration)
    R_des = _geometry(spec).R_des
    return [ReferenceSample(p_des=p[k], R_des=R_des, v_des=v[k]) for k in range(N + 1)]


def with_orientation(spec: ShapeSpec, R: np.ndarray) -> ShapeSpec:
    """Copy of ``spec`` holding ``R`` as the fixed reference orientation."""
    return spec.model_copy(update={"orientation_rpy": tuple(float(a) for a in matrix_to_rpy(R))})


def anchored_at(spec: ShapeSpec, point: np.ndarray) -> ShapeSpec:
    """Copy of ``spec`` translated so that its starting point is ``point``."""
    shift = np.asarray(point) - spec.start_point()
    return spec.model_copy(update={"center": tuple(float(c) for c in spec.origin + shift)})


def matrix_to_rpy(R: np.ndarray) -> np.ndarray:
    pitch = np.arcsin(-np.clip(R[2, 0], -1.0, 1.0))
    if abs(np.cos(pitch)) > 1e-9:
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
    else:
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    return np.array([roll, pitch, yaw])
