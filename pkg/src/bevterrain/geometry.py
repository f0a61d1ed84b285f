"""Rigid transforms, point clouds, and pinhole projection.

Frame conventions:

* ego frame: x forward, y left, z up (origin on the ground under the vehicle)
* camera frame: x right, y down, z forward (optical axis)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6
Z_MIN = 0.1  # near plane of the camera frustum, meters


class FrameError(ValueError):
    """Raised when a transform is applied to data in the wrong frame."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps points expressed in ``from_frame`` into ``to_frame``: p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str = "src"
    to_frame: str = "dst"

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, from_frame: str = "src", to_frame: str | None = None) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), from_frame, from_frame if to_frame is None else to_frame)

    @classmethod
    def from_matrix(cls, m, from_frame: str = "src", to_frame: str = "dst") -> "RigidTransform":
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3], from_frame, to_frame)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0), from_frame="src", to_frame="dst"):
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, translation, from_frame, to_frame)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points. No frame checking."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def relabel(self, from_frame: str | None = None, to_frame: str | None = None) -> "RigidTransform":
        return RigidTransform(
            self.rotation,
            self.translation,
            self.from_frame if from_frame is None else from_frame,
            self.to_frame if to_frame is None else to_frame,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self):
        return (
            f"RigidTransform({self.from_frame!r}->{self.to_frame!r}, "
            f"R={self.rotation.tolist()}, t={self.translation.tolist()})"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return a∘b, which maps b.from_frame to a.to_frame."""
    if a.from_frame != b.to_frame:
        raise FrameError(
            f"cannot compose: left transform expects frame {a.from_frame!r}, "
            f"right transform produces frame {b.to_frame!r}"
        )
    return RigidTransform(
        a.rotation @ b.rotation,
        a.rotation @ b.translation + a.translation,
        b.from_frame,
        a.to_frame,
    )


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation, t.to_frame, t.from_frame)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points (meters) with per-point intensity in [0, 1]."""

    points: np.ndarray
    intensity: np.ndarray = None
    frame: str = "ego"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is None:
            inten = np.zeros(len(pts))
        else:
            inten = np.array(self.intensity, dtype=np.float64).reshape(-1)
        if len(inten) != len(pts):
            raise ValueError(f"intensity has {len(inten)} values for {len(pts)} points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        inten = np.clip(np.nan_to_num(inten, nan=0.0), 0.0, 1.0)
        pts.setflags(write=False)
        inten.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return len(self.points)

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.points[mask_or_index], self.intensity[mask_or_index], self.frame)

    @classmethod
    def empty(cls, frame: str = "ego") -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), frame)


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_from_ego: RigidTransform = field(default_factory=lambda: RigidTransform.identity("ego", "camera"))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def transform_points(t: RigidTransform, pc: PointCloud) -> PointCloud:
    if pc.frame != t.from_frame:
        raise FrameError(f"cloud is in frame {pc.frame!r} but transform expects {t.from_frame!r}")
    return PointCloud(t.apply(pc.points), pc.intensity, t.to_frame)


@dataclass(frozen=True, eq=False)
class Projection:
    """Result of projecting a camera-frame cloud: indices of visible points and their pixels."""

    index: np.ndarray
    u: np.ndarray
    v: np.ndarray
    excluded: int

    def __len__(self):
        return len(self.index)

    def __iter__(self):
        return iter(zip(self.index.tolist(), self.u.tolist(), self.v.tolist()))


def project_points(cam: CameraModel, pc_cam: PointCloud, z_min: float = Z_MIN) -> Projection:
    """Pinhole projection of points already expressed in the camera frame.

    Points with z <= z_min or landing outside [0, width) x [0, height) are dropped;
    ``excluded`` counts them.
    """
    p = pc_cam.points
    z = p[:, 2]
    front = z > z_min
    zs = np.where(front, z, 1.0)
    u = cam.fx * p[:, 0] / zs + cam.cx
    v = cam.fy * p[:, 1] / zs + cam.cy
    keep = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.flatnonzero(keep)
    return Projection(idx, u[idx], v[idx], int(len(p) - len(idx)))


def pixel_index(coord: np.ndarray, size: int) -> np.ndarray:
    """Nearest pixel index for continuous coordinates, rounding halves down.

    Pixel i is centered on coordinate i, so it covers (i - 0.5, i + 0.5].
    """
    idx = np.ceil(np.asarray(coord, dtype=np.float64) - 0.5).astype(np.int64)
    return np.clip(idx, 0, size - 1)
