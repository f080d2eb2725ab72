"""Camera model and random tours through the scene.

Conventions shared with the rasterizer:

- World frame is z up. Camera frame is x right, y down, z forward.
- A pose stores the camera center and a unit quaternion (scalar last,
  ``x, y, z, w``) rotating world vectors into the camera frame, so
  ``p_cam = R @ (p_world - position)``.
- Image origin is the top-left corner, x to the right, y down. Pixel
  ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` and its center is
  ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from synthpan.scene import FreeSpace

TOUR_FORMAT = "synthpan-tour"
TOUR_VERSION = 1


class TourError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels.

    The defaults (fx = fy = 1000 px on a 1280x720 sensor, about 65 degrees
    of horizontal field of view) are a toolkit choice typical of head-worn
    cameras.
    """

    width: int = 1280
    height: int = 720
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 640.0
    cy: float = 360.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Same field of view at a different resolution."""
        return CameraIntrinsics(int(round(self.width * factor)), int(round(self.height * factor)),
                                self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "CameraIntrinsics":
        return cls(**d) if d else cls()


@dataclass(frozen=True)
class CameraPose:
    position: Tuple[float, float, float]
    orientation: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"orientation must be a unit quaternion, got {self.orientation}")

    def rotation(self) -> np.ndarray:
        """3x3 world-to-camera rotation."""
        return Rotation.from_quat(self.orientation).as_matrix()

    @classmethod
    def from_rotation(cls, position: Sequence[float], rotation: np.ndarray) -> "CameraPose":
        q = Rotation.from_matrix(rotation).as_quat()
        q = q / np.linalg.norm(q)
        if q[3] < 0:
            q = -q
        return cls(tuple(float(v) for v in position), tuple(float(v) for v in q))

    @classmethod
    def look(cls, position: Sequence[float], yaw: float, pitch: float) -> "CameraPose":
        """Camera at ``position`` facing heading ``yaw`` tilted up by ``pitch``."""
        return cls.from_rotation(position, look_rotation(yaw, pitch))


def look_rotation(yaw: float, pitch: float) -> np.ndarray:
    """World-to-camera rotation for a level-horizon camera (z-up world)."""
    cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def world_to_camera(pose: CameraPose, points: np.ndarray) -> np.ndarray:
    """Map (..., 3) world points into the camera frame."""
    points = np.asarray(points, dtype=np.float64)
    return (points - np.asarray(pose.position, dtype=np.float64)) @ pose.rotation().T


def camera_to_image(intrinsics: CameraIntrinsics, points_cam: np.ndarray) -> np.ndarray:
    """Perspective divide: (..., 3) camera points to (..., 2) pixel coordinates.

    Callers must ensure z > 0.
    """
    z = points_cam[..., 2]
    u = intrinsics.fx * points_cam[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * points_cam[..., 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1)


def project(intrinsics: CameraIntrinsics, pose: CameraPose,
            point: Sequence[float]) -> Optional[Tuple[float, float, float]]:
    """Project a world point to ``(x_pixel, y_pixel, depth)``.

    Returns None when the point is at or behind the camera plane. Depth is
    the camera-frame z coordinate.
    """
    p = world_to_camera(pose, np.asarray(point, dtype=np.float64)[None])
    if not p[0, 2] > 0:
        return None
    uv = camera_to_image(intrinsics, p)[0]
    return float(uv[0]), float(uv[1]), float(p[0, 2])


# ---------------------------------------------------------------------------
# Tours


@dataclass(frozen=True)
class TourParams:
    max_step: float = 0.5
    pitch_limit: float = math.radians(20.0)
    yaw_sigma: float = 0.5
    epoch_length: int = 5
    step_attempts: int = 64

    def __post_init__(self):
        if self.epoch_length < 1:
            raise ValueError("epoch_length must be >= 1")
        if self.pitch_limit < 0:
            raise ValueError("pitch_limit must be non-negative")


@dataclass(frozen=True)
class TourFrame:
    index: int
    pose: CameraPose
    epoch: int


@dataclass(frozen=True)
class TourPlan:
    frames: Tuple[TourFrame, ...]
    epoch_length: int = 5
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    def __len__(self):
        return len(self.frames)

    def to_json(self) -> str:
        doc = {
            "format": TOUR_FORMAT,
            "version": TOUR_VERSION,
            "epoch_length": self.epoch_length,
            "intrinsics": asdict(self.intrinsics),
            "frames": [
                {"index": f.index, "position": list(f.pose.position),
                 "quaternion": list(f.pose.orientation), "epoch": f.epoch}
                for f in self.frames
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TourPlan":
        doc = json.loads(text)
        if doc.get("format") != TOUR_FORMAT:
            raise TourError("not a tour document")
        if doc.get("version") != TOUR_VERSION:
            raise TourError(f"unsupported tour version {doc.get('version')}")
        frames = tuple(
            TourFrame(f["index"], CameraPose(tuple(f["position"]), tuple(f["quaternion"])), f["epoch"])
            for f in doc["frames"])
        return cls(frames, doc["epoch_length"], CameraIntrinsics(**doc["intrinsics"]))


def epoch_of(frame_index: int, epoch_length: int) -> int:
    return frame_index // epoch_length


def _sample_start(free_space: FreeSpace, rng: np.random.Generator) -> np.ndarray:
    rects = np.array(free_space.rectangles, dtype=np.float64)
    areas = (rects[:, 2] - rects[:, 0]) * (rects[:, 3] - rects[:, 1])
    k = rng.choice(len(rects), p=areas / areas.sum())
    x0, y0, x1, y1 = rects[k]
    lo, hi = free_space.eye_height
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), rng.uniform(lo, hi)])


def generate_tour(free_space: FreeSpace, n_frames: int, intrinsics: CameraIntrinsics = CameraIntrinsics(),
                  params: TourParams = TourParams(), rng: Optional[np.random.Generator] = None) -> TourPlan:
    """Random walk of camera poses through the free space.

    Each step proposes a point uniformly inside a ball of radius
    ``params.max_step`` around the current position and accepts it if it
    lies in the free space at eye height; after ``step_attempts`` rejections
    the camera stays put. Heading drifts by a wrapped normal increment from a
    uniform start, so every frame's yaw is uniform on [0, 2pi). Pitch is
    drawn uniformly in ``[-pitch_limit, pitch_limit]``.

    Raises:
      TourError: empty free space, ``n_frames < 1`` or non-positive
        ``max_step``.
    """
    if rng is None:
        rng = np.random.default_rng()
    if not free_space.rectangles:
        raise TourError("free space is empty")
    if n_frames < 1:
        raise TourError("n_frames must be >= 1")
    if not params.max_step > 0:
        raise TourError("max_step must be positive")

    lo, hi = free_space.eye_height
    pos = _sample_start(free_space, rng)
    yaw = rng.uniform(0.0, 2.0 * math.pi)
    frames: List[TourFrame] = []
    for i in range(n_frames):
        if i > 0:
            for _ in range(params.step_attempts):
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                cand = pos + direction * params.max_step * rng.uniform() ** (1.0 / 3.0)
                if lo <= cand[2] <= hi and free_space.contains(cand[0], cand[1]):
                    pos = cand
                    break
            yaw = (yaw + rng.normal(0.0, params.yaw_sigma)) % (2.0 * math.pi)
        pitch = rng.uniform(-params.pitch_limit, params.pitch_limit)
        pose = CameraPose.look(pos, yaw, pitch)
        frames.append(TourFrame(i, pose, epoch_of(i, params.epoch_length)))
    return TourPlan(tuple(frames), params.epoch_length, intrinsics)
