"""Pinhole camera shared by colourisation, rendering and the synthetic harness."""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from .errors import CameraError
from .geom import DTYPE, quat_to_rotmat, rotmat_to_quat


@dataclass
class Camera:
    """Rectified pinhole camera with a world-to-camera pose.

    Camera frame: +x right, +y down, +z forward. Pixel centres sit at integer
    pixel coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world-to-camera quaternion (w, x, y, z)
    translation: np.ndarray  # world-to-camera translation
    near: float = 0.01
    far: float = 1000.0
    camera_id: str = "cam0"
    frame_index: int = 0
    image_path: Optional[str] = None
    _rotmat: Optional[Tuple[bytes, np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = self.rotation / np.linalg.norm(self.rotation)

    def validate(self) -> None:
        """Raise :class:`CameraError` on unusable intrinsics or clip planes."""
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"camera {self.camera_id}: focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise CameraError(f"camera {self.camera_id}: require 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise CameraError(f"camera {self.camera_id}: image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def R(self) -> np.ndarray:
        """World-to-camera rotation matrix, recomputed whenever ``rotation`` changes."""
        rotation = np.asarray(self.rotation, dtype=np.float64)
        key = rotation.tobytes()
        if self._rotmat is None or self._rotmat[0] != key:
            self._rotmat = (key, quat_to_rotmat(torch.as_tensor(rotation, dtype=DTYPE)).numpy())
        return self._rotmat[1]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.translation

    def torch_extrinsics(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return (
            torch.as_tensor(self.R, dtype=DTYPE),
            torch.as_tensor(self.translation, dtype=DTYPE),
        )

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Project world points to pixels: ``x_p = K [R o + T]`` with perspective divide.

        Returns:
            Tuple of pixel coordinates (M, 2) and camera-frame depths (M,). Points
            with non-positive depth get NaN pixel coordinates.
        """
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        uv = np.stack((u, v), axis=1)
        uv[z <= 0] = np.nan
        return uv, z

    @classmethod
    def looking_along(
        cls,
        position: np.ndarray,
        forward: np.ndarray,
        up: np.ndarray,
        **kwargs: Any,
    ) -> "Camera":
        """Build a camera at ``position`` looking along ``forward`` with world ``up``."""
        forward = np.asarray(forward, dtype=np.float64)
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack((right, down, forward))
        t = -R @ np.asarray(position, dtype=np.float64)
        q = rotmat_to_quat(torch.as_tensor(R, dtype=DTYPE)).numpy()
        return cls(rotation=q, translation=t, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to the camera-manifest record layout."""
        return {
            "camera_id": self.camera_id,
            "frame_index": self.frame_index,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
            "rotation": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
            "image": self.image_path,
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "Camera":
        try:
            return cls(
                fx=float(record["fx"]),
                fy=float(record["fy"]),
                cx=float(record["cx"]),
                cy=float(record["cy"]),
                width=int(record["width"]),
                height=int(record["height"]),
                rotation=np.asarray(record["rotation"], dtype=np.float64),
                translation=np.asarray(record["translation"], dtype=np.float64),
                near=float(record.get("near", 0.01)),
                far=float(record.get("far", 1000.0)),
                camera_id=str(record.get("camera_id", "cam0")),
                frame_index=int(record.get("frame_index", 0)),
                image_path=record.get("image"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CameraError(f"invalid camera record: {e}") from e
