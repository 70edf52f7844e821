"""Scene and camera manifests (JSON)."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from .camera import Camera
from .errors import CameraError, ManifestError


logger = logging.getLogger(__name__)

SCENE_FORMAT = "ogg-scene-manifest/1"
CAMERA_FORMAT = "ogg-cameras/1"

PathLike = Union[str, Path]


def read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: top level must be an object")
    return data


def write_json(path: PathLike, data: Dict[str, Any]) -> None:
    """Write JSON with sorted keys and a trailing newline (byte-stable)."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class CameraManifest:
    """Every posed camera of a sequence, in file order."""

    cameras: List[Camera] = field(default_factory=list)

    @classmethod
    def load(cls, path: PathLike) -> "CameraManifest":
        path = Path(path)
        data = read_json(path)
        records = data.get("cameras")
        if not isinstance(records, list):
            raise ManifestError(f"{path}: 'cameras' must be a list")
        cameras = []
        for i, record in enumerate(records):
            try:
                camera = Camera.from_dict(record)
                camera.validate()
            except CameraError as e:
                raise ManifestError(f"{path}: camera record {i}: {e}") from e
            cameras.append(camera)
        return cls(cameras=cameras)

    def write(self, path: PathLike) -> None:
        write_json(path, {"format": CAMERA_FORMAT, "cameras": [c.to_dict() for c in self.cameras]})

    def by_frame(self) -> Dict[int, List[Camera]]:
        frames: Dict[int, List[Camera]] = {}
        for camera in self.cameras:
            frames.setdefault(camera.frame_index, []).append(camera)
        return frames

    def select(self, frames: Sequence[int]) -> List[Camera]:
        wanted = set(frames)
        return [c for c in self.cameras if c.frame_index in wanted]


@dataclass
class SceneManifest:
    """Inputs of one driving sequence.

    Paths in the file are relative to the manifest's directory.
    """

    root: Path
    frame_count: int
    grid_paths: List[Path]
    camera_path: Path
    image_dir: Path
    class_names: List[str]
    sfm_path: Optional[Path] = None
    mask_dir: Optional[Path] = None
    world: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path: PathLike) -> "SceneManifest":
        """Parse and validate a scene manifest.

        Raises:
            ManifestError: If a field is missing, a path does not exist or
                frame indices are not contiguous.
        """
        path = Path(path)
        data = read_json(path)
        root = path.parent
        try:
            frame_count = int(data["frame_count"])
            grids = [root / p for p in data["grids"]]
            manifest = cls(
                root=root,
                frame_count=frame_count,
                grid_paths=grids,
                camera_path=root / data["cameras"],
                image_dir=root / data.get("images", "."),
                class_names=[str(name) for name in data["classes"]],
                sfm_path=root / data["sfm"] if data.get("sfm") else None,
                mask_dir=root / data["masks"] if data.get("masks") else None,
                world=dict(data.get("world", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: missing or invalid field: {e}") from e
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if self.frame_count < 1:
            raise ManifestError("frame_count must be at least 1")
        if len(self.grid_paths) != self.frame_count:
            raise ManifestError(f"{len(self.grid_paths)} grid files for {self.frame_count} frames")
        if not self.class_names:
            raise ManifestError("class table is empty")
        for p in [*self.grid_paths, self.camera_path, self.image_dir]:
            if not p.exists():
                raise ManifestError(f"referenced path does not exist: {p}")
        for p in (self.sfm_path, self.mask_dir):
            if p is not None and not p.exists():
                raise ManifestError(f"referenced path does not exist: {p}")

    def load_cameras(self) -> CameraManifest:
        """Load the camera manifest and check that frames are contiguous."""
        cameras = CameraManifest.load(self.camera_path)
        frames = sorted(cameras.by_frame())
        if frames != list(range(self.frame_count)):
            raise ManifestError(
                f"camera frames {frames[:3]}...{frames[-3:]} are not contiguous over {self.frame_count} frames"
            )
        return cameras

    def image_path(self, camera: Camera) -> Path:
        if not camera.image_path:
            raise ManifestError(f"camera {camera.camera_id} frame {camera.frame_index} has no image")
        return self.root / camera.image_path

    def mask_path(self, camera: Camera) -> Optional[Path]:
        if self.mask_dir is None or not camera.image_path:
            return None
        candidate = self.mask_dir / Path(camera.image_path).name
        return candidate if candidate.exists() else None

    def class_ids(self, names: Sequence[str]) -> List[int]:
        """Class indices of ``names``.

        Raises:
            ManifestError: If a name is not in the class table.
        """
        ids = []
        for name in names:
            if name not in self.class_names:
                raise ManifestError(f"class {name!r} not in class table {self.class_names}")
            ids.append(self.class_names.index(name))
        return ids

    def to_dict(self) -> Dict[str, Any]:
        def rel(p: Optional[Path]) -> Optional[str]:
            return None if p is None else p.relative_to(self.root).as_posix()

        return {
            "format": SCENE_FORMAT,
            "frame_count": self.frame_count,
            "grids": [rel(p) for p in self.grid_paths],
            "cameras": rel(self.camera_path),
            "images": rel(self.image_dir),
            "sfm": rel(self.sfm_path),
            "masks": rel(self.mask_dir),
            "classes": list(self.class_names),
            "world": self.world,
        }

    def write(self, path: PathLike) -> None:
        write_json(path, self.to_dict())
