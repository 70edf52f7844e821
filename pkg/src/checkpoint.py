"""Scene checkpoints: one PLY per model plus a JSON scene file."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from .errors import ManifestError
from .geom import DTYPE, sh_coeff_count
from .manifest import read_json, write_json
from .scene import StreetGaussians, VehicleModel, _GaussianSet


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ogg-checkpoint/1"
SCENE_FILE = "scene.json"
STREET_FILE = "street.ply"

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    """A loaded scene checkpoint."""

    street: StreetGaussians
    vehicles: List[VehicleModel]
    iteration: int = 0
    class_names: List[str] = field(default_factory=list)
    vehicle_class_id: int = 0


def _vehicle_file(vehicle_id: int) -> str:
    return f"vehicle_{vehicle_id}.ply"


def _columns(prefix: str, width: int) -> List[str]:
    return [f"{prefix}_{i}" for i in range(width)]


def _write_model(path: Path, model: _GaussianSet, appearance: torch.Tensor, semantics: torch.Tensor) -> None:
    count = len(model)
    blocks = {
        "xyz": model.means.detach().reshape(count, 3),
        "rot": model.rotations.detach().reshape(count, 4),
        "scale": model.log_scales.detach().reshape(count, 3),
        "opacity": model.opacity_logits.detach().reshape(count, 1),
        "f": appearance.detach().reshape(count, -1),
        "sem": semantics.detach().reshape(count, -1),
    }
    names = ["x", "y", "z"]
    for key in ("rot", "scale", "opacity", "f", "sem"):
        names += _columns(key, blocks[key].shape[1]) if key != "opacity" else ["opacity"]
    values = torch.cat([blocks[k] for k in ("xyz", "rot", "scale", "opacity", "f", "sem")], dim=1).numpy()

    vertex = np.empty(count, dtype=[(name, "f8") for name in names])
    for i, name in enumerate(names):
        vertex[name] = values[:, i]
    PlyData([PlyElement.describe(vertex, "vertex")], byte_order="<").write(str(path))


def _read_model(path: Path) -> Dict[str, np.ndarray]:
    try:
        vertex = PlyData.read(str(path))["vertex"].data
    except Exception as e:  # plyfile raises a variety of parse errors
        raise ManifestError(f"{path}: cannot read model PLY: {e}") from e
    names = vertex.dtype.names

    def block(prefix: str) -> np.ndarray:
        cols = sorted((n for n in names if n.startswith(prefix + "_")), key=lambda n: int(n.rsplit("_", 1)[1]))
        if not cols:
            return np.zeros((len(vertex), 0))
        return np.stack([np.asarray(vertex[c], dtype=np.float64) for c in cols], axis=1)

    try:
        return {
            "means": np.stack([np.asarray(vertex[a], dtype=np.float64) for a in ("x", "y", "z")], axis=1),
            "rotations": block("rot"),
            "log_scales": block("scale"),
            "opacity_logits": np.asarray(vertex["opacity"], dtype=np.float64),
            "appearance": block("f"),
            "semantics": block("sem"),
        }
    except ValueError as e:
        raise ManifestError(f"{path}: missing model property: {e}") from e


def _tensor(array: Any) -> torch.Tensor:
    return torch.as_tensor(np.asarray(array, dtype=np.float64), dtype=DTYPE)


def save_checkpoint(
    directory: PathLike,
    street: StreetGaussians,
    vehicles: Sequence[VehicleModel],
    iteration: int = 0,
    class_names: Sequence[str] = (),
    vehicle_class_id: int = 0,
) -> Path:
    """Write the scene to ``directory`` (created if missing) and return it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    _write_model(directory / STREET_FILE, street, street.sh, street.semantic_logits)
    records = []
    for vehicle in vehicles:
        _write_model(directory / _vehicle_file(vehicle.vehicle_id), vehicle, vehicle.fourier_sh, vehicle.semantic_logits)
        records.append({
            "id": vehicle.vehicle_id,
            "file": _vehicle_file(vehicle.vehicle_id),
            "sh_degree": vehicle.sh_degree,
            "fourier_k": vehicle.fourier_k,
            "frame_count": vehicle.frame_count,
            "frozen": vehicle.frozen,
            "frames": list(vehicle.frames),
            "base_rotations": vehicle.base_rotations.detach().tolist(),
            "base_translations": vehicle.base_translations.detach().tolist(),
            "delta_rotations": vehicle.delta_rotations.detach().tolist(),
            "delta_translations": vehicle.delta_translations.detach().tolist(),
        })

    write_json(directory / SCENE_FILE, {
        "format": CHECKPOINT_FORMAT,
        "iteration": iteration,
        "classes": list(class_names),
        "vehicle_class": vehicle_class_id,
        "street": {"file": STREET_FILE, "sh_degree": street.sh_degree, "num_classes": street.num_classes},
        "vehicles": records,
    })
    logger.debug("checkpoint at iteration %d written to %s", iteration, directory)
    return directory


def load_checkpoint(directory: PathLike, requires_grad: bool = False) -> Checkpoint:
    """Load a checkpoint directory written by :func:`save_checkpoint`.

    Raises:
        ManifestError: If the scene file or a model file is missing or malformed.
    """
    directory = Path(directory)
    scene = read_json(directory / SCENE_FILE)
    if scene.get("format") != CHECKPOINT_FORMAT:
        raise ManifestError(f"{directory / SCENE_FILE}: unsupported format {scene.get('format')!r}")

    try:
        info = scene["street"]
        fields = _read_model(directory / info["file"])
        degree = int(info["sh_degree"])
        K = sh_coeff_count(degree)
        street = StreetGaussians(
            means=_tensor(fields["means"]),
            rotations=_tensor(fields["rotations"]),
            log_scales=_tensor(fields["log_scales"]),
            opacity_logits=_tensor(fields["opacity_logits"]),
            sh=_tensor(fields["appearance"]).reshape(len(fields["means"]), K, 3),
            semantic_logits=_tensor(fields["semantics"]).reshape(len(fields["means"]), int(info["num_classes"])),
            sh_degree=degree,
        )

        vehicles = []
        for record in scene["vehicles"]:
            fields = _read_model(directory / record["file"])
            degree = int(record["sh_degree"])
            K = sh_coeff_count(degree)
            vehicles.append(VehicleModel(
                vehicle_id=int(record["id"]),
                means=_tensor(fields["means"]),
                rotations=_tensor(fields["rotations"]),
                log_scales=_tensor(fields["log_scales"]),
                opacity_logits=_tensor(fields["opacity_logits"]),
                fourier_sh=_tensor(fields["appearance"]).reshape(len(fields["means"]), K, 3, int(record["fourier_k"])),
                semantic_logits=_tensor(fields["semantics"]).reshape(len(fields["means"])),
                frames=[int(t) for t in record["frames"]],
                base_rotations=_tensor(record["base_rotations"]).reshape(-1, 4),
                base_translations=_tensor(record["base_translations"]).reshape(-1, 3),
                delta_rotations=_tensor(record["delta_rotations"]).reshape(-1, 3),
                delta_translations=_tensor(record["delta_translations"]).reshape(-1, 3),
                frame_count=int(record["frame_count"]),
                sh_degree=degree,
                frozen=bool(record["frozen"]),
            ))
    except (KeyError, TypeError, RuntimeError) as e:
        raise ManifestError(f"{directory}: malformed checkpoint: {e}") from e

    if requires_grad:
        street.requires_grad_(True)
        for vehicle in vehicles:
            vehicle.requires_grad_(True)
    return Checkpoint(
        street=street,
        vehicles=vehicles,
        iteration=int(scene.get("iteration", 0)),
        class_names=list(scene.get("classes", [])),
        vehicle_class_id=int(scene.get("vehicle_class", 0)),
    )
