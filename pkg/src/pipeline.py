"""Pipeline stages behind the command-line subcommands.

Each ``cmd_*`` function validates its inputs before writing anything and
returns a result object with ``to_dict()`` for the CLI summary.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .camera import Camera
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConvertConfig, RenderConfig, SynthConfig, TrainConfig
from .errors import ManifestError, OGGaussianError, ValidationError
from .evaluation import compare_directories, write_report
from .formats import (
    read_grid,
    read_image,
    read_mask,
    read_point_cloud,
    write_depth,
    write_grid,
    write_image,
    write_labels,
    write_mask,
    write_point_cloud,
)
from .geom import DTYPE
from .harness import EvalReport, make_synthetic
from .manifest import CameraManifest, SceneManifest, read_json, write_json
from .occupancy import ObjectComponent, ObjectTrack, PointSource, PriorSet, SemanticPointCloud, build_priors
from .optim import METRICS_COLUMNS, Dataset, MetricsRow, TrainingView, train
from .render import render
from .scene import StreetGaussians, VehicleModel, assemble, init_street, init_vehicle


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TRACKS_FORMAT = "ogg-tracks/1"
STATIC_FILE = "static.ply"
TRACKS_FILE = "tracks.json"
PRIORS_DIR = "priors"
CHECKPOINTS_DIR = "checkpoints"
FINAL_DIR = "final"
METRICS_FILE = "metrics.csv"
GROUND_TRUTH_DIR = "ground_truth"
TRAJECTORIES_FILE = "trajectories.json"
CONVERT_ENV = "convert.env"


def vehicle_prior_file(vehicle_id: int) -> str:
    return f"vehicle_{vehicle_id}.ply"


def _load_views(
    manifest: SceneManifest, cameras: CameraManifest, with_masks: bool = False
) -> Dict[int, List[Tuple[Camera, np.ndarray, Optional[np.ndarray]]]]:
    views: Dict[int, List[Tuple[Camera, np.ndarray, Optional[np.ndarray]]]] = {}
    for camera in cameras.cameras:
        image = read_image(manifest.image_path(camera))
        if image.shape[:2] != (camera.height, camera.width):
            raise ManifestError(
                f"{manifest.image_path(camera)}: image is {image.shape[1]}x{image.shape[0]}, "
                f"camera expects {camera.width}x{camera.height}"
            )
        mask = None
        if with_masks:
            mask_path = manifest.mask_path(camera)
            mask = read_mask(mask_path) if mask_path is not None else None
        views.setdefault(camera.frame_index, []).append((camera, image, mask))
    return views


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

@dataclass
class ConvertResult:
    """Files written by :func:`cmd_convert`."""

    output_dir: Path
    static_path: Path
    tracks_path: Path
    vehicle_paths: List[Path] = field(default_factory=list)
    priors: Optional[PriorSet] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "output_dir": str(self.output_dir),
            "static": str(self.static_path),
            "tracks": str(self.tracks_path),
            "vehicles": [str(p) for p in self.vehicle_paths],
            "static_points": len(self.priors.static) if self.priors else 0,
            "prior_mode": self.priors.mode.value if self.priors else None,
        }


def cmd_convert(manifest_path: PathLike, config: ConvertConfig, output_dir: PathLike) -> ConvertResult:
    """Turn the occupancy grids of a sequence into point-cloud priors.

    Writes ``static.ply`` (world frame), one ``vehicle_<id>.ply`` per dynamic
    vehicle (vehicle frame, relative to its first observed centroid) and
    ``tracks.json`` with per-frame centroids and dynamic flags. With
    ``config.prior_mode`` set to ``sfm`` or ``random`` the point seeds come
    from the SfM cloud or from uniform samples instead of the occupancy cells.

    Raises:
        ManifestError: If the manifest or a referenced file is invalid.
        GridFormatError: If a grid file cannot be decoded.
    """
    config.validate()
    manifest = SceneManifest.load(manifest_path)
    cameras = manifest.load_cameras()
    vehicle_ids = manifest.class_ids(config.vehicle_class_names)
    grids = [read_grid(path) for path in manifest.grid_paths]
    for t, grid in enumerate(grids):
        if grid.num_classes != len(manifest.class_names):
            raise ManifestError(
                f"{manifest.grid_paths[t]}: {grid.num_classes} classes, manifest lists {len(manifest.class_names)}"
            )
    views = _load_views(manifest, cameras)
    sfm = read_point_cloud(manifest.sfm_path, source=PointSource.SFM) if manifest.sfm_path else None

    priors = build_priors(
        grids,
        {t: [(camera, image) for camera, image, _ in entries] for t, entries in views.items()},
        vehicle_ids,
        tau=config.tau,
        mu_th=config.mu_th,
        match_radius=config.match_radius,
        target_voxel=config.target_voxel,
        sfm=sfm,
        colorize_static=config.colorize_static,
        mode=config.prior_mode,
        random_points=config.random_points,
        seed=config.seed,
    )

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    for stale in output_dir.glob("vehicle_*.ply"):
        stale.unlink()

    static_path = output_dir / STATIC_FILE
    write_point_cloud(static_path, priors.static)

    vehicle_paths = []
    for vehicle in priors.vehicles:
        label = vehicle.track.first_component.label
        cloud = SemanticPointCloud.from_points(
            vehicle.points,
            labels=np.full(len(vehicle.points), label),
            colors=vehicle.colors,
            source=vehicle.source,
        )
        cloud.has_color = vehicle.has_color.copy()
        path = output_dir / vehicle_prior_file(vehicle.track.object_id)
        write_point_cloud(path, cloud)
        vehicle_paths.append(path)

    tracks_path = output_dir / TRACKS_FILE
    write_json(tracks_path, {
        "format": TRACKS_FORMAT,
        "prior_mode": priors.mode.value,
        "frame_count": manifest.frame_count,
        "cell_size": float(grids[0].cell_size),
        "classes": list(manifest.class_names),
        "vehicle_classes": vehicle_ids,
        "tracks": [track.to_dict() for track in priors.tracks],
    })
    logger.info("wrote priors for %d dynamic vehicles to %s", len(vehicle_paths), output_dir)
    return ConvertResult(
        output_dir=output_dir,
        static_path=static_path,
        tracks_path=tracks_path,
        vehicle_paths=vehicle_paths,
        priors=priors,
    )


def _track_from_record(record: Mapping[str, Any], cell_size: float) -> ObjectTrack:
    track = ObjectTrack(object_id=int(record["object_id"]), dynamic=bool(record["dynamic"]))
    for t, centroid in zip(record["frames"], record["centroids"]):
        center = np.asarray(centroid, dtype=np.float64).reshape(1, 3)
        track.components[int(t)] = ObjectComponent(
            frame_index=int(t),
            cells=np.zeros((0, 3), dtype=np.int64),
            centers=center,
            cell_size=cell_size,
            label=int(record["label"]),
        )
    return track


def load_priors(
    priors_dir: PathLike, num_classes: int, config: TrainConfig
) -> Tuple[StreetGaussians, List[VehicleModel], Dict[str, Any]]:
    """Initialise the street and vehicle models from a convert output directory.

    Raises:
        ManifestError: If a prior file is missing or malformed.
    """
    priors_dir = Path(priors_dir)
    tracks = read_json(priors_dir / TRACKS_FILE)
    if tracks.get("format") != TRACKS_FORMAT:
        raise ManifestError(f"{priors_dir / TRACKS_FILE}: unsupported format {tracks.get('format')!r}")
    static_path = priors_dir / STATIC_FILE
    if not static_path.exists():
        raise ManifestError(f"prior not found: {static_path}")

    street = init_street(
        read_point_cloud(static_path),
        num_classes,
        sh_degree=config.street_sh_degree,
        initial_opacity=config.initial_opacity,
    )

    vehicles = []
    try:
        frame_count = int(tracks["frame_count"])
        cell_size = float(tracks["cell_size"])
        for record in tracks["tracks"]:
            if not record["dynamic"]:
                continue
            track = _track_from_record(record, cell_size)
            path = priors_dir / vehicle_prior_file(track.object_id)
            if not path.exists():
                raise ManifestError(f"prior not found: {path}")
            cloud = read_point_cloud(path)
            vehicles.append(init_vehicle(
                track,
                cloud.positions,
                cloud.colors,
                frame_count,
                fourier_k=config.fourier_k,
                sh_degree=config.vehicle_sh_degree,
                initial_opacity=config.initial_opacity,
            ))
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{priors_dir / TRACKS_FILE}: malformed track record: {e}") from e
    return street, vehicles, tracks


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@dataclass
class TrainRunResult:
    """Outputs of :func:`cmd_train`."""

    output_dir: Path
    final_dir: Path
    metrics_path: Path
    checkpoints: List[Path]
    iterations: int
    initial_psnr: float
    final_psnr: float
    gaussian_count: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "output_dir": str(self.output_dir),
            "final": str(self.final_dir),
            "metrics": str(self.metrics_path),
            "checkpoints": [str(p) for p in self.checkpoints],
            "iterations": self.iterations,
            "initial_psnr": self.initial_psnr,
            "final_psnr": self.final_psnr,
            "gaussian_count": self.gaussian_count,
        }


def cmd_train(
    manifest_path: PathLike,
    config: TrainConfig,
    output_dir: PathLike,
    priors_dir: Optional[PathLike] = None,
    convert_config: Optional[ConvertConfig] = None,
    progress: bool = True,
) -> TrainRunResult:
    """Optimise a scene against the manifest's images.

    Priors are read from ``priors_dir``; without one, :func:`cmd_convert`
    runs first into ``output_dir/priors``. Checkpoints go to
    ``output_dir/checkpoints/iter_NNNNNN`` and the final scene to
    ``output_dir/final``; the metrics log is ``output_dir/metrics.csv``.

    Raises:
        ValidationError: On invalid inputs (nothing written).
        TrainingAborted: If optimisation diverged; the last checkpoint stays valid.
    """
    config.validate()
    output_dir = Path(output_dir)
    manifest = SceneManifest.load(manifest_path)
    cameras = manifest.load_cameras()
    views = _load_views(manifest, cameras, with_masks=True)
    vehicle_class_names = (convert_config or ConvertConfig()).vehicle_class_names
    vehicle_class_id = manifest.class_ids(vehicle_class_names)[0]

    if priors_dir is None:
        priors_dir = output_dir / PRIORS_DIR
        cmd_convert(manifest_path, convert_config or ConvertConfig(), priors_dir)
    street, vehicles, _ = load_priors(priors_dir, len(manifest.class_names), config)

    dataset = Dataset(
        views=[
            TrainingView(camera=camera, image=torch.as_tensor(image, dtype=DTYPE), mask=mask)
            for t in sorted(views)
            for camera, image, mask in views[t]
        ],
        frame_count=manifest.frame_count,
    )

    output_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_root = output_dir / CHECKPOINTS_DIR
    metrics_path = output_dir / METRICS_FILE

    def on_checkpoint(iteration: int, s: StreetGaussians, v: List[VehicleModel]) -> Path:
        return save_checkpoint(
            checkpoint_root / f"iter_{iteration:06d}", s, v, iteration,
            manifest.class_names, vehicle_class_id,
        )

    with open(metrics_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)

        def on_metrics(row: MetricsRow) -> None:
            writer.writerow(row.to_row())
            f.flush()

        result = train(dataset, street, vehicles, config, on_checkpoint, on_metrics, progress=progress)

    final_dir = save_checkpoint(
        output_dir / FINAL_DIR, result.street, result.vehicles, result.iterations,
        manifest.class_names, vehicle_class_id,
    )
    return TrainRunResult(
        output_dir=output_dir,
        final_dir=final_dir,
        metrics_path=metrics_path,
        checkpoints=result.checkpoints,
        iterations=result.iterations,
        initial_psnr=result.initial_psnr,
        final_psnr=result.final_psnr,
        gaussian_count=len(result.street) + sum(len(v) for v in result.vehicles),
    )


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

@dataclass
class RenderRunResult:
    """Images written by :func:`cmd_render` and per-frame failures."""

    output_dir: Path
    images: List[Path] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> Dict[str, Any]:
        return {
            "output_dir": str(self.output_dir),
            "images": [str(p) for p in self.images],
            "errors": list(self.errors),
        }


def _image_name(camera: Camera) -> str:
    if camera.image_path:
        return Path(camera.image_path).name
    return f"{camera.camera_id}_{camera.frame_index:04d}.png"


def parse_frames(text: Optional[str]) -> Optional[List[int]]:
    """Parse ``"0,5,7-9"`` into frame indices; ``None`` or empty means all.

    Raises:
        ValidationError: If an entry is not an integer or range.
    """
    if text is None or not text.strip():
        return None
    frames: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                frames.extend(range(int(lo), int(hi) + 1))
            else:
                frames.append(int(part))
        except ValueError as e:
            raise ValidationError(f"invalid frame list entry {part!r}") from e
    if any(t < 0 for t in frames):
        raise ValidationError("frame indices must be non-negative")
    return frames


def cmd_render(
    scene_dir: PathLike,
    camera_path: PathLike,
    output_dir: PathLike,
    frames: Optional[Sequence[int]] = None,
    config: Optional[RenderConfig] = None,
) -> RenderRunResult:
    """Render a checkpoint through the cameras of the requested frames.

    One 8-bit PNG per camera goes to ``output_dir``; with ``config.depth`` a
    16-bit depth PNG goes to ``output_dir/depth`` and with ``config.semantic``
    a class-id PNG to ``output_dir/semantic``. A frame without a camera pose is
    reported and skipped.

    Raises:
        ManifestError: If the checkpoint or camera manifest cannot be loaded.
    """
    config = config or RenderConfig()
    config.validate()
    checkpoint: Checkpoint = load_checkpoint(scene_dir)
    cameras = CameraManifest.load(camera_path)
    by_frame = cameras.by_frame()
    wanted = list(frames) if frames is not None else sorted(by_frame)
    vehicle_class_id = checkpoint.vehicle_class_id
    if config.semantic and config.vehicle_class in checkpoint.class_names:
        vehicle_class_id = checkpoint.class_names.index(config.vehicle_class)

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    if config.depth:
        (output_dir / "depth").mkdir(exist_ok=True)
    if config.semantic:
        (output_dir / "semantic").mkdir(exist_ok=True)

    result = RenderRunResult(output_dir=output_dir)
    for t in wanted:
        if t not in by_frame:
            message = f"frame {t}: no camera pose in {camera_path}"
            logger.warning(message)
            result.errors.append(message)
            continue
        for camera in by_frame[t]:
            name = _image_name(camera)
            try:
                with torch.no_grad():
                    scene = assemble(checkpoint.street, checkpoint.vehicles, t)
                    out = render(
                        scene, camera,
                        background=config.background,
                        threads=config.threads,
                        semantics=config.semantic,
                        vehicle_class_id=vehicle_class_id,
                    )
            except OGGaussianError as e:
                message = f"frame {t} camera {camera.camera_id}: {e}"
                logger.warning(message)
                result.errors.append(message)
                continue
            path = output_dir / name
            write_image(path, out.rgb.numpy())
            result.images.append(path)
            if config.depth:
                write_depth(output_dir / "depth" / name, out.depth.numpy(), config.depth_max)
            if config.semantic and out.semantic is not None:
                write_labels(output_dir / "semantic" / name, out.semantic.argmax(dim=-1).numpy())

    logger.info("rendered %d images, %d errors", len(result.images), len(result.errors))
    return result


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(
    rendered_dir: PathLike,
    target_dir: PathLike,
    output_dir: PathLike,
    mask_dir: Optional[PathLike] = None,
) -> EvalReport:
    """Compare rendered images with references and write the report files."""
    report = compare_directories(rendered_dir, target_dir, mask_dir)
    write_report(report, output_dir, str(rendered_dir), str(target_dir))
    return report


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@dataclass
class SynthResult:
    """Dataset written by :func:`cmd_synth`."""

    output_dir: Path
    manifest_path: Path
    frames: int
    vehicles: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "output_dir": str(self.output_dir),
            "manifest": str(self.manifest_path),
            "frames": self.frames,
            "moving_vehicles": self.vehicles,
        }


def cmd_synth(config: SynthConfig, output_dir: PathLike) -> SynthResult:
    """Generate a synthetic driving sequence in the ingestible on-disk layout.

    Writes ``manifest.json``, ``cameras.json``, ``grids/frame_NNNN.ogg``,
    ``images/``, ``masks/``, ``sfm.ply``, ``trajectories.json``, the
    ground-truth scene as a checkpoint in ``ground_truth/`` and a
    ``convert.env`` matching the grid resolution.
    """
    config.validate()
    scene = make_synthetic(config)

    output_dir = Path(output_dir)
    for sub in ("grids", "images", "masks"):
        (output_dir / sub).mkdir(parents=True, exist_ok=True)

    grid_paths = []
    for t, grid in enumerate(scene.grids):
        path = output_dir / "grids" / f"frame_{t:04d}.ogg"
        write_grid(path, grid)
        grid_paths.append(path)
    for camera, image, mask in zip(scene.cameras, scene.images, scene.masks):
        write_image(output_dir / camera.image_path, image)
        write_mask(output_dir / "masks" / Path(camera.image_path).name, mask)

    CameraManifest(cameras=scene.cameras).write(output_dir / "cameras.json")
    write_point_cloud(output_dir / "sfm.ply", scene.sfm)

    write_json(output_dir / TRAJECTORIES_FILE, {
        "vehicles": [
            {
                "id": v.vehicle_id,
                "moving": v.moving,
                "positions": v.positions.tolist(),
                "headings": v.headings.tolist(),
            }
            for v in scene.vehicles
        ],
    })
    save_checkpoint(
        output_dir / GROUND_TRUTH_DIR, scene.street, scene.vehicle_models, 0,
        scene.class_names, scene.vehicle_class_id,
    )
    # half-cell upsampling: eight vehicle prior points per occupied cell
    (output_dir / CONVERT_ENV).write_text(f"TARGET_VOXEL={config.cell_size / 2:g}\n", encoding="utf-8")

    manifest = SceneManifest(
        root=output_dir,
        frame_count=config.frames,
        grid_paths=grid_paths,
        camera_path=output_dir / "cameras.json",
        image_dir=output_dir / "images",
        class_names=list(scene.class_names),
        sfm_path=output_dir / "sfm.ply",
        mask_dir=output_dir / "masks",
        world={"up": "+z", "forward": "+x", "units": "m", "seed": config.seed},
    )
    manifest_path = output_dir / "manifest.json"
    manifest.write(manifest_path)
    logger.info("synthetic dataset with %d frames written to %s", config.frames, output_dir)
    return SynthResult(
        output_dir=output_dir,
        manifest_path=manifest_path,
        frames=config.frames,
        vehicles=sum(1 for v in scene.vehicles if v.moving),
    )
