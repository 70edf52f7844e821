"""Evaluation metrics, the brute-force reference renderer and synthetic scenes.

The synthetic generator builds a small driving scene (textured road, two
building facades, parked and moving box vehicles), rasterizes per-frame
occupancy grids from it and renders ground-truth images with
:func:`reference_render`, so the whole pipeline can be exercised without a
real dataset.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .camera import Camera
from .config import SynthConfig
from .errors import ShapeMismatchError
from .geom import DTYPE, as_tensor, build_covariance, eval_sh, identity_quat, rgb_to_sh_dc, sh_coeff_count, sh_to_rgb
from .occupancy import OccupancyGrid, PointSource, SemanticPointCloud
from .render import ALPHA_CAP, ALPHA_MIN, FOOTPRINT_SIGMA, LOW_PASS, T_MIN, RenderOutput, render
from .scene import (
    SEMANTIC_INIT,
    AssembledScene,
    StreetGaussians,
    VehicleModel,
    assemble,
    inverse_sigmoid,
)


logger = logging.getLogger(__name__)

PSNR_SENTINEL = 100.0
CLASS_NAMES = ("road", "building", "vehicle")
ROAD, BUILDING, VEHICLE = range(3)
VEHICLE_HALF_EXTENTS = np.array([2.0, 0.9, 0.75])
VEHICLE_CLEARANCE = 0.1
OCCUPIED_PROB = 0.9
FREE_PROB = 0.05
GT_OPACITY = 0.95


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _as_array(image: Any) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        return image.detach().to(DTYPE).numpy()
    return np.asarray(image, dtype=np.float64)


def _mse(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((x - y) ** 2))


def psnr(x: Any, y: Any) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images return the finite sentinel :data:`PSNR_SENTINEL`.

    Raises:
        ShapeMismatchError: If the images differ in shape.
    """
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = _mse(a, b)
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def psnr_dym(rendered: Any, target: Any, mask: Any) -> Optional[float]:
    """PSNR over the pixels marked in ``mask``; ``None`` for an empty mask."""
    a, b = _as_array(rendered), _as_array(target)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        return None
    mse = _mse(a[mask], b[mask])
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class FrameMetrics:
    """Metrics of one image pair."""

    name: str
    psnr: float
    ssim: float
    psnr_dym: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "psnr": self.psnr, "ssim": self.ssim, "psnr_dym": self.psnr_dym}


@dataclass
class EvalReport:
    """Per-frame and aggregate image metrics.

    ``psnr_dym`` is ``None`` when no frame had vehicle pixels; that case is
    flagged with ``psnr_dym_defined = False``.
    """

    frames: List[FrameMetrics] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    @property
    def psnr(self) -> float:
        return float(np.mean([f.psnr for f in self.frames])) if self.frames else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([f.ssim for f in self.frames])) if self.frames else float("nan")

    @property
    def psnr_dym(self) -> Optional[float]:
        values = [f.psnr_dym for f in self.frames if f.psnr_dym is not None]
        return float(np.mean(values)) if values else None

    @property
    def psnr_dym_defined(self) -> bool:
        return self.psnr_dym is not None

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> Dict[str, Any]:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "psnr_dym": self.psnr_dym,
            "psnr_dym_defined": self.psnr_dym_defined,
            "psnr_sentinel": PSNR_SENTINEL,
            "frames": [f.to_dict() for f in self.frames],
            "errors": list(self.errors),
        }


# ---------------------------------------------------------------------------
# Reference renderer
# ---------------------------------------------------------------------------

@dataclass
class _ReferenceSplat:
    index: int
    depth: float
    mean: np.ndarray
    conic: np.ndarray
    extent: np.ndarray
    color: np.ndarray
    opacity: float
    x_range: Tuple[int, int]
    y_range: Tuple[int, int]


def _reference_splats(scene: AssembledScene, camera: Camera) -> Tuple[List[_ReferenceSplat], np.ndarray, np.ndarray]:
    """Project and colour every Gaussian one at a time in numpy.

    Returns the visible splats plus pixel means (P, 2) and the visibility mask
    of all P Gaussians.
    """
    camera.validate()
    with torch.no_grad():
        covs = build_covariance(scene.scales, scene.rotations, check=False).numpy()
        means = scene.means.detach().numpy()
        opacities = scene.opacities.detach().numpy()
        dirs = means - camera.center
        dirs = dirs / np.maximum(np.linalg.norm(dirs, axis=-1, keepdims=True), 1e-12)
        colors = sh_to_rgb(eval_sh(scene.sh.detach(), torch.as_tensor(dirs), scene.sh_degree)).numpy()

    R = camera.R
    cam = camera.world_to_camera(means)
    means2d = np.zeros((len(means), 2))
    visible = np.zeros(len(means), dtype=bool)
    splats = []
    for i, (x, y, z) in enumerate(cam):
        if not camera.near <= z <= camera.far:
            continue
        J = np.array([
            [camera.fx / z, 0.0, -camera.fx * x / z ** 2],
            [0.0, camera.fy / z, -camera.fy * y / z ** 2],
        ])
        cov2d = J @ R @ covs[i] @ R.T @ J.T + LOW_PASS * np.eye(2)
        mean = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
        means2d[i] = mean
        extent = FOOTPRINT_SIGMA * np.sqrt(np.diag(cov2d))
        first = np.ceil(mean - extent)
        last = np.floor(mean + extent)
        x0, x1 = max(first[0], 0.0), min(last[0], camera.width - 1.0)
        y0, y1 = max(first[1], 0.0), min(last[1], camera.height - 1.0)
        if x0 > x1 or y0 > y1:
            continue
        visible[i] = True
        splats.append(_ReferenceSplat(
            index=i,
            depth=float(z),
            mean=mean,
            conic=np.linalg.inv(cov2d),
            extent=extent,
            color=colors[i],
            opacity=float(opacities[i]),
            x_range=(int(x0), int(x1) + 1),
            y_range=(int(y0), int(y1) + 1),
        ))
    splats.sort(key=lambda s: (s.depth, s.index))
    return splats, means2d, visible


def reference_render(
    scene: AssembledScene,
    camera: Camera,
    background: Optional[Sequence[float]] = None,
    terminate: bool = False,
) -> RenderOutput:
    """Brute-force renderer used as the correctness oracle.

    Every Gaussian is projected on its own (EWA, numpy float64), all splats are
    sorted once by depth and blended sequentially into every pixel of their
    footprint, without tiles. The per-splat opacity cap and the 1/255 skip
    match the tiled renderer. By default every splat is blended; with
    ``terminate`` a pixel also stops at the splat that would push its
    transmittance below 1e-4, as the tiled renderer does.
    """
    bg = np.asarray(background if background is not None else (0.0, 0.0, 0.0), dtype=np.float64)
    splats, means2d, visible = _reference_splats(scene, camera)
    H, W = camera.height, camera.width
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    transmit = np.ones((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int64)
    done = np.zeros((H, W), dtype=bool)

    for splat in splats:
        (x0, x1), (y0, y1) = splat.x_range, splat.y_range
        ys, xs = np.meshgrid(np.arange(y0, y1, dtype=np.float64), np.arange(x0, x1, dtype=np.float64), indexing="ij")
        dx = xs - splat.mean[0]
        dy = ys - splat.mean[1]
        a, b, c = splat.conic[0, 0], splat.conic[0, 1], splat.conic[1, 1]
        alpha = np.minimum(splat.opacity * np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)), ALPHA_CAP)
        inside = (np.abs(dx) <= splat.extent[0]) & (np.abs(dy) <= splat.extent[1])
        alpha = np.where(inside & (alpha >= ALPHA_MIN), alpha, 0.0)

        T = transmit[y0:y1, x0:x1]
        if terminate:
            stop = done[y0:y1, x0:x1] | (T * (1.0 - alpha) < T_MIN)
            done[y0:y1, x0:x1] = stop
            alpha = np.where(stop, 0.0, alpha)
        weight = T * alpha
        rgb[y0:y1, x0:x1] += weight[..., None] * splat.color
        depth[y0:y1, x0:x1] += weight * splat.depth
        n_contrib[y0:y1, x0:x1] += alpha > 0
        transmit[y0:y1, x0:x1] = T * (1.0 - alpha)

    rgb += transmit[..., None] * bg
    return RenderOutput(
        rgb=torch.as_tensor(rgb),
        depth=torch.as_tensor(depth),
        transmittance=torch.as_tensor(transmit),
        n_contrib=torch.as_tensor(n_contrib),
        means2d=torch.as_tensor(means2d),
        visible=visible,
    )


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticVehicle:
    """Ground-truth box vehicle and its trajectory."""

    model: VehicleModel
    positions: np.ndarray
    headings: np.ndarray
    moving: bool

    @property
    def vehicle_id(self) -> int:
        return self.model.vehicle_id


@dataclass
class SyntheticScene:
    """Ground truth plus every derived input of a synthetic sequence."""

    config: SynthConfig
    street: StreetGaussians
    street_labels: np.ndarray
    vehicles: List[SyntheticVehicle]
    cameras: List[Camera]
    grids: List[OccupancyGrid]
    images: List[np.ndarray]
    masks: List[np.ndarray]
    sfm: SemanticPointCloud
    class_names: Tuple[str, ...] = CLASS_NAMES

    @property
    def vehicle_class_id(self) -> int:
        return VEHICLE

    @property
    def vehicle_models(self) -> List[VehicleModel]:
        return [v.model for v in self.vehicles]

    def assemble(self, t: int) -> AssembledScene:
        return assemble(self.street, self.vehicle_models, t)

    def trajectories(self) -> Dict[int, np.ndarray]:
        return {v.vehicle_id: v.positions for v in self.vehicles}


def _heading_quat(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    q = np.zeros(theta.shape + (4,))
    q[..., 0] = np.cos(theta / 2)
    q[..., 3] = np.sin(theta / 2)
    return q


def vehicle_trajectory(
    start: np.ndarray,
    speed: float,
    frames: int,
    kind: str = "straight",
    arc_radius: float = 20.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Positions (F, 3) and headings (F,) of a vehicle driving along +x.

    ``straight`` keeps the heading; ``arc`` turns left on a circle of
    ``arc_radius``. Zero speed yields a parked vehicle.
    """
    s = speed * np.arange(frames, dtype=np.float64)
    start = np.asarray(start, dtype=np.float64)
    positions = np.tile(start, (frames, 1))
    if kind == "arc":
        theta = s / arc_radius
        positions[:, 0] += arc_radius * np.sin(theta)
        positions[:, 1] += arc_radius * (1.0 - np.cos(theta))
        return positions, theta
    positions[:, 0] += s
    return positions, np.zeros(frames)


def _box_surface(rng: np.random.Generator, count: int, half: np.ndarray) -> np.ndarray:
    """Points uniformly distributed over the surface of an axis-aligned box."""
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_axis = rng.choice(3, size=count, p=areas / areas.sum())
    points = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=count)
    points[np.arange(count), face_axis] = sign * half[face_axis]
    return points


def _vehicle_cluster(rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    points = _box_surface(rng, count, VEHICLE_HALF_EXTENTS)
    base = rng.uniform(0.15, 0.9, size=3)
    colors = np.clip(base + rng.normal(0.0, 0.04, size=(count, 3)), 0.0, 1.0)
    # darker cabin band
    cabin = points[:, 2] > 0.3 * VEHICLE_HALF_EXTENTS[2]
    colors[cabin] *= 0.45
    scales = np.full((count, 3), 0.22)
    return points, colors, scales


def _street_geometry(config: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    spacing = config.ground_spacing
    xs = np.arange(-6.0, config.street_length + 6.0, spacing) + spacing / 2
    ys = np.arange(-config.building_offset, config.building_offset, spacing) + spacing / 2
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    ground = np.stack((gx.ravel(), gy.ravel(), np.zeros(gx.size)), axis=1)
    checker = (np.floor(ground[:, 0] / 2.0) + np.floor(ground[:, 1] / 2.0)) % 2
    ground_colors = np.where(checker[:, None] > 0, 0.55, 0.33) * np.array([1.0, 1.0, 0.95])
    marking = (np.abs(ground[:, 1] - 0.5 * config.road_half_width) < 0.3) & (ground[:, 0] % 4.0 < 2.0)
    ground_colors[marking] = 0.92
    ground_scales = np.tile([0.6 * spacing, 0.6 * spacing, 0.02], (len(ground), 1))

    zs = np.arange(0.0, config.building_height, spacing) + spacing / 2
    walls, wall_colors = [], []
    for side in (-1.0, 1.0):
        wx, wz = np.meshgrid(xs, zs, indexing="ij")
        wall = np.stack((wx.ravel(), np.full(wx.size, side * config.building_offset), wz.ravel()), axis=1)
        segment = np.floor((wall[:, 0] + 6.0) / 4.0).astype(np.int64)
        palette = rng.uniform(0.2, 0.85, size=(segment.max() + 1, 3))
        colour = palette[segment]
        window = (wall[:, 2] % 2.0 > 0.8) & (wall[:, 2] % 2.0 < 1.5) & (wall[:, 0] % 2.0 > 0.5) & (wall[:, 0] % 2.0 < 1.5)
        colour[window] *= 0.4
        walls.append(wall)
        wall_colors.append(colour)
    wall = np.concatenate(walls)
    wall_scales = np.tile([0.6 * spacing, 0.02, 0.6 * spacing], (len(wall), 1))

    positions = np.concatenate((ground, wall))
    colors = np.concatenate((ground_colors, np.concatenate(wall_colors)))
    scales = np.concatenate((ground_scales, wall_scales))
    labels = np.concatenate((np.full(len(ground), ROAD), np.full(len(wall), BUILDING)))
    return positions, colors, scales, labels


def _street_model(positions: np.ndarray, colors: np.ndarray, scales: np.ndarray, labels: np.ndarray, sh_degree: int = 3) -> StreetGaussians:
    count = len(positions)
    sh = torch.zeros(count, sh_coeff_count(sh_degree), 3, dtype=DTYPE)
    sh[:, 0, :] = rgb_to_sh_dc(torch.as_tensor(colors, dtype=DTYPE))
    semantic = torch.zeros(count, len(CLASS_NAMES), dtype=DTYPE)
    semantic[torch.arange(count), torch.as_tensor(labels)] = SEMANTIC_INIT
    return StreetGaussians(
        means=torch.as_tensor(positions, dtype=DTYPE),
        rotations=identity_quat(count),
        log_scales=torch.log(torch.as_tensor(scales, dtype=DTYPE)),
        opacity_logits=inverse_sigmoid(torch.full((count,), GT_OPACITY, dtype=DTYPE)),
        sh=sh,
        semantic_logits=semantic,
        sh_degree=sh_degree,
    )


def _vehicle_model(
    vehicle_id: int,
    points: np.ndarray,
    colors: np.ndarray,
    scales: np.ndarray,
    positions: np.ndarray,
    headings: np.ndarray,
    fourier_k: int = 1,
    sh_degree: int = 1,
) -> VehicleModel:
    count = len(points)
    frames = len(positions)
    fourier = torch.zeros(count, sh_coeff_count(sh_degree), 3, fourier_k, dtype=DTYPE)
    fourier[:, 0, :, 0] = rgb_to_sh_dc(torch.as_tensor(colors, dtype=DTYPE))
    return VehicleModel(
        vehicle_id=vehicle_id,
        means=torch.as_tensor(points, dtype=DTYPE),
        rotations=identity_quat(count),
        log_scales=torch.log(torch.as_tensor(scales, dtype=DTYPE)),
        opacity_logits=inverse_sigmoid(torch.full((count,), GT_OPACITY, dtype=DTYPE)),
        fourier_sh=fourier,
        semantic_logits=torch.full((count,), SEMANTIC_INIT, dtype=DTYPE),
        frames=list(range(frames)),
        base_rotations=torch.as_tensor(_heading_quat(headings), dtype=DTYPE),
        base_translations=torch.as_tensor(positions, dtype=DTYPE),
        delta_rotations=torch.zeros(frames, 3, dtype=DTYPE),
        delta_translations=torch.zeros(frames, 3, dtype=DTYPE),
        frame_count=frames,
        sh_degree=sh_degree,
        frozen=frames == 1,
    )


def _grid_layout(config: SynthConfig) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    cell = config.cell_size
    margin = 2.0
    origin = np.array([-6.0, -(config.building_offset + margin), -cell / 2])
    extent = np.array([
        config.street_length + 12.0,
        2.0 * (config.building_offset + margin),
        config.building_height + 2.0,
    ])
    dims = tuple(int(math.ceil(e / cell)) for e in extent)
    return origin, dims


def _fill_box(labels: np.ndarray, origin: np.ndarray, cell: float, center: np.ndarray, heading: float) -> None:
    """Mark every cell whose centre lies inside an oriented vehicle box."""
    c, s = math.cos(heading), math.sin(heading)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    reach = np.abs(R) @ VEHICLE_HALF_EXTENTS
    lo = np.floor((center - reach - origin) / cell).astype(np.int64)
    hi = np.ceil((center + reach - origin) / cell).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(labels.shape))
    if np.any(lo >= hi):
        return
    idx = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), axis=-1).reshape(-1, 3)
    centres = origin + (idx + 0.5) * cell
    local = (centres - center) @ R
    inside = np.all(np.abs(local) <= VEHICLE_HALF_EXTENTS, axis=1)
    labels[tuple(idx[inside].T)] = VEHICLE


def rasterize_grid(
    street_positions: np.ndarray,
    street_labels: np.ndarray,
    boxes: Sequence[Tuple[np.ndarray, float]],
    origin: np.ndarray,
    dims: Tuple[int, int, int],
    cell_size: float,
    frame_index: int,
) -> OccupancyGrid:
    """Occupancy grid of one frame from ground-truth street centres and vehicle boxes.

    Occupied cells get probability 0.9 and 0.9 on their class; free cells get
    0.05 and a uniform class distribution.
    """
    labels = np.full(dims, -1, dtype=np.int64)
    idx = np.floor((street_positions - origin) / cell_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(dims)), axis=1)
    labels[tuple(idx[inside].T)] = street_labels[inside]
    for center, heading in boxes:
        _fill_box(labels, origin, cell_size, center, heading)

    num_classes = len(CLASS_NAMES)
    occupied = labels >= 0
    occupancy = np.where(occupied, OCCUPIED_PROB, FREE_PROB)
    probs = np.full(dims + (num_classes,), 1.0 / num_classes)
    off = (1.0 - OCCUPIED_PROB) / (num_classes - 1)
    probs[occupied] = off
    cells = np.argwhere(occupied)
    probs[tuple(cells.T) + (labels[occupied],)] = OCCUPIED_PROB
    return OccupancyGrid(occupancy=occupancy, class_probs=probs, origin=origin, cell_size=cell_size, frame_index=frame_index)


def _dynamic_features(scene: AssembledScene, moving: Sequence[bool]) -> torch.Tensor:
    flags = torch.as_tensor([False] + list(moving), dtype=torch.bool)
    owners = scene.owners + 1
    return flags[owners].to(DTYPE)[:, None]


def make_synthetic(config: SynthConfig) -> SyntheticScene:
    """Build a deterministic synthetic driving sequence from ``config``.

    World axes: +x along the street, +y left, +z up. The camera drives along
    the street centre; moving vehicles use the right lane, parked vehicles
    stand on the left. Occupancy grids are rasterized from the ground truth
    (vehicle boxes optionally jittered by ``centroid_noise``), images come
    from :func:`reference_render` and masks mark moving-vehicle pixels.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    frames = config.frames

    positions, colors, scales, labels = _street_geometry(config, rng)
    parked = []
    for k in range(config.static_vehicles):
        points, v_colors, v_scales = _vehicle_cluster(rng, config.gaussians_per_vehicle)
        center = np.array([12.0 + 9.0 * k, 0.5 * config.road_half_width + 1.0, VEHICLE_HALF_EXTENTS[2] + VEHICLE_CLEARANCE])
        parked.append(center)
        positions = np.concatenate((positions, points + center))
        colors = np.concatenate((colors, v_colors))
        scales = np.concatenate((scales, v_scales))
        labels = np.concatenate((labels, np.full(len(points), VEHICLE)))
    street = _street_model(positions, colors, scales, labels)

    vehicles = []
    for k in range(config.moving_vehicles):
        points, v_colors, v_scales = _vehicle_cluster(rng, config.gaussians_per_vehicle)
        lane_y = -0.5 * config.road_half_width - 3.0 * (k % 2)
        start = np.array([6.0 + 7.0 * (k // 2), lane_y, VEHICLE_HALF_EXTENTS[2] + VEHICLE_CLEARANCE])
        traj, headings = vehicle_trajectory(start, config.vehicle_speed, frames, config.trajectory, config.arc_radius)
        model = _vehicle_model(k, points, v_colors, v_scales, traj, headings)
        vehicles.append(SyntheticVehicle(model=model, positions=traj, headings=headings, moving=config.vehicle_speed > 0 and frames > 1))

    cameras = []
    for t in range(frames):
        cameras.append(
            Camera.looking_along(
                position=np.array([config.camera_speed * t, 0.0, config.camera_height]),
                forward=np.array([1.0, 0.0, -0.05]),
                up=np.array([0.0, 0.0, 1.0]),
                fx=config.focal,
                fy=config.focal,
                cx=(config.width - 1) / 2.0,
                cy=(config.height - 1) / 2.0,
                width=config.width,
                height=config.height,
                near=0.1,
                far=200.0,
                camera_id="front",
                frame_index=t,
                image_path=f"images/front_{t:04d}.png",
            )
        )

    origin, dims = _grid_layout(config)
    street_np = positions
    grids = []
    for t in range(frames):
        boxes = [(center, 0.0) for center in parked]
        for v in vehicles:
            center = v.positions[t].copy()
            if config.centroid_noise > 0 and v.moving:
                jitter = rng.normal(0.0, 1.0, size=3)
                jitter[2] = 0.0
                norm = np.linalg.norm(jitter)
                if norm > 0:
                    center += jitter / norm * min(norm, 1.0) * config.centroid_noise
            boxes.append((center, float(v.headings[t])))
        grids.append(rasterize_grid(street_np, labels, boxes, origin, dims, config.cell_size, t))

    images, masks = [], []
    moving = [v.moving for v in vehicles]
    models = [v.model for v in vehicles]
    with torch.no_grad():
        for t, camera in enumerate(cameras):
            scene = assemble(street, models, t)
            images.append(reference_render(scene, camera).rgb.numpy())
            if any(moving):
                out = render(scene, camera, threads=config.threads, features=_dynamic_features(scene, moving))
                masks.append(out.features[..., 0].numpy() > 0.5)
            else:
                masks.append(np.zeros((config.height, config.width), dtype=bool))

    sfm_count = min(config.sfm_points, len(positions))
    picks = np.sort(rng.choice(len(positions), size=sfm_count, replace=False))
    sfm = SemanticPointCloud.from_points(
        positions[picks] + rng.normal(0.0, 0.02, size=(sfm_count, 3)),
        colors=colors[picks],
        source=PointSource.SFM,
    )

    logger.info(
        "synthetic scene: %d street Gaussians, %d moving vehicles, %d frames",
        len(street), len(vehicles), frames,
    )
    return SyntheticScene(
        config=config,
        street=street,
        street_labels=labels,
        vehicles=vehicles,
        cameras=cameras,
        grids=grids,
        images=images,
        masks=masks,
        sfm=sfm,
    )


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def learned_positions(model: VehicleModel) -> Dict[int, np.ndarray]:
    """World position of the vehicle-frame origin at every tracked frame."""
    with torch.no_grad():
        return {t: model.pose_at(t).translation.numpy().copy() for t in model.frames}


def trajectory_error(model: VehicleModel, truth: np.ndarray, frames: Optional[Sequence[int]] = None) -> float:
    """Mean translation error of a learned track against ground truth.

    Both trajectories are taken relative to the first compared frame, so the
    offset between the learned vehicle frame and the true box centre cancels.
    ``frames`` restricts the comparison (for example to the trained frames,
    whose pose deltas were optimised); by default every tracked frame counts.
    """
    learned = learned_positions(model)
    wanted = set(model.frames if frames is None else frames)
    frames = [t for t in model.frames if t < len(truth) and t in wanted]
    if not frames:
        return float("nan")
    first = frames[0]
    errors = [
        np.linalg.norm((learned[t] - learned[first]) - (truth[t] - truth[first]))
        for t in frames
    ]
    return float(np.mean(errors))


def match_vehicles(models: Sequence[VehicleModel], truth: Dict[int, np.ndarray]) -> Dict[int, int]:
    """Pair learned vehicles with ground-truth ids by first-frame distance."""
    pairs = {}
    taken = set()
    for model in models:
        first = model.frames[0]
        origin = as_tensor(model.base_translations[0]).detach().numpy()
        best, best_d = None, math.inf
        for vid, positions in truth.items():
            if vid in taken or first >= len(positions):
                continue
            d = float(np.linalg.norm(positions[first] - origin))
            if d < best_d:
                best, best_d = vid, d
        if best is not None:
            pairs[model.vehicle_id] = best
            taken.add(best)
    return pairs
