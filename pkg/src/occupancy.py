"""Occupancy-grid priors: static street cloud and per-vehicle dynamic clouds.

The stages mirror the prior-generation pipeline: threshold the occupancy
probabilities, take the most likely semantic class per cell, cut vehicles out
as connected components, link them across frames into tracks, decide which
tracks move, then densify and colourise the moving ones. Everything that is
not a moving vehicle becomes the static cloud, optionally merged with an SfM
reconstruction.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .camera import Camera
from .errors import ShapeMismatchError, ValidationError


logger = logging.getLogger(__name__)

UNLABELED = -1
DEFAULT_GRAY = (0.5, 0.5, 0.5)
NEIGHBORHOOD_26 = np.ones((3, 3, 3), dtype=bool)


class PointSource(IntEnum):
    """Where a prior point came from."""

    OCCUPANCY = 0
    SFM = 1
    RANDOM = 2


@dataclass
class OccupancyGrid:
    """Dense H×W×D lattice of occupancy and class probabilities for one frame.

    Index ``(i, j, k)`` maps to world ``x, y, z`` and the cell centre is
    ``origin + (index + 0.5) * cell_size``.
    """

    occupancy: np.ndarray
    class_probs: np.ndarray
    origin: np.ndarray
    cell_size: float
    frame_index: int = 0

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.float64)
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.class_probs.shape[:3] != self.occupancy.shape:
            raise ShapeMismatchError(
                f"class probabilities {self.class_probs.shape} do not match lattice {self.occupancy.shape}"
            )

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.occupancy.shape)

    @property
    def num_classes(self) -> int:
        return self.class_probs.shape[-1]

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + np.asarray(self.dims) * self.cell_size

    def cell_centers(self, indices: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * self.cell_size

    def validate(self, tol: float = 1e-5) -> None:
        """Check probability ranges and per-cell class normalization."""
        if self.cell_size <= 0:
            raise ValidationError("cell_size must be positive")
        for name, values in (("occupancy", self.occupancy), ("class", self.class_probs)):
            if values.size and (values.min() < 0.0 or values.max() > 1.0):
                raise ValidationError(f"{name} probabilities outside [0, 1] in frame {self.frame_index}")
        sums = self.class_probs.sum(axis=-1)
        if sums.size and np.abs(sums - 1.0).max() > tol:
            raise ValidationError(f"class probabilities do not sum to 1 in frame {self.frame_index}")


@dataclass
class SemanticPointCloud:
    """Points with colour, semantic label and source tag."""

    positions: np.ndarray
    colors: np.ndarray
    has_color: np.ndarray
    labels: np.ndarray
    sources: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_points(
        cls,
        positions: np.ndarray,
        labels: Optional[np.ndarray] = None,
        colors: Optional[np.ndarray] = None,
        source: PointSource = PointSource.OCCUPANCY,
    ) -> "SemanticPointCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        count = positions.shape[0]
        if colors is None:
            rgb = np.tile(np.asarray(DEFAULT_GRAY), (count, 1))
            has_color = np.zeros(count, dtype=bool)
        else:
            rgb = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
            has_color = np.ones(count, dtype=bool)
        if labels is None:
            labels = np.full(count, UNLABELED, dtype=np.int64)
        return cls(
            positions=positions,
            colors=rgb,
            has_color=has_color,
            labels=np.asarray(labels, dtype=np.int64).reshape(count),
            sources=np.full(count, int(source), dtype=np.uint8),
        )

    @classmethod
    def empty(cls) -> "SemanticPointCloud":
        return cls.from_points(np.zeros((0, 3)))

    @classmethod
    def concat(cls, clouds: Iterable["SemanticPointCloud"]) -> "SemanticPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            positions=np.concatenate([c.positions for c in clouds]),
            colors=np.concatenate([c.colors for c in clouds]),
            has_color=np.concatenate([c.has_color for c in clouds]),
            labels=np.concatenate([c.labels for c in clouds]),
            sources=np.concatenate([c.sources for c in clouds]),
        )

    def subset(self, index: np.ndarray) -> "SemanticPointCloud":
        return SemanticPointCloud(
            positions=self.positions[index],
            colors=self.colors[index],
            has_color=self.has_color[index],
            labels=self.labels[index],
            sources=self.sources[index],
        )

    def validate(self, num_classes: int) -> None:
        if not np.isfinite(self.positions).all():
            raise ValidationError("point positions must be finite")
        bad = (self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= num_classes))
        if bad.any():
            raise ValidationError(f"{int(bad.sum())} point labels outside [0, {num_classes})")


@dataclass
class ObjectComponent:
    """One 26-connected group of vehicle cells in a single frame."""

    frame_index: int
    cells: np.ndarray
    centers: np.ndarray
    cell_size: float
    label: int

    @property
    def centroid(self) -> np.ndarray:
        return self.centers.mean(axis=0)


@dataclass
class ObjectTrack:
    """A vehicle followed across frames."""

    object_id: int
    components: Dict[int, ObjectComponent] = field(default_factory=dict)
    dynamic: bool = False

    @property
    def frames(self) -> List[int]:
        return sorted(self.components)

    @property
    def centroids(self) -> Dict[int, np.ndarray]:
        return {t: self.components[t].centroid for t in self.frames}

    @property
    def first_component(self) -> ObjectComponent:
        return self.components[self.frames[0]]

    def to_dict(self) -> Dict[str, Any]:
        """Convert to the tracks-file record layout."""
        return {
            "object_id": self.object_id,
            "dynamic": self.dynamic,
            "label": self.first_component.label,
            "frames": self.frames,
            "centroids": [[float(v) for v in c] for c in self.centroids.values()],
        }


# ---------------------------------------------------------------------------
# Per-grid operations
# ---------------------------------------------------------------------------

def threshold_occupancy(grid: OccupancyGrid, tau: float) -> np.ndarray:
    """Binary lattice: a cell is occupied iff ``p >= tau``."""
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"occupancy threshold must be in (0, 1), got {tau}")
    return grid.occupancy >= tau


def semantic_argmax(grid: OccupancyGrid) -> np.ndarray:
    """Most likely class per cell; ties go to the lowest class index."""
    return np.argmax(grid.class_probs, axis=-1).astype(np.int64)


def extract_objects(
    grid: OccupancyGrid,
    occupied: np.ndarray,
    labels: np.ndarray,
    vehicle_class_ids: Sequence[int],
) -> List[ObjectComponent]:
    """Split occupied vehicle cells into 26-connected components.

    Args:
        grid: Source grid (for cell geometry and frame index).
        occupied: Binary lattice from :func:`threshold_occupancy`.
        labels: Class lattice from :func:`semantic_argmax`.
        vehicle_class_ids: Classes treated as vehicles.

    Returns:
        Components in scan order, each with its cells and centroid.
    """
    mask = occupied & np.isin(labels, list(vehicle_class_ids))
    component_map, count = ndimage.label(mask, structure=NEIGHBORHOOD_26)
    if count == 0:
        return []

    cells = np.argwhere(component_map > 0)
    ids = component_map[tuple(cells.T)]
    order = np.argsort(ids, kind="stable")
    cells, ids = cells[order], ids[order]
    splits = np.flatnonzero(np.diff(ids)) + 1

    components = []
    for group in np.split(cells, splits):
        group_labels = labels[tuple(group.T)]
        components.append(
            ObjectComponent(
                frame_index=grid.frame_index,
                cells=group,
                centers=grid.cell_centers(group),
                cell_size=grid.cell_size,
                label=int(np.bincount(group_labels).argmax()),
            )
        )
    return components


def associate_tracks(
    components_by_frame: Sequence[Sequence[ObjectComponent]],
    match_radius: float,
) -> List[ObjectTrack]:
    """Link components across consecutive frames by greedy nearest centroid.

    Candidate (track, component) pairs within ``match_radius`` are taken in
    order of increasing distance; each track and component is used once.
    Unmatched components open new tracks; a track that misses a frame ends.

    Args:
        components_by_frame: Components of each frame, in frame order.
        match_radius: Largest centroid distance accepted as the same object.

    Returns:
        Tracks ordered by creation.
    """
    tracks: List[ObjectTrack] = []
    active: List[ObjectTrack] = []

    for components in components_by_frame:
        assigned: Dict[int, ObjectTrack] = {}
        if active and components:
            previous = np.stack([t.components[t.frames[-1]].centroid for t in active])
            current = np.stack([c.centroid for c in components])
            distances = np.linalg.norm(previous[:, None, :] - current[None, :, :], axis=-1)
            pairs = sorted(
                (distances[i, j], i, j)
                for i in range(len(active))
                for j in range(len(components))
                if distances[i, j] <= match_radius
            )
            used_tracks = set()
            for _, i, j in pairs:
                if i in used_tracks or j in assigned:
                    continue
                used_tracks.add(i)
                assigned[j] = active[i]

        next_active = []
        for j, component in enumerate(components):
            track = assigned.get(j)
            if track is None:
                track = ObjectTrack(object_id=len(tracks))
                tracks.append(track)
            track.components[component.frame_index] = component
            next_active.append(track)
        active = next_active

    return tracks


def classify_dynamic(track: ObjectTrack, mu_th: float) -> bool:
    """A track is dynamic iff some consecutive centroid step has length ``>= mu_th``."""
    frames = track.frames
    if len(frames) < 2:
        logger.warning("track %d observed in a single frame; classified static", track.object_id)
        return False
    centroids = np.stack([track.components[t].centroid for t in frames])
    steps = np.linalg.norm(np.diff(centroids, axis=0), axis=1)
    return bool((steps >= mu_th).any())


def upsample_object(centers: np.ndarray, cell_size: float, target_voxel: float = 0.05) -> np.ndarray:
    """Subdivide each occupied cell into ``s³`` sub-cell centres, ``s = ⌈cell/target⌉``.

    Returns the original centres unchanged (with a warning) when the target voxel
    is not smaller than the cell.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if target_voxel >= cell_size:
        logger.warning(
            "target voxel %.3f m is not smaller than cell size %.3f m; not upsampling",
            target_voxel,
            cell_size,
        )
        return centers.copy()
    s = int(math.ceil(cell_size / target_voxel - 1e-9))
    ticks = ((np.arange(s) + 0.5) / s - 0.5) * cell_size
    offsets = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    return (centers[:, None, :] + offsets[None, :, :]).reshape(-1, 3)


def colorize_points(
    points: np.ndarray,
    camera: Camera,
    image: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Colour points by bilinear lookup at their projection into one image.

    Points behind the camera or projecting outside the image stay uncoloured
    and receive the default gray.

    Returns:
        Tuple of colours (M, 3) and a boolean mask of coloured points.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.tile(np.asarray(DEFAULT_GRAY), (points.shape[0], 1))
    if points.shape[0] == 0:
        return colors, np.zeros(0, dtype=bool)

    uv, depth = camera.project(points)
    height, width = image.shape[:2]
    with np.errstate(invalid="ignore"):
        valid = (
            (depth > 0)
            & (uv[:, 0] >= 0) & (uv[:, 0] <= width - 1)
            & (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1)
        )
    if valid.any():
        coords = np.stack((uv[valid, 1], uv[valid, 0]))
        image = np.asarray(image, dtype=np.float64)
        colors[valid] = np.stack(
            [ndimage.map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(3)],
            axis=1,
        )
    return colors, valid


def colorize_multi(
    points: np.ndarray,
    views: Sequence[Tuple[Camera, np.ndarray]],
) -> Tuple[np.ndarray, np.ndarray]:
    """Colour points from several views; the first view with a valid projection wins."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.tile(np.asarray(DEFAULT_GRAY), (points.shape[0], 1))
    done = np.zeros(points.shape[0], dtype=bool)
    for camera, image in views:
        pending = np.flatnonzero(~done)
        if pending.size == 0:
            break
        view_colors, valid = colorize_points(points[pending], camera, image)
        hit = pending[valid]
        colors[hit] = view_colors[valid]
        done[hit] = True
    return colors, done


def grid_to_static_cloud(
    grid: OccupancyGrid,
    occupied: np.ndarray,
    labels: np.ndarray,
    vehicle_class_ids: Sequence[int],
) -> SemanticPointCloud:
    """One point per occupied non-vehicle cell, at the cell centre, with its label."""
    mask = occupied & ~np.isin(labels, list(vehicle_class_ids))
    cells = np.argwhere(mask)
    return SemanticPointCloud.from_points(
        grid.cell_centers(cells),
        labels=labels[tuple(cells.T)] if len(cells) else np.zeros(0, dtype=np.int64),
    )


def merge_with_sfm(static: SemanticPointCloud, sfm: SemanticPointCloud) -> SemanticPointCloud:
    """Concatenate the occupancy cloud with an SfM cloud; no deduplication.

    Both clouds must already share the world frame; SfM points are tagged
    :attr:`PointSource.SFM` and :data:`UNLABELED`.
    """
    tagged = SemanticPointCloud(
        positions=sfm.positions,
        colors=sfm.colors,
        has_color=sfm.has_color,
        labels=np.full(len(sfm), UNLABELED, dtype=np.int64),
        sources=np.full(len(sfm), int(PointSource.SFM), dtype=np.uint8),
    )
    return SemanticPointCloud.concat([static, tagged])


# ---------------------------------------------------------------------------
# Full prior pipeline
# ---------------------------------------------------------------------------

class PriorMode(str, Enum):
    """Which points seed the models.

    Vehicle poses come from the occupancy tracks in every mode; only the
    initial point clouds change.
    """

    OCCUPANCY_SFM = "occupancy_sfm"
    SFM = "sfm"
    RANDOM = "random"


@dataclass
class VehiclePrior:
    """Colourised dense points of one dynamic vehicle in its own frame."""

    track: ObjectTrack
    points: np.ndarray
    colors: np.ndarray
    has_color: np.ndarray
    source: PointSource = PointSource.OCCUPANCY


@dataclass
class PriorSet:
    """Everything the convert stage produces."""

    static: SemanticPointCloud
    vehicles: List[VehiclePrior]
    tracks: List[ObjectTrack]
    mode: PriorMode = PriorMode.OCCUPANCY_SFM

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value,
            "static_points": len(self.static),
            "dynamic_vehicles": [v.track.object_id for v in self.vehicles],
            "tracks": [t.to_dict() for t in self.tracks],
        }


def _dedup_cells(parts: Sequence[Tuple[OccupancyGrid, SemanticPointCloud]]) -> SemanticPointCloud:
    """Keep the first point of every occupied cell.

    Cells are keyed on the lattice (origin and cell size) of the grid each
    point came from; grids on different lattices never merge cells.
    """
    cloud = SemanticPointCloud.concat(c for _, c in parts)
    if not len(cloud):
        return cloud
    lattices: Dict[Tuple[float, ...], int] = {}
    keys = []
    for grid, part in parts:
        lattice = lattices.setdefault((*(float(v) for v in grid.origin), float(grid.cell_size)), len(lattices))
        index = np.floor((part.positions - grid.origin) / grid.cell_size).astype(np.int64)
        keys.append(np.column_stack((np.full(len(part), lattice, dtype=np.int64), index.reshape(-1, 3))))
    _, first = np.unique(np.concatenate(keys), axis=0, return_index=True)
    return cloud.subset(np.sort(first))


def random_cloud(
    lower: np.ndarray,
    upper: np.ndarray,
    count: int,
    rng: np.random.Generator,
    source: PointSource = PointSource.RANDOM,
) -> SemanticPointCloud:
    """``count`` unlabeled points drawn uniformly inside the box ``[lower, upper]``."""
    positions = rng.uniform(np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64), size=(count, 3))
    return SemanticPointCloud.from_points(positions, source=source)


def _component_box(component: ObjectComponent) -> Tuple[np.ndarray, np.ndarray]:
    half = 0.5 * component.cell_size
    return component.centers.min(axis=0) - half, component.centers.max(axis=0) + half


def _vehicle_seed_points(
    track: ObjectTrack,
    mode: PriorMode,
    target_voxel: float,
    sfm: Optional[SemanticPointCloud],
    rng: np.random.Generator,
) -> Tuple[np.ndarray, PointSource]:
    """World-frame seed points of a dynamic vehicle at its first observation."""
    component = track.first_component
    if mode is PriorMode.OCCUPANCY_SFM:
        return upsample_object(component.centers, component.cell_size, target_voxel), PointSource.OCCUPANCY
    lower, upper = _component_box(component)
    if mode is PriorMode.SFM and sfm is not None:
        inside = np.all((sfm.positions >= lower) & (sfm.positions <= upper), axis=1)
        if inside.any():
            return sfm.positions[inside], PointSource.SFM
        logger.warning("no SfM points inside track %d; seeding it with random points", track.object_id)
    return random_cloud(lower, upper, len(component.centers), rng).positions, PointSource.RANDOM


def build_priors(
    grids: Sequence[OccupancyGrid],
    views_by_frame: Mapping[int, Sequence[Tuple[Camera, np.ndarray]]],
    vehicle_class_ids: Sequence[int],
    tau: float = 0.5,
    mu_th: float = 0.5,
    match_radius: float = 2.0,
    target_voxel: float = 0.05,
    sfm: Optional[SemanticPointCloud] = None,
    colorize_static: bool = True,
    mode: Union[PriorMode, str] = PriorMode.OCCUPANCY_SFM,
    random_points: int = 0,
    seed: int = 0,
) -> PriorSet:
    """Run the occupancy prior pipeline over a sequence of grids.

    Args:
        grids: One grid per frame, in frame order.
        views_by_frame: Cameras and images per frame, in manifest order.
        vehicle_class_ids: Classes treated as vehicles.
        tau: Occupancy threshold.
        mu_th: Per-step displacement marking a track dynamic (meters).
        match_radius: Track association radius (meters).
        target_voxel: Upsampling voxel for dynamic vehicles (meters).
        sfm: Optional SfM cloud merged into the static prior.
        colorize_static: Also colour static points from the images.
        mode: Point seeds. ``occupancy_sfm`` uses occupancy cells plus SfM,
            ``sfm`` only the SfM cloud, ``random`` uniform samples inside the
            grid bounds.
        random_points: Sample count in ``random`` mode (0 matches the size of
            the occupancy static cloud).
        seed: Seed for the random samples.

    Returns:
        PriorSet with the static cloud, dynamic vehicle priors and all tracks.

    Raises:
        ValidationError: On an empty grid sequence, an unknown mode or ``sfm``
            mode without an SfM cloud.
    """
    if not grids:
        raise ValidationError("at least one occupancy grid is required")
    try:
        mode = PriorMode(mode)
    except ValueError as e:
        raise ValidationError(f"unknown prior mode {mode!r}") from e
    if mode is PriorMode.SFM and (sfm is None or not len(sfm)):
        raise ValidationError("prior mode 'sfm' needs an SfM point cloud")
    rng = np.random.default_rng(seed)
    grid_by_frame = {grid.frame_index: grid for grid in grids}

    static_parts = []
    components_by_frame = []
    for grid in grids:
        grid.validate()
        occupied = threshold_occupancy(grid, tau)
        labels = semantic_argmax(grid)
        components_by_frame.append(extract_objects(grid, occupied, labels, vehicle_class_ids))
        static_parts.append((grid, grid_to_static_cloud(grid, occupied, labels, vehicle_class_ids)))

    tracks = associate_tracks(components_by_frame, match_radius)
    for track in tracks:
        track.dynamic = classify_dynamic(track, mu_th)

    # parked vehicles belong to the street
    for track in tracks:
        if not track.dynamic:
            first = track.first_component
            static_parts.append((
                grid_by_frame[first.frame_index],
                SemanticPointCloud.from_points(first.centers, labels=np.full(len(first.centers), first.label)),
            ))

    all_views = [view for t in sorted(views_by_frame) for view in views_by_frame[t]]
    occupancy_static = _dedup_cells(static_parts)
    if mode is PriorMode.OCCUPANCY_SFM:
        static = occupancy_static
    elif mode is PriorMode.RANDOM:
        lower = np.min([g.bounds[0] for g in grids], axis=0)
        upper = np.max([g.bounds[1] for g in grids], axis=0)
        static = random_cloud(lower, upper, random_points or len(occupancy_static), rng)
    else:
        static = SemanticPointCloud.empty()
    if colorize_static and len(static):
        static.colors, static.has_color = colorize_multi(static.positions, all_views)

    vehicles = []
    for track in tracks:
        if not track.dynamic:
            continue
        first = track.first_component
        dense, source = _vehicle_seed_points(track, mode, target_voxel, sfm, rng)
        colors, has_color = colorize_multi(dense, views_by_frame.get(first.frame_index, []))
        vehicles.append(
            VehiclePrior(
                track=track,
                points=dense - first.centroid,
                colors=colors,
                has_color=has_color,
                source=source,
            )
        )

    if mode is not PriorMode.RANDOM and sfm is not None and len(sfm):
        static = merge_with_sfm(static, sfm)

    logger.info(
        "%s priors: %d static points, %d tracks (%d dynamic)",
        mode.value,
        len(static),
        len(tracks),
        len(vehicles),
    )
    return PriorSet(static=static, vehicles=vehicles, tracks=tracks, mode=mode)
