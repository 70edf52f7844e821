"""Optimizable scene models and their per-frame assembly.

The street model holds static world-frame Gaussians with view-dependent SH
colour and N-class semantic logits. Each vehicle model holds Gaussians in its
own frame, Fourier-in-time SH colour, a one-dimensional vehicle logit and a pose
track with learnable per-frame deltas. :func:`assemble` merges both into one
world-frame set for a given frame.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import ShapeMismatchError, ValidationError
from .geom import (
    DTYPE,
    Pose,
    apply_pose_delta,
    axis_angle_to_quat,
    fourier_sh_at_time,
    identity_quat,
    rgb_to_sh_dc,
    sh_coeff_count,
    transform_to_world,
)
from .occupancy import UNLABELED, ObjectTrack, SemanticPointCloud


logger = logging.getLogger(__name__)

SEMANTIC_INIT = 4.0


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1 - x))


def knn_scale(positions: np.ndarray, default: float = 0.1, k: int = 3) -> np.ndarray:
    """Mean distance to the ``k`` nearest neighbours of every point."""
    count = positions.shape[0]
    if count < 2:
        return np.full(count, default)
    neighbours = min(k, count - 1)
    distances, _ = cKDTree(positions).query(positions, k=neighbours + 1)
    return np.maximum(distances[:, 1:].mean(axis=1), 1e-7)


class _GaussianSet:
    """Shared bookkeeping for models whose leading axis indexes Gaussians."""

    PER_GAUSSIAN: Sequence[str] = ()
    prefix: str = ""

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def gaussian_fields(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.PER_GAUSSIAN}

    def replace_fields(self, fields: Dict[str, torch.Tensor]) -> None:
        """Swap per-Gaussian tensors (after densification) as fresh leaves."""
        for name, value in fields.items():
            setattr(self, name, value.detach().clone().requires_grad_(True))
        self._check_lengths()

    def requires_grad_(self, flag: bool = True) -> "_GaussianSet":
        for tensor in self.parameters().values():
            tensor.requires_grad_(flag)
        return self

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {f"{self.prefix}.{name}": getattr(self, name) for name in self.PER_GAUSSIAN}

    def _check_lengths(self) -> None:
        count = len(self)
        for name in self.PER_GAUSSIAN:
            if getattr(self, name).shape[0] != count:
                raise ShapeMismatchError(f"{self.prefix}.{name} has {getattr(self, name).shape[0]} rows, expected {count}")


@dataclass
class StreetGaussians(_GaussianSet):
    """Static world-frame Gaussians."""

    means: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor
    semantic_logits: torch.Tensor
    sh_degree: int = 3

    PER_GAUSSIAN = ("means", "rotations", "log_scales", "opacity_logits", "sh", "semantic_logits")
    prefix = "street"

    def __post_init__(self):
        self._check_lengths()
        if self.sh.shape[1] != sh_coeff_count(self.sh_degree):
            raise ShapeMismatchError(f"street SH has {self.sh.shape[1]} coefficients for degree {self.sh_degree}")

    @property
    def num_classes(self) -> int:
        return self.semantic_logits.shape[1]

    @classmethod
    def empty(cls, num_classes: int, sh_degree: int = 3) -> "StreetGaussians":
        K = sh_coeff_count(sh_degree)
        return cls(
            means=torch.zeros(0, 3, dtype=DTYPE),
            rotations=torch.zeros(0, 4, dtype=DTYPE),
            log_scales=torch.zeros(0, 3, dtype=DTYPE),
            opacity_logits=torch.zeros(0, dtype=DTYPE),
            sh=torch.zeros(0, K, 3, dtype=DTYPE),
            semantic_logits=torch.zeros(0, num_classes, dtype=DTYPE),
            sh_degree=sh_degree,
        )


@dataclass
class VehicleModel(_GaussianSet):
    """Vehicle-frame Gaussians plus a per-frame pose track with learnable deltas.

    Base poses are (identity rotation, centroid_t); the vehicle frame sits at the
    first observed centroid with world-aligned axes, so heading is learned
    through ``delta_rotations`` (axis-angle).
    """

    vehicle_id: int
    means: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    fourier_sh: torch.Tensor
    semantic_logits: torch.Tensor
    frames: List[int]
    base_rotations: torch.Tensor
    base_translations: torch.Tensor
    delta_rotations: torch.Tensor
    delta_translations: torch.Tensor
    frame_count: int
    sh_degree: int = 1
    frozen: bool = False
    _slots: Dict[int, int] = field(default_factory=dict, repr=False)

    PER_GAUSSIAN = ("means", "rotations", "log_scales", "opacity_logits", "fourier_sh", "semantic_logits")
    POSE_FIELDS = ("delta_rotations", "delta_translations")

    def __post_init__(self):
        self.frames = [int(t) for t in self.frames]
        self._slots = {t: i for i, t in enumerate(self.frames)}
        self._check_lengths()
        track_len = len(self.frames)
        for name in ("base_rotations", "base_translations", *self.POSE_FIELDS):
            if getattr(self, name).shape[0] != track_len:
                raise ShapeMismatchError(f"vehicle {self.vehicle_id}: {name} does not cover {track_len} frames")
        if self.fourier_sh.shape[1] != sh_coeff_count(self.sh_degree):
            raise ShapeMismatchError(f"vehicle {self.vehicle_id}: Fourier SH does not match degree {self.sh_degree}")

    @property
    def prefix(self) -> str:
        return f"vehicle{self.vehicle_id}"

    @property
    def fourier_k(self) -> int:
        return self.fourier_sh.shape[-1]

    def has_frame(self, t: int) -> bool:
        return t in self._slots

    def base_pose(self, t: int) -> Pose:
        slot = self._slots[t]
        return Pose(self.base_rotations[slot], self.base_translations[slot])

    def pose_at(self, t: int) -> Pose:
        """Refined pose ``(R_t ΔR_t, T_t + ΔT_t)`` at frame ``t``."""
        slot = self._slots[t]
        return apply_pose_delta(
            self.base_pose(t),
            axis_angle_to_quat(self.delta_rotations[slot]),
            self.delta_translations[slot],
        )

    def parameters(self) -> Dict[str, torch.Tensor]:
        params = super().parameters()
        if not self.frozen:
            for name in self.POSE_FIELDS:
                params[f"{self.prefix}.{name}"] = getattr(self, name)
        return params


@dataclass
class AssembledScene:
    """World-frame Gaussians of every model at one frame.

    Street Gaussians come first (``street_count`` rows); ``owners`` holds -1 for
    street rows and the position in the vehicle list otherwise, and
    ``local_index`` the row inside the owning model.
    """

    means: torch.Tensor
    rotations: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    sh: torch.Tensor
    sh_degree: int
    street_semantics: torch.Tensor
    vehicle_semantics: torch.Tensor
    owners: torch.Tensor
    local_index: torch.Tensor
    street_count: int
    frame_index: int = 0

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.street_semantics.shape[1]


def init_street(
    cloud: SemanticPointCloud,
    num_classes: int,
    sh_degree: int = 3,
    initial_opacity: float = 0.1,
    default_scale: float = 0.1,
) -> StreetGaussians:
    """One street Gaussian per prior point.

    Means come from the points, DC colour inverts the colour activation,
    isotropic scale is the mean 3-NN distance, opacity starts at
    ``initial_opacity`` and semantic logits are +4 on the point's label.

    Raises:
        ValidationError: If the cloud is empty.
    """
    if len(cloud) == 0:
        raise ValidationError("cannot initialise the street model from an empty cloud")
    cloud.validate(num_classes)
    count = len(cloud)
    K = sh_coeff_count(sh_degree)

    sh = torch.zeros(count, K, 3, dtype=DTYPE)
    sh[:, 0, :] = rgb_to_sh_dc(torch.as_tensor(cloud.colors, dtype=DTYPE))

    semantic = torch.zeros(count, num_classes, dtype=DTYPE)
    labelled = np.flatnonzero(cloud.labels != UNLABELED)
    semantic[torch.as_tensor(labelled), torch.as_tensor(cloud.labels[labelled])] = SEMANTIC_INIT

    scale = knn_scale(cloud.positions, default=default_scale)
    street = StreetGaussians(
        means=torch.as_tensor(cloud.positions, dtype=DTYPE).clone(),
        rotations=identity_quat(count),
        log_scales=torch.log(torch.as_tensor(scale, dtype=DTYPE))[:, None].repeat(1, 3),
        opacity_logits=inverse_sigmoid(torch.full((count,), initial_opacity, dtype=DTYPE)),
        sh=sh,
        semantic_logits=semantic,
        sh_degree=sh_degree,
    )
    return street.requires_grad_(True)


def init_vehicle(
    track: ObjectTrack,
    points: np.ndarray,
    colors: np.ndarray,
    frame_count: int,
    fourier_k: int = 5,
    sh_degree: int = 1,
    initial_opacity: float = 0.1,
    default_scale: float = 0.05,
) -> VehicleModel:
    """Vehicle model from vehicle-frame points and the track's centroids.

    Args:
        track: Track providing observed frames and centroids.
        points: Points relative to the first observed centroid (M, 3).
        colors: Point colours (M, 3).
        frame_count: Sequence length used to normalize time.
        fourier_k: Fourier terms per SH coefficient.
        sh_degree: SH degree of the vehicle appearance.
        initial_opacity: Initial opacity of every Gaussian.
        default_scale: Scale used when fewer than two points exist.

    Raises:
        ValidationError: If ``points`` is empty or the track has no frames.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise ValidationError(f"vehicle {track.object_id}: no points to initialise from")
    frames = track.frames
    if not frames:
        raise ValidationError(f"vehicle {track.object_id}: track has no frames")

    count = points.shape[0]
    K = sh_coeff_count(sh_degree)
    fourier = torch.zeros(count, K, 3, fourier_k, dtype=DTYPE)
    fourier[:, 0, :, 0] = rgb_to_sh_dc(torch.as_tensor(colors, dtype=DTYPE))

    centroids = np.stack([track.components[t].centroid for t in frames])
    scale = knn_scale(points, default=default_scale)
    frozen = len(frames) == 1
    if frozen:
        logger.info("vehicle %d seen in one frame; pose deltas frozen", track.object_id)

    model = VehicleModel(
        vehicle_id=track.object_id,
        means=torch.as_tensor(points, dtype=DTYPE).clone(),
        rotations=identity_quat(count),
        log_scales=torch.log(torch.as_tensor(scale, dtype=DTYPE))[:, None].repeat(1, 3),
        opacity_logits=inverse_sigmoid(torch.full((count,), initial_opacity, dtype=DTYPE)),
        fourier_sh=fourier,
        semantic_logits=torch.full((count,), SEMANTIC_INIT, dtype=DTYPE),
        frames=frames,
        base_rotations=identity_quat(len(frames)),
        base_translations=torch.as_tensor(centroids, dtype=DTYPE),
        delta_rotations=torch.zeros(len(frames), 3, dtype=DTYPE),
        delta_translations=torch.zeros(len(frames), 3, dtype=DTYPE),
        frame_count=frame_count,
        sh_degree=sh_degree,
        frozen=frozen,
    )
    return model.requires_grad_(True)


def _pad_sh(sh: torch.Tensor, K: int) -> torch.Tensor:
    if sh.shape[1] == K:
        return sh
    pad = torch.zeros(sh.shape[0], K - sh.shape[1], 3, dtype=sh.dtype)
    return torch.cat((sh, pad), dim=1)


def assemble(
    street: StreetGaussians,
    vehicles: Sequence[VehicleModel],
    t: int,
    active_sh_degree: Optional[int] = None,
    literal_rotation: bool = False,
) -> AssembledScene:
    """Merge the street model and every vehicle present at frame ``t``.

    Vehicle Gaussians go through their refined pose (base pose with deltas) and
    their SH colour is recovered from the Fourier coefficients at
    ``t / frame_count``. Vehicles without a pose at ``t`` are skipped.

    Args:
        street: Static model.
        vehicles: Dynamic models.
        t: Frame index.
        active_sh_degree: Highest SH degree used for colour (defaults to all).
        literal_rotation: Use the transposed ``R_o R_tᵀ`` rotation composition.

    Returns:
        AssembledScene whose tensors stay connected to the model parameters.
    """
    K = max([sh_coeff_count(street.sh_degree)] + [sh_coeff_count(v.sh_degree) for v in vehicles])
    means = [street.means]
    rotations = [street.rotations]
    scales = [street.scales]
    opacities = [street.opacities]
    shs = [_pad_sh(street.sh, K)]
    vehicle_semantics = []
    owners = [torch.full((len(street),), -1, dtype=torch.long)]
    local = [torch.arange(len(street))]

    for position, vehicle in enumerate(vehicles):
        if not vehicle.has_frame(t):
            continue
        mu_w, q_w = transform_to_world(
            vehicle.pose_at(t), vehicle.means, vehicle.rotations, literal=literal_rotation
        )
        means.append(mu_w)
        rotations.append(q_w)
        scales.append(vehicle.scales)
        opacities.append(vehicle.opacities)
        shs.append(_pad_sh(fourier_sh_at_time(vehicle.fourier_sh, t / vehicle.frame_count), K))
        vehicle_semantics.append(vehicle.semantic_logits)
        owners.append(torch.full((len(vehicle),), position, dtype=torch.long))
        local.append(torch.arange(len(vehicle)))

    degree = max([street.sh_degree] + [v.sh_degree for v in vehicles])
    if active_sh_degree is not None:
        degree = min(degree, active_sh_degree)

    return AssembledScene(
        means=torch.cat(means),
        rotations=torch.cat(rotations),
        scales=torch.cat(scales),
        opacities=torch.cat(opacities),
        sh=torch.cat(shs),
        sh_degree=degree,
        street_semantics=street.semantic_logits,
        vehicle_semantics=torch.cat(vehicle_semantics) if vehicle_semantics else torch.zeros(0, dtype=DTYPE),
        owners=torch.cat(owners),
        local_index=torch.cat(local),
        street_count=len(street),
        frame_index=t,
    )


def semantic_output(scene: AssembledScene, vehicle_class_id: int) -> torch.Tensor:
    """Per-Gaussian class distribution (P, N).

    Street rows are the softmax of their logits. Vehicle rows put
    ``sigmoid(s)`` on the vehicle class and spread the rest evenly over the
    other classes.
    """
    N = scene.num_classes
    street = torch.softmax(scene.street_semantics, dim=-1)
    p_vehicle = torch.sigmoid(scene.vehicle_semantics)[:, None]
    if N == 1:
        vehicle = torch.ones(p_vehicle.shape[0], 1, dtype=DTYPE)
    else:
        onehot = torch.zeros(1, N, dtype=DTYPE)
        onehot[0, vehicle_class_id] = 1.0
        vehicle = p_vehicle * onehot + (1 - p_vehicle) * (1 - onehot) / (N - 1)
    return torch.cat((street, vehicle))


def scene_parameters(street: StreetGaussians, vehicles: Sequence[VehicleModel]) -> Dict[str, torch.Tensor]:
    """All optimizable tensors keyed ``<model>.<field>``."""
    params = dict(street.parameters())
    for vehicle in vehicles:
        params.update(vehicle.parameters())
    return params
