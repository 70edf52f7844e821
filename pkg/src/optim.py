"""Photometric optimisation: loss, SSIM, Adam, densification and the training loop."""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .camera import Camera
from .config import TrainConfig
from .errors import NonFiniteGradientError, ShapeMismatchError, TrainingAborted, ValidationError
from .geom import DTYPE, MAX_SH_DEGREE, as_tensor, quat_to_rotmat
from .harness import psnr
from .render import SCREEN_MEANS, backward, render
from .scene import (
    StreetGaussians,
    VehicleModel,
    _GaussianSet,
    assemble,
    inverse_sigmoid,
    scene_parameters,
)


logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
SPLIT_CHILDREN = 2
SPLIT_SHRINK = 1.6

METRICS_COLUMNS = ("iteration", "loss", "l1", "dssim", "psnr_holdout", "gaussian_count", "wall_ms")

# parameter field -> learning-rate group
FIELD_GROUPS = {
    "means": "position",
    "rotations": "rotation",
    "log_scales": "scale",
    "opacity_logits": "opacity",
    "sh": "sh",
    "fourier_sh": "sh",
    "semantic_logits": "semantic",
    "delta_rotations": "delta_rotation",
    "delta_translations": "delta_translation",
}


def _check_same_shape(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")


def _gaussian_window() -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=DTYPE) - SSIM_WINDOW // 2
    g = torch.exp(-(coords ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean structural similarity of two (H, W, C) images.

    Local statistics use an 11×11 Gaussian window (σ = 1.5) evaluated only
    where the window fits inside the image; the SSIM map is averaged over
    positions and channels.

    Raises:
        ShapeMismatchError: If the images differ in shape.
        ValidationError: If the image is smaller than the window.
    """
    x, y = as_tensor(x), as_tensor(y)
    _check_same_shape(x, y)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValidationError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(x.shape[:2])}")

    channels = x.shape[2]
    window = _gaussian_window().expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)
    a = x.permute(2, 0, 1)[None]
    b = y.permute(2, 0, 1)[None]

    def blur(img: torch.Tensor) -> torch.Tensor:
        return F.conv2d(img, window, groups=channels)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (numerator / denominator).mean()


@dataclass
class LossResult:
    """Photometric loss value and its gradient with respect to the rendered image."""

    total: float
    l1: float
    dssim: float
    grad: torch.Tensor

    @property
    def finite(self) -> bool:
        return math.isfinite(self.total) and bool(torch.isfinite(self.grad).all())


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor, lam: float) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable ``(1-λ)·L1 + λ·D-SSIM``; returns (total, l1, dssim) tensors."""
    _check_same_shape(rendered, target)
    l1 = (rendered - target).abs().mean()
    dssim = (1.0 - ssim(rendered, target)) / 2.0
    return (1.0 - lam) * l1 + lam * dssim, l1, dssim


def loss(rendered: torch.Tensor, target: torch.Tensor, lam: float) -> LossResult:
    """Evaluate the photometric loss and dL/dRGB.

    Args:
        rendered: Rendered image (H, W, 3).
        target: Target image (H, W, 3).
        lam: D-SSIM weight λ in [0, 1].

    Returns:
        LossResult with scalar values and the gradient image.
    """
    image = as_tensor(rendered).detach().clone().requires_grad_(True)
    total, l1, dssim = photometric_loss(image, as_tensor(target), lam)
    (grad,) = torch.autograd.grad(total, image)
    return LossResult(total=float(total), l1=float(l1), dssim=float(dssim), grad=grad)


@dataclass
class OptimizerState:
    """Adam moments per named parameter plus densification statistics per model."""

    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    grad_accum: Dict[str, torch.Tensor] = field(default_factory=dict)
    grad_count: Dict[str, torch.Tensor] = field(default_factory=dict)

    def moments(self, name: str, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if name not in self.exp_avg:
            self.exp_avg[name] = torch.zeros_like(like, dtype=DTYPE)
            self.exp_avg_sq[name] = torch.zeros_like(like, dtype=DTYPE)
        return self.exp_avg[name], self.exp_avg_sq[name]

    def stats(self, prefix: str, count: int) -> Tuple[torch.Tensor, torch.Tensor]:
        accum = self.grad_accum.get(prefix)
        if accum is None or accum.shape[0] != count:
            self.grad_accum[prefix] = torch.zeros(count, dtype=DTYPE)
            self.grad_count[prefix] = torch.zeros(count, dtype=DTYPE)
        return self.grad_accum[prefix], self.grad_count[prefix]

    def reset_stats(self, prefix: str, count: int) -> None:
        self.grad_accum[prefix] = torch.zeros(count, dtype=DTYPE)
        self.grad_count[prefix] = torch.zeros(count, dtype=DTYPE)

    def remap_rows(self, name: str, keep: torch.Tensor, added: int) -> None:
        """Keep moment rows ``keep`` and append ``added`` zero rows."""
        for store in (self.exp_avg, self.exp_avg_sq):
            if name not in store:
                continue
            old = store[name][keep]
            zeros = torch.zeros((added,) + tuple(old.shape[1:]), dtype=DTYPE)
            store[name] = torch.cat((old, zeros))

    def check_shapes(self, params: Mapping[str, torch.Tensor]) -> None:
        for name, tensor in params.items():
            if name in self.exp_avg and self.exp_avg[name].shape != tensor.shape:
                raise ShapeMismatchError(
                    f"moment shape {tuple(self.exp_avg[name].shape)} does not match {name} {tuple(tensor.shape)}"
                )


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
    lrs: Mapping[str, float],
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update, in place.

    Entries whose gradient is exactly zero (Gaussians that did not reach any
    pixel) keep both their value and their moments.

    Args:
        params: Named leaf tensors.
        grads: Gradients keyed like ``params``; missing names count as zero.
        state: Moments and step counter.
        lrs: Learning rate per parameter name.
        betas: Moment decay rates.
        eps: Denominator floor.

    Raises:
        NonFiniteGradientError: If any gradient holds NaN or Inf; nothing is updated.
    """
    for name, grad in grads.items():
        if name in params and not bool(torch.isfinite(grad).all()):
            raise NonFiniteGradientError(name)

    state.step += 1
    beta1, beta2 = betas
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    with torch.no_grad():
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            m, v = state.moments(name, param)
            active = grad != 0
            m_new = beta1 * m + (1.0 - beta1) * grad
            v_new = beta2 * v + (1.0 - beta2) * grad * grad
            m.copy_(torch.where(active, m_new, m))
            v.copy_(torch.where(active, v_new, v))
            update = lrs[name] / bias1 * m / (torch.sqrt(v / bias2) + eps)
            param.sub_(torch.where(active, update, torch.zeros_like(update)))


def exponential_lr(lr_init: float, lr_final: float, step: int, max_steps: int) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if max_steps <= 0:
        return lr_init
    t = min(max(step / max_steps, 0.0), 1.0)
    return math.exp((1.0 - t) * math.log(lr_init) + t * math.log(lr_final))


def group_learning_rates(config: TrainConfig, iteration: int, spatial_scale: float = 1.0) -> Dict[str, float]:
    """Learning rate of every parameter group at ``iteration``."""
    return {
        "position": exponential_lr(config.lr_position, config.lr_position_final, iteration, config.iterations) * spatial_scale,
        "rotation": config.lr_rotation,
        "scale": config.lr_scale,
        "opacity": config.lr_opacity,
        "sh": config.lr_sh,
        "semantic": config.lr_semantic,
        "delta_rotation": config.lr_delta_rotation,
        "delta_translation": config.lr_delta_translation,
    }


def param_group(name: str) -> str:
    return FIELD_GROUPS[name.rsplit(".", 1)[-1]]


def accumulate_screen_grads(
    state: OptimizerState,
    street: StreetGaussians,
    vehicles: Sequence[VehicleModel],
    owners: torch.Tensor,
    local_index: torch.Tensor,
    screen_grad: torch.Tensor,
    visible: np.ndarray,
    width: int,
    height: int,
) -> None:
    """Add the normalized-device-space gradient norm of every visible splat."""
    ndc = screen_grad * torch.tensor([0.5 * width, 0.5 * height], dtype=DTYPE)
    norms = torch.linalg.norm(ndc, dim=-1)
    visible_t = torch.as_tensor(visible)
    models: List[_GaussianSet] = [street, *vehicles]
    for position, model in enumerate(models):
        rows = (owners == position - 1) & visible_t
        if not bool(rows.any()):
            continue
        accum, count = state.stats(model.prefix, len(model))
        index = local_index[rows]
        accum.index_add_(0, index, norms[rows])
        count.index_add_(0, index, torch.ones_like(norms[rows]))


def densify_and_prune(
    model: _GaussianSet,
    state: OptimizerState,
    config: TrainConfig,
    scene_extent: float,
    generator: Optional[torch.Generator] = None,
) -> Tuple[int, int, int]:
    """Clone, split and prune one model from its accumulated gradient statistics.

    Gaussians whose mean screen-space gradient exceeds the threshold are
    cloned when their largest scale is at most ``scale_split_fraction`` of the
    scene extent, otherwise replaced by two children sampled inside the parent
    with scale/1.6. Gaussians with opacity below the prune threshold are
    removed afterwards. Moments of new rows start at zero.

    Returns:
        Tuple of (cloned, split, pruned) counts.
    """
    count = len(model)
    accum, hits = state.stats(model.prefix, count)
    mean_grad = accum / hits.clamp(min=1.0)

    with torch.no_grad():
        selected = mean_grad > config.densify_grad_threshold
        max_scale = model.scales.max(dim=1).values if count else torch.zeros(0, dtype=DTYPE)
        large = max_scale > config.scale_split_fraction * scene_extent
        clone = selected & ~large
        split = selected & large

        fields = model.gaussian_fields()
        keep = torch.nonzero(~split).flatten()
        clone_idx = torch.nonzero(clone).flatten()
        split_idx = torch.nonzero(split).flatten()

        children = {}
        if len(split_idx):
            parent_scale = model.scales[split_idx].repeat(SPLIT_CHILDREN, 1)
            noise = torch.randn(parent_scale.shape, dtype=DTYPE, generator=generator) * parent_scale
            rot = quat_to_rotmat(model.rotations[split_idx]).repeat(SPLIT_CHILDREN, 1, 1)
            offsets = (rot @ noise[..., None])[..., 0]
            for name, value in fields.items():
                children[name] = value[split_idx].repeat((SPLIT_CHILDREN,) + (1,) * (value.dim() - 1))
            children["means"] = children["means"] + offsets
            children["log_scales"] = torch.log(parent_scale / SPLIT_SHRINK)

        grown = {}
        for name, value in fields.items():
            parts = [value[keep], value[clone_idx]]
            if children:
                parts.append(children[name])
            grown[name] = torch.cat(parts)

        opacity = torch.sigmoid(grown["opacity_logits"])
        survivors = torch.nonzero(opacity >= config.opacity_prune_threshold).flatten()
        pruned = len(opacity) - len(survivors)
        new_fields = {name: value[survivors] for name, value in grown.items()}

    added = len(clone_idx) + SPLIT_CHILDREN * len(split_idx)
    for name in fields:
        key = f"{model.prefix}.{name}"
        state.remap_rows(key, keep, added)
        for store in (state.exp_avg, state.exp_avg_sq):
            if key in store:
                store[key] = store[key][survivors]

    model.replace_fields(new_fields)
    state.reset_stats(model.prefix, len(model))
    if len(clone_idx) or len(split_idx) or pruned:
        logger.debug(
            "%s: cloned %d, split %d, pruned %d -> %d Gaussians",
            model.prefix, len(clone_idx), len(split_idx), pruned, len(model),
        )
    return len(clone_idx), len(split_idx), pruned


def reset_opacity(model: _GaussianSet, state: OptimizerState, value: float) -> None:
    """Clamp every opacity to at most ``value`` and clear its moments."""
    with torch.no_grad():
        capped = torch.clamp(model.opacities, max=value)
        model.opacity_logits = inverse_sigmoid(capped).requires_grad_(True)
    key = f"{model.prefix}.opacity_logits"
    for store in (state.exp_avg, state.exp_avg_sq):
        if key in store:
            store[key] = torch.zeros_like(store[key])


@dataclass
class TrainingView:
    """One training image with its camera."""

    camera: Camera
    image: torch.Tensor
    mask: Optional[np.ndarray] = None

    @property
    def frame_index(self) -> int:
        return self.camera.frame_index


@dataclass
class Dataset:
    """Posed images of a sequence."""

    views: List[TrainingView]
    frame_count: int

    def split(self, holdout_every: int) -> Tuple[List[TrainingView], List[TrainingView]]:
        """Every ``holdout_every``-th view is held out, counting from view ``holdout_every - 1``.

        The first view is always trained.
        """
        if len(self.views) < 2:
            return list(self.views), []
        last = holdout_every - 1
        train = [v for i, v in enumerate(self.views) if i % holdout_every != last]
        holdout = [v for i, v in enumerate(self.views) if i % holdout_every == last]
        return train, holdout

    def scene_extent(self) -> float:
        """Camera-centre radius × 1.1 (1.0 for a single viewpoint)."""
        centers = np.stack([v.camera.center for v in self.views])
        radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) * 1.1
        return radius if radius > 1e-6 else 1.0


@dataclass
class MetricsRow:
    """One row of the metrics log."""

    iteration: int
    loss: float
    l1: float
    dssim: float
    psnr_holdout: float
    gaussian_count: int
    wall_ms: int = 0

    def to_row(self) -> List[str]:
        return [
            str(self.iteration),
            f"{self.loss:.10g}",
            f"{self.l1:.10g}",
            f"{self.dssim:.10g}",
            f"{self.psnr_holdout:.10g}",
            str(self.gaussian_count),
            str(self.wall_ms),
        ]


@dataclass
class TrainResult:
    """Optimised models and the metrics log."""

    street: StreetGaussians
    vehicles: List[VehicleModel]
    metrics: List[MetricsRow]
    iterations: int
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def initial_psnr(self) -> float:
        return self.metrics[0].psnr_holdout

    @property
    def final_psnr(self) -> float:
        return self.metrics[-1].psnr_holdout


def gaussian_count(street: StreetGaussians, vehicles: Sequence[VehicleModel]) -> int:
    return len(street) + sum(len(v) for v in vehicles)


def evaluate_views(
    street: StreetGaussians,
    vehicles: Sequence[VehicleModel],
    views: Sequence[TrainingView],
    config: TrainConfig,
    active_sh_degree: Optional[int] = None,
) -> float:
    """Mean PSNR of the current models over ``views``."""
    if not views:
        return float("nan")
    values = []
    with torch.no_grad():
        for view in views:
            scene = assemble(street, vehicles, view.frame_index, active_sh_degree, config.literal_rotation)
            out = render(scene, view.camera, threads=config.threads)
            values.append(psnr(out.rgb, view.image))
    return float(np.mean(values))


CheckpointFn = Callable[[int, StreetGaussians, List[VehicleModel]], Optional[Path]]


def train(
    dataset: Dataset,
    street: StreetGaussians,
    vehicles: List[VehicleModel],
    config: TrainConfig,
    on_checkpoint: Optional[CheckpointFn] = None,
    on_metrics: Optional[Callable[[MetricsRow], None]] = None,
    progress: bool = True,
) -> TrainResult:
    """Optimise the street and vehicle models against the dataset.

    Each iteration samples one training view uniformly (seeded), assembles
    the scene at that frame, renders, back-propagates the photometric loss and
    takes an Adam step over every parameter group including pose deltas.
    Densification, SH degree growth and opacity resets follow the configured
    schedule.

    Args:
        dataset: Posed training images.
        street: Street model (updated in place).
        vehicles: Vehicle models (updated in place).
        config: Training configuration.
        on_checkpoint: Called at iteration 0, every ``checkpoint_interval`` and at the end.
        on_metrics: Called with every metrics row.
        progress: Show a progress bar.

    Returns:
        TrainResult with the optimised models and metrics rows.

    Raises:
        TrainingAborted: On a non-finite loss or gradient.
    """
    config.validate()
    if not dataset.views:
        raise ValidationError("training needs at least one view")

    train_views, holdout = dataset.split(config.holdout_every)
    eval_views = holdout or train_views
    extent = dataset.scene_extent()
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    state = OptimizerState()
    max_degree = max([street.sh_degree] + [v.sh_degree for v in vehicles] + [0])
    metrics: List[MetricsRow] = []
    checkpoints: List[Path] = []
    last_checkpoint: Optional[Path] = None
    started = time.perf_counter()

    def active_degree(iteration: int) -> int:
        return min(max_degree, MAX_SH_DEGREE, iteration // config.sh_increase_interval)

    def emit(row: MetricsRow) -> None:
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)
        logger.info(
            "iter %d loss %.6f psnr_holdout %.3f gaussians %d",
            row.iteration, row.loss, row.psnr_holdout, row.gaussian_count,
        )

    def checkpoint(iteration: int) -> None:
        nonlocal last_checkpoint
        if on_checkpoint is None:
            return
        path = on_checkpoint(iteration, street, vehicles)
        if path is not None:
            last_checkpoint = path
            checkpoints.append(path)

    def wall_ms() -> int:
        return int((time.perf_counter() - started) * 1000) if config.log_wall_time else 0

    with torch.no_grad():
        first = train_views[0]
        scene = assemble(street, vehicles, first.frame_index, active_degree(0), config.literal_rotation)
        total, l1, dssim = photometric_loss(render(scene, first.camera, threads=config.threads).rgb, first.image, config.lambda_dssim)
    emit(MetricsRow(0, float(total), float(l1), float(dssim),
                    evaluate_views(street, vehicles, eval_views, config, active_degree(0)),
                    gaussian_count(street, vehicles), wall_ms()))
    checkpoint(0)

    bar = tqdm(range(1, config.iterations + 1), desc="train", disable=not progress, leave=False)
    for iteration in bar:
        view = train_views[int(rng.integers(len(train_views)))]
        degree = active_degree(iteration)
        scene = assemble(street, vehicles, view.frame_index, degree, config.literal_rotation)
        output = render(scene, view.camera, threads=config.threads)
        result = loss(output.rgb, view.image, config.lambda_dssim)
        if not result.finite:
            raise TrainingAborted(iteration, "non-finite loss", last_checkpoint)

        params = scene_parameters(street, vehicles)
        grads = backward(output, result.grad, params)
        if iteration <= config.densify_until:
            accumulate_screen_grads(
                state, street, vehicles, scene.owners, scene.local_index,
                grads[SCREEN_MEANS], output.visible, view.camera.width, view.camera.height,
            )

        rates = group_learning_rates(config, iteration, spatial_scale=extent)
        try:
            adam_step(params, grads, state, {name: rates[param_group(name)] for name in params})
        except NonFiniteGradientError as e:
            raise TrainingAborted(iteration, str(e), last_checkpoint) from e

        if config.densify_from < iteration <= config.densify_until and iteration % config.densify_interval == 0:
            for model in [street, *vehicles]:
                densify_and_prune(model, state, config, extent, generator)
        if iteration <= config.densify_until and iteration % config.opacity_reset_interval == 0:
            for model in [street, *vehicles]:
                reset_opacity(model, state, config.opacity_reset_value)

        bar.set_postfix(loss=f"{result.total:.4f}")
        if iteration % config.log_interval == 0 or iteration == config.iterations:
            emit(MetricsRow(iteration, result.total, result.l1, result.dssim,
                            evaluate_views(street, vehicles, eval_views, config, degree),
                            gaussian_count(street, vehicles), wall_ms()))
        if iteration % config.checkpoint_interval == 0 or iteration == config.iterations:
            checkpoint(iteration)

    return TrainResult(street=street, vehicles=vehicles, metrics=metrics, iterations=config.iterations, checkpoints=checkpoints)
