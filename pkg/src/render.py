"""Differentiable tile-based Gaussian rasterizer.

Pipeline: project every assembled Gaussian to an image-space splat (EWA
approximation), bin splats into 16×16 tiles by their 3σ footprint, sort each
tile front to back, then alpha-composite per pixel. Gradients are the exact
reverse-mode derivatives of the composited image, obtained through autograd;
:func:`backward` exposes them per named parameter.

Notes:
    In ``Σ' = J W Σ Wᵀ Jᵀ``, ``J`` is the Jacobian of the full perspective map
    evaluated at the camera-frame mean, not of the linear intrinsics K.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .camera import Camera
from .geom import DTYPE, as_tensor, build_covariance, eval_sh, sh_to_rgb
from .scene import AssembledScene, semantic_output


logger = logging.getLogger(__name__)

TILE_SIZE = 16
LOW_PASS = 0.3
ALPHA_CAP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
FOOTPRINT_SIGMA = 3.0
SCREEN_MEANS = "screen.means2d"


@dataclass
class Splats2D:
    """Image-space splats of every assembled Gaussian (culled rows flagged)."""

    means2d: torch.Tensor
    cov2d: torch.Tensor
    depths: torch.Tensor
    colors: torch.Tensor
    opacities: torch.Tensor
    extents: np.ndarray  # 3σ half extents (P, 2), pixels
    pixel_range: np.ndarray  # covered integer pixels [x_first, x_last, y_first, y_last] (P, 4)
    visible: np.ndarray
    features: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.means2d.shape[0]

    @property
    def conics(self) -> torch.Tensor:
        """Inverse 2D covariances."""
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        return torch.stack((c / det, -b / det, -b / det, a / det), -1).reshape(-1, 2, 2)

    def depth_order(self) -> np.ndarray:
        """Visible splat indices, ascending depth, ties broken by index."""
        depth = self.depths.detach().numpy()
        index = np.arange(len(self))
        order = np.lexsort((index, depth))
        return order[self.visible[order]]


@dataclass
class RenderOutput:
    """Rendered maps for one camera."""

    rgb: torch.Tensor
    depth: torch.Tensor
    transmittance: torch.Tensor
    n_contrib: torch.Tensor
    means2d: torch.Tensor
    visible: np.ndarray
    semantic: Optional[torch.Tensor] = None
    features: Optional[torch.Tensor] = None

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


def project_gaussians(
    means: torch.Tensor,
    covs: torch.Tensor,
    camera: Camera,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project world Gaussians to the image.

    Args:
        means: World means (P, 3).
        covs: World covariances (P, 3, 3).
        camera: Target camera.

    Returns:
        Tuple of pixel means (P, 2), pixel covariances with the low-pass floor
        (P, 2, 2), camera-frame depths (P,) and the in-range mask (P,).
    """
    R, t = camera.torch_extrinsics()
    p = means @ R.T + t
    x, y, z = p.unbind(-1)
    in_range = (z >= camera.near) & (z <= camera.far)
    z = torch.where(in_range, z, torch.ones_like(z))

    inv_z = 1.0 / z
    u = camera.fx * x * inv_z + camera.cx
    v = camera.fy * y * inv_z + camera.cy
    zero = torch.zeros_like(z)
    J = torch.stack(
        (
            camera.fx * inv_z, zero, -camera.fx * x * inv_z * inv_z,
            zero, camera.fy * inv_z, -camera.fy * y * inv_z * inv_z,
        ),
        dim=-1,
    ).reshape(-1, 2, 3)
    cov_cam = R @ covs @ R.T
    cov2d = J @ cov_cam @ J.transpose(-1, -2) + LOW_PASS * torch.eye(2, dtype=DTYPE)
    return torch.stack((u, v), -1), cov2d, p[:, 2], in_range


def project_gaussian(
    mu: torch.Tensor,
    cov: torch.Tensor,
    camera: Camera,
) -> Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Project a single Gaussian; ``None`` when its depth is outside [near, far]."""
    means2d, cov2d, depth, in_range = project_gaussians(as_tensor(mu)[None], as_tensor(cov)[None], camera)
    if not bool(in_range[0]):
        return None
    return means2d[0], cov2d[0], depth[0]


def _footprints(means2d: torch.Tensor, cov2d: torch.Tensor) -> Tuple[np.ndarray, np.ndarray]:
    centre = means2d.detach().numpy()
    var = torch.diagonal(cov2d.detach(), dim1=-2, dim2=-1).numpy()
    extents = FOOTPRINT_SIGMA * np.sqrt(var)
    first = np.ceil(centre - extents)
    last = np.floor(centre + extents)
    pixel_range = np.stack((first[:, 0], last[:, 0], first[:, 1], last[:, 1]), axis=1)
    return extents, pixel_range


def preprocess(
    scene: AssembledScene,
    camera: Camera,
    semantics: bool = False,
    vehicle_class_id: int = 0,
) -> Splats2D:
    """Project, colour and cull every Gaussian of an assembled scene.

    Colour uses the view direction ``normalize(μ_w - camera centre)`` and the
    activation ``clamp(SH + 0.5, 0, 1)``.
    """
    camera.validate()
    covs = build_covariance(scene.scales, scene.rotations, check=False)
    means2d, cov2d, depths, in_range = project_gaussians(scene.means, covs, camera)

    centre = torch.as_tensor(camera.center, dtype=DTYPE)
    dirs = scene.means - centre
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True).clamp(min=1e-12)
    colors = sh_to_rgb(eval_sh(scene.sh, dirs, scene.sh_degree))

    extents, pixel_range = _footprints(means2d, cov2d)
    visible = (
        in_range.numpy()
        & (pixel_range[:, 0] <= pixel_range[:, 1])
        & (pixel_range[:, 2] <= pixel_range[:, 3])
        & (pixel_range[:, 0] <= camera.width - 1)
        & (pixel_range[:, 1] >= 0)
        & (pixel_range[:, 2] <= camera.height - 1)
        & (pixel_range[:, 3] >= 0)
    )
    features = semantic_output(scene, vehicle_class_id) if semantics else None
    return Splats2D(
        means2d=means2d,
        cov2d=cov2d,
        depths=depths,
        colors=colors,
        opacities=scene.opacities,
        extents=extents,
        pixel_range=pixel_range,
        visible=visible,
        features=features,
    )


def tile_grid(width: int, height: int) -> List[Tuple[int, int, int, int]]:
    """Tiles as ``(x0, x1, y0, y1)`` half-open pixel ranges, row-major."""
    return [
        (x0, min(x0 + TILE_SIZE, width), y0, min(y0 + TILE_SIZE, height))
        for y0 in range(0, height, TILE_SIZE)
        for x0 in range(0, width, TILE_SIZE)
    ]


def bin_tiles(splats: Splats2D, width: int, height: int) -> List[np.ndarray]:
    """Depth-sorted splat indices for every tile of :func:`tile_grid`.

    A splat enters every tile its 3σ footprint box overlaps (in whole pixels).
    """
    order = splats.depth_order()
    ranges = splats.pixel_range[order]
    bins = []
    for x0, x1, y0, y1 in tile_grid(width, height):
        hit = (
            (ranges[:, 0] <= x1 - 1) & (ranges[:, 1] >= x0)
            & (ranges[:, 2] <= y1 - 1) & (ranges[:, 3] >= y0)
        )
        bins.append(order[hit])
    return bins


def splat_alphas(splats: Splats2D, index: np.ndarray, pixels: torch.Tensor) -> torch.Tensor:
    """Per-splat, per-pixel opacity ``min(α·G, 0.99)``, zero outside the footprint or below 1/255.

    Args:
        splats: Projected splats.
        index: Splat rows to evaluate (S,), in compositing order.
        pixels: Pixel coordinates (P, 2).

    Returns:
        Alphas of shape (S, P).
    """
    idx = torch.as_tensor(index, dtype=torch.long)
    d = pixels[None, :, :] - splats.means2d[idx][:, None, :]
    conic = splats.conics[idx]
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (conic[:, None, 0, 0] * dx * dx + 2.0 * conic[:, None, 0, 1] * dx * dy + conic[:, None, 1, 1] * dy * dy)
    alpha = splats.opacities[idx][:, None] * torch.exp(power)

    extents = torch.as_tensor(splats.extents[index], dtype=DTYPE)
    inside = (dx.detach().abs() <= extents[:, None, 0]) & (dy.detach().abs() <= extents[:, None, 1])
    alpha = torch.clamp(alpha, max=ALPHA_CAP)
    keep = inside & (alpha.detach() >= ALPHA_MIN)
    return torch.where(keep, alpha, torch.zeros_like(alpha))


def composite(
    alphas: torch.Tensor,
    colors: torch.Tensor,
    depths: torch.Tensor,
    background: torch.Tensor,
    features: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """Front-to-back blending ``a = Σ aᵢ αᵢ Π_{j<i}(1-αⱼ)`` over sorted splats.

    A splat that would push transmittance below 1e-4 ends the pixel and is not
    blended; the final transmittance multiplies the background.

    Args:
        alphas: Gated alphas (S, P), front to back.
        colors: Splat colours (S, 3).
        depths: Splat depths (S,).
        background: Background colour (3,).
        features: Optional extra channels (S, C) blended without background.

    Returns:
        Tuple of RGB (P, 3), transmittance (P,), depth (P,), contributor counts
        (P,) and blended features (P, C) or None.
    """
    pixels = alphas.shape[1]
    if alphas.shape[0] == 0:
        rgb = background.expand(pixels, 3)
        ones = torch.ones(pixels, dtype=DTYPE)
        blended = None
        if features is not None:
            blended = torch.zeros(pixels, features.shape[1], dtype=DTYPE)
        return rgb, ones, torch.zeros(pixels, dtype=DTYPE), torch.zeros(pixels, dtype=torch.long), blended

    transmit_after = torch.cumprod(1.0 - alphas.detach(), dim=0)
    alive = transmit_after >= T_MIN
    alphas = torch.where(alive, alphas, torch.zeros_like(alphas))

    remaining = torch.cumprod(1.0 - alphas, dim=0)
    transmit_before = torch.cat((torch.ones(1, pixels, dtype=DTYPE), remaining[:-1]), dim=0)
    weights = alphas * transmit_before
    final_t = remaining[-1]

    rgb = weights.T @ colors + final_t[:, None] * background
    depth = weights.T @ depths
    n_contrib = (alphas.detach() > 0).sum(dim=0)
    blended = weights.T @ features if features is not None else None
    return rgb, final_t, depth, n_contrib, blended


def composite_pixel(
    splats: Splats2D,
    index: np.ndarray,
    pixel: Sequence[float],
    background: Sequence[float],
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Composite one pixel over already depth-sorted splats ``index``.

    Returns:
        Tuple of RGB (3,), transmittance and depth.
    """
    pix = as_tensor(pixel).reshape(1, 2)
    alphas = splat_alphas(splats, np.asarray(index, dtype=np.int64), pix)
    idx = torch.as_tensor(np.asarray(index, dtype=np.int64))
    rgb, final_t, depth, _, _ = composite(alphas, splats.colors[idx], splats.depths[idx], as_tensor(background))
    return rgb[0], final_t[0], depth[0]


def _render_tile(
    splats: Splats2D,
    index: np.ndarray,
    bounds: Tuple[int, int, int, int],
    background: torch.Tensor,
):
    x0, x1, y0, y1 = bounds
    ys, xs = torch.meshgrid(
        torch.arange(y0, y1, dtype=DTYPE), torch.arange(x0, x1, dtype=DTYPE), indexing="ij"
    )
    pixels = torch.stack((xs.reshape(-1), ys.reshape(-1)), -1)
    idx = torch.as_tensor(index, dtype=torch.long)
    alphas = splat_alphas(splats, index, pixels)
    features = splats.features[idx] if splats.features is not None else None
    rgb, final_t, depth, n_contrib, blended = composite(
        alphas, splats.colors[idx], splats.depths[idx], background, features
    )
    shape = (y1 - y0, x1 - x0)
    return (
        rgb.reshape(shape + (3,)),
        final_t.reshape(shape),
        depth.reshape(shape),
        n_contrib.reshape(shape),
        blended.reshape(shape + (-1,)) if blended is not None else None,
    )


def _stitch(tiles: List[torch.Tensor], columns: int) -> torch.Tensor:
    rows = [torch.cat(tiles[i:i + columns], dim=1) for i in range(0, len(tiles), columns)]
    return torch.cat(rows, dim=0)


def render(
    scene: AssembledScene,
    camera: Camera,
    background: Optional[Sequence[float]] = None,
    threads: int = 1,
    semantics: bool = False,
    vehicle_class_id: int = 0,
    features: Optional[torch.Tensor] = None,
) -> RenderOutput:
    """Render an assembled scene through one camera.

    Tiles are independent; with ``threads > 1`` they are composited by a
    thread pool and stitched back in fixed tile order, so the result does not
    depend on the thread count.

    Args:
        scene: Scene assembled at the camera's frame.
        camera: Target camera.
        background: Background RGB (defaults to black).
        threads: Worker threads for tile compositing.
        semantics: Also composite per-Gaussian class distributions.
        vehicle_class_id: Vehicle class used by the semantic channel.
        features: Extra per-Gaussian channels (P, C) blended like the semantics.

    Returns:
        RenderOutput connected to the scene parameters.
    """
    bg = as_tensor(background if background is not None else (0.0, 0.0, 0.0))
    splats = preprocess(scene, camera, semantics=semantics, vehicle_class_id=vehicle_class_id)
    semantic_channels = splats.features.shape[1] if splats.features is not None else 0
    if features is not None:
        extra = as_tensor(features).reshape(len(splats), -1)
        splats.features = extra if splats.features is None else torch.cat((splats.features, extra), dim=1)
    tiles = tile_grid(camera.width, camera.height)
    bins = bin_tiles(splats, camera.width, camera.height)

    def work(job):
        bounds, index = job
        return _render_tile(splats, index, bounds, bg)

    jobs = list(zip(tiles, bins))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    columns = -(-camera.width // TILE_SIZE)
    rgb, final_t, depth, n_contrib, blended = zip(*results)
    channels = _stitch(list(blended), columns) if splats.features is not None else None
    return RenderOutput(
        rgb=_stitch(list(rgb), columns),
        depth=_stitch(list(depth), columns),
        transmittance=_stitch(list(final_t), columns),
        n_contrib=_stitch(list(n_contrib), columns),
        means2d=splats.means2d,
        visible=splats.visible,
        semantic=channels[..., :semantic_channels] if semantics else None,
        features=channels[..., semantic_channels:] if features is not None else None,
    )


def backward(
    output: RenderOutput,
    grad_rgb: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    retain_graph: bool = False,
) -> Dict[str, torch.Tensor]:
    """Gradients of ``<grad_rgb, output.rgb>`` with respect to named parameters.

    Parameters the image does not depend on receive zeros. The gradient with
    respect to the projected means is returned under :data:`SCREEN_MEANS`.

    Args:
        output: Forward result still attached to its graph.
        grad_rgb: Upstream gradient dL/dRGB (H, W, 3).
        params: Named leaf tensors (e.g. from :func:`scene_parameters`).
        retain_graph: Keep the graph for another backward call.

    Returns:
        Mapping of parameter name to gradient (same shape as the parameter).
    """
    names = [name for name, tensor in params.items() if tensor.requires_grad]
    inputs = [params[name] for name in names]
    track_screen = output.means2d.requires_grad
    if track_screen:
        inputs.append(output.means2d)

    grads: Dict[str, torch.Tensor] = {
        name: torch.zeros_like(tensor) for name, tensor in params.items()
    }
    grads[SCREEN_MEANS] = torch.zeros_like(output.means2d.detach())
    if not output.rgb.requires_grad or not inputs:
        return grads

    computed = torch.autograd.grad(
        output.rgb,
        inputs,
        grad_outputs=as_tensor(grad_rgb),
        retain_graph=retain_graph,
        allow_unused=True,
    )
    for name, grad in zip(names, computed):
        if grad is not None:
            grads[name] = grad
    if track_screen and computed[-1] is not None:
        grads[SCREEN_MEANS] = computed[-1]
    return grads
