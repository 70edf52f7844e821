"""Shared fixtures: cameras and small random scenes in float64."""

from typing import Callable, Optional, Sequence

import numpy as np
import pytest
import torch

from src.camera import Camera
from src.geom import DTYPE, normalize_quat, sh_coeff_count
from src.scene import StreetGaussians, VehicleModel, inverse_sigmoid


@pytest.fixture(autouse=True)
def _float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def make_camera() -> Callable[..., Camera]:
    """Camera at the origin looking down +z (world frame == camera frame)."""

    def factory(width: int = 32, height: int = 24, focal: float = 30.0, frame_index: int = 0, **kwargs) -> Camera:
        kwargs.setdefault("rotation", np.array([1.0, 0.0, 0.0, 0.0]))
        kwargs.setdefault("translation", np.zeros(3))
        return Camera(
            fx=focal,
            fy=focal,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
            frame_index=frame_index,
            **kwargs,
        )

    return factory


@pytest.fixture
def make_street() -> Callable[..., StreetGaussians]:
    """Random street Gaussians inside the view frustum of ``make_camera``."""

    def factory(
        rng: np.random.Generator,
        count: int,
        sh_degree: int = 1,
        num_classes: int = 3,
        depth: Sequence[float] = (3.0, 8.0),
        log_scale: Sequence[float] = (-2.5, -1.2),
        opacity: Sequence[float] = (0.2, 0.9),
        requires_grad: bool = False,
    ) -> StreetGaussians:
        z = rng.uniform(depth[0], depth[1], count)
        xy = rng.uniform(-0.4, 0.4, (count, 2)) * z[:, None]
        K = sh_coeff_count(sh_degree)
        street = StreetGaussians(
            means=torch.as_tensor(np.column_stack((xy, z)), dtype=DTYPE),
            rotations=normalize_quat(torch.as_tensor(rng.normal(size=(count, 4)), dtype=DTYPE)),
            log_scales=torch.as_tensor(rng.uniform(log_scale[0], log_scale[1], (count, 3)), dtype=DTYPE),
            opacity_logits=inverse_sigmoid(torch.as_tensor(rng.uniform(opacity[0], opacity[1], count), dtype=DTYPE)),
            sh=torch.as_tensor(rng.normal(0.0, 0.3, (count, K, 3)), dtype=DTYPE),
            semantic_logits=torch.as_tensor(rng.normal(size=(count, num_classes)), dtype=DTYPE),
            sh_degree=sh_degree,
        )
        return street.requires_grad_(requires_grad)

    return factory


@pytest.fixture
def make_vehicle() -> Callable[..., VehicleModel]:
    """Small random vehicle tracked over ``frames`` with random pose deltas."""

    def factory(
        rng: np.random.Generator,
        count: int = 12,
        frames: Sequence[int] = (0, 1, 2),
        frame_count: int = 4,
        sh_degree: int = 1,
        fourier_k: int = 3,
        center: Optional[Sequence[float]] = None,
        requires_grad: bool = False,
    ) -> VehicleModel:
        center = np.asarray(center if center is not None else (0.0, 0.0, 5.0))
        track = len(frames)
        K = sh_coeff_count(sh_degree)
        base_t = center + np.column_stack((0.2 * np.arange(track), np.zeros(track), np.zeros(track)))
        vehicle = VehicleModel(
            vehicle_id=7,
            means=torch.as_tensor(rng.uniform(-0.5, 0.5, (count, 3)), dtype=DTYPE),
            rotations=normalize_quat(torch.as_tensor(rng.normal(size=(count, 4)), dtype=DTYPE)),
            log_scales=torch.as_tensor(rng.uniform(-2.5, -1.5, (count, 3)), dtype=DTYPE),
            opacity_logits=inverse_sigmoid(torch.as_tensor(rng.uniform(0.3, 0.8, count), dtype=DTYPE)),
            fourier_sh=torch.as_tensor(rng.normal(0.0, 0.2, (count, K, 3, fourier_k)), dtype=DTYPE),
            semantic_logits=torch.as_tensor(rng.normal(size=count), dtype=DTYPE),
            frames=list(frames),
            base_rotations=normalize_quat(torch.as_tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE).repeat(track, 1)),
            base_translations=torch.as_tensor(base_t, dtype=DTYPE),
            delta_rotations=torch.as_tensor(rng.normal(0.0, 0.05, (track, 3)), dtype=DTYPE),
            delta_translations=torch.as_tensor(rng.normal(0.0, 0.05, (track, 3)), dtype=DTYPE),
            frame_count=frame_count,
            sh_degree=sh_degree,
        )
        return vehicle.requires_grad_(requires_grad)

    return factory
