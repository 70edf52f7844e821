"""Tests for the tiled splat renderer."""

import numpy as np
import pytest
import torch

from src.camera import Camera
from src.geom import DTYPE, identity_quat, rgb_to_sh_dc
from src.harness import reference_render
from src.render import (
    ALPHA_CAP,
    LOW_PASS,
    SCREEN_MEANS,
    T_MIN,
    TILE_SIZE,
    backward,
    project_gaussian,
    render,
    tile_grid,
)
from src.scene import StreetGaussians, assemble, inverse_sigmoid, scene_parameters


def centred_camera(width=33, height=25, focal=40.0):
    """Camera whose principal point falls on a pixel centre."""
    return Camera(
        fx=focal, fy=focal, cx=(width - 1) // 2, cy=(height - 1) // 2, width=width, height=height,
        rotation=np.array([1.0, 0.0, 0.0, 0.0]), translation=np.zeros(3),
    )


def splats(points, colors, opacities, scale=0.05, num_classes=2):
    """Isotropic degree-0 street Gaussians."""
    n = len(points)
    return StreetGaussians(
        means=torch.as_tensor(np.asarray(points, dtype=np.float64)),
        rotations=identity_quat(n),
        log_scales=torch.full((n, 3), float(np.log(scale)), dtype=DTYPE),
        opacity_logits=inverse_sigmoid(torch.as_tensor(opacities, dtype=DTYPE)),
        sh=rgb_to_sh_dc(torch.as_tensor(np.asarray(colors, dtype=np.float64)))[:, None, :],
        semantic_logits=torch.zeros(n, num_classes, dtype=DTYPE),
        sh_degree=0,
    )


class TestClosedForm:
    def test_single_splat_centre_and_neighbour(self):
        camera = centred_camera()
        color = np.array([0.8, 0.2, 0.4])
        background = np.array([0.1, 0.3, 0.5])
        out = render(assemble(splats([[0.0, 0.0, 4.0]], [color], [0.7]), [], 0), camera, background=background)
        cx, cy = int(camera.cx), int(camera.cy)

        np.testing.assert_allclose(out.rgb[cy, cx].numpy(), 0.7 * color + 0.3 * background, atol=1e-12)
        assert out.transmittance[cy, cx].item() == pytest.approx(0.3, abs=1e-12)
        assert out.depth[cy, cx].item() == pytest.approx(0.7 * 4.0, abs=1e-12)

        var = (40.0 * 0.05 / 4.0) ** 2 + LOW_PASS
        alpha = 0.7 * np.exp(-0.5 / var)
        np.testing.assert_allclose(out.rgb[cy, cx + 1].numpy(), alpha * color + (1 - alpha) * background, atol=1e-12)

    def test_two_splats_blend_front_to_back(self):
        camera = centred_camera()
        c_front, c_back = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
        background = np.array([0.0, 1.0, 0.0])
        # stored back first; the renderer sorts by depth
        model = splats([[0.0, 0.0, 4.0], [0.0, 0.0, 2.0]], [c_back, c_front], [0.6, 0.5])
        out = render(assemble(model, [], 0), camera, background=background)
        cy, cx = int(camera.cy), int(camera.cx)

        expected = 0.5 * c_front + 0.5 * 0.6 * c_back + 0.5 * 0.4 * background
        np.testing.assert_allclose(out.rgb[cy, cx].numpy(), expected, atol=1e-12)
        assert out.transmittance[cy, cx].item() == pytest.approx(0.2, abs=1e-12)
        assert out.depth[cy, cx].item() == pytest.approx(0.5 * 2.0 + 0.3 * 4.0, abs=1e-12)
        assert out.n_contrib[cy, cx].item() == 2

    def test_opacity_is_capped(self):
        camera = centred_camera()
        out = render(assemble(splats([[0.0, 0.0, 3.0]], [[1.0, 1.0, 1.0]], [0.9999]), [], 0), camera)
        assert out.transmittance[int(camera.cy), int(camera.cx)].item() == pytest.approx(1 - ALPHA_CAP, abs=1e-12)

    def test_saturated_pixel_stops_blending(self):
        camera = centred_camera()
        model = splats([[0.0, 0.0, 2.0], [0.0, 0.0, 3.0], [0.0, 0.0, 4.0]], [[1.0, 0.0, 0.0]] * 3, [0.98, 0.98, 0.98])
        out = render(assemble(model, [], 0), camera)
        cy, cx = int(camera.cy), int(camera.cx)
        assert out.n_contrib[cy, cx].item() == 2
        assert out.transmittance[cy, cx].item() == pytest.approx(0.02 * 0.02, rel=1e-9)

    def test_empty_scene_is_background(self, make_camera):
        camera = make_camera(width=40, height=20)
        empty = StreetGaussians.empty(num_classes=2, sh_degree=0)
        out = render(assemble(empty, [], 0), camera, background=(0.2, 0.4, 0.6))
        assert torch.equal(out.rgb, torch.tensor([0.2, 0.4, 0.6], dtype=DTYPE).expand(20, 40, 3))
        assert torch.equal(out.transmittance, torch.ones(20, 40, dtype=DTYPE))
        assert torch.equal(out.depth, torch.zeros(20, 40, dtype=DTYPE))

    def test_gaussian_behind_camera_is_culled(self, make_camera):
        camera = make_camera()
        out = render(assemble(splats([[0.0, 0.0, -5.0]], [[1.0, 1.0, 1.0]], [0.9], scale=1.0), [], 0), camera)
        assert not out.visible.any()
        assert torch.equal(out.rgb, torch.zeros_like(out.rgb))
        assert project_gaussian(torch.tensor([0.0, 0.0, -5.0]), torch.eye(3, dtype=DTYPE), camera) is None

    def test_offscreen_gaussian_not_visible(self, make_camera):
        camera = make_camera()
        out = render(assemble(splats([[100.0, 0.0, 2.0]], [[1.0, 1.0, 1.0]], [0.9]), [], 0), camera)
        assert not out.visible.any()


class TestTiling:
    def test_tile_grid_covers_partial_tiles(self):
        tiles = tile_grid(40, 20)
        assert len(tiles) == 3 * 2
        assert tiles[0] == (0, TILE_SIZE, 0, TILE_SIZE)
        assert tiles[-1] == (32, 40, 16, 20)
        assert sum((x1 - x0) * (y1 - y0) for x0, x1, y0, y1 in tiles) == 40 * 20

    def test_output_shape_for_odd_sizes(self, make_camera, make_street, rng):
        camera = make_camera(width=37, height=19)
        out = render(assemble(make_street(rng, 20), [], 0), camera)
        assert out.rgb.shape == (19, 37, 3)
        assert out.depth.shape == (19, 37)
        assert out.height == 19 and out.width == 37

    def test_thread_count_does_not_change_result(self, make_camera, make_street, make_vehicle, rng):
        camera = make_camera(width=64, height=48)
        scene = assemble(make_street(rng, 60), [make_vehicle(rng)], 0)
        single = render(scene, camera, threads=1)
        pooled = render(scene, camera, threads=4)
        assert torch.equal(single.rgb, pooled.rgb)
        assert torch.equal(single.depth, pooled.depth)
        assert torch.equal(single.n_contrib, pooled.n_contrib)


def assert_matches_reference(scene, camera, background):
    tiled = render(scene, camera, background=background)
    oracle = reference_render(scene, camera, background=background, terminate=True)
    np.testing.assert_allclose(tiled.rgb.detach().numpy(), oracle.rgb.numpy(), atol=1e-6)
    np.testing.assert_allclose(tiled.depth.detach().numpy(), oracle.depth.numpy(), atol=1e-6)
    np.testing.assert_allclose(tiled.transmittance.detach().numpy(), oracle.transmittance.numpy(), atol=1e-6)
    np.testing.assert_array_equal(tiled.n_contrib.numpy(), oracle.n_contrib.numpy())


class TestReferenceEquivalence:
    @pytest.mark.parametrize("seed", range(8))
    def test_random_street_scenes(self, seed, make_camera, make_street):
        rng = np.random.default_rng(seed)
        camera = make_camera(width=48, height=40)
        scene = assemble(make_street(rng, int(rng.integers(1, 80))), [], 0)
        assert_matches_reference(scene, camera, rng.uniform(size=3))

    @pytest.mark.parametrize("seed", range(4))
    def test_scenes_with_vehicles(self, seed, make_camera, make_street, make_vehicle):
        rng = np.random.default_rng(100 + seed)
        camera = make_camera(width=40, height=36, frame_index=1)
        scene = assemble(make_street(rng, 30), [make_vehicle(rng, count=20)], 1)
        assert_matches_reference(scene, camera, (0.0, 0.0, 0.0))

    def test_dense_opaque_scene(self, make_camera, make_street, rng):
        camera = make_camera(width=32, height=32)
        street = make_street(rng, 150, log_scale=(-1.5, -0.8), opacity=(0.9, 0.999))
        assert_matches_reference(assemble(street, [], 0), camera, (1.0, 1.0, 1.0))

    @pytest.mark.slow
    def test_fifty_large_scenes(self, make_camera, make_street):
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            camera = make_camera(width=128, height=128, focal=120.0)
            scene = assemble(make_street(rng, int(rng.integers(1, 200)), sh_degree=3), [], 0)
            assert_matches_reference(scene, camera, rng.uniform(size=3))


class TestUntruncatedReference:
    """The default oracle blends every splat; it differs only where a pixel saturates."""

    def test_saturated_pixel_blends_every_splat(self):
        camera = centred_camera()
        model = splats([[0.0, 0.0, 2.0], [0.0, 0.0, 3.0], [0.0, 0.0, 4.0]], [[1.0, 0.0, 0.0]] * 3, [0.98, 0.98, 0.98])
        scene = assemble(model, [], 0)
        cy, cx = int(camera.cy), int(camera.cx)
        full = reference_render(scene, camera)
        truncated = reference_render(scene, camera, terminate=True)
        assert full.n_contrib[cy, cx].item() == 3
        assert truncated.n_contrib[cy, cx].item() == 2
        assert full.transmittance[cy, cx].item() == pytest.approx(0.02 ** 3, rel=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_tiled_render_within_termination_residual(self, seed, make_camera, make_street):
        rng = np.random.default_rng(300 + seed)
        camera = make_camera(width=32, height=32)
        street = make_street(rng, 120, log_scale=(-1.5, -0.8), opacity=(0.8, 0.999))
        scene = assemble(street, [], 0)
        background = rng.uniform(size=3)
        tiled = render(scene, camera, background=background)
        oracle = reference_render(scene, camera, background=background)

        same = (tiled.n_contrib == oracle.n_contrib).numpy()
        np.testing.assert_allclose(tiled.rgb.detach().numpy()[same], oracle.rgb.numpy()[same], atol=1e-6)
        # a stopped pixel keeps at most T_MIN / (1 - ALPHA_CAP) of its light
        residual = T_MIN / (1.0 - ALPHA_CAP)
        assert np.abs(tiled.rgb.detach().numpy() - oracle.rgb.numpy()).max() <= residual + 1e-9
        assert (tiled.n_contrib <= oracle.n_contrib).all()


class TestChannels:
    def test_semantic_channels_sum_to_coverage(self, make_camera, make_street, make_vehicle, rng):
        camera = make_camera()
        scene = assemble(make_street(rng, 40), [make_vehicle(rng)], 0)
        out = render(scene, camera, semantics=True, vehicle_class_id=2)
        assert out.semantic.shape == (24, 32, 3)
        np.testing.assert_allclose(out.semantic.sum(-1).numpy(), 1.0 - out.transmittance.numpy(), atol=1e-12)

    def test_extra_features_blend_with_weights(self, make_camera, make_street, rng):
        camera = make_camera()
        scene = assemble(make_street(rng, 40), [], 0)
        ones = torch.ones(len(scene), 1, dtype=DTYPE)
        out = render(scene, camera, features=ones)
        assert out.semantic is None
        np.testing.assert_allclose(out.features[..., 0].numpy(), 1.0 - out.transmittance.numpy(), atol=1e-12)


class TestBackward:
    def test_unused_parameters_get_zero(self, make_camera, make_street, make_vehicle, rng):
        camera = make_camera(frame_index=3)
        street = make_street(rng, 10, requires_grad=True)
        vehicle = make_vehicle(rng, frames=(0, 1), requires_grad=True)
        out = render(assemble(street, [vehicle], 3), camera)
        params = scene_parameters(street, [vehicle])
        grads = backward(out, torch.ones_like(out.rgb), params)
        assert torch.equal(grads["vehicle7.fourier_sh"], torch.zeros_like(vehicle.fourier_sh))
        assert grads["street.means"].abs().sum() > 0
        assert grads[SCREEN_MEANS].shape == out.means2d.shape
        assert all(grads[name].shape == tensor.shape for name, tensor in params.items())
