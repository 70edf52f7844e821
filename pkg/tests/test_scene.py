"""Tests for model initialisation and per-frame assembly."""

import math

import numpy as np
import pytest
import torch

from src.errors import ShapeMismatchError, ValidationError
from src.geom import DTYPE, Pose, build_covariance, identity_quat, normalize_quat, quat_to_rotmat
from src.occupancy import ObjectComponent, ObjectTrack, SemanticPointCloud
from src.scene import (
    SEMANTIC_INIT,
    StreetGaussians,
    assemble,
    init_street,
    init_vehicle,
    knn_scale,
    scene_parameters,
    semantic_output,
)


def make_track(centroids, first_frame=0):
    track = ObjectTrack(object_id=3, dynamic=True)
    for i, c in enumerate(centroids):
        t = first_frame + i
        track.components[t] = ObjectComponent(t, np.zeros((1, 3), dtype=np.int64), np.asarray(c, dtype=np.float64)[None], 0.4, 2)
    return track


class TestInitStreet:
    def test_gray_point_has_zero_dc(self):
        cloud = SemanticPointCloud.from_points(np.zeros((1, 3)), labels=[0], colors=[[0.5, 0.5, 0.5]])
        street = init_street(cloud, num_classes=3)
        assert torch.allclose(street.sh[0, 0], torch.zeros(3, dtype=DTYPE), atol=1e-15)

    def test_thousand_points(self, rng):
        cloud = SemanticPointCloud.from_points(rng.normal(size=(1000, 3)), labels=rng.integers(0, 3, 1000), colors=rng.uniform(size=(1000, 3)))
        street = init_street(cloud, num_classes=3)
        assert len(street) == 1000
        assert bool((street.opacities > 0).all() and (street.opacities < 1).all())
        assert bool((street.scales > 0).all())
        assert torch.allclose(street.opacities, torch.full((1000,), 0.1, dtype=DTYPE))
        assert all(t.shape[0] == 1000 for t in street.gaussian_fields().values())

    def test_two_points_one_meter_apart(self):
        cloud = SemanticPointCloud.from_points(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), labels=[0, 1])
        street = init_street(cloud, num_classes=2)
        assert torch.allclose(street.scales, torch.ones(2, 3, dtype=DTYPE))

    def test_knn_is_mean_of_three(self):
        positions = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0]])
        assert knn_scale(positions)[0] == pytest.approx(2.0)

    def test_semantic_logits_one_hot(self):
        cloud = SemanticPointCloud.from_points(np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]), labels=[2, 0, -1])
        street = init_street(cloud, num_classes=3)
        expected = torch.tensor([[0, 0, SEMANTIC_INIT], [SEMANTIC_INIT, 0, 0], [0, 0, 0]], dtype=DTYPE)
        assert torch.equal(street.semantic_logits.detach(), expected)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValidationError):
            init_street(SemanticPointCloud.empty(), num_classes=3)

    def test_parameters_require_grad(self, rng):
        cloud = SemanticPointCloud.from_points(rng.normal(size=(4, 3)), labels=[0, 1, 2, 0])
        params = init_street(cloud, num_classes=3).parameters()
        assert set(params) == {f"street.{n}" for n in StreetGaussians.PER_GAUSSIAN}
        assert all(p.requires_grad and p.is_leaf for p in params.values())

    def test_mismatched_lengths_rejected(self, make_street, rng):
        street = make_street(rng, 4)
        with pytest.raises(ShapeMismatchError):
            StreetGaussians(street.means, street.rotations[:3], street.log_scales, street.opacity_logits, street.sh, street.semantic_logits, street.sh_degree)


class TestInitVehicle:
    def test_deltas_zero_and_positions_follow_base_pose(self, rng):
        points = rng.normal(size=(20, 3))
        points -= points.mean(axis=0)
        centroids = [(1.0, 2.0, 0.5), (2.0, 2.0, 0.5), (3.0, 2.5, 0.5)]
        vehicle = init_vehicle(make_track(centroids), points, rng.uniform(size=(20, 3)), frame_count=3)
        assert torch.equal(vehicle.delta_rotations.detach(), torch.zeros(3, 3, dtype=DTYPE))
        assert torch.equal(vehicle.delta_translations.detach(), torch.zeros(3, 3, dtype=DTYPE))
        street = StreetGaussians.empty(num_classes=3, sh_degree=1)
        for t, c in enumerate(centroids):
            scene = assemble(street, [vehicle], t)
            assert torch.allclose(scene.means, torch.as_tensor(points + np.asarray(c), dtype=DTYPE), atol=1e-12)

    def test_vehicle_frame_centroid_is_zero(self, rng):
        points = rng.normal(size=(30, 3)) + 4.0
        points -= points.mean(axis=0)
        vehicle = init_vehicle(make_track([(0, 0, 0), (1, 0, 0)]), points, np.full((30, 3), 0.5), frame_count=2)
        assert torch.allclose(vehicle.means.mean(dim=0), torch.zeros(3, dtype=DTYPE), atol=1e-9)

    def test_single_fourier_term_is_constant(self, rng):
        vehicle = init_vehicle(make_track([(0, 0, 5), (1, 0, 5), (2, 0, 5)]), rng.normal(size=(5, 3)), rng.uniform(size=(5, 3)), frame_count=3, fourier_k=1)
        street = StreetGaussians.empty(num_classes=3, sh_degree=1)
        colors = [assemble(street, [vehicle], t).sh for t in range(3)]
        assert torch.equal(colors[0], colors[1]) and torch.equal(colors[1], colors[2])

    def test_higher_harmonics_start_at_zero(self, rng):
        vehicle = init_vehicle(make_track([(0, 0, 5), (1, 0, 5)]), rng.normal(size=(5, 3)), rng.uniform(size=(5, 3)), frame_count=2)
        assert vehicle.fourier_k == 5
        assert torch.equal(vehicle.fourier_sh[..., 1:], torch.zeros_like(vehicle.fourier_sh[..., 1:]))
        assert torch.equal(vehicle.fourier_sh[:, 1:, :, 0], torch.zeros_like(vehicle.fourier_sh[:, 1:, :, 0]))

    def test_single_frame_track_is_frozen(self, rng):
        vehicle = init_vehicle(make_track([(0, 0, 5)]), rng.normal(size=(5, 3)), rng.uniform(size=(5, 3)), frame_count=4)
        assert vehicle.frozen
        assert not any(name.endswith("delta_rotations") for name in vehicle.parameters())

    def test_empty_points_rejected(self):
        with pytest.raises(ValidationError):
            init_vehicle(make_track([(0, 0, 0)]), np.zeros((0, 3)), np.zeros((0, 3)), frame_count=1)


class TestAssemble:
    def test_no_vehicles_equals_street(self, make_street, rng):
        street = make_street(rng, 10)
        scene = assemble(street, [], 0)
        assert torch.equal(scene.means, street.means)
        assert torch.equal(scene.rotations, street.rotations)
        assert torch.equal(scene.scales, street.scales)
        assert torch.equal(scene.opacities, street.opacities)
        assert torch.equal(scene.sh, street.sh)
        assert len(scene) == 10 and scene.street_count == 10

    def test_identity_pose_embeds_vehicle(self, make_vehicle, rng):
        vehicle = make_vehicle(rng, center=(0.0, 0.0, 0.0))
        with torch.no_grad():
            vehicle.base_translations.zero_()
            vehicle.delta_rotations.zero_()
            vehicle.delta_translations.zero_()
        scene = assemble(StreetGaussians.empty(3, sh_degree=1), [vehicle], 0)
        assert torch.allclose(scene.means, vehicle.means, atol=1e-15)
        assert torch.allclose(quat_to_rotmat(scene.rotations), quat_to_rotmat(vehicle.rotations), atol=1e-12)

    def test_translation_shifts_and_keeps_covariance(self, make_vehicle, rng):
        vehicle = make_vehicle(rng)
        with torch.no_grad():
            vehicle.base_translations.copy_(torch.tensor([5.0, 0.0, 0.0], dtype=DTYPE).expand(3, 3))
            vehicle.delta_rotations.zero_()
            vehicle.delta_translations.zero_()
        scene = assemble(StreetGaussians.empty(3, sh_degree=1), [vehicle], 1)
        assert torch.allclose(scene.means, vehicle.means + torch.tensor([5.0, 0.0, 0.0], dtype=DTYPE), atol=1e-12)
        world_cov = build_covariance(scene.scales, scene.rotations)
        local_cov = build_covariance(vehicle.scales, vehicle.rotations)
        assert torch.allclose(world_cov, local_cov, atol=1e-12)

    def test_rotation_preserves_covariance_spectrum(self, make_vehicle, rng):
        vehicle = make_vehicle(rng)
        scene = assemble(StreetGaussians.empty(3, sh_degree=1), [vehicle], 2)
        world = np.linalg.eigvalsh(build_covariance(scene.scales, scene.rotations).detach().numpy())
        local = np.linalg.eigvalsh(build_covariance(vehicle.scales, vehicle.rotations).detach().numpy())
        np.testing.assert_allclose(world, local, rtol=1e-9)

    def test_absent_vehicle_skipped(self, make_street, make_vehicle, rng):
        street = make_street(rng, 4)
        vehicle = make_vehicle(rng, frames=(0, 1))
        assert len(assemble(street, [vehicle], 3)) == 4
        assert len(assemble(street, [vehicle], 1)) == 4 + len(vehicle)

    def test_provenance_partitions(self, make_street, make_vehicle, rng):
        street = make_street(rng, 6)
        vehicles = [make_vehicle(rng, count=4), make_vehicle(rng, count=5)]
        scene = assemble(street, vehicles, 0)
        assert len(scene) == 6 + 4 + 5
        pairs = set(zip(scene.owners.tolist(), scene.local_index.tolist()))
        expected = {(-1, i) for i in range(6)} | {(0, i) for i in range(4)} | {(1, i) for i in range(5)}
        assert pairs == expected and len(pairs) == len(scene)

    def test_fourier_time_normalisation(self, make_vehicle, rng):
        vehicle = make_vehicle(rng, fourier_k=3, frame_count=4)
        scene = assemble(StreetGaussians.empty(3, sh_degree=1), [vehicle], 1)
        t = 1 / 4
        basis = torch.tensor([1.0, math.cos(2 * math.pi * t), math.sin(2 * math.pi * t)], dtype=DTYPE)
        assert torch.allclose(scene.sh, vehicle.fourier_sh @ basis, atol=1e-12)

    def test_rigid_equivariance(self, make_street, make_vehicle, rng):
        street = make_street(rng, 8)
        vehicle = make_vehicle(rng)
        with torch.no_grad():
            vehicle.delta_translations.zero_()
        q = normalize_quat(torch.as_tensor(rng.normal(size=4), dtype=DTYPE))
        g = Pose(q, torch.as_tensor(rng.normal(size=3), dtype=DTYPE))
        before = assemble(street, [vehicle], 1).means.detach()

        moved_street = StreetGaussians(g.apply(street.means), street.rotations, street.log_scales, street.opacity_logits, street.sh, street.semantic_logits, street.sh_degree)
        with torch.no_grad():
            for i in range(len(vehicle.frames)):
                base = g.compose(Pose(vehicle.base_rotations[i], vehicle.base_translations[i]))
                vehicle.base_rotations[i] = base.rotation
                vehicle.base_translations[i] = base.translation
        after = assemble(moved_street, [vehicle], 1).means.detach()
        assert torch.allclose(after, g.apply(before), atol=1e-9)

    def test_keeps_gradient_path(self, make_street, make_vehicle, rng):
        street = make_street(rng, 3, requires_grad=True)
        vehicle = make_vehicle(rng, requires_grad=True)
        scene = assemble(street, [vehicle], 0)
        scene.means.sum().backward()
        assert vehicle.delta_translations.grad is not None
        assert street.means.grad is not None


class TestSemanticOutput:
    def test_street_softmax(self):
        street = StreetGaussians(
            means=torch.zeros(1, 3, dtype=DTYPE), rotations=identity_quat(1), log_scales=torch.zeros(1, 3, dtype=DTYPE),
            opacity_logits=torch.zeros(1, dtype=DTYPE), sh=torch.zeros(1, 1, 3, dtype=DTYPE),
            semantic_logits=torch.tensor([[4.0, 0.0, 0.0]], dtype=DTYPE), sh_degree=0,
        )
        probs = semantic_output(assemble(street, [], 0), vehicle_class_id=2)[0]
        np.testing.assert_allclose(probs.numpy(), [0.96466, 0.01767, 0.01767], atol=1e-4)

    def test_vehicle_logit_zero_is_half(self, make_vehicle, rng):
        vehicle = make_vehicle(rng, count=2)
        with torch.no_grad():
            vehicle.semantic_logits.zero_()
        probs = semantic_output(assemble(StreetGaussians.empty(3, sh_degree=1), [vehicle], 0), vehicle_class_id=2)
        np.testing.assert_allclose(probs.numpy(), [[0.25, 0.25, 0.5]] * 2)

    def test_distributions_normalised(self, make_street, make_vehicle, rng):
        scene = assemble(make_street(rng, 20), [make_vehicle(rng)], 0)
        probs = semantic_output(scene, vehicle_class_id=1)
        assert torch.allclose(probs.sum(-1), torch.ones(len(scene), dtype=DTYPE), atol=1e-6)


def test_scene_parameters_cover_every_model(make_street, make_vehicle, rng):
    street = make_street(rng, 3)
    vehicle = make_vehicle(rng)
    params = scene_parameters(street, [vehicle])
    assert "street.means" in params
    assert "vehicle7.delta_rotations" in params and "vehicle7.fourier_sh" in params
