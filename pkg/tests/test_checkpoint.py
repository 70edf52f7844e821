"""Tests for scene checkpoints."""

import json

import pytest
import torch

from src.checkpoint import SCENE_FILE, load_checkpoint, save_checkpoint
from src.errors import ManifestError
from src.scene import StreetGaussians, assemble


def test_round_trip_preserves_assembled_scene(tmp_path, make_street, make_vehicle, rng):
    street = make_street(rng, 9, sh_degree=2)
    vehicle = make_vehicle(rng, fourier_k=4)
    save_checkpoint(tmp_path / "ckpt", street, [vehicle], iteration=120, class_names=["road", "vehicle"], vehicle_class_id=1)
    loaded = load_checkpoint(tmp_path / "ckpt")

    assert loaded.iteration == 120
    assert loaded.class_names == ["road", "vehicle"]
    assert loaded.vehicle_class_id == 1
    for t in vehicle.frames:
        before = assemble(street, [vehicle], t)
        after = assemble(loaded.street, loaded.vehicles, t)
        assert torch.equal(before.means, after.means)
        assert torch.equal(before.sh, after.sh)
        assert torch.equal(before.opacities, after.opacities)


def test_empty_models(tmp_path):
    street = StreetGaussians.empty(num_classes=3, sh_degree=1)
    save_checkpoint(tmp_path, street, [])
    loaded = load_checkpoint(tmp_path)
    assert len(loaded.street) == 0 and loaded.vehicles == []


def test_requires_grad_flag(tmp_path, make_street, rng):
    save_checkpoint(tmp_path, make_street(rng, 3), [])
    assert load_checkpoint(tmp_path, requires_grad=True).street.means.requires_grad
    assert not load_checkpoint(tmp_path).street.means.requires_grad


def test_frozen_vehicle_stays_frozen(tmp_path, make_street, make_vehicle, rng):
    vehicle = make_vehicle(rng, frames=(2,))
    vehicle.frozen = True
    save_checkpoint(tmp_path, make_street(rng, 3), [vehicle])
    loaded = load_checkpoint(tmp_path).vehicles[0]
    assert loaded.frozen and loaded.frames == [2]


def test_unknown_format_rejected(tmp_path, make_street, rng):
    save_checkpoint(tmp_path, make_street(rng, 3), [])
    scene = json.loads((tmp_path / SCENE_FILE).read_text())
    scene["format"] = "something-else"
    (tmp_path / SCENE_FILE).write_text(json.dumps(scene))
    with pytest.raises(ManifestError):
        load_checkpoint(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(ManifestError):
        load_checkpoint(tmp_path / "absent")
