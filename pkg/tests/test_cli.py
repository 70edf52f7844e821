"""End-to-end runs of the command-line stages on a small synthetic sequence."""

import csv
import json

import numpy as np
import pytest

import src.main
from src.checkpoint import load_checkpoint
from src.errors import ValidationError
from src.evaluation import REPORT_JSON
from src.formats import read_point_cloud
from src.harness import PSNR_SENTINEL, match_vehicles, trajectory_error
from src.main import build_parser, main
from src.occupancy import PointSource
from src.pipeline import parse_frames

SYNTH_SETTINGS = """\
WIDTH=48
HEIGHT=36
FOCAL=41
STREET_LENGTH=20
GAUSSIANS_PER_VEHICLE=50
SFM_POINTS=40
"""


def synth(root, name, *extra, settings=SYNTH_SETTINGS):
    config = root / f"{name}.env"
    config.write_text(settings)
    out = root / name
    assert main(["synth", "--config", str(config), "--output", str(out), "--seed", "3", *extra]) == 0
    return out


def read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return synth(root, "synthetic", "--frames", "6")


@pytest.fixture(scope="module")
def priors(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("priors")
    code = main(["convert", str(dataset / "manifest.json"), "--config", str(dataset / "convert.env"), "--output", str(out)])
    assert code == 0
    return out


class TestSynth:
    def test_layout(self, dataset):
        for name in ("manifest.json", "cameras.json", "sfm.ply", "trajectories.json", "convert.env"):
            assert (dataset / name).is_file()
        assert len(list((dataset / "grids").glob("frame_*.ogg"))) == 6
        assert len(list((dataset / "images").glob("*.png"))) == 6
        assert (dataset / "ground_truth" / "scene.json").is_file()
        assert (dataset / "convert.env").read_text().strip() == "TARGET_VOXEL=0.2"

    def test_manifest_describes_world(self, dataset):
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["frame_count"] == 6
        assert manifest["world"]["seed"] == 3
        assert manifest["classes"] == ["road", "building", "vehicle"]


class TestConvert:
    def test_dynamic_flags_match_ground_truth(self, dataset, priors):
        tracks = json.loads((priors / "tracks.json").read_text())
        truth = json.loads((dataset / "trajectories.json").read_text())["vehicles"]
        dynamic = [t for t in tracks["tracks"] if t["dynamic"]]
        assert len(dynamic) == sum(v["moving"] for v in truth)
        assert len(tracks["tracks"]) == len(truth) + 1  # plus the parked vehicle
        for track in dynamic:
            first = np.asarray(track["centroids"][0])
            assert min(np.linalg.norm(first - np.asarray(v["positions"][track["frames"][0]])) for v in truth) < 0.4
            assert (priors / f"vehicle_{track['object_id']}.ply").is_file()

    def test_output_is_byte_identical_across_runs(self, dataset, priors, tmp_path):
        again = tmp_path / "again"
        assert main(["convert", str(dataset / "manifest.json"), "--config", str(dataset / "convert.env"), "--output", str(again)]) == 0
        names = sorted(p.name for p in priors.iterdir())
        assert names == sorted(p.name for p in again.iterdir())
        for name in names:
            assert (priors / name).read_bytes() == (again / name).read_bytes()

    def test_no_vehicles_no_vehicle_files(self, tmp_path):
        settings = tmp_path / "none.env"
        settings.write_text(SYNTH_SETTINGS + "MOVING_VEHICLES=0\nSTATIC_VEHICLES=0\n")
        empty = tmp_path / "empty"
        assert main(["synth", "--config", str(settings), "--output", str(empty), "--frames", "2"]) == 0
        out = tmp_path / "priors"
        assert main(["convert", str(empty / "manifest.json"), "--output", str(out)]) == 0
        assert list(out.glob("vehicle_*.ply")) == []
        assert json.loads((out / "tracks.json").read_text())["tracks"] == []

    def test_missing_manifest_exit_code(self, tmp_path):
        assert main(["convert", str(tmp_path / "absent.json"), "--output", str(tmp_path / "out")]) == 1

    def test_random_prior_mode(self, dataset, tmp_path):
        config = tmp_path / "random.env"
        config.write_text("TARGET_VOXEL=0.2\nPRIOR_MODE=random\nRANDOM_POINTS=500\nSEED=2\n")
        out = tmp_path / "priors"
        assert main(["convert", str(dataset / "manifest.json"), "--config", str(config), "--output", str(out)]) == 0
        static = read_point_cloud(out / "static.ply")
        assert len(static) == 500
        assert (static.sources == PointSource.RANDOM).all()
        tracks = json.loads((out / "tracks.json").read_text())
        assert tracks["prior_mode"] == "random"
        for track in tracks["tracks"]:
            if track["dynamic"]:
                vehicle = read_point_cloud(out / f"vehicle_{track['object_id']}.ply")
                assert (vehicle.sources == PointSource.RANDOM).all()

    def test_unknown_prior_mode_exit_code(self, dataset, tmp_path):
        config = tmp_path / "bad.env"
        config.write_text("PRIOR_MODE=lidar\n")
        assert main(["convert", str(dataset / "manifest.json"), "--config", str(config), "--output", str(tmp_path / "out")]) == 1


class TestTrainRenderEval:
    def test_zero_iterations_writes_final_scene(self, dataset, priors, tmp_path):
        run = tmp_path / "run"
        code = main([
            "train", str(dataset / "manifest.json"), "--priors", str(priors),
            "--iterations", "0", "--no-progress", "--output", str(run),
        ])
        assert code == 0
        assert (run / "final" / "scene.json").is_file()
        assert (run / "checkpoints" / "iter_000000" / "scene.json").is_file()
        with open(run / "metrics.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0][:2] == ["iteration", "loss"]
        assert len(rows) == 2 and rows[1][0] == "0"

    def test_threaded_runs_are_byte_identical(self, dataset, priors, tmp_path):
        config = tmp_path / "train.env"
        config.write_text("LOG_INTERVAL=10\nDENSIFY_FROM=5\nDENSIFY_INTERVAL=10\nCHECKPOINT_INTERVAL=15\n")
        outputs = []
        for name in ("first", "second"):
            run = tmp_path / name
            assert main([
                "train", str(dataset / "manifest.json"), "--priors", str(priors), "--config", str(config),
                "--iterations", "30", "--threads", "4", "--seed", "9", "--no-progress", "--output", str(run / "train"),
            ]) == 0
            assert main([
                "render", str(run / "train" / "final"), str(dataset / "cameras.json"),
                "--threads", "4", "--depth", "--output", str(run / "renders"),
            ]) == 0
            outputs.append(run)

        first, second = outputs
        metrics = (first / "train" / "metrics.csv").read_bytes()
        assert metrics == (second / "train" / "metrics.csv").read_bytes()
        assert {row["wall_ms"] for row in read_metrics(first / "train" / "metrics.csv")} == {"0"}
        images = sorted(p.relative_to(first) for p in first.rglob("*.png"))
        assert len(images) == 12
        assert images == sorted(p.relative_to(second) for p in second.rglob("*.png"))
        for image in images:
            assert (first / image).read_bytes() == (second / image).read_bytes(), image

    def test_implicit_convert_uses_runtime_seed(self, dataset, tmp_path, monkeypatch):
        captured = {}

        class Finished:
            def to_dict(self):
                return {}

        def fake_train(manifest, config, output, **kwargs):
            captured.update(kwargs, config=config)
            return Finished()

        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("OGG_SEED", "5")
        monkeypatch.setenv("OGG_THREADS", "3")
        monkeypatch.setattr(src.main, "cmd_train", fake_train)
        assert main(["train", str(dataset / "manifest.json"), "--iterations", "0", "--output", str(tmp_path / "run")]) == 0
        assert captured["convert_config"].seed == 5
        assert captured["config"].seed == 5
        assert captured["config"].threads == 3

    def test_render_selected_frames(self, dataset, tmp_path):
        out = tmp_path / "renders"
        code = main([
            "render", str(dataset / "ground_truth"), str(dataset / "cameras.json"),
            "--frames", "0,5", "--depth", "--semantic", "--output", str(out),
        ])
        assert code == 0
        assert sorted(p.name for p in out.glob("*.png")) == ["front_0000.png", "front_0005.png"]
        assert len(list((out / "depth").glob("*.png"))) == 2
        assert len(list((out / "semantic").glob("*.png"))) == 2

    def test_missing_frame_is_reported(self, dataset, tmp_path):
        out = tmp_path / "renders"
        code = main(["render", str(dataset / "ground_truth"), str(dataset / "cameras.json"), "--frames", "1,99", "--output", str(out)])
        assert code == 1
        assert [p.name for p in out.glob("*.png")] == ["front_0001.png"]

    def test_ground_truth_reproduces_images(self, dataset, tmp_path):
        renders = tmp_path / "renders"
        assert main(["render", str(dataset / "ground_truth"), str(dataset / "cameras.json"), "--output", str(renders)]) == 0
        report_dir = tmp_path / "eval"
        code = main([
            "eval", str(renders), str(dataset / "images"), "--masks", str(dataset / "masks"), "--output", str(report_dir),
        ])
        assert code == 0
        report = json.loads((report_dir / REPORT_JSON).read_text())
        assert report["psnr"] >= 50.0
        assert len(report["frames"]) == 6

    def test_eval_identical_directories(self, dataset, tmp_path):
        code = main(["eval", str(dataset / "images"), str(dataset / "images"), "--output", str(tmp_path)])
        assert code == 0
        report = json.loads((tmp_path / REPORT_JSON).read_text())
        assert report["psnr"] == PSNR_SENTINEL
        assert report["ssim"] == pytest.approx(1.0)

    def test_eval_missing_file_exit_code(self, dataset, tmp_path):
        partial = tmp_path / "partial"
        partial.mkdir()
        for image in sorted((dataset / "images").glob("*.png"))[:3]:
            (partial / image.name).write_bytes(image.read_bytes())
        code = main(["eval", str(partial), str(dataset / "images"), "--output", str(tmp_path / "eval")])
        assert code == 1
        report = json.loads((tmp_path / "eval" / REPORT_JSON).read_text())
        assert len(report["frames"]) == 3
        assert len(report["errors"]) == 3


class TestArguments:
    def test_frame_lists(self):
        assert parse_frames("0,5,7-9") == [0, 5, 7, 8, 9]
        assert parse_frames(None) is None
        assert parse_frames(" ") is None

    @pytest.mark.parametrize("text", ["a", "3-x", "-2"])
    def test_bad_frame_lists(self, text):
        with pytest.raises(ValidationError):
            parse_frames(text)

    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_bad_config_value_exit_code(self, tmp_path):
        config = tmp_path / "bad.env"
        config.write_text("FRAMES=zero\n")
        assert main(["synth", "--config", str(config), "--output", str(tmp_path / "out")]) == 1


NOISY_SETTINGS = """\
FRAMES=10
WIDTH=64
HEIGHT=48
FOCAL=55
STREET_LENGTH=20
GAUSSIANS_PER_VEHICLE=60
SFM_POINTS=100
CENTROID_NOISE=0.5
"""

ACCEPTANCE_TRAIN_SETTINGS = """\
LOG_INTERVAL=250
CHECKPOINT_INTERVAL=1000
DENSIFY_FROM=200
DENSIFY_UNTIL=1500
SH_INCREASE_INTERVAL=500
"""


@pytest.mark.slow
class TestSyntheticAcceptance:
    """Full synth, convert, train and eval run under noisy vehicle centroids."""

    HOLDOUT_EVERY = 8
    ITERATIONS = 2000

    @pytest.fixture(scope="class")
    def run(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("acceptance")
        data = synth(root, "noisy", settings=NOISY_SETTINGS)
        convert_config = root / "convert.env"
        convert_config.write_text((data / "convert.env").read_text() + "MATCH_RADIUS=3.0\n")
        priors = root / "priors"
        assert main(["convert", str(data / "manifest.json"), "--config", str(convert_config), "--output", str(priors)]) == 0
        train_config = root / "train.env"
        train_config.write_text(ACCEPTANCE_TRAIN_SETTINGS + f"HOLDOUT_EVERY={self.HOLDOUT_EVERY}\n")
        out = root / "run"
        assert main([
            "train", str(data / "manifest.json"), "--priors", str(priors), "--config", str(train_config),
            "--iterations", str(self.ITERATIONS), "--no-progress", "--output", str(out),
        ]) == 0
        return data, out

    def held_out(self, frame_count):
        return [t for t in range(frame_count) if t % self.HOLDOUT_EVERY == self.HOLDOUT_EVERY - 1]

    def test_held_out_psnr_and_gain(self, run):
        _, out = run
        rows = read_metrics(out / "metrics.csv")
        assert rows[-1]["iteration"] == str(self.ITERATIONS)
        initial, final = float(rows[0]["psnr_holdout"]), float(rows[-1]["psnr_holdout"])
        assert final >= 28.0
        assert final - initial >= 8.0

    def test_held_out_renders_evaluate_above_threshold(self, run, tmp_path):
        data, out = run
        frames = self.held_out(10)
        renders = tmp_path / "renders"
        assert main([
            "render", str(out / "final"), str(data / "cameras.json"),
            "--frames", ",".join(map(str, frames)), "--output", str(renders),
        ]) == 0
        targets = tmp_path / "targets"
        targets.mkdir()
        for image in renders.glob("*.png"):
            (targets / image.name).write_bytes((data / "images" / image.name).read_bytes())
        assert main(["eval", str(renders), str(targets), "--output", str(tmp_path / "eval")]) == 0
        report = json.loads((tmp_path / "eval" / REPORT_JSON).read_text())
        assert len(report["frames"]) == len(frames)
        assert report["psnr"] >= 28.0

    def test_trajectories_recover_from_centroid_noise(self, run):
        data, out = run
        records = json.loads((data / "trajectories.json").read_text())["vehicles"]
        truth = {r["id"]: np.asarray(r["positions"]) for r in records if r["moving"]}
        vehicles = load_checkpoint(out / "final").vehicles
        assert vehicles
        pairs = match_vehicles(vehicles, truth)
        assert len(pairs) == len(vehicles)
        held_out = set(self.held_out(10))
        for model in vehicles:
            trained = [t for t in model.frames if t not in held_out]
            assert trajectory_error(model, truth[pairs[model.vehicle_id]], frames=trained) <= 0.1
