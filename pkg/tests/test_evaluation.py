"""Tests for directory comparison and the report files."""

import csv
import json

import numpy as np
import pytest

from src.errors import ValidationError
from src.evaluation import CSV_COLUMNS, REPORT_CSV, REPORT_JSON, REPORT_MD, ImageComparer, compare_directories, write_report
from src.formats import write_image, write_mask
from src.harness import PSNR_SENTINEL, EvalReport, FrameMetrics
from src.report_generator import generate_markdown_report


@pytest.fixture
def image_dirs(tmp_path, rng):
    rendered, target, masks = tmp_path / "rendered", tmp_path / "target", tmp_path / "masks"
    for d in (rendered, target, masks):
        d.mkdir()
    for i in range(3):
        image = rng.uniform(size=(16, 16, 3))
        write_image(rendered / f"front_{i:04d}.png", image)
        write_image(target / f"front_{i:04d}.png", image)
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:8, 4:8] = True
    write_mask(masks / "front_0000.png", mask)
    return rendered, target, masks


class TestImageComparer:
    def test_identical_directories(self, image_dirs):
        rendered, target, masks = image_dirs
        report = compare_directories(rendered, target, masks)
        assert report.ok
        assert [f.name for f in report.frames] == ["front_0000.png", "front_0001.png", "front_0002.png"]
        assert report.psnr == PSNR_SENTINEL
        assert report.ssim == pytest.approx(1.0)
        assert report.frames[0].psnr_dym == PSNR_SENTINEL
        assert report.frames[1].psnr_dym is None

    def test_missing_counterpart_recorded(self, image_dirs):
        rendered, target, _ = image_dirs
        (rendered / "front_0002.png").unlink()
        report = ImageComparer(rendered, target).compare()
        assert len(report.frames) == 2
        assert len(report.errors) == 1 and "front_0002.png" in report.errors[0]
        assert not report.ok

    def test_size_mismatch_recorded(self, image_dirs, rng):
        rendered, target, _ = image_dirs
        write_image(rendered / "front_0001.png", rng.uniform(size=(16, 12, 3)))
        report = ImageComparer(rendered, target).compare()
        assert len(report.frames) == 2
        assert report.errors and "front_0001.png" in report.errors[0]

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ValidationError):
            ImageComparer(tmp_path / "nope", tmp_path).compare()


class TestReports:
    def report(self):
        return EvalReport(
            frames=[FrameMetrics("a.png", 30.0, 0.9, 25.0), FrameMetrics("b.png", 20.0, 0.7, None)],
            errors=["c.png: no rendered image in renders"],
        )

    def test_files_written(self, tmp_path):
        paths = write_report(self.report(), tmp_path / "eval", "renders", "images")
        assert [p.name for p in paths] == [REPORT_JSON, REPORT_CSV, REPORT_MD]

        data = json.loads((tmp_path / "eval" / REPORT_JSON).read_text())
        assert data["psnr"] == pytest.approx(25.0)
        assert data["psnr_dym"] == pytest.approx(25.0)
        assert len(data["errors"]) == 1

    def test_csv_has_mean_row(self, tmp_path):
        write_report(self.report(), tmp_path)
        with open(tmp_path / REPORT_CSV, newline="") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert rows[2] == ["b.png", "20", "0.7", ""]
        assert rows[-1] == ["mean", "25", "0.8", "25"]

    def test_markdown(self):
        text = generate_markdown_report(self.report(), "renders", "images")
        assert text.startswith("# Rendering Evaluation Report")
        assert "| `a.png` | 30.000 | 0.90000 | 25.000 |" in text
        assert "| `b.png` | 20.000 | 0.70000 | *undefined* |" in text
        assert "- c.png: no rendered image in renders" in text

    def test_markdown_sentinel_and_undefined_dym(self):
        report = EvalReport(frames=[FrameMetrics("a.png", PSNR_SENTINEL, 1.0)])
        text = generate_markdown_report(report, "r", "t")
        assert "≥ 100" in text
        assert "(no vehicle pixels)" in text
        assert "*None.*" in text

    def test_reports_are_byte_stable(self, tmp_path):
        write_report(self.report(), tmp_path / "one", "r", "t")
        write_report(self.report(), tmp_path / "two", "r", "t")
        for name in (REPORT_JSON, REPORT_CSV, REPORT_MD):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
