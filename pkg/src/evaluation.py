"""Comparison of a rendered image directory against reference images."""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import OGGaussianError, ValidationError
from .formats import read_image, read_mask
from .harness import EvalReport, FrameMetrics, psnr, psnr_dym
from .manifest import write_json
from .optim import ssim
from .report_generator import generate_markdown_report


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IMAGE_SUFFIX = ".png"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
REPORT_MD = "report.md"
CSV_COLUMNS = ("name", "psnr", "ssim", "psnr_dym")


def _png_names(directory: Path) -> Dict[str, Path]:
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() == IMAGE_SUFFIX and p.is_file()}


class ImageComparer:
    """Pairs rendered and reference PNGs by file name and scores each pair."""

    def __init__(self, rendered_dir: PathLike, target_dir: PathLike, mask_dir: Optional[PathLike] = None):
        self.rendered_dir = Path(rendered_dir)
        self.target_dir = Path(target_dir)
        self.mask_dir = Path(mask_dir) if mask_dir is not None else None

    def validate(self) -> None:
        """Check that the input directories exist.

        Raises:
            ValidationError: If a directory is missing.
        """
        for label, directory in (("rendered", self.rendered_dir), ("target", self.target_dir), ("mask", self.mask_dir)):
            if directory is not None and not directory.is_dir():
                raise ValidationError(f"{label} directory does not exist: {directory}")

    def compare(self) -> EvalReport:
        """Score every name present in both directories.

        Names present on only one side, unreadable files and shape mismatches
        are recorded in ``EvalReport.errors``; the remaining pairs are still
        evaluated.
        """
        self.validate()
        rendered = _png_names(self.rendered_dir)
        targets = _png_names(self.target_dir)
        report = EvalReport()

        for name in sorted(set(rendered) | set(targets)):
            if name not in targets:
                report.errors.append(f"{name}: no reference image in {self.target_dir}")
                continue
            if name not in rendered:
                report.errors.append(f"{name}: no rendered image in {self.rendered_dir}")
                continue
            try:
                report.frames.append(self._score(name, rendered[name], targets[name]))
            except OGGaussianError as e:
                report.errors.append(f"{name}: {e}")

        logger.info("evaluated %d image pairs, %d errors", len(report.frames), len(report.errors))
        return report

    def _score(self, name: str, rendered_path: Path, target_path: Path) -> FrameMetrics:
        rendered = read_image(rendered_path)
        target = read_image(target_path)
        value = psnr(rendered, target)
        structural = float(ssim(rendered, target))

        dym = None
        if self.mask_dir is not None:
            mask_path = self.mask_dir / name
            if mask_path.exists():
                dym = psnr_dym(rendered, target, read_mask(mask_path))
            else:
                logger.debug("no mask for %s", name)
        return FrameMetrics(name=name, psnr=value, ssim=structural, psnr_dym=dym)


def _csv_value(value: Optional[float]) -> str:
    return "" if value is None or not np.isfinite(value) else f"{value:.10g}"


def write_report(report: EvalReport, output_dir: PathLike, rendered_source: str = "", target_source: str = "") -> List[Path]:
    """Write ``report.json``, ``report.csv`` and ``report.md`` into ``output_dir``.

    The CSV has one row per frame followed by a ``mean`` row; undefined
    PSNR-dym values are left empty.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    json_path = output_dir / REPORT_JSON
    write_json(json_path, report.to_dict())

    csv_path = output_dir / REPORT_CSV
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for frame in report.frames:
            writer.writerow([frame.name, _csv_value(frame.psnr), _csv_value(frame.ssim), _csv_value(frame.psnr_dym)])
        writer.writerow(["mean", _csv_value(report.psnr), _csv_value(report.ssim), _csv_value(report.psnr_dym)])

    md_path = output_dir / REPORT_MD
    md_path.write_text(generate_markdown_report(report, rendered_source, target_source), encoding="utf-8")
    return [json_path, csv_path, md_path]


def compare_directories(
    rendered_dir: PathLike,
    target_dir: PathLike,
    mask_dir: Optional[PathLike] = None,
) -> EvalReport:
    """Convenience function to evaluate a rendered directory.

    Args:
        rendered_dir: Directory of rendered PNGs.
        target_dir: Directory of reference PNGs with matching names.
        mask_dir: Optional directory of dynamic-vehicle masks with matching names.

    Returns:
        EvalReport with per-frame metrics and any pairing errors.
    """
    return ImageComparer(rendered_dir, target_dir, mask_dir).compare()
