"""Markdown report generator for evaluation results."""

from typing import Optional

from .harness import PSNR_SENTINEL, EvalReport, FrameMetrics


class MarkdownReportGenerator:
    """Generates Markdown reports from an :class:`EvalReport`."""

    def __init__(self, report: EvalReport, rendered_source: str, target_source: str):
        """Initialize the report generator.

        Args:
            report: Evaluated metrics.
            rendered_source: Directory of the rendered images.
            target_source: Directory of the reference images.
        """
        self.report = report
        self.rendered_source = rendered_source
        self.target_source = target_source

    def generate(self) -> str:
        """Generate the full Markdown report.

        Returns:
            Complete Markdown report as string.
        """
        sections = [
            self._generate_header(),
            self._generate_summary(),
            self._generate_frames_section(),
            self._generate_errors_section(),
            self._generate_footer(),
        ]
        return "\n\n".join(sections) + "\n"

    def _generate_header(self) -> str:
        return f"""# Rendering Evaluation Report

**Rendered:** `{self.rendered_source}`
**Reference:** `{self.target_source}`"""

    def _generate_summary(self) -> str:
        """Generate summary section."""
        status_emoji = "✅" if self.report.ok else "⚠️"
        dym = self._format_db(self.report.psnr_dym)
        if not self.report.psnr_dym_defined:
            dym += " (no vehicle pixels)"

        return f"""## Summary {status_emoji}

| Metric | Value |
|--------|-------|
| Frames evaluated | {len(self.report.frames)} |
| PSNR | {self._format_db(self.report.psnr)} |
| SSIM | {self._format_ratio(self.report.ssim)} |
| PSNR-dym | {dym} |
| Errors | {len(self.report.errors)} |"""

    def _generate_frames_section(self) -> str:
        if not self.report.frames:
            return "## Frames\n\n*No image pairs were evaluated.*"

        section = "## Frames\n\n"
        section += "| Frame | PSNR (dB) | SSIM | PSNR-dym (dB) |\n"
        section += "|-------|-----------|------|---------------|\n"
        for frame in self.report.frames:
            section += self._format_frame(frame)
        return section.rstrip("\n")

    def _format_frame(self, frame: FrameMetrics) -> str:
        return (
            f"| `{frame.name}` | {self._format_db(frame.psnr)} | "
            f"{self._format_ratio(frame.ssim)} | {self._format_db(frame.psnr_dym)} |\n"
        )

    def _generate_errors_section(self) -> str:
        if self.report.ok:
            return "## Errors\n\n*None.*"
        section = "## Errors ❌\n\n"
        for error in self.report.errors:
            section += f"- {error}\n"
        return section.rstrip("\n")

    def _format_db(self, value: Optional[float]) -> str:
        if value is None:
            return "*undefined*"
        if value >= PSNR_SENTINEL:
            return f"≥ {PSNR_SENTINEL:.0f}"
        return f"{value:.3f}"

    def _format_ratio(self, value: float) -> str:
        return f"{value:.5f}"

    def _generate_footer(self) -> str:
        return f"""---

> PSNR of identical images is reported as the sentinel {PSNR_SENTINEL:.0f} dB.
> PSNR-dym is restricted to dynamic-vehicle mask pixels."""


def generate_markdown_report(report: EvalReport, rendered_source: str, target_source: str) -> str:
    """Generate a Markdown report from evaluation results.

    Args:
        report: Evaluated metrics.
        rendered_source: Directory of the rendered images.
        target_source: Directory of the reference images.

    Returns:
        Complete Markdown report as string.
    """
    return MarkdownReportGenerator(report, rendered_source, target_source).generate()
