"""Image-quality metrics and evaluation reports."""

import csv
import io
import math

import numpy as np

from .errors import ShapeMismatch
from .loss import ssim  # noqa: F401  (shared implementation, re-exported)


def psnr(a, b):
    """10 log10(1 / MSE) over all channels; inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


class EvalReport:
    """Per-image PSNR/SSIM rows plus dataset means and render timing."""

    def __init__(self, primitive_count=0):
        self.rows = []  # (name, psnr, ssim, render_ms)
        self.primitive_count = primitive_count

    def add(self, name, psnr_db, ssim_val, render_ms):
        self.rows.append((name, float(psnr_db), float(ssim_val), float(render_ms)))

    @property
    def mean_psnr(self):
        return sum(r[1] for r in self.rows) / len(self.rows)

    @property
    def mean_ssim(self):
        return sum(r[2] for r in self.rows) / len(self.rows)

    @property
    def mean_render_ms(self):
        return sum(r[3] for r in self.rows) / len(self.rows)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "psnr_db", "ssim", "render_ms"])
        for name, p, s, ms in self.rows:
            writer.writerow([name, repr(p), repr(s), repr(ms)])
        writer.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim),
                         repr(self.mean_render_ms)])
        writer.writerow(["primitive_count", self.primitive_count, "", ""])
        return buf.getvalue()

    def format_table(self):
        lines = [f"{'image':<24}{'PSNR(dB)':>10}{'SSIM':>9}{'ms':>9}"]
        for name, p, s, ms in self.rows:
            lines.append(f"{name:<24}{p:>10.3f}{s:>9.4f}{ms:>9.1f}")
        lines.append("-" * 52)
        lines.append(
            f"{'mean':<24}{self.mean_psnr:>10.3f}{self.mean_ssim:>9.4f}"
            f"{self.mean_render_ms:>9.1f}"
        )
        lines.append(f"primitives: {self.primitive_count}")
        return "\n".join(lines)
