"""Per-KPI evaluation report: MSE table, emitted series and SVG overlays."""

from __future__ import annotations

import csv
import dataclasses
import json
import re
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .train import channel_mse

TRUTH_COLOR = "#1f77b4"
PRED_COLOR = "#ff7f0e"


@dataclasses.dataclass
class EvalReport:
    channels: tuple[str, ...]
    targets: np.ndarray  # [M, K], original units
    predictions: np.ndarray
    mse: np.ndarray  # [K]
    mse_standardized: np.ndarray | None = None

    @classmethod
    def build(cls, channels, targets, predictions, mse_standardized=None) -> "EvalReport":
        targets = np.asarray(targets, dtype=np.float32)
        predictions = np.asarray(predictions, dtype=np.float32)
        return cls(tuple(channels), targets, predictions, channel_mse(predictions, targets),
                   mse_standardized)

    def table(self) -> list[dict]:
        rows = []
        for j, name in enumerate(self.channels):
            row = {"index": j, "channel": name, "mse": float(self.mse[j])}
            if self.mse_standardized is not None:
                row["mse_standardized"] = float(self.mse_standardized[j])
            rows.append(row)
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "mse.csv", "w", newline="") as fh:
            fields = ["index", "channel", "mse"] + (
                ["mse_standardized"] if self.mse_standardized is not None else [])
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for row in self.table():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        with open(out / "series.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "channel", "target", "prediction"])
            for i in range(len(self.targets)):
                for j, name in enumerate(self.channels):
                    w.writerow([i, name, repr(float(self.targets[i, j])),
                                repr(float(self.predictions[i, j]))])
        (out / "report.json").write_text(json.dumps(
            {"channels": list(self.channels), "points": int(len(self.targets)),
             "mse": self.table()}, indent=2) + "\n")
        for j, name in enumerate(self.channels):
            title = f"{j}: {name} (MSE={self.mse[j]:.3f})"
            svg = overlay_svg(self.targets[:, j], self.predictions[:, j], title)
            (out / f"kpi_{j:02d}_{slug(name)}.svg").write_text(svg)


def read_series(path) -> tuple[tuple[str, ...], np.ndarray, np.ndarray]:
    """Load series.csv back into (channels, targets, predictions)."""
    rows = list(csv.DictReader(open(path, newline="")))
    channels = tuple(dict.fromkeys(r["channel"] for r in rows))
    K = len(channels)
    t = np.array([float(r["target"]) for r in rows]).reshape(-1, K)
    p = np.array([float(r["prediction"]) for r in rows]).reshape(-1, K)
    return channels, t, p


def slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def _polyline(values, x0, y0, w, h, lo, hi, color) -> str:
    n = len(values)
    xs = x0 + (np.arange(n) / max(n - 1, 1)) * w
    ys = y0 + h - (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * h
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'


def overlay_svg(truth, pred, title: str, width: int = 640, height: int = 240) -> str:
    """Ground truth (blue) and prediction (orange) on shared axes."""
    both = np.concatenate([np.asarray(truth, float), np.asarray(pred, float)])
    lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 30
    w, h = width - 2 * pad, height - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{pad}" width="{w}" height="{h}" fill="white" stroke="#999"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="2" y="{pad + 10}" font-size="10">{hi:.3g}</text>',
        f'<text x="2" y="{pad + h}" font-size="10">{lo:.3g}</text>',
    ]
    if len(truth):
        parts.append(_polyline(truth, pad, pad, w, h, lo, hi, TRUTH_COLOR))
        parts.append(_polyline(pred, pad, pad, w, h, lo, hi, PRED_COLOR))
    parts.append("</svg>\n")
    return "\n".join(parts)
