"""Deterministic CSV artifacts, seed aggregation, and SVG convenience plots.

Every CSV opens with a `# config_digest=<hex>` comment tying the artifact
to the experiment document that produced it. Cell formatting is
deterministic (floats via shortest round-trip repr), so re-running the
same configuration rewrites byte-identical files. SVG plots are redundant
views of CSV data; the CSVs are the source of truth.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .diagnostics import performance_gap
from .errors import ConfigError, DataError


def _fmt(value) -> str:
    if isinstance(value, bool):
        raise ConfigError(f"booleans do not belong in CSV cells: {value}")
    if isinstance(value, float):
        text = repr(value)
    else:
        text = str(value)
    if "," in text or "\n" in text:
        raise ConfigError(f"CSV cell {text!r} needs quoting, which this format avoids")
    return text


def write_csv(path, fieldnames: list[str], rows: list[dict], digest: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_digest={digest}", ",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(_fmt(row[f]) for f in fieldnames))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path) -> tuple[str, list[str], list[dict]]:
    """Returns (embedded digest, fieldnames, rows as string dicts)."""
    path = Path(path)
    digest = ""
    header: list[str] | None = None
    rows: list[dict] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("#"):
            if "config_digest=" in line:
                digest = line.split("config_digest=", 1)[1].strip()
            continue
        cells = line.split(",")
        if header is None:
            header = cells
            continue
        if len(cells) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}")
        rows.append(dict(zip(header, cells)))
    if header is None:
        raise DataError(f"{path} has no header row")
    return digest, header, rows


# ---------------------------------------------------------------------------
# Aggregation.

GROUP_KEYS = ("method", "structure", "insertion", "r")


def summarize(rows: list[dict], metric_name: str) -> list[dict]:
    """Mean/stddev of the test metric over seeds, plus gap vs full fine-tune.

    Rows are results.csv rows (string cells). Groups keep first-appearance
    order; stddev is the sample deviation (0.0 for a single seed); the gap
    column is "-" when no full-fine-tuning group exists to compare against.
    """
    if not rows:
        raise DataError("no result rows to summarize")
    groups: dict[tuple, dict] = {}
    for row in rows:
        key = tuple(row[k] for k in GROUP_KEYS)
        bucket = groups.setdefault(key, {"metrics": [], "epochs": []})
        bucket["metrics"].append(float(row["metric"]))
        bucket["epochs"].append(float(row["best_epoch"]))
    full_mean = None
    for key, bucket in groups.items():
        if key[0] == "full":
            full_mean = float(np.mean(bucket["metrics"]))
            break
    out = []
    for key, bucket in groups.items():
        metrics = bucket["metrics"]
        mean = float(np.mean(metrics))
        std = float(np.std(metrics, ddof=1)) if len(metrics) > 1 else 0.0
        if full_mean is None:
            gap = "-"
        else:
            gap = performance_gap({"task": (metric_name, mean)}, {"task": (metric_name, full_mean)})
        out.append(
            {
                **dict(zip(GROUP_KEYS, key)),
                "n_seeds": len(metrics),
                "mean_metric": mean,
                "std_metric": std,
                "mean_best_epoch": float(np.mean(bucket["epochs"])),
                "gap_vs_full": gap,
            }
        )
    return out


SUMMARY_FIELDS = [*GROUP_KEYS, "n_seeds", "mean_metric", "std_metric", "mean_best_epoch", "gap_vs_full"]


# ---------------------------------------------------------------------------
# SVG convenience plots (numeric truth lives in the CSVs).

_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")


def _svg_doc(width: int, height: int, digest: str, body: list[str]) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
        f'font-family="sans-serif" font-size="11">',
        f"<!-- config_digest={digest} -->",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def svg_bars(path, title: str, labels: list[str], values: list[float], digest: str) -> Path:
    """Horizontal bar chart of one value per label."""
    if len(labels) != len(values) or not labels:
        raise ConfigError("svg_bars needs one value per label")
    width, row_h, left, right = 640, 24, 220, 70
    height = 50 + row_h * len(labels)
    top = max(abs(v) for v in values) or 1.0
    body = [f'<text x="12" y="22" font-size="14" font-weight="bold">{title}</text>']
    for i, (label, value) in enumerate(zip(labels, values)):
        y = 40 + i * row_h
        bar = (width - left - right) * abs(value) / top
        color = _PALETTE[i % len(_PALETTE)]
        body.append(f'<text x="{left - 8}" y="{y + 14}" text-anchor="end">{label}</text>')
        body.append(f'<rect x="{left}" y="{y + 3}" width="{bar:.2f}" height="{row_h - 8}" fill="{color}"/>')
        body.append(f'<text x="{left + bar + 6:.2f}" y="{y + 14}">{value:.4f}</text>')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_svg_doc(width, height, digest, body))
    return path


def svg_overlay(path, title: str, edges, series: list[tuple[str, list[float]]], digest: str) -> Path:
    """Step-line overlay of histograms sharing one set of bin edges."""
    if not series:
        raise ConfigError("svg_overlay needs at least one series")
    width, height, left, bottom, top_pad = 640, 360, 60, 40, 40
    plot_w, plot_h = width - left - 20, height - bottom - top_pad
    edges = list(map(float, edges))
    span = edges[-1] - edges[0] or 1.0
    peak = max(max(probs) for _, probs in series) or 1.0
    body = [f'<text x="12" y="22" font-size="14" font-weight="bold">{title}</text>']
    body.append(
        f'<line x1="{left}" y1="{height - bottom}" x2="{left + plot_w}" y2="{height - bottom}" stroke="black"/>'
    )
    body.append(f'<line x1="{left}" y1="{top_pad}" x2="{left}" y2="{height - bottom}" stroke="black"/>')
    body.append(f'<text x="{left}" y="{height - 18}">{edges[0]:.3f}</text>')
    body.append(f'<text x="{left + plot_w}" y="{height - 18}" text-anchor="end">{edges[-1]:.3f}</text>')
    for k, (name, probs) in enumerate(series):
        if len(probs) != len(edges) - 1:
            raise ConfigError(f"series {name!r} has {len(probs)} bins for {len(edges) - 1} edges")
        color = _PALETTE[k % len(_PALETTE)]
        points = []
        for i, p in enumerate(probs):
            x0 = left + plot_w * (edges[i] - edges[0]) / span
            x1 = left + plot_w * (edges[i + 1] - edges[0]) / span
            y = height - bottom - plot_h * p / peak
            points.append(f"{x0:.2f},{y:.2f}")
            points.append(f"{x1:.2f},{y:.2f}")
        body.append(f'<polyline points="{" ".join(points)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top_pad + 14 * k
        body.append(f'<line x1="{width - 170}" y1="{ly}" x2="{width - 150}" y2="{ly}" stroke="{color}" stroke-width="3"/>')
        body.append(f'<text x="{width - 144}" y="{ly + 4}">{name}</text>')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_svg_doc(width, height, digest, body))
    return path
