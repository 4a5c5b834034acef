"""Scenario comparison tables (markdown + JSON) and prediction overlays."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import MetricsReport
from .geoio import GeoTransform, write_png

COLUMNS = ("iou_d", "f1_d", "ba_d", "recall_s", "ba_s")
HEADERS = ("Scenario", "IoU_d", "F1_d", "BA_d", "Recall_s", "BA_s")
MISSING = "---"
OVERLAY_RGB = (255, 255, 0)


def table_row(report: MetricsReport | dict) -> dict:
    """Flatten one run's metrics into the five table columns (None if absent)."""
    if isinstance(report, dict):
        report = MetricsReport(**{k: report.get(k) or {} for k in ("sparse", "dense", "cover")},
                               scenario=report["scenario"])
    d, s = report.dense or {}, report.sparse or {}
    return {
        "scenario": report.scenario,
        "iou_d": d.get("iou_tree"),
        "f1_d": d.get("f1"),
        "ba_d": d.get("balanced_accuracy"),
        "recall_s": s.get("recall"),
        "ba_s": s.get("balanced_accuracy"),
    }


def format_cell(value, digits: int = 4) -> str:
    if value is None:
        return MISSING
    if isinstance(value, str):
        return value
    return f"{value:.{digits}f}"


def render_markdown(rows: Sequence[dict], title: str = "Scenario comparison", digits: int = 4,
                    cover: Sequence[dict] = ()) -> str:
    lines = [f"# {title}", "", "| " + " | ".join(HEADERS) + " |",
             "|" + "|".join(["---"] + ["---:"] * len(COLUMNS)) + "|"]
    for row in rows:
        cells = [row["scenario"]] + [format_cell(row[c], digits) for c in COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    if cover:
        lines += ["", "## Tree cover", "", "| Scenario | Area (m²) | Share (%) |", "|---|---:|---:|"]
        for c in cover:
            lines.append(f"| {c['scenario']} | {c['area_m2']:.0f} | {c['percent']:.1f} |")
    return "\n".join(lines) + "\n"


def parse_markdown_table(text: str) -> list[dict]:
    """Read the scenario table back from rendered markdown (cells as strings)."""
    rows, in_table = [], False
    for line in text.splitlines():
        if line.startswith("| " + HEADERS[0]):
            in_table = True
            continue
        if in_table:
            if re.match(r"^\|[-:|]+\|$", line):
                continue
            if not line.startswith("|"):
                break
            cells = [c.strip() for c in line.strip("|").split("|")]
            rows.append(dict(zip(("scenario",) + COLUMNS, cells)))
    return rows


def render_report(runs: Sequence[MetricsReport | dict], out_dir=None, title: str = "Scenario comparison",
                  digits: int = 4) -> tuple[str, dict]:
    """Markdown and JSON reports, one row per run; written to ``out_dir`` if given.

    JSON cells hold the same strings the markdown table shows, plus raw
    values under ``metrics``.
    """
    rows = [table_row(r) for r in runs]
    cover = []
    for r in runs:
        c = r.cover if isinstance(r, MetricsReport) else r.get("cover")
        if c:
            cover.append({"scenario": _name(r), **c})
    md = render_markdown(rows, title, digits, cover)
    doc = {
        "title": title,
        "columns": list(HEADERS),
        "rows": [{"scenario": r["scenario"], **{c: format_cell(r[c], digits) for c in COLUMNS}} for r in rows],
        "metrics": [r.to_json() if isinstance(r, MetricsReport) else r for r in runs],
        "cover": cover,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(md)
        (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return md, doc


def _name(run) -> str:
    return run.scenario if isinstance(run, MetricsReport) else run["scenario"]


def overlay(pixels: np.ndarray, pred: np.ndarray, threshold: float = 0.5, alpha: float = 0.5,
            color=OVERLAY_RGB) -> np.ndarray:
    """Blend ``color`` over the input wherever ``pred >= threshold``; returns uint8 RGB."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    img = img[:, :, :3] * 255.0
    mask = np.asarray(pred) >= threshold
    img[mask] = (1 - alpha) * img[mask] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_overlay(path, pixels: np.ndarray, pred: np.ndarray, transform: GeoTransform, crs_id: str | None = None,
                  threshold: float = 0.5) -> Path:
    return write_png(path, overlay(pixels, pred, threshold), transform, crs_id)
