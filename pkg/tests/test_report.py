import json
from pathlib import Path

import numpy as np

from weakcanopy.evaluation import MetricsReport
from weakcanopy.geoio import GeoTransform, load_raster
from weakcanopy.report import (COLUMNS, MISSING, format_cell, overlay, parse_markdown_table, render_report,
                               write_overlay)

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "reference_table.json").read_text())


def fixture_runs():
    runs = []
    for row in FIXTURE["rows"]:
        num = {k: (None if row[k] is None else float(row[k])) for k in COLUMNS}
        dense = {} if num["iou_d"] is None else {"iou_tree": num["iou_d"], "f1": num["f1_d"],
                                                 "balanced_accuracy": num["ba_d"]}
        runs.append(MetricsReport(row["scenario"], {"recall": num["recall_s"], "balanced_accuracy": num["ba_s"]},
                                  dense))
    return runs


def test_reference_values_rendered_verbatim(tmp_path):
    md, doc = render_report(fixture_runs(), tmp_path)
    parsed = parse_markdown_table(md)
    assert len(parsed) == 5
    for got, want in zip(parsed, FIXTURE["rows"]):
        for k in ("scenario",) + COLUMNS:
            assert got[k] == (MISSING if want[k] is None else want[k])
    mask = next(r for r in parsed if r["scenario"] == "Mask")
    assert mask["iou_d"] == "0.4839" and mask["recall_s"] == "0.8994"


def test_json_and_markdown_agree(tmp_path):
    md, doc = render_report(fixture_runs(), tmp_path)
    assert json.loads((tmp_path / "report.json").read_text()) == json.loads(json.dumps(doc))
    assert (tmp_path / "report.md").read_text() == md
    assert parse_markdown_table(md) == doc["rows"]


def test_empty_report_has_header_only():
    md, doc = render_report([])
    assert "| Scenario | IoU_d | F1_d | BA_d | Recall_s | BA_s |" in md
    assert parse_markdown_table(md) == [] and doc["rows"] == []


def test_format_cell():
    assert format_cell(None) == MISSING
    assert format_cell(0.5) == "0.5000"
    assert format_cell("0.0005") == "0.0005"


def test_cover_table():
    run = MetricsReport("Mask", cover={"area_m2": 177142.0, "percent": 29.94})
    md, _ = render_report([run])
    assert "| Mask | 177142 | 29.9 |" in md


def test_overlay_colours_positive_pixels(tmp_path):
    pixels = np.zeros((4, 4, 3), np.float32)
    pred = np.zeros((4, 4))
    pred[0, 0] = 0.9
    out = overlay(pixels, pred)
    assert out[0, 0].tolist() == [128, 128, 0] and out[1, 1].tolist() == [0, 0, 0]
    t = GeoTransform.from_origin(0, 4, 1)
    write_overlay(tmp_path / "o.png", pixels, pred, t)
    assert load_raster(tmp_path / "o.png").shape == (4, 4)
