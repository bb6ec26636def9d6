"""Vertex, edge-length, coverage and landmark metrics with jaw/midface splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .registration import closest_points_on_surface
from .surface import JAW, MIDFACE, LabeledSurface, diameter, edges

REGIONS = {"jaw": JAW, "midface": MIDFACE}
METRICS = ("VD", "ED", "SC", "LD")
DEFAULT_TAU_FRACTION = 0.02


class CorrespondenceError(ValueError):
    pass


def _region_mask(truth: LabeledSurface, region) -> np.ndarray:
    if region is None or region == "all":
        return np.ones(truth.n_vertices, dtype=bool)
    label = REGIONS[region] if isinstance(region, str) else int(region)
    return truth.region == label


def _check_correspondence(est: LabeledSurface, truth: LabeledSurface):
    if est.n_vertices != truth.n_vertices:
        raise CorrespondenceError(f"vertex counts differ: {est.n_vertices} vs {truth.n_vertices}")


def vertex_errors(estimated: LabeledSurface, truth: LabeledSurface) -> np.ndarray:
    """Per-vertex distance between corresponding vertices."""
    _check_correspondence(estimated, truth)
    return np.linalg.norm(estimated.vertices - truth.vertices, axis=1)


def vertex_distance(estimated: LabeledSurface, truth: LabeledSurface, region=None) -> float:
    mask = _region_mask(truth, region)
    if not mask.any():
        raise ValueError(f"region {region!r} has no vertices")
    return float(vertex_errors(estimated, truth)[mask].mean())


def edge_length_distance(estimated: LabeledSurface, truth: LabeledSurface, region=None) -> float:
    """Mean absolute edge-length change over edges with both endpoints in the region.

    NaN when the region holds no complete edge, matching ``landmark_distance``.
    """
    _check_correspondence(estimated, truth)
    if not np.array_equal(estimated.faces, truth.faces):
        raise CorrespondenceError("surfaces do not share topology")
    e = edges(truth.faces)
    mask = _region_mask(truth, region)
    e = e[mask[e[:, 0]] & mask[e[:, 1]]]
    if len(e) == 0:
        return float("nan")
    length = lambda v: np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)  # noqa: E731
    return float(np.abs(length(estimated.vertices) - length(truth.vertices)).mean())


def coverage_distances(estimated: LabeledSurface, truth: LabeledSurface) -> np.ndarray:
    """Distance from every truth vertex to the estimated triangle surface."""
    pts, _ = closest_points_on_surface(truth.vertices, estimated)
    return np.linalg.norm(pts - truth.vertices, axis=1)


def surface_coverage(estimated: LabeledSurface, truth: LabeledSurface, region=None, tau: float | None = None) -> float:
    """Fraction of truth-region vertices within ``tau`` of the estimated surface."""
    tau = DEFAULT_TAU_FRACTION * diameter(truth) if tau is None else tau
    if not tau > 0:
        raise ValueError("tau must be positive")
    mask = _region_mask(truth, region)
    if not mask.any():
        raise ValueError(f"region {region!r} has no vertices")
    return float((coverage_distances(estimated, truth)[mask] <= tau).mean())


def landmark_distance(estimated: LabeledSurface, truth: LabeledSurface, region=None) -> float:
    """Mean distance between corresponding landmark positions (optionally those in a region)."""
    if len(estimated.landmarks) != len(truth.landmarks):
        raise CorrespondenceError(f"landmark counts differ: {len(estimated.landmarks)} vs {len(truth.landmarks)}")
    a = estimated.vertices[estimated.landmarks]
    b = truth.vertices[truth.landmarks]
    keep = _region_mask(truth, region)[truth.landmarks]
    if not keep.any():
        return float("nan")
    return float(np.linalg.norm(a[keep] - b[keep], axis=1).mean())


# ---------------------------------------------------------------------- report


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["tau", "n_cases", "summary", "cases"],
    "properties": {
        "tau": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "tau_fraction": {"type": ["number", "null"]},
        "n_cases": {"type": "integer", "minimum": 1},
        "summary": {
            "type": "object",
            "required": list(REGIONS),
            "additionalProperties": {
                "type": "object",
                "required": list(METRICS),
                "additionalProperties": {
                    "type": "object",
                    "required": ["mean", "std"],
                    "properties": {"mean": {"type": ["number", "null"]}, "std": {"type": ["number", "null"]}},
                },
            },
        },
        "cases": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["case", "tau"] + [f"{r}_{m}" for r in REGIONS for m in METRICS],
                "properties": {"case": {"type": "string"}, "tau": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
    },
}


@dataclass
class EvaluationReport:
    tau: float | None  # fixed tolerance, or None when scaled per case
    tau_fraction: float | None
    cases: list = field(default_factory=list)  # one dict per case
    summary: dict = field(default_factory=dict)  # region -> metric -> {mean, std}

    def to_dict(self) -> dict:
        clean = lambda x: None if isinstance(x, float) and np.isnan(x) else x  # noqa: E731
        return {
            "tau": self.tau,
            "tau_fraction": self.tau_fraction,
            "n_cases": len(self.cases),
            "summary": {r: {m: {k: clean(v) for k, v in s.items()} for m, s in d.items()} for r, d in self.summary.items()},
            "cases": [{k: clean(v) for k, v in c.items()} for c in self.cases],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        cols = ["case", "tau"] + [f"{r}_{m}" for r in REGIONS for m in METRICS]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c in self.cases:
                w.writerow([c["case"]] + [repr(float(c[k])) for k in cols[1:]])


def case_metrics(estimated: LabeledSurface, truth: LabeledSurface, tau: float) -> dict:
    out = {"tau": float(tau)}
    cover = coverage_distances(estimated, truth)
    for name in REGIONS:
        mask = _region_mask(truth, name)
        out[f"{name}_VD"] = vertex_distance(estimated, truth, name)
        out[f"{name}_ED"] = edge_length_distance(estimated, truth, name)
        out[f"{name}_SC"] = float((cover[mask] <= tau).mean())
        out[f"{name}_LD"] = landmark_distance(estimated, truth, name)
    return out


def evaluate_cohort(
    cases: Sequence, tau: float | None = None, tau_fraction: float = DEFAULT_TAU_FRACTION, names=None
) -> EvaluationReport:
    """Metrics per case and population mean/std per region.

    ``cases`` holds ``(estimated, truth)`` pairs. With ``tau`` unset each case
    uses ``tau_fraction`` times its truth diameter.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("cohort is empty")
    if tau is not None and not tau > 0:
        raise ValueError("tau must be positive")
    names = list(names) if names is not None else [f"case_{i:03d}" for i in range(len(cases))]
    rows = []
    for name, (est, truth) in zip(names, cases):
        t = tau if tau is not None else tau_fraction * diameter(truth)
        rows.append({"case": str(name), **case_metrics(est, truth, t)})
    summary = {}
    for r in REGIONS:
        summary[r] = {}
        for m in METRICS:
            vals = np.array([row[f"{r}_{m}"] for row in rows], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            mean = float(vals.mean()) if len(vals) else float("nan")
            std = float(vals.std()) if len(vals) else float("nan")
            summary[r][m] = {"mean": mean, "std": std}
    return EvaluationReport(tau, None if tau is not None else tau_fraction, rows, summary)


def dump_vertex_errors(estimated: LabeledSurface, truth: LabeledSurface, path) -> None:
    """Per-vertex distances for external heatmap plotting."""
    d = vertex_errors(estimated, truth)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex", "region", "distance"])
        for i, (r, x) in enumerate(zip(truth.region, d)):
            w.writerow([i, "jaw" if r == JAW else "midface", repr(float(x))])
