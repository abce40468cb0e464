"""Chamfer distance between surfaces and the abs/rel comparison table."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriangleMesh, sample_surface

EMPTY_SENTINEL = float(np.finfo(np.float64).max)


def chamfer_distance(a, b) -> float:
    """Mean squared nearest-neighbor distance A->B plus B->A (no square root)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set")
    _, ia = cKDTree(b).query(a)
    _, ib = cKDTree(a).query(b)
    # recompute squared distances exactly from the matched pairs
    da = np.sum((a - b[ia]) ** 2, axis=1)
    db = np.sum((b - a[ib]) ** 2, axis=1)
    return float(da.mean() + db.mean())


@dataclass
class MetricReport:
    shape_id: str
    chamfer: float
    chamfer_x100: float
    n_recon: int
    n_gt: int
    seed_recon: int
    seed_gt: int
    method: str = ""
    dataset: str = ""
    empty: bool = False

    def to_json(self):
        return json.dumps(asdict(self))


def evaluate_reconstruction(recon: TriangleMesh, gt: TriangleMesh, n=10000, seed_recon=0, seed_gt=1,
                            shape_id="", method="", dataset="") -> MetricReport:
    """Area-uniform samples from both surfaces (independent seeds), then Chamfer."""
    if gt is None or len(gt.triangles) == 0 or gt.areas().sum() <= 0:
        raise ValueError("ground-truth mesh is empty")
    if recon is None or len(recon.triangles) == 0 or recon.areas().sum() <= 0:
        return MetricReport(shape_id, EMPTY_SENTINEL, EMPTY_SENTINEL, 0, n, seed_recon, seed_gt, method, dataset, True)
    a = sample_surface(recon, n, np.random.default_rng(seed_recon))
    b = sample_surface(gt, n, np.random.default_rng(seed_gt))
    cd = chamfer_distance(a, b)
    return MetricReport(shape_id, cd, 100.0 * cd, n, n, seed_recon, seed_gt, method, dataset)


def report_table(reports, baseline, methods=None, datasets=None):
    """Mean Chamfer x100 per (dataset, method) and its ratio to the baseline method.

    Returns ``(rows, missing)``: rows are dicts with ``dataset`` plus
    ``<method>_abs`` and ``<method>_rel`` keys, and a final ``average`` row;
    ``missing`` lists (dataset, method, shape) combinations absent from the
    reports. Means use only shapes present for every method of a dataset.
    """
    by = {}
    for r in reports:
        by.setdefault((r.dataset, r.method), {})[r.shape_id] = r.chamfer_x100
    methods = list(methods) if methods else sorted({m for _, m in by})
    datasets = list(datasets) if datasets else sorted({d for d, _ in by})
    if baseline not in methods:
        raise ValueError(f"baseline {baseline!r} not among methods {methods}")
    rows, missing = [], []
    for d in datasets:
        shapes = set().union(*(by.get((d, m), {}).keys() for m in methods))
        for m in methods:
            missing += [(d, m, s) for s in sorted(shapes - set(by.get((d, m), {})))]
        common = sorted(set.intersection(*(set(by.get((d, m), {})) for m in methods))) if methods else []
        row = {"dataset": d}
        means = {m: float(np.mean([by[(d, m)][s] for s in common])) if common else float("nan") for m in methods}
        for m in methods:
            row[f"{m}_abs"] = means[m]
            row[f"{m}_rel"] = means[m] / means[baseline] if means[baseline] else float("nan")
        rows.append(row)
    if rows:
        avg = {"dataset": "average"}
        for m in methods:
            avg[f"{m}_abs"] = float(np.mean([r[f"{m}_abs"] for r in rows]))
            avg[f"{m}_rel"] = float(np.mean([r[f"{m}_rel"] for r in rows]))
        rows.append(avg)
    return rows, missing


def format_table(rows, methods) -> str:
    """Comma-separated table: dataset, then abs and rel per method."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["dataset"]
    for m in methods:
        header += [f"{m}_abs", f"{m}_rel"]
    w.writerow(header)
    for r in rows:
        line = [r["dataset"]]
        for m in methods:
            line += [f"{r[f'{m}_abs']:.4f}", f"{r[f'{m}_rel']:.2f}"]
        w.writerow(line)
    return buf.getvalue()


def hausdorff_distance(a, b) -> float:
    """Symmetric Hausdorff distance between point sets (debugging aid)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(max(cKDTree(b).query(a)[0].max(), cKDTree(a).query(b)[0].max()))
