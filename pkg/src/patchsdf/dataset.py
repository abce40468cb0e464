"""On-disk dataset: normalized meshes, scanned clouds per variant, query files, manifest.

Layout under the dataset directory::

    meshes/<shape>.ply             normalized ground-truth mesh (binary PLY)
    clouds/<variant>/<shape>.ply   simulated scan (ASCII PLY points)
    queries/<shape>.bin            2000 supervised query points
    manifest.txt                   one record per (shape, variant)
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetConfig, derive_seed
from .geometry import TriangleMesh, normalize_unit_cube
from .meshio import load_mesh, read_point_cloud, save_ply, write_point_cloud
from .sampling import CloudIndex, QuerySet, generate_query_set, read_query_file, write_query_file
from .scansim import ScanConfig, make_variant, read_manifest, variant_settings, write_manifest
from .shapes import procedural_mesh

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"


@dataclass
class ShapeSource:
    shape_id: str
    path: str = ""  # mesh file, or empty for a procedural solid
    kind: str = ""


def list_sources(cfg: DatasetConfig, master_seed: int) -> list:
    if cfg.mesh_dir:
        root = Path(cfg.mesh_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"mesh directory {root} does not exist")
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".obj", ".ply"))
        return [ShapeSource(p.stem, str(p)) for p in files]
    kinds = cfg.shape_kinds
    return [ShapeSource(f"proc_{i:03d}", kind=kinds[i % len(kinds)]) for i in range(cfg.num_shapes)]


def _load_source(src: ShapeSource, cfg: DatasetConfig, master_seed: int) -> TriangleMesh:
    if src.path:
        return normalize_unit_cube(load_mesh(src.path))
    rng = np.random.default_rng(derive_seed(master_seed, src.shape_id, "shape"))
    return procedural_mesh(src.kind, rng, cfg.mesh_resolution)


def build_shape(src: ShapeSource, cfg: DatasetConfig, master_seed: int, force=False) -> list:
    """Write all files of one shape; return its manifest records in variant order."""
    root = Path(cfg.dataset_dir)
    mesh_path = root / "meshes" / f"{src.shape_id}.ply"
    query_path = root / "queries" / f"{src.shape_id}.bin"
    mesh = _load_source(src, cfg, master_seed)
    if not mesh.watertight:
        raise ValueError(f"{src.shape_id}: mesh is not watertight")
    if force or not mesh_path.exists():
        mesh_path.parent.mkdir(parents=True, exist_ok=True)
        save_ply(mesh, mesh_path)
    if force or not query_path.exists():
        qs = generate_query_set(mesh, np.random.default_rng(derive_seed(master_seed, src.shape_id, "queries")))
        query_path.parent.mkdir(parents=True, exist_ok=True)
        write_query_file(query_path, qs)
    records = []
    scan_cfg = ScanConfig(image_width=cfg.image_width, image_height=cfg.image_height)
    for variant in cfg.variants:
        cloud_path = root / "clouds" / variant / f"{src.shape_id}.ply"
        scan_seed = derive_seed(master_seed, src.shape_id, "scan", variant)
        rng = np.random.default_rng(scan_seed)
        if force or not cloud_path.exists():
            pc = make_variant(mesh, variant, rng, scan_cfg)
            cloud_path.parent.mkdir(parents=True, exist_ok=True)
            write_point_cloud(cloud_path, pc.points)
            prov, n_points = pc.provenance, len(pc.points)
        else:
            # rerun the cheap parameter draw so the record matches a fresh build
            sigma, n_scans = variant_settings(variant, rng)
            prov = {"noise_std": sigma, "num_scans": n_scans}
            n_points = len(read_point_cloud(cloud_path))
        records.append({
            "shape": src.shape_id,
            "variant": variant,
            "mesh": mesh_path.relative_to(root).as_posix(),
            "cloud": cloud_path.relative_to(root).as_posix(),
            "queries": query_path.relative_to(root).as_posix(),
            "scale": float(mesh.scale),
            "seed": scan_seed,
            "points": n_points,
            "noise_std": float(prov["noise_std"]),
            "num_scans": int(prov["num_scans"]),
        })
    return records


def _build_job(args):
    src, cfg, seed, force = args
    try:
        return src.shape_id, build_shape(src, cfg, seed, force), None
    except Exception as exc:  # per-shape failures are reported, not fatal
        return src.shape_id, [], f"{type(exc).__name__}: {exc}"


def make_dataset(cfg: DatasetConfig, master_seed: int, force=False, workers=1):
    """Build every shape; returns (manifest path, {shape: error})."""
    sources = list_sources(cfg, master_seed)
    jobs = [(s, cfg, master_seed, force) for s in sources]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_build_job, jobs))
    else:
        results = [_build_job(j) for j in jobs]
    records, failures = [], {}
    for shape_id, recs, err in results:
        if err:
            log.error("shape %s failed: %s", shape_id, err)
            failures[shape_id] = err
        records.extend(recs)
    root = Path(cfg.dataset_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_manifest(root / MANIFEST, records)
    return root / MANIFEST, failures


@dataclass
class ShapeData:
    shape_id: str
    variant: str
    index: CloudIndex
    queries: QuerySet
    mesh_path: Path
    scale: float


def load_records(manifest_path, variants=None) -> list:
    root = Path(manifest_path).resolve().parent
    recs = read_manifest(manifest_path)
    if variants:
        recs = [r for r in recs if r["variant"] in variants]
    for r in recs:
        for key in ("mesh", "cloud", "queries"):
            r[key] = root / r[key]
    return recs


def load_training_set(manifest_path, variants=None) -> list:
    out = []
    for r in load_records(manifest_path, variants):
        out.append(ShapeData(
            r["shape"], r["variant"], CloudIndex(read_point_cloud(r["cloud"])),
            read_query_file(r["queries"]), r["mesh"], float(r["scale"]),
        ))
    if not out:
        raise ValueError(f"{manifest_path}: no records for variants {variants}")
    return out
