"""Command-line pipeline: make-dataset, train, reconstruct, eval, ablate, print-config.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ExperimentConfig, derive_seed, load_config, to_ini
from .dataset import MANIFEST, load_records, load_training_set, make_dataset
from .evaluation import MetricReport, evaluate_reconstruction, format_table, report_table
from .extraction import PropagationError, reconstruct
from .meshio import MeshFormatError, load_mesh, read_point_cloud, save_mesh
from .model import MODEL_VARIANTS, variant_config
from .sampling import CloudIndex, PatchError
from .training import TrainingDiverged, latest_checkpoint, load_params, run_hash, train

log = logging.getLogger("patchsdf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _run_dir(cfg: ExperimentConfig, variant=None) -> Path:
    return Path(cfg.output_dir) / (variant or cfg.model_variant)


def _manifest(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.dataset.dataset_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}; run make-dataset first")
    return path


def _data_tag(manifest: Path, variants) -> str:
    import hashlib
    return hashlib.sha256(manifest.read_bytes()).hexdigest() + ":" + ",".join(variants)


def train_variant(cfg: ExperimentConfig, variant: str, force=False, log_fn=None):
    """Train one model variant on the configured training variants; returns TrainResult."""
    manifest = _manifest(cfg)
    shapes = load_training_set(manifest, cfg.train_variants)
    model_cfg = variant_config(variant, cfg.model)
    out = _run_dir(cfg, variant)
    if force and out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(replace(cfg, model_variant=variant)))
    return train(shapes, model_cfg, cfg.train, out, cfg.master_seed,
                 resume=True, data_tag=_data_tag(manifest, cfg.train_variants), log_fn=log_fn)


def _load_model(cfg: ExperimentConfig, variant: str, checkpoint=None):
    model_cfg = variant_config(variant, cfg.model)
    if checkpoint is None:
        _, checkpoint = latest_checkpoint(_run_dir(cfg, variant) / "checkpoints")
        if checkpoint is None:
            raise DataError(f"no checkpoint found for variant {variant} under {_run_dir(cfg, variant)}")
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise DataError(f"checkpoint {checkpoint} does not exist")
    return load_params(checkpoint, model_cfg)


def reconstruct_clouds(cfg: ExperimentConfig, params, clouds, out_dir, force=False, dense=None):
    """Reconstruct every (name, cloud path); returns {name: error} for failures."""
    g = cfg.grid
    dense = g.dense if dense is None else dense
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = {}
    for name, path in clouds:
        mesh_path = out_dir / f"{name}.ply"
        if mesh_path.exists() and not force:
            continue
        try:
            index = CloudIndex(read_point_cloud(path))
            mesh, stats = reconstruct(
                index, params, g.resolution, g.bound, g.epsilon_cells, g.confidence, dense,
                seed=derive_seed(cfg.master_seed, name, "reconstruct"), max_iterations=g.max_iterations,
            )
            save_mesh(mesh, mesh_path)
            (out_dir / f"{name}.stats").write_text(stats.to_text())
            log.info("%s: %d triangles, evaluated %.2f%% of the grid", name, len(mesh.triangles), 100 * stats.evaluated_fraction)
        except (PatchError, PropagationError, MeshFormatError, ValueError, OSError) as exc:
            log.error("%s: reconstruction failed: %s", name, exc)
            failures[name] = str(exc)
    return failures


def evaluate_dirs(recon_dir, gt_dir, n=10000, master_seed=0, method="", dataset=""):
    """Reports for every ground-truth mesh, matched to reconstructions by file stem."""
    recon_dir, gt_dir = Path(recon_dir), Path(gt_dir)
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory {gt_dir} does not exist")
    gts = sorted(p for p in gt_dir.iterdir() if p.suffix.lower() in (".ply", ".obj"))
    if not gts:
        raise DataError(f"no meshes in {gt_dir}")
    reports = []
    for gt_path in gts:
        sid = gt_path.stem
        cand = [recon_dir / f"{sid}{ext}" for ext in (".ply", ".obj")]
        recon_path = next((c for c in cand if c.exists()), None)
        gt = load_mesh(gt_path)
        recon = load_mesh(recon_path) if recon_path is not None else None
        reports.append(evaluate_reconstruction(
            recon, gt, n,
            seed_recon=derive_seed(master_seed, sid, method, dataset, "eval-recon"),
            seed_gt=derive_seed(master_seed, sid, "eval-gt"),
            shape_id=sid, method=method, dataset=dataset,
        ))
    return reports


# ---------------------------------------------------------------------------
# commands


def cmd_make_dataset(cfg: ExperimentConfig, args):
    manifest, failures = make_dataset(cfg.dataset, cfg.master_seed, force=args.force, workers=cfg.workers)
    print(f"manifest: {manifest}")
    for sid, err in failures.items():
        print(f"failed: {sid}: {err}", file=sys.stderr)
    return EXIT_OK if not failures else EXIT_DATA


def cmd_train(cfg: ExperimentConfig, args):
    variant = args.variant or cfg.model_variant
    res = train_variant(cfg, variant, force=args.force, log_fn=lambda r: print(json.dumps(r), flush=True))
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def _clouds_from_args(cfg: ExperimentConfig, paths, dataset_variant):
    if paths:
        out = []
        for p in map(Path, paths):
            if p.is_dir():
                out += [(q.stem, q) for q in sorted(p.glob("*.ply"))]
            elif p.exists():
                out.append((p.stem, p))
            else:
                raise DataError(f"cloud {p} does not exist")
        return out
    return [(r["shape"], r["cloud"]) for r in load_records(_manifest(cfg), [dataset_variant])]


def cmd_reconstruct(cfg: ExperimentConfig, args):
    variant = args.variant or cfg.model_variant
    g = cfg.grid
    g = replace(g, **{k: v for k, v in dict(
        resolution=args.grid_res, epsilon_cells=args.epsilon_cells, confidence=args.confidence,
    ).items() if v is not None})
    if args.dense:
        g = replace(g, dense=True)
    cfg = replace(cfg, grid=g)
    params = _load_model(cfg, variant, args.checkpoint)
    dvar = args.dataset_variant or cfg.train_variants[0]
    clouds = _clouds_from_args(cfg, args.clouds, dvar)
    out = Path(args.out) if args.out else _run_dir(cfg, variant) / "recon" / dvar
    failures = reconstruct_clouds(cfg, params, clouds, out, force=args.force)
    print(f"meshes: {out}")
    return EXIT_OK if not failures else EXIT_DATA


def cmd_eval(cfg: ExperimentConfig, args):
    method = args.method or Path(args.recon_dir).name
    reports = evaluate_dirs(args.recon_dir, args.gt_dir, cfg.eval_samples, cfg.master_seed, method, args.dataset)
    rows, missing = report_table(reports, method, [method], [args.dataset])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_table(rows, [method]))
    out.with_suffix(".jsonl").write_text("".join(r.to_json() + "\n" for r in reports))
    for r in reports:
        flag = "  (empty reconstruction)" if r.empty else ""
        print(f"{r.shape_id}: chamfer x100 = {r.chamfer_x100:.4f}{flag}")
    print(f"table: {out}")
    return EXIT_OK


def run_ablation(cfg: ExperimentConfig, force=False, log_fn=None):
    """Train each model variant, reconstruct each ablation dataset, tabulate vs e_vanilla.

    Returns (rows, reports, epoch_times, failures).
    """
    manifest = _manifest(cfg)
    reports, epoch_times, failures = [], {}, {}
    gt_dir = manifest.parent / "meshes"
    for variant in cfg.ablation_variants:
        try:
            res = train_variant(cfg, variant, force=force, log_fn=log_fn)
            epoch_times[variant] = float(np.mean([r["wall_time"] for r in res.history])) if res.history else float("nan")
            for dvar in cfg.ablation_datasets:
                clouds = [(r["shape"], r["cloud"]) for r in load_records(manifest, [dvar])]
                if not clouds:
                    raise DataError(f"dataset has no {dvar} clouds")
                out = _run_dir(cfg, variant) / "recon" / dvar
                bad = reconstruct_clouds(cfg, res.params, clouds, out, force=force)
                failures.update({f"{variant}/{dvar}/{k}": v for k, v in bad.items()})
                reports += evaluate_dirs(out, gt_dir, cfg.eval_samples, cfg.master_seed, variant, dvar)
        except (TrainingDiverged, DataError, ValueError) as exc:
            log.error("variant %s failed: %s", variant, exc)
            failures[variant] = str(exc)
    done = [v for v in cfg.ablation_variants if v not in failures]
    rows = []
    if "e_vanilla" in done:
        rows, _ = report_table(reports, "e_vanilla", done, cfg.ablation_datasets)
    return rows, reports, epoch_times, failures


def cmd_ablate(cfg: ExperimentConfig, args):
    if args.variants:
        cfg = replace(cfg, ablation_variants=tuple(args.variants))
    if "e_vanilla" not in cfg.ablation_variants:
        cfg = replace(cfg, ablation_variants=("e_vanilla",) + tuple(cfg.ablation_variants))
    rows, reports, times, failures = run_ablation(cfg, force=args.force)
    out = Path(cfg.output_dir) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    done = [v for v in cfg.ablation_variants if v not in failures]
    if rows:
        (out / "table.csv").write_text(format_table(rows, done))
        print(format_table(rows, done), end="")
    (out / "reports.jsonl").write_text("".join(r.to_json() + "\n" for r in reports))
    (out / "epoch_times.json").write_text(json.dumps(times, indent=1))
    for k, v in failures.items():
        print(f"failed: {k}: {v}", file=sys.stderr)
    return EXIT_OK if not failures else EXIT_DATA


def cmd_print_config(cfg: ExperimentConfig, args):
    print(to_ini(cfg), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="patchsdf", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="experiment config (INI); defaults apply to missing keys")
    p.add_argument("--workers", type=int, help="parallel shape-level workers")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="normalize meshes, simulate scans, write query files")
    s.add_argument("--force", action="store_true", help="rebuild existing files")
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("train", help="train a model variant with per-epoch checkpoints")
    s.add_argument("--variant", choices=MODEL_VARIANTS)
    s.add_argument("--force", action="store_true", help="discard existing checkpoints")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="extract meshes from point clouds")
    s.add_argument("clouds", nargs="*", help="cloud files or directories (default: dataset clouds)")
    s.add_argument("--variant", choices=MODEL_VARIANTS)
    s.add_argument("--checkpoint")
    s.add_argument("--dataset-variant", help="which dataset clouds to use when none are given")
    s.add_argument("--out")
    s.add_argument("--grid-res", type=int)
    s.add_argument("--epsilon-cells", type=float)
    s.add_argument("--confidence", type=int)
    s.add_argument("--dense", action="store_true", help="evaluate every grid sample")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="Chamfer distance of reconstructions against ground truth")
    s.add_argument("--recon-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--out", required=True, help="CSV table; per-shape records go next to it (.jsonl)")
    s.add_argument("--method", default="")
    s.add_argument("--dataset", default="")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate model variants, tabulate relative to e_vanilla")
    s.add_argument("--variants", nargs="+", choices=MODEL_VARIANTS)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("print-config", help="print the effective configuration")
    s.set_defaults(func=cmd_print_config)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    except FileNotFoundError:
        print(f"error: config file {args.config} not found", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    try:
        return args.func(cfg, args)
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, MeshFormatError, PatchError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
