"""Freeze the end-to-end Chamfer threshold from a dense-evaluation oracle run.

Usage: python tests/fixtures/freeze_thresholds.py WORKDIR

Trains e_vanilla with acceptance.ini (or reuses a finished run in WORKDIR),
reconstructs every training cloud with every grid cell evaluated, and
writes the mean Chamfer x100 times a fixed margin to
acceptance_thresholds.json. Run once, before the sparse pipeline is checked.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from acceptance_support import THRESHOLDS, acceptance_config, reconstruct_training_clouds, train_vanilla  # noqa: E402

MARGIN = 1.1


def main(workdir):
    cfg = acceptance_config(workdir)
    res = train_vanilla(cfg, log_fn=lambda r: print(r, flush=True))
    reports = reconstruct_training_clouds(cfg, res.params, dense=True)
    per_shape = {r.shape_id: r.chamfer_x100 for r in reports}
    mean = float(np.mean(list(per_shape.values())))
    record = {
        "e2e_chamfer_x100": round(mean * MARGIN, 4),
        "dense_oracle_mean_chamfer_x100": mean,
        "margin": MARGIN,
        "grid_resolution": cfg.grid.resolution,
        "per_shape_dense_chamfer_x100": per_shape,
    }
    THRESHOLDS.write_text(json.dumps(record, indent=1) + "\n")
    print(json.dumps(record, indent=1))


if __name__ == "__main__":
    main(sys.argv[1])
