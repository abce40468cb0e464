from dataclasses import replace

import pytest

from patchsdf.config import ExperimentConfig, GridConfig, TrainConfig, derive_seed, from_ini, to_ini
from patchsdf.model import desk_config


def test_derive_seed_stable_and_distinct():
    a = derive_seed(0, "proc_000", "scan")
    assert a == derive_seed(0, "proc_000", "scan")
    assert a != derive_seed(0, "proc_001", "scan")
    assert a != derive_seed(1, "proc_000", "scan")
    assert 0 <= a < 2**63


def test_derive_seed_documented_formula():
    import hashlib
    want = int.from_bytes(hashlib.sha256(b"5|x|3").digest()[:8], "little") & (2**63 - 1)
    assert derive_seed(5, "x", 3) == want


def test_lr_schedule():
    t = TrainConfig(epochs=8)
    assert [t.lr_at(e) for e in range(8)] == [1e-3] * 6 + [1e-4] * 2


def test_ini_roundtrip():
    cfg = ExperimentConfig(model=desk_config(n_d=12), train=TrainConfig(epochs=3), grid=GridConfig(resolution=64),
                           model_variant="k_large", ablation_variants=("e_vanilla", "e_shared"), master_seed=42)
    assert from_ini(to_ini(cfg)) == cfg
    assert from_ini(to_ini(ExperimentConfig())) == ExperimentConfig()


def test_partial_ini_uses_defaults():
    cfg = from_ini("[train]\nepochs = 2\n[grid]\ndense = yes\n")
    assert cfg.train.epochs == 2 and cfg.grid.dense is True
    assert cfg.model == ExperimentConfig().model


@pytest.mark.parametrize("text", [
    "[train]\nepoch = 2\n",
    "[bogus]\nx = 1\n",
    "[run]\nmodel_variant = e_fancy\n",
    "[grid]\ndense = maybe\n",
    "[model]\npatch_mode = cube\n",
])
def test_bad_ini(text):
    with pytest.raises(ValueError):
        from_ini(text)


def test_effective_model():
    cfg = replace(ExperimentConfig(), model_variant="e_uniform")
    assert cfg.effective_model().subsample_mode == "uniform"
