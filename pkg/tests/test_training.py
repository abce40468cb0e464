import json
import math

import numpy as np
import pytest

from patchsdf.checkpoint import CheckpointError, config_hash
from patchsdf.config import TrainConfig
from patchsdf.dataset import load_training_set
from patchsdf.model import ModelParams, desk_config, forward, prediction_loss
from patchsdf.training import (
    TrainingDiverged, assemble_batch, latest_checkpoint, load_params, run_hash, train,
)

CFG = desk_config(n_d=8, n_s=16, encoder_widths=(4, 4, 4, 8, 16), decoder_widths=(16, 8, 8))
TCFG = TrainConfig(epochs=3, queries_per_shape=64, batch_size=16)


@pytest.fixture(scope="module")
def shapes(tiny_dataset):
    return load_training_set(tiny_dataset[1], variants=("var-noise",))


def _fixed_batch_loss(shapes, params):
    pairs = np.array([[i, q] for i in range(len(shapes)) for q in range(0, 2000, 50)])
    local, glob, scale, dist, sign = assemble_batch(shapes, pairs, CFG, 123, 0)
    total, _, _ = prediction_loss(forward(local, glob, scale, params, training=True), dist, sign)
    return float(total.data)


def test_descent(shapes, tmp_path):
    from patchsdf.config import derive_seed
    init = ModelParams(CFG, np.random.default_rng(derive_seed(0, "init", CFG.seed)))
    before = _fixed_batch_loss(shapes, init)
    res = train(shapes, CFG, TrainConfig(epochs=1, queries_per_shape=200, batch_size=16), tmp_path)
    assert _fixed_batch_loss(shapes, res.params) < before
    assert res.history[0]["loss_sign"] + res.history[0]["loss_distance"] < before


def test_log_and_checkpoints(shapes, tmp_path):
    res = train(shapes, CFG, TCFG, tmp_path)
    lines = [json.loads(s) for s in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2, 3]
    for r in lines:
        assert set(r) == {"epoch", "loss_distance", "loss_sign", "sign_accuracy", "lr", "wall_time"}
        assert 0 <= r["sign_accuracy"] <= 1 and math.isfinite(r["loss_sign"])
    assert latest_checkpoint(tmp_path / "checkpoints") == (3, tmp_path / "checkpoints" / "epoch_0003.ckpt")
    p = load_params(res.checkpoint, CFG, run_hash(CFG, TCFG, 0))
    assert p.digest() == res.params.digest()


def test_lr_decay_logged(shapes, tmp_path):
    res = train(shapes, CFG, TrainConfig(epochs=4, queries_per_shape=32, batch_size=16), tmp_path)
    assert [r["lr"] for r in res.history] == [1e-3, 1e-3, 1e-3, 1e-4]


def test_deterministic(shapes, tmp_path):
    a = train(shapes, CFG, TCFG, tmp_path / "a")
    b = train(shapes, CFG, TCFG, tmp_path / "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    c = train(shapes, CFG, TCFG, tmp_path / "c", master_seed=1)
    assert c.params.digest() != a.params.digest()


def test_resume_continues(shapes, tmp_path):
    full = train(shapes, CFG, TCFG, tmp_path / "full")
    part = tmp_path / "part"
    train(shapes, CFG, TCFG, part)
    # drop the last epoch and resume from epoch 2
    (part / "checkpoints" / "epoch_0003.ckpt").unlink()
    logged = []
    res = train(shapes, CFG, TCFG, part, log_fn=logged.append)
    assert [r["epoch"] for r in logged] == [3]
    assert res.checkpoint.read_bytes() == full.checkpoint.read_bytes()
    assert [r["epoch"] for r in res.history] == [1, 2, 3]


def test_resume_rejects_other_config(shapes, tmp_path):
    train(shapes, CFG, TrainConfig(epochs=1, queries_per_shape=32, batch_size=16), tmp_path)
    with pytest.raises(CheckpointError):
        train(shapes, CFG, TrainConfig(epochs=2, queries_per_shape=33, batch_size=16), tmp_path)


def test_load_params_wrong_model(shapes, tmp_path):
    res = train(shapes, CFG, TrainConfig(epochs=1, queries_per_shape=32, batch_size=16), tmp_path)
    with pytest.raises(CheckpointError):
        load_params(res.checkpoint, desk_config())
    with pytest.raises(CheckpointError):
        load_params(res.checkpoint, CFG, config_hash("other"))


def test_nan_aborts_with_diagnostics(shapes, tmp_path):
    bad = [s for s in shapes]
    q = bad[0].queries
    q.distance = q.distance.copy()
    q.distance[:] = np.nan
    try:
        with pytest.raises(TrainingDiverged) as err:
            train(bad, CFG, TrainConfig(epochs=1, queries_per_shape=32, batch_size=16), tmp_path)
    finally:
        q.distance = np.nan_to_num(q.distance)
    assert err.value.diagnostics["epoch"] == 1
    assert err.value.diagnostics["non_finite_values"] > 0


def test_exploding_lr_aborts(shapes, tmp_path):
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            train(shapes, CFG, TrainConfig(epochs=3, queries_per_shape=64, batch_size=16, lr=1e300), tmp_path)


def test_batch_assembly_order_independent(shapes):
    pairs = np.array([[0, 5], [1, 7], [0, 9], [1, 11]])
    a = assemble_batch(shapes, pairs, CFG, 0, 2)
    b = assemble_batch(shapes, pairs[::-1], CFG, 0, 2)
    for x, y in zip(a, b):
        assert np.array_equal(x, y[::-1])
