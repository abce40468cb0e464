"""Training loop with per-epoch checkpoints, resume and a JSON-lines log."""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, config_hash, read_checkpoint, write_checkpoint
from .config import TrainConfig, derive_seed
from .model import ModelConfig, ModelParams, forward, patch_batch, predict_sdf, prediction_loss

CKPT_RE = re.compile(r"epoch_(\d{4})\.ckpt$")


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; carries the context for a post-mortem."""

    def __init__(self, message, diagnostics):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {json.dumps(diagnostics, default=str)}")


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def run_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, master_seed: int, data_tag: str = "") -> bytes:
    text = model_cfg.to_text() + repr(train_cfg) + f"\nmaster_seed = {master_seed}\ndata = {data_tag}\n"
    return config_hash(text)


def _optimizer_blocks(opt: ad.Adam, epoch: int) -> dict:
    blocks = {}
    for k in opt.params:
        blocks[f"adam/m/{k}"] = opt.m[k]
        blocks[f"adam/v/{k}"] = opt.v[k]
    blocks["meta/epoch"] = np.array([float(epoch)])
    blocks["meta/step"] = np.array([float(opt.step_count)])
    return blocks


def save_training_state(path, params: ModelParams, opt: ad.Adam, epoch: int, h: bytes):
    blocks = params.state_blocks()
    blocks.update(_optimizer_blocks(opt, epoch))
    write_checkpoint(path, blocks, h)


def load_params(path, cfg: ModelConfig, expected_hash=None) -> ModelParams:
    blocks, _ = read_checkpoint(path, expected_hash)
    params = ModelParams(cfg, np.random.default_rng(0))
    try:
        params.load_blocks(blocks)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing block {exc}; checkpoint belongs to a different model configuration") from None
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return params


def latest_checkpoint(ckpt_dir) -> tuple:
    """(epoch, path) of the newest epoch checkpoint, or (0, None)."""
    best = (0, None)
    d = Path(ckpt_dir)
    if d.is_dir():
        for p in d.iterdir():
            m = CKPT_RE.search(p.name)
            if m and int(m.group(1)) > best[0]:
                best = (int(m.group(1)), p)
    return best


def _epoch_plan(shapes, cfg: TrainConfig, master_seed, epoch):
    """Shuffled (shape index, query index) pairs for one epoch."""
    rng = np.random.default_rng(derive_seed(master_seed, "train", f"epoch{epoch}"))
    pairs = []
    for i, s in enumerate(shapes):
        n = len(s.queries)
        sel = rng.choice(n, min(cfg.queries_per_shape, n), replace=False)
        pairs.append(np.stack([np.full(len(sel), i), sel], axis=1))
    pairs = np.concatenate(pairs)
    return pairs[rng.permutation(len(pairs))]


def assemble_batch(shapes, pairs, model_cfg: ModelConfig, master_seed, epoch):
    """Patches and targets for a batch of (shape, query) pairs, in pair order."""
    B = len(pairs)
    local = np.empty((B, model_cfg.n_d, 3))
    glob = np.empty((B, model_cfg.n_s, 3))
    scale = np.empty(B)
    dist = np.empty(B)
    sign = np.empty(B)
    for i in np.unique(pairs[:, 0]):
        rows = np.nonzero(pairs[:, 0] == i)[0]
        s = shapes[i]
        q = pairs[rows, 1]
        seed = derive_seed(master_seed, s.shape_id, s.variant, "patches", epoch)
        b = patch_batch(s.index, s.queries.x[q], model_cfg, seed, q)
        local[rows], glob[rows], scale[rows] = b.local, b.global_, b.scale
        dist[rows] = s.queries.distance[q]
        sign[rows] = s.queries.sign[q]
    return local, glob, scale, dist, sign


def train(shapes, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir, master_seed=0,
          resume=True, data_tag="", log_fn=None) -> TrainResult:
    """Train on loaded shapes; writes ``checkpoints/epoch_NNNN.ckpt`` and ``train_log.jsonl``.

    With ``resume`` the newest checkpoint of a run with the same configuration
    hash is restored and training continues at the following epoch.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    h = run_hash(model_cfg, train_cfg, master_seed, data_tag)

    params = ModelParams(model_cfg, np.random.default_rng(derive_seed(master_seed, "init", model_cfg.seed)))
    opt = ad.Adam(params.params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    start, history = 0, []
    last_path = None
    if resume:
        epoch, path = latest_checkpoint(ckpt_dir)
        if path is not None:
            blocks, _ = read_checkpoint(path, h)
            params.load_blocks(blocks)
            for k in opt.params:
                opt.m[k] = blocks[f"adam/m/{k}"].copy()
                opt.v[k] = blocks[f"adam/v/{k}"].copy()
            opt.step_count = int(blocks["meta/step"][0])
            start, last_path = epoch, path
            if log_path.exists():
                history = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
                history = [r for r in history if r["epoch"] <= epoch]
    log_path.write_text("".join(json.dumps(r) + "\n" for r in history))

    for epoch in range(start, train_cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = train_cfg.lr_at(epoch)
        plan = _epoch_plan(shapes, train_cfg, master_seed, epoch)
        sums = np.zeros(3)
        n_seen = 0
        for b, s in enumerate(range(0, len(plan), train_cfg.batch_size)):
            pairs = plan[s:s + train_cfg.batch_size]
            if len(pairs) < 2:  # batch norm needs two samples
                continue
            local, glob, scale, dist, sign = assemble_batch(shapes, pairs, model_cfg, master_seed, epoch)
            opt.zero_grad()
            pred = forward(local, glob, scale, params, training=True)
            diag = {"epoch": epoch + 1, "batch": b, "shapes": sorted({shapes[i].shape_id for i in pairs[:, 0]})}
            try:
                total, ld, ls = prediction_loss(pred, dist, sign)
            except FloatingPointError as exc:
                n_bad = int(np.sum(~np.isfinite(pred.raw_distance.data)) + np.sum(~np.isfinite(dist)))
                raise TrainingDiverged(str(exc), {**diag, "non_finite_values": n_bad}) from None
            diag.update(loss_distance=float(ld.data), loss_sign=float(ls.data))
            if not np.isfinite(total.data):
                raise TrainingDiverged("non-finite loss", diag)
            total.backward()
            try:
                opt.step()
            except ad.NonFiniteGradientError as exc:
                raise TrainingDiverged("non-finite gradient", {**diag, "parameter": exc.name}) from None
            pred_sign = np.where(pred.sign_logits.data >= 0, 1, -1)
            k = len(pairs)
            sums += k * np.array([ld.data, ls.data, np.mean(pred_sign == sign)])
            n_seen += k
        mean = sums / max(n_seen, 1)
        rec = {
            "epoch": epoch + 1, "loss_distance": float(mean[0]), "loss_sign": float(mean[1]),
            "sign_accuracy": float(mean[2]), "lr": opt.lr, "wall_time": time.perf_counter() - t0,
        }
        last_path = ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt"
        save_training_state(last_path, params, opt, epoch + 1, h)
        history.append(rec)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        if log_fn:
            log_fn(rec)
    return TrainResult(params, history, last_path)


def evaluate_signs(shapes, params: ModelParams, queries_per_shape=None, master_seed=0, rng=None):
    """Sign accuracy of eval-mode predictions on each shape's query points."""
    correct = total = 0
    for s in shapes:
        q = s.queries
        if queries_per_shape is not None and queries_per_shape < len(q):
            q = q.subset((rng or np.random.default_rng(0)).choice(len(q), queries_per_shape, replace=False))
        pred = predict_sdf(s.index, q.x, params, seed=derive_seed(master_seed, s.shape_id, "eval"))
        correct += int(np.sum(np.where(np.signbit(pred), -1, 1) == q.sign))
        total += len(q)
    return correct / total
