"""Factorized SDF network: two PointNet encoders, an optional QSTN, one decoder.

The local encoder sees the n_d nearest neighbors of a query and drives the
absolute distance; the global encoder sees a distance-weighted subsample
of the whole cloud and drives the inside/outside logits. Both subsets are
centered at the query and scaled by the local patch radius beforehand, so
the query itself is never an input.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sampling import CloudIndex, PatchBatch, extract_batch, query_rng

MODEL_VARIANTS = (
    "e_vanilla", "k_small", "k_large", "r_small", "r_med", "r_large",
    "e_shared", "e_no_QSTN", "e_uniform",
)

RADII = {"r_small": 0.05, "r_med": 0.1, "r_large": 0.2}


@dataclass(frozen=True)
class ModelConfig:
    n_d: int = 300
    n_s: int = 1000
    patch_mode: str = "knn"  # or "radius"
    radius: float = 0.0  # in multiples of L, used when patch_mode == "radius"
    subsample_mode: str = "gradient"  # or "uniform"
    encoder_mode: str = "separate"  # or "shared"
    use_qstn: bool = True
    encoder_widths: tuple = (64, 64, 64, 128, 1024)
    decoder_widths: tuple = (1024, 512, 256)
    seed: int = 0

    def __post_init__(self):
        if self.n_d < 1 or self.n_s < 1:
            raise ValueError("n_d and n_s must be positive")
        if self.patch_mode not in ("knn", "radius"):
            raise ValueError(f"unknown patch_mode {self.patch_mode!r}")
        if self.patch_mode == "radius" and not self.radius > 0:
            raise ValueError("radius patches need radius > 0")
        if self.subsample_mode not in ("gradient", "uniform"):
            raise ValueError(f"unknown subsample_mode {self.subsample_mode!r}")
        if self.encoder_mode not in ("separate", "shared"):
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")
        if len(self.encoder_widths) != 5:
            raise ValueError("the encoders have exactly 5 per-point layers")
        if len(self.decoder_widths) != 3:
            raise ValueError("the decoder has 3 hidden layers plus the 2-unit output")
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))

    def to_text(self) -> str:
        """Canonical ``key = value`` text; also the input of the config hash."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            default = f.default
            if isinstance(default, tuple):
                v = tuple(int(x) for x in (v.split(",") if isinstance(v, str) else v))
            elif isinstance(default, bool):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            kw[f.name] = v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**kw)


def desk_config(**overrides) -> ModelConfig:
    """Widths divided by 8, small point sets: trains on a laptop CPU."""
    base = dict(n_d=32, n_s=128, encoder_widths=(8, 8, 8, 16, 128), decoder_widths=(128, 64, 32))
    base.update(overrides)
    return ModelConfig(**base)


def variant_config(variant: str, base: ModelConfig | None = None) -> ModelConfig:
    """Apply one ablation variant to a base configuration."""
    base = base or ModelConfig()
    if variant == "e_vanilla":
        return base
    if variant == "k_small":
        return replace(base, n_d=max(1, base.n_d // 4))
    if variant == "k_large":
        return replace(base, n_d=base.n_d * 4)
    if variant in RADII:
        return replace(base, patch_mode="radius", radius=RADII[variant])
    if variant == "e_shared":
        return replace(base, encoder_mode="shared")
    if variant == "e_no_QSTN":
        return replace(base, use_qstn=False)
    if variant == "e_uniform":
        return replace(base, subsample_mode="uniform")
    raise ValueError(f"unknown model variant {variant!r}; expected one of {MODEL_VARIANTS}")


# ---------------------------------------------------------------------------
# parameters


def _layer_shapes(cfg: ModelConfig):
    """Ordered (name, shape, init) for every learnable tensor."""
    out = []

    def dense(prefix, i, o):
        out.append((f"{prefix}/W", (i, o), "glorot"))
        out.append((f"{prefix}/b", (o,), "zeros"))

    def bn(prefix, c):
        out.append((f"{prefix}/gamma", (c,), "ones"))
        out.append((f"{prefix}/beta", (c,), "zeros"))

    def pointnet(prefix, transform):
        widths = cfg.encoder_widths
        prev = 3
        for k, w in enumerate(widths, 1):
            dense(f"{prefix}/fc{k}", prev, w)
            if k < len(widths):
                bn(f"{prefix}/bn{k}", w)
            if k == 3 and transform:
                out.append((f"{prefix}/ftrans", (w, w), "eye"))
            prev = w

    if cfg.use_qstn:
        pointnet("qstn", transform=False)
        out.append(("qstn/head/W", (cfg.encoder_widths[-1], 4), "zeros"))
        out.append(("qstn/head/b", (4,), "unit_w"))
    encoders = ("shared",) if cfg.encoder_mode == "shared" else ("local", "global")
    for name in encoders:
        pointnet(name, transform=True)
    prev = cfg.encoder_widths[-1] * len(encoders)
    for k, w in enumerate(cfg.decoder_widths, 1):
        dense(f"dec/fc{k}", prev, w)
        bn(f"dec/bn{k}", w)
        prev = w
    dense("dec/fc4", prev, 2)
    return out


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(shape) for _, shape, _ in _layer_shapes(cfg)))


class ModelParams:
    """All learnable tensors plus batch-norm running statistics."""

    def __init__(self, cfg: ModelConfig, rng=None):
        self.config = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params = {}
        for name, shape, init in _layer_shapes(cfg):
            if init == "glorot":
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-lim, lim, size=shape)
            elif init == "ones":
                data = np.ones(shape)
            elif init == "eye":
                data = np.eye(shape[0])
            elif init == "unit_w":
                data = np.array([1.0, 0.0, 0.0, 0.0])
            else:
                data = np.zeros(shape)
            self.params[name] = ad.parameter(data, name)
        self.bn = {
            name[: -len("/gamma")]: ad.BatchNormState(shape[0])
            for name, shape, _ in _layer_shapes(cfg) if name.endswith("/gamma")
        }

    def __getitem__(self, name):
        return self.params[name]

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_blocks(self) -> dict:
        blocks = {f"param/{k}": p.data for k, p in self.params.items()}
        for k, st in self.bn.items():
            blocks[f"bn/{k}/mean"] = st.mean
            blocks[f"bn/{k}/var"] = st.var
        return blocks

    def load_blocks(self, blocks: dict):
        for k, p in self.params.items():
            arr = blocks[f"param/{k}"]
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()
        for k, st in self.bn.items():
            st.mean = blocks[f"bn/{k}/mean"].copy()
            st.var = blocks[f"bn/{k}/var"].copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, arr in self.state_blocks().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# network


def _pointnet(params: ModelParams, prefix, pts, training, transform=True):
    """Per-point MLP with feature transform after the third layer, then channel max."""
    h = pts
    n_layers = len(params.config.encoder_widths)
    for k in range(1, n_layers + 1):
        h = ad.dense(h, params[f"{prefix}/fc{k}/W"], params[f"{prefix}/fc{k}/b"])
        if k < n_layers:
            bn = f"{prefix}/bn{k}"
            h = ad.relu(ad.batch_norm(h, params[f"{bn}/gamma"], params[f"{bn}/beta"], params.bn[bn], training))
        if k == 3 and transform:
            h = ad.matmul(h, params[f"{prefix}/ftrans"])
    return ad.channel_max(h, axis=-2)


def _check_points(pts, n, what):
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ValueError(f"{what}: expected (B, N, 3) points, got {pts.shape}")
    if n is not None and pts.shape[1] != n:
        raise ValueError(f"{what}: expected {n} points per set, got {pts.shape[1]}")


def encode_local(patch, params: ModelParams, training=False):
    """Feature z^d of normalized local patches (B, n_d, 3) -> (B, C)."""
    patch = ad._wrap(patch)
    cfg = params.config
    _check_points(patch, cfg.n_d if cfg.encoder_mode == "separate" else None, "local patch")
    return _pointnet(params, "local" if cfg.encoder_mode == "separate" else "shared", patch, training)


def encode_global(sub, params: ModelParams, training=False):
    """Feature z^s of normalized global subsamples (B, n_s, 3) -> (B, C)."""
    sub = ad._wrap(sub)
    cfg = params.config
    _check_points(sub, cfg.n_s if cfg.encoder_mode == "separate" else None, "global subsample")
    return _pointnet(params, "global" if cfg.encoder_mode == "separate" else "shared", sub, training)


def apply_qstn(global_sub, local_patch, params: ModelParams, training=False):
    """Predict one quaternion per query from the global subset; rotate both subsets by it."""
    g, l = ad._wrap(global_sub), ad._wrap(local_patch)
    feat = _pointnet(params, "qstn", g, training, transform=False)
    q = ad.dense(feat, params["qstn/head/W"], params["qstn/head/b"])
    return ad.quaternion_rotate(q, g), ad.quaternion_rotate(q, l), q


@dataclass
class Prediction:
    raw_distance: Tensor  # signed head output, patch frame
    sign_logits: Tensor
    scale: np.ndarray

    @property
    def abs_distance_patch(self):
        return np.abs(self.raw_distance.data)

    @property
    def abs_distance_world(self):
        return np.abs(self.raw_distance.data) * self.scale

    @property
    def sign_probability(self):
        return ad._logistic(self.sign_logits.data)

    @property
    def sdf(self):
        return np.where(self.sign_logits.data >= 0, 1.0, -1.0) * self.abs_distance_world


def decode(z, params: ModelParams, training=False):
    """Decoder MLP on the concatenated features -> (raw distance, logits), each (B,)."""
    h = z
    for k in range(1, 4):
        h = ad.dense(h, params[f"dec/fc{k}/W"], params[f"dec/fc{k}/b"])
        bn = f"dec/bn{k}"
        h = ad.relu(ad.batch_norm(h, params[f"{bn}/gamma"], params[f"{bn}/beta"], params.bn[bn], training))
    out = ad.dense(h, params["dec/fc4/W"], params["dec/fc4/b"])
    return out[:, 0], out[:, 1]


def forward(local, global_, scale, params: ModelParams, training=False) -> Prediction:
    """Full network on a batch of normalized subsets."""
    cfg = params.config
    local, global_ = ad._wrap(local), ad._wrap(global_)
    _check_points(local, cfg.n_d, "local patch")
    _check_points(global_, cfg.n_s, "global subsample")
    if cfg.use_qstn:
        global_, local, _ = apply_qstn(global_, local, params, training)
    if cfg.encoder_mode == "shared":
        z = _pointnet(params, "shared", ad.concat([local, global_], axis=1), training)
    else:
        z = ad.concat([encode_local(local, params, training), encode_global(global_, params, training)], axis=-1)
    raw, logits = decode(z, params, training)
    return Prediction(raw, logits, np.asarray(scale, dtype=np.float64))


# ---------------------------------------------------------------------------
# losses


def loss_distance(abs_world, gt_abs_distance, reduce=True):
    """Squared difference of tanh-compressed absolute distances (world units)."""
    gt = np.asarray(gt_abs_distance, dtype=np.float64)
    pred = ad._wrap(abs_world)
    if not (np.all(np.isfinite(pred.data)) and np.all(np.isfinite(gt))):
        raise FloatingPointError("non-finite input to the distance loss")
    per = ad.square(ad.tanh(pred) - np.tanh(np.abs(gt)))
    return ad.mean(per) if reduce else per


def loss_sign(logits, gt_sign, reduce=True):
    """Binary cross entropy of logistic(logits) against the outside label."""
    target = (np.asarray(gt_sign) > 0).astype(np.float64)
    per = ad.bce_with_logits(ad._wrap(logits), target)
    return ad.mean(per) if reduce else per


def prediction_loss(pred: Prediction, gt_distance, gt_sign):
    """(total, L^d, L^s); the total is the mean over the batch of L^d + L^s."""
    abs_world = ad.mul(ad.absolute(pred.raw_distance), pred.scale)
    ld = loss_distance(abs_world, gt_distance)
    ls = loss_sign(pred.sign_logits, gt_sign)
    return ld + ls, ld, ls


# ---------------------------------------------------------------------------
# inference


def patch_batch(index: CloudIndex, x, cfg: ModelConfig, seed, keys) -> PatchBatch:
    """Normalized subsets for queries ``x``; ``keys`` identify each query's RNG stream."""
    rngs = [query_rng(seed, int(k)) for k in keys]
    return extract_batch(
        index, x, cfg.n_d, cfg.n_s, rngs,
        patch_mode=cfg.patch_mode, radius=cfg.radius, subsample_mode=cfg.subsample_mode,
    )


def _folded(params: ModelParams, prefix, k):
    """Dense layer k with its eval-mode batch norm folded in: (W, b)."""
    W = params[f"{prefix}/fc{k}/W"].data
    b = params[f"{prefix}/fc{k}/b"].data
    bn = f"{prefix}/bn{k}"
    if bn in params.bn:
        st = params.bn[bn]
        s = params[f"{bn}/gamma"].data / np.sqrt(st.var + 1e-5)
        W, b = W * s, (b - st.mean) * s + params[f"{bn}/beta"].data
    return W, b


def _pointnet_infer(params: ModelParams, prefix, pts, transform=True):
    h = pts
    n_layers = len(params.config.encoder_widths)
    for k in range(1, n_layers + 1):
        W, b = _folded(params, prefix, k)
        if k == 4 and transform:
            W = params[f"{prefix}/ftrans"].data @ W
        h = h @ W
        h += b
        if k < n_layers:
            np.maximum(h, 0.0, out=h)
    return h.max(axis=-2)


def infer(local, global_, params: ModelParams):
    """Eval-mode network in plain numpy: (raw distance, logits).

    Batch norm is folded into the preceding dense layers and the feature
    transform into the following one; matches ``forward(training=False)``
    to rounding.
    """
    cfg = params.config
    local = np.asarray(local, dtype=np.float64)
    global_ = np.asarray(global_, dtype=np.float64)
    if cfg.use_qstn:
        feat = _pointnet_infer(params, "qstn", global_, transform=False)
        q = feat @ params["qstn/head/W"].data + params["qstn/head/b"].data
        R = _quat_matrices(q)
        local = local @ np.swapaxes(R, -1, -2)
        global_ = global_ @ np.swapaxes(R, -1, -2)
    if cfg.encoder_mode == "shared":
        z = _pointnet_infer(params, "shared", np.concatenate([local, global_], axis=1))
    else:
        z = np.concatenate([_pointnet_infer(params, "local", local), _pointnet_infer(params, "global", global_)], axis=-1)
    h = z
    for k in range(1, 4):
        W, b = _folded(params, "dec", k)
        h = np.maximum(h @ W + b, 0.0)
    out = h @ params["dec/fc4/W"].data + params["dec/fc4/b"].data
    return out[:, 0], out[:, 1]


def _quat_matrices(q):
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("quaternion norm below 1e-12")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def predict_sdf(index: CloudIndex, x, params: ModelParams, seed=0, keys=None, batch_size=256):
    """World-frame signed distance estimates at points ``x`` (eval mode).

    ``keys`` pick each point's sampling stream (default: its row number), so
    a point evaluated alone or in any batch gets the same value.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    keys = np.arange(len(x)) if keys is None else np.asarray(keys)
    out = np.empty(len(x))
    for s in range(0, len(x), batch_size):
        sl = slice(s, s + batch_size)
        b = patch_batch(index, x[sl], params.config, seed, keys[sl])
        raw, logits = infer(b.local, b.global_, params)
        out[sl] = np.where(logits >= 0, 1.0, -1.0) * np.abs(raw) * b.scale
    return out


def config_digest(cfg: ModelConfig) -> str:
    return hashlib.sha256(cfg.to_text().encode()).hexdigest()


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def gradient_check(cfg: ModelConfig, seed, batch=6, h=1e-5, perturb=0.3):
    """Directional finite-difference check of the full training loss.

    Draws random parameters (init plus Gaussian noise, so the identity QSTN
    and zero biases do not hide terms), random normalized inputs and
    labels, and a random unit direction over all parameters. Returns
    ``(relative error, same_branches)``; ``same_branches`` is False when
    the +h / -h evaluations crossed a kink (relu, abs or max switch), in
    which case the difference quotient is not a valid reference.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams(cfg, rng)
    for t in params.params.values():
        t.data = t.data + rng.normal(0.0, perturb, t.shape)
    local = rng.normal(size=(batch, cfg.n_d, 3))
    glob = rng.normal(size=(batch, cfg.n_s, 3))
    scale = rng.uniform(0.05, 0.2, batch)
    gt_d = rng.uniform(0.0, 0.1, batch)
    gt_s = rng.choice([-1, 1], batch)

    def loss():
        with ad.record_kinks() as kinks:
            total, _, _ = prediction_loss(forward(local, glob, scale, params, training=True), gt_d, gt_s)
        return total, kinks

    names = list(params.params)
    for n in names:
        params[n].grad = None
    # batch-norm running stats change on every training pass but do not
    # affect training-mode outputs
    base, k0 = loss()
    base.backward()
    d = {n: rng.normal(size=params[n].shape) for n in names}
    norm = np.sqrt(sum(np.sum(v * v) for v in d.values()))
    analytic = sum(np.sum(params[n].grad * d[n]) for n in names) / norm

    def shift(s):
        for n in names:
            params[n].data = params[n].data + (s / norm) * d[n]

    shift(h)
    fp, kp = loss()
    shift(-2 * h)
    fm, km = loss()
    shift(h)
    same = len(k0) == len(kp) == len(km) and all(
        np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(k0, kp, km))
    numeric = (float(fp.data) - float(fm.data)) / (2 * h)
    err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-300)
    return float(err), bool(same)
