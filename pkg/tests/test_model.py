import numpy as np
import pytest
from dataclasses import replace

from patchsdf import autodiff as ad
from patchsdf.model import (
    MODEL_VARIANTS, ModelConfig, ModelParams, apply_qstn, decode, desk_config, encode_global, encode_local,
    forward, gradient_check, infer, loss_distance, loss_sign, parameter_count, predict_sdf, prediction_loss,
    variant_config,
)
from patchsdf.sampling import CloudIndex

CFG = desk_config(n_d=16, n_s=32)


def _inputs(rng, cfg=CFG, batch=4):
    return rng.normal(size=(batch, cfg.n_d, 3)), rng.normal(size=(batch, cfg.n_s, 3)), rng.uniform(0.05, 0.2, batch)


def _trained_like(cfg, seed=0):
    """Parameters moved off their init so no term is trivially zero."""
    rng = np.random.default_rng(seed)
    p = ModelParams(cfg, rng)
    for t in p.params.values():
        t.data = t.data + rng.normal(0, 0.2, t.shape)
    for st in p.bn.values():
        st.mean = rng.normal(0, 0.1, st.mean.shape)
        st.var = rng.uniform(0.5, 2.0, st.var.shape)
    return p


def test_variant_table():
    base = ModelConfig()
    assert variant_config("k_small", base).n_d == 75
    assert variant_config("k_large", base).n_d == 1200
    assert variant_config("r_med", base).patch_mode == "radius"
    assert variant_config("r_large", base).radius == 0.2
    assert variant_config("e_shared", base).encoder_mode == "shared"
    assert variant_config("e_no_QSTN", base).use_qstn is False
    assert variant_config("e_uniform", base) == replace(base, subsample_mode="uniform")
    assert variant_config("e_vanilla", base) == base
    with pytest.raises(ValueError):
        variant_config("e_fancy", base)


def test_default_widths():
    cfg = ModelConfig()
    assert (cfg.n_d, cfg.n_s) == (300, 1000)
    assert cfg.encoder_widths == (64, 64, 64, 128, 1024)
    assert cfg.decoder_widths == (1024, 512, 256)


def test_parameter_count_pure_function():
    for v in MODEL_VARIANTS:
        cfg = variant_config(v, CFG)
        a = ModelParams(cfg, np.random.default_rng(0)).count()
        b = ModelParams(cfg, np.random.default_rng(99)).count()
        assert a == b == parameter_count(cfg)
    assert parameter_count(variant_config("e_no_QSTN", CFG)) < parameter_count(CFG)
    assert parameter_count(variant_config("e_shared", CFG)) < parameter_count(CFG)


def test_init_deterministic():
    a = ModelParams(CFG, np.random.default_rng(3))
    b = ModelParams(CFG, np.random.default_rng(3))
    assert a.digest() == b.digest()


def test_encoder_permutation_invariant(rng):
    p = _trained_like(CFG)
    loc, glo, _ = _inputs(rng)
    perm_l = rng.permutation(CFG.n_d)
    perm_g = rng.permutation(CFG.n_s)
    assert np.array_equal(encode_local(loc, p).data, encode_local(loc[:, perm_l], p).data)
    assert np.array_equal(encode_global(glo, p).data, encode_global(glo[:, perm_g], p).data)


def test_encoder_duplication_invariant(rng):
    cfg = variant_config("e_shared", CFG)  # the shared encoder accepts any point count
    p = _trained_like(cfg)
    loc, _, _ = _inputs(rng, cfg)
    dup = np.concatenate([loc, loc], axis=1)
    assert np.array_equal(encode_local(loc, p).data, encode_local(dup, p).data)


def test_encoder_wrong_point_count(rng):
    p = ModelParams(CFG)
    with pytest.raises(ValueError):
        encode_local(rng.normal(size=(2, CFG.n_d + 1, 3)), p)


def test_prediction_permutation_invariant(rng):
    p = _trained_like(CFG)
    loc, glo, sc = _inputs(rng)
    a = forward(loc, glo, sc, p)
    b = forward(loc[:, rng.permutation(CFG.n_d)], glo[:, rng.permutation(CFG.n_s)], sc, p)
    assert np.array_equal(a.raw_distance.data, b.raw_distance.data)
    assert np.array_equal(a.sign_logits.data, b.sign_logits.data)


def test_shared_encoder_uses_same_parameters(rng):
    cfg = variant_config("e_shared", CFG)
    p = _trained_like(cfg)
    assert not any(k.startswith(("local/", "global/")) for k in p.params)
    pts = rng.normal(size=(2, 20, 3))
    assert np.array_equal(encode_local(pts, p).data, encode_global(pts, p).data)


def test_qstn_identity_at_init(rng):
    p = ModelParams(CFG, rng)
    loc, glo, sc = _inputs(rng)
    g, l, q = apply_qstn(glo, loc, p)
    assert np.array_equal(q.data, np.tile([1.0, 0, 0, 0], (4, 1)))
    assert np.array_equal(g.data, glo) and np.array_equal(l.data, loc)


def test_qstn_preserves_norms(rng):
    p = _trained_like(CFG)
    loc, glo, _ = _inputs(rng)
    g, l, _ = apply_qstn(glo, loc, p)
    assert np.max(np.abs(np.linalg.norm(l.data, axis=-1) - np.linalg.norm(loc, axis=-1))) < 1e-12
    assert np.max(np.abs(np.linalg.norm(g.data, axis=-1) - np.linalg.norm(glo, axis=-1))) < 1e-12


def test_qstn_receives_gradient(rng):
    p = _trained_like(CFG)
    loc, glo, sc = _inputs(rng)
    total, _, _ = prediction_loss(forward(loc, glo, sc, p, training=True), rng.uniform(0, 0.1, 4), [1, -1, 1, -1])
    total.backward()
    assert np.any(p["qstn/head/W"].grad != 0)
    assert np.any(p["qstn/fc1/W"].grad != 0)


def test_identity_qstn_equals_no_qstn(rng):
    with_q = ModelParams(CFG, np.random.default_rng(4))
    without = ModelParams(variant_config("e_no_QSTN", CFG), np.random.default_rng(0))
    for k, t in without.params.items():
        t.data = with_q[k].data.copy()
    loc, glo, sc = _inputs(rng)
    a = forward(loc, glo, sc, with_q)
    b = forward(loc, glo, sc, without)
    assert np.array_equal(a.raw_distance.data, b.raw_distance.data)
    assert np.array_equal(a.sign_logits.data, b.sign_logits.data)


def test_decode_outputs(rng):
    p = _trained_like(CFG)
    pred = forward(*_inputs(rng, batch=50), p)
    assert np.all(pred.abs_distance_patch >= 0)
    prob = pred.sign_probability
    assert np.all((prob > 0) & (prob < 1))
    assert np.array_equal(pred.abs_distance_world, pred.abs_distance_patch * pred.scale)
    assert np.array_equal(np.abs(pred.sdf), pred.abs_distance_world)
    assert np.array_equal(pred.sdf > 0, pred.sign_logits.data >= 0)


def test_decode_shapes(rng):
    p = ModelParams(CFG)
    raw, logits = decode(ad.Tensor(rng.normal(size=(3, 2 * CFG.encoder_widths[-1]))), p)
    assert raw.shape == logits.shape == (3,)


def test_loss_distance_values():
    assert float(loss_distance(np.array([0.3]), [0.3]).data) == 0.0
    assert float(loss_distance(np.array([0.0]), [0.1]).data) == pytest.approx(np.tanh(0.1) ** 2, rel=1e-15)
    assert np.tanh(0.1) ** 2 == pytest.approx(0.009933, abs=1e-6)
    with pytest.raises(FloatingPointError):
        loss_distance(np.array([np.nan]), [0.1])


def test_loss_distance_monotone():
    below = [float(loss_distance(np.array([v]), [0.2]).data) for v in np.linspace(0, 0.2, 11)]
    above = [float(loss_distance(np.array([v]), [0.2]).data) for v in np.linspace(0.6, 0.2, 11)]
    assert np.all(np.diff(below) < 0) and np.all(np.diff(above) < 0)


def test_loss_sign_values():
    assert float(loss_sign(np.array([0.0]), [1]).data) == pytest.approx(np.log(2))
    assert float(loss_sign(np.array([0.0]), [-1]).data) == pytest.approx(np.log(2))
    assert float(loss_sign(np.array([20.0]), [1]).data) == pytest.approx(2.06e-9, rel=1e-2)
    assert float(loss_sign(np.array([-20.0]), [1]).data) == pytest.approx(20.0, rel=1e-8)
    assert np.isfinite(float(loss_sign(np.array([-1000.0]), [1]).data))


def test_distance_loss_does_not_reach_logit_head(rng):
    p = _trained_like(CFG)
    loc, glo, sc = _inputs(rng)
    _, ld, _ = prediction_loss(forward(loc, glo, sc, p, training=True), rng.uniform(0, 0.1, 4), [1, 1, -1, -1])
    ld.backward()
    W, b = p["dec/fc4/W"].grad, p["dec/fc4/b"].grad
    assert np.all(W[:, 1] == 0) and b[1] == 0
    assert np.any(W[:, 0] != 0)


def test_sign_loss_does_not_reach_distance_head(rng):
    p = _trained_like(CFG)
    _, _, ls = prediction_loss(forward(*_inputs(rng), p, training=True), np.full(4, 0.05), [1, 1, -1, -1])
    ls.backward()
    assert np.all(p["dec/fc4/W"].grad[:, 0] == 0)


@pytest.mark.parametrize("variant", ["e_vanilla", "e_shared", "e_no_QSTN"])
def test_full_model_gradient(variant):
    cfg = variant_config(variant, CFG)
    results = [gradient_check(cfg, seed) for seed in range(4)]
    assert all(same for _, same in results)
    assert max(err for err, _ in results) < 1e-4


def test_encoder_gradient_coordinates(rng):
    # coordinate-wise check of a scalar head through encode_local
    p = _trained_like(CFG)
    loc = rng.normal(size=(3, CFG.n_d, 3))
    head = rng.normal(size=CFG.encoder_widths[-1])
    W = p["local/fc2/W"]

    def f():
        return float(ad.sum_(encode_local(loc, p, training=True) * ad.Tensor(head)).data)

    W.grad = None
    ad.sum_(encode_local(loc, p, training=True) * ad.Tensor(head)).backward()
    analytic = W.grad.copy()
    h = 1e-5
    for idx in [(0, 0), (3, 5), (7, 2)]:
        old = W.data[idx]
        W.data[idx] = old + h
        fp = f()
        W.data[idx] = old - h
        fm = f()
        W.data[idx] = old
        num = (fp - fm) / (2 * h)
        assert abs(num - analytic[idx]) <= 1e-4 * max(abs(num), abs(analytic[idx]), 1e-8)


@pytest.mark.parametrize("variant", ["e_vanilla", "e_shared", "e_no_QSTN"])
def test_infer_matches_forward(variant, rng):
    cfg = variant_config(variant, CFG)
    p = _trained_like(cfg)
    loc, glo, sc = _inputs(rng, cfg, batch=5)
    pred = forward(loc, glo, sc, p)
    raw, logits = infer(loc, glo, p)
    assert np.allclose(raw, pred.raw_distance.data, rtol=1e-10, atol=1e-12)
    assert np.allclose(logits, pred.sign_logits.data, rtol=1e-10, atol=1e-12)


def test_predict_sdf_batching_invariant(rng):
    p = _trained_like(CFG)
    index = CloudIndex(rng.normal(size=(400, 3)))
    x = rng.normal(size=(10, 3))
    a = predict_sdf(index, x, p, seed=3, batch_size=10)
    b = predict_sdf(index, x, p, seed=3, batch_size=3)
    c = predict_sdf(index, x[4:5], p, seed=3, keys=[4])
    assert np.allclose(a, b, rtol=1e-13, atol=1e-15)
    assert c[0] == pytest.approx(a[4], rel=1e-13)


def test_predict_sdf_scale_roundtrip(rng):
    # the world-frame output equals the patch-frame distance times the patch radius
    p = _trained_like(CFG)
    index = CloudIndex(rng.normal(size=(400, 3)))
    x = rng.normal(size=(6, 3))
    from patchsdf.model import patch_batch
    b = patch_batch(index, x, CFG, 0, np.arange(6))
    pred = forward(b.local, b.global_, b.scale, p)
    out = predict_sdf(index, x, p, seed=0)
    assert np.allclose(np.abs(out), pred.abs_distance_patch * b.scale, rtol=1e-10)
    assert np.array_equal(out > 0, pred.sign_logits.data >= 0)


def test_config_text_roundtrip():
    cfg = variant_config("r_small", CFG)
    d = dict(line.split(" = ") for line in cfg.to_text().strip().splitlines())
    assert ModelConfig.from_dict(d) == cfg
