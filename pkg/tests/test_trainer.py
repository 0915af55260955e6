import math
import statistics
from dataclasses import replace

import numpy as np
import pytest

from taskquant import checkpoint
from taskquant.autodiff import Tensor
from taskquant.datagen import DatasetSpec, LabeledScene, make_dataset, stack
from taskquant.nets import build_feature_extractor, build_segmenter
from taskquant.objectives import SCHEMES
from taskquant.task import FrozenSegmenter
from taskquant.trainer import (SCHEME_TABLE, TERM_COLUMNS, CodecModel, DivergenceError, TrainConfig,
                               TrainingCurves, curve_correlation, pretrain_then_finetune, scheme_loss, train)
from oracles import pearson


@pytest.fixture(scope="module")
def tiny():
    tr, va = make_dataset(DatasetSpec(n_train=8, n_val=4, H=32, W=32, m=3, master_seed=1))
    seg = build_segmenter(3, np.random.default_rng(0), np.float64)
    F = FrozenSegmenter(seg, 3)
    return tr, va, F, build_feature_extractor(np.float64)


def _cfg(**kw):
    base = dict(epochs=1, finetune_epochs=1, batch=4, lr=2e-3, precision="double", seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_curve_correlation_examples():
    assert curve_correlation([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert curve_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    want = statistics.correlation([1, 2, 3, 5], [2, 4, 6, 9])
    assert want == pytest.approx(0.996791, abs=1e-6)
    assert curve_correlation([1, 2, 3, 5], [2, 4, 6, 9]) == pytest.approx(want, abs=1e-12)


def test_curve_correlation_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=12), rng.normal(size=12)
        assert curve_correlation(a, b) == pytest.approx(pearson(list(a), list(b)), abs=1e-12)


def test_curve_correlation_errors():
    with pytest.raises(ValueError):
        curve_correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        curve_correlation([1, 2], [1, 2])
    with pytest.raises(ValueError):
        curve_correlation([1, 2, 3], [1, 2, 3, 4])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(scheme="NOPE")
    with pytest.raises(ValueError):
        TrainConfig(beta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(precision="half")
    assert TrainConfig(scheme="GOSVAE_DAGGER").codebook_size == 256
    assert TrainConfig(scheme="VQVAE_DAGGER").net_config().variant == "residual"


def test_zero_epochs_returns_initialisation(tiny):
    tr, va, F, ext = tiny
    cfg = _cfg(epochs=0)
    res = train(cfg, tr, va, F, ext)
    assert len(res.curves) == 0
    assert res.model.digest() == CodecModel.build(cfg).digest()


def test_training_is_deterministic(tiny):
    tr, va, F, ext = tiny
    a = train(_cfg(scheme="GOSVAE"), tr, va, F, ext)
    b = train(_cfg(scheme="GOSVAE"), tr, va, F, ext)
    assert a.model.checkpoint_bytes() == b.model.checkpoint_bytes()
    assert a.curves.rows == b.curves.rows


def test_empty_dataset_rejected(tiny):
    _, va, F, ext = tiny
    with pytest.raises(ValueError):
        train(_cfg(), [], va, F, ext)


@pytest.mark.parametrize("scheme", sorted(SCHEME_TABLE))
def test_scheme_terms_and_gradient_isolation(tiny, scheme):
    tr, va, F, ext = tiny
    cfg = _cfg(scheme=scheme, K_dagger=16)
    model = CodecModel.build(cfg)
    x = Tensor(stack(tr[:2], np.float64)[0])
    lb, _ = scheme_loss(cfg.spec.loss, model, x, F, ext, cfg.beta)
    assert tuple(lb.terms) == SCHEMES[cfg.spec.loss]
    lb.total.backward()
    for p in F.net.parameters() + ext.parameters():
        assert p.grad is None
    for p in model.parameters():
        assert p.grad is not None and np.any(p.grad), p.name

    res = train(replace(cfg, epochs=1, finetune_epochs=1), tr, va, F, ext)
    for row in res.curves.rows:
        loss = "Lv" if row["phase"] == "pretrain" else cfg.spec.loss
        present = {k for k in TERM_COLUMNS if row[k] is not None}
        assert present == set(SCHEMES[loss])
        assert row["total"] == pytest.approx(math.fsum(row[k] for k in present), rel=1e-12)


def test_segmenter_untouched_by_training(tiny):
    tr, va, F, ext = tiny
    before = F.digest(), ext.digest()
    train(_cfg(scheme="GOSVAE_STAR"), tr, va, F, ext)
    assert (F.digest(), ext.digest()) == before


def test_finetune_zero_equals_pretrain(tiny):
    tr, va, F, ext = tiny
    star = train(_cfg(scheme="GOSVAE_STAR", epochs=2, finetune_epochs=0), tr, va, F, ext)
    plain = train(_cfg(scheme="VQVAE", epochs=2), tr, va, F, ext)
    assert star.model.checkpoint_bytes() == plain.model.checkpoint_bytes()
    assert [r["phase"] for r in star.curves.rows] == ["pretrain", "pretrain"]


def test_pretrain_reuse_matches_internal_phase(tiny):
    tr, va, F, ext = tiny
    cfg = _cfg(scheme="GOSVAE_STAR", epochs=2, finetune_epochs=1)
    direct = pretrain_then_finetune(cfg, tr, va, F, ext)
    base = train(replace(cfg, scheme="VQVAE"), tr, va, F, ext)
    reused = pretrain_then_finetune(cfg, tr, va, F, ext, pretrained=base)
    assert direct.model.checkpoint_bytes() == reused.model.checkpoint_bytes()
    assert [r["epoch"] for r in direct.curves.rows] == [0, 1, 2]
    assert [r["phase"] for r in direct.curves.rows] == ["pretrain", "pretrain", "finetune"]


def test_pretrain_checkpoint_path(tiny, tmp_path):
    tr, va, F, ext = tiny
    base = train(_cfg(scheme="VQVAE", epochs=1), tr, va, F, ext)
    path = tmp_path / "base.gosw"
    path.write_bytes(base.model.checkpoint_bytes())
    cfg = _cfg(scheme="GOSVAE_STAR", epochs=1, pretrain_checkpoint=str(path))
    a = pretrain_then_finetune(cfg, tr, va, F, ext)
    b = pretrain_then_finetune(cfg, tr, va, F, ext, pretrained=base.model)
    assert a.model.checkpoint_bytes() == b.model.checkpoint_bytes()


def test_pretrain_then_finetune_rejects_plain_scheme(tiny):
    tr, va, F, ext = tiny
    with pytest.raises(ValueError):
        pretrain_then_finetune(_cfg(scheme="VQVAE"), tr, va, F, ext)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _independent_ls(model, F, ext, x, beta):
    eps = 1e-8
    z_e = model.encoder(Tensor(x)).data
    e = model.codebook.e.data
    d = ((z_e[..., None, :] - e) ** 2).sum(axis=-1)
    z_q = e[np.argmin(d, axis=-1)]
    x_hat = model.decoder(Tensor(z_q)).data
    S, S_hat = _softmax(F.net(Tensor(x)).data), _softmax(F.net(Tensor(x_hat)).data)
    M = (S + S_hat) / 2
    kl = lambda P, Q: (P * (np.log(P + eps) - np.log(Q + eps))).sum(axis=-1)
    jsd = ((kl(S, M) + kl(S_hat, M)) / 2).mean()
    perc = 0.0
    for fa, fb in zip(ext(Tensor(x)), ext(Tensor(x_hat))):
        na = fa.data / np.sqrt((fa.data ** 2).sum(axis=-1, keepdims=True) + 1e-10)
        nb = fb.data / np.sqrt((fb.data ** 2).sum(axis=-1, keepdims=True) + 1e-10)
        perc += ((na - nb) ** 2).mean()
    vq = ((z_e - z_q) ** 2).sum(axis=-1).mean()
    return perc + jsd + (1 + beta) * vq


def test_finetune_starts_from_pretrained_loss(tiny):
    tr, va, F, ext = tiny
    cfg = _cfg(scheme="GOSVAE_STAR", epochs=2, finetune_epochs=1)
    base = train(replace(cfg, scheme="VQVAE"), tr, va, F, ext)
    model = CodecModel.build(cfg)
    model.load_state_dict(checkpoint.loads(base.model.checkpoint_bytes()))
    assert model.digest() == base.model.digest()

    images, _ = stack(tr, np.float64)
    first = np.random.default_rng([cfg.seed, 1, 1]).permutation(len(images))[:cfg.batch]
    x = images[first]
    lb, _ = scheme_loss("Ls", model, Tensor(x), F, ext, cfg.beta)
    want = _independent_ls(model, F, ext, x, cfg.beta)
    assert abs(lb.total.item() - want) <= 1e-10 * abs(want)


def test_divergence_guard(tiny):
    tr, va, F, ext = tiny
    bad = LabeledScene(image=np.full((32, 32, 3), np.nan), labels=np.zeros((32, 32), np.uint8), seed=0)
    with pytest.raises(DivergenceError):
        train(_cfg(), [bad] * 4, va, F, ext)


def test_curves_csv_roundtrip(tiny, tmp_path):
    tr, va, F, ext = tiny
    res = train(_cfg(scheme="GOSVAE", epochs=2), tr, va, F, ext)
    path = tmp_path / "curves.csv"
    res.curves.write_csv(path)
    assert TrainingCurves.read_csv(path).rows == res.curves.rows
    header = path.read_text().splitlines()[0].split(",")
    assert header[:2] == ["epoch", "phase"] and "val_miou" in header and "payload_bytes" in header


def test_codec_model_checkpoint_roundtrip(tiny):
    cfg = _cfg(scheme="VQVAE_DAGGER", K_dagger=32)
    a = CodecModel.build(cfg)
    b = CodecModel.build(replace(cfg, seed=99))
    assert a.digest() != b.digest()
    b.load_state_dict(checkpoint.loads(a.checkpoint_bytes()))
    assert a.digest() == b.digest()


def test_vqvae_mse_halves_over_default_run(toy_workspace):
    ws = toy_workspace
    curves = ws.train_run(ws.cfg.run_config("VQVAE", 4, 1)).curves
    mse = curves.column("val_mse")
    assert len(mse) == 50
    assert mse[-1] <= 0.5 * mse[0]
    assert mse[-1] < mse[0]
