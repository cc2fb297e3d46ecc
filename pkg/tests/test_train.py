import json

import numpy as np
import pytest

from preedit import codec
from preedit.editors import Cascade, IdentityEditor, Smoother, SpatialTransformer
from preedit.entropy import EntropyModel
from preedit.optim import TrainingDivergence
from preedit.train import (
    TrainConfig,
    closest_fewer_bits,
    evaluate,
    load_checkpoint,
    mean_bpp_at,
    moving_average,
    train_stage,
    train_step,
)

from imagery import random_images


@pytest.fixture(scope="module")
def corpus():
    return [np.round(x * 255).astype(np.uint8) for x in random_images(6, 32, 32, seed=0)]


def _small(stage, seed=0):
    if stage == "smoother":
        return Smoother(seed, features=8)
    if stage == "stn":
        return SpatialTransformer(seed, features=8)
    if stage == "cascade":
        return Cascade(Smoother(seed, features=8), SpatialTransformer(seed + 1, features=8))
    return None


@pytest.mark.parametrize(
    "overrides",
    [
        {"q_range": (25, 8)},
        {"q_range": (0, 20)},
        {"q_range": (8, 101)},
        {"steps": 0},
        {"lr": 0.0},
        {"lr": -1e-3},
        {"batch_size": 0},
        {"noise_range": (0.0, 0.3)},
        {"lam": -0.1},
        {"distance": "vgg"},
        {"checkpoint_interval": -1},
    ],
)
def test_config_validation(overrides):
    with pytest.raises(ValueError):
        TrainConfig(**overrides)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.q_range, cfg.noise_range) == (1e-4, 1, (8, 25), (0.0, 0.15))
    with pytest.raises(ValueError):
        TrainConfig(stage="everything")
    sm, stn = TrainConfig.for_stage("smoother"), TrainConfig.for_stage("stn")
    assert (sm.lam, sm.mu, sm.distance) == (0.0, 0.01, "l2")
    assert (stn.lam, stn.mu, stn.distance) == (0.02, 1.0, "pyramid")
    assert TrainConfig.for_stage("stn", mu=0.5).mu == 0.5
    assert TrainConfig(**{k: v for k, v in cfg.to_dict().items()}) == cfg


def _run(stage, corpus, steps=4, seed=0, **kw):
    cfg = TrainConfig.for_stage(stage, steps=steps, seed=seed, lr=1e-3, **kw)
    return cfg, train_stage(cfg, corpus, editor=_small(stage, seed), entropy=EntropyModel(seed=seed))


@pytest.mark.parametrize("stage", ["entropy", "smoother", "stn", "cascade"])
def test_seeded_rerun_is_bit_identical(corpus, stage):
    _, a = _run(stage, corpus, steps=3)
    _, b = _run(stage, corpus, steps=3)
    assert a.log == b.log
    ea, eb = a.entropy.state_dict(), b.entropy.state_dict()
    assert all(np.array_equal(ea[k], eb[k]) for k in ea)
    if a.editor is not None:
        pa, pb = a.editor.state_dict(), b.editor.state_dict()
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_different_seeds_differ(corpus):
    _, a = _run("smoother", corpus, steps=2, seed=0)
    _, b = _run("smoother", corpus, steps=2, seed=1)
    assert a.log != b.log


@pytest.mark.parametrize("stage", ["smoother", "stn", "entropy"])
def test_checkpoint_resume_matches_uninterrupted(tmp_path, corpus, stage):
    cfg = TrainConfig.for_stage(stage, steps=6, lr=1e-3, checkpoint_interval=3)
    full = train_stage(cfg, corpus, editor=_small(stage), entropy=EntropyModel(), checkpoint_dir=tmp_path / "a")
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["step0000003.ckpt", "step0000006.ckpt"]
    resumed = train_stage(cfg, corpus, resume=tmp_path / "a" / "step0000003.ckpt")
    assert [r["step"] for r in resumed.log] == [3, 4, 5]
    assert resumed.log == full.log[3:]
    for a, b in ((full.entropy, resumed.entropy),) + (((full.editor, resumed.editor),) if stage != "entropy" else ()):
        sa, sb = a.state_dict(), b.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    saved_cfg, *_, step = load_checkpoint(tmp_path / "a" / "step0000006.ckpt")
    assert step == 6 and saved_cfg == cfg


def test_resume_rejects_changed_config(tmp_path, corpus):
    cfg = TrainConfig.for_stage("smoother", steps=2, checkpoint_interval=1)
    train_stage(cfg, corpus, editor=_small("smoother"), checkpoint_dir=tmp_path)
    with pytest.raises(ValueError):
        train_stage(TrainConfig.for_stage("smoother", steps=4, mu=0.5), corpus, resume=tmp_path / "step0000001.ckpt")


def test_smoother_loss_has_no_hidden_terms(corpus):
    cfg, res = _run("smoother", corpus, steps=5)
    assert cfg.lam == 0.0
    for r in res.log:
        assert r["loss"] == r["dist"] + cfg.mu * r["bits"]


def test_log_records_and_file(tmp_path, corpus):
    cfg = TrainConfig.for_stage("smoother", steps=3)
    res = train_stage(cfg, corpus, editor=_small("smoother"), log_path=tmp_path / "log.jsonl")
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == res.log
    for r in lines:
        assert {"step", "loss", "dist", "quality", "bits"} <= set(r)
        assert all(cfg.q_range[0] <= q <= cfg.q_range[1] for q in r["q"])
        assert all(0.0 <= s <= 0.15 for s in r["noise_std"])


@pytest.mark.parametrize("stage", ["smoother", "stn", "cascade"])
def test_gradients_reach_every_block_at_step_one(corpus, stage):
    # Step 0 has zero output conv / zero head, which blocks upstream gradients;
    # after one update every block must receive gradient.
    cfg, res = _run(stage, corpus, steps=1)
    _, grads = train_step(cfg, corpus, res.editor, res.entropy, 1)
    dead = [k for k, g in grads.items() if not np.any(g)]
    assert dead == []
    assert len(grads) == len(res.editor.parameters()) + len(res.entropy.parameters())


def test_frozen_entropy_is_untouched(corpus):
    entropy = EntropyModel(seed=2)
    before = entropy.state_dict()
    cfg = TrainConfig.for_stage("smoother", steps=2, freeze_entropy=True)
    res = train_stage(cfg, corpus, editor=_small("smoother"), entropy=entropy)
    assert all(np.array_equal(before[k], v) for k, v in res.entropy.state_dict().items())


def test_batches_average(corpus):
    cfg = TrainConfig.for_stage("smoother", steps=1, batch_size=3)
    res = train_stage(cfg, corpus, editor=_small("smoother"))
    assert len(res.log[0]["q"]) == 3


def test_moving_average_decreases_for_entropy_stage(corpus):
    cfg = TrainConfig.for_stage("entropy", steps=500)
    res = train_stage(cfg, corpus)
    ma = moving_average([r["loss"] for r in res.log], 200)
    assert ma[-1] < ma[0]


def test_moving_average_helper():
    assert moving_average([1, 2, 3, 4], 2).tolist() == [1.5, 2.5, 3.5]
    assert moving_average([1], 2).size == 0


def test_divergence_aborts(corpus):
    bad = [np.full((3, 32, 32), np.nan)]
    with pytest.raises(TrainingDivergence):
        train_stage(TrainConfig.for_stage("smoother", steps=1), bad, editor=_small("smoother"))
    with pytest.raises(ValueError):
        train_stage(TrainConfig.for_stage("smoother", steps=1), [])


def test_identity_rows_equal_baseline(corpus):
    rows = evaluate({"smoother": IdentityEditor()}, EntropyModel(), corpus[:2], [10, 20])
    base = [r for r in rows if r.method == "baseline"]
    edited = [r for r in rows if r.method == "smoother"]
    assert len(base) == len(edited) == 4
    for b, e in zip(base, edited):
        assert (b.image_id, b.q, b.q_used, b.bpp, b.bpp_est, b.mse, b.psnr) == (e.image_id, e.q, e.q_used, e.bpp, e.bpp_est, e.mse, e.psnr)


def test_evaluation_row_arithmetic(corpus):
    rows = evaluate({}, None, corpus[:1], [15], ids=["a"])
    (r,) = rows
    img = corpus[0] / 255.0
    bs = codec.encode(img, 15)
    decoded = codec.decode(bs)
    assert r.bpp == 8 * len(bs.data) / (32 * 32)
    assert r.mse == pytest.approx(np.mean((decoded - img) ** 2), rel=1e-12)
    assert r.bpp_est is None and r.image_id == "a"


def test_closest_fewer_bits(corpus):
    img = corpus[1] / 255.0
    budget = 8 * len(codec.encode(img, 30).data) / 1024
    q = closest_fewer_bits(img, budget, 30)
    rates = {k: 8 * len(codec.encode(img, k).data) / 1024 for k in range(1, 101)}
    assert rates[q] <= budget
    assert not any(rates[q] < r <= budget for r in rates.values())
    assert q == 30
    assert closest_fewer_bits(img, 0.0, 30) == 1


def test_edited_rows_never_exceed_baseline(corpus):
    sm = Smoother(0, features=8)
    sm.params["out/weight"].value = np.random.default_rng(0).normal(0, 0.05, sm.params["out/weight"].shape)
    rows = evaluate({"smoother": sm}, None, corpus[:2], [10, 20])
    base = {(r.image_id, r.q): r.bpp for r in rows if r.method == "baseline"}
    assert all(r.bpp <= base[(r.image_id, r.q)] for r in rows if r.method == "smoother")


def test_mean_bpp_at(corpus):
    bpp, mse = mean_bpp_at(IdentityEditor(), corpus[:2], 20)
    expected = np.mean([8 * len(codec.encode(c / 255.0, 20).data) / 1024 for c in corpus[:2]])
    assert bpp == pytest.approx(expected) and mse > 0
