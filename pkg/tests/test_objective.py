import numpy as np
import pytest

from preedit import autodiff as ad
from preedit.entropy import EntropyModel, bin_probability, estimate_bits
from preedit.objective import (
    SMOOTHER_WEIGHTS,
    STN_WEIGHTS,
    IdentityFeatures,
    LossWeights,
    PyramidFeatures,
    dist_l2,
    dist_perceptual,
    quality_tv,
    total_loss,
)
from preedit.proxy import proxy_codec
from preedit.tables import QuantTables


def _rand(shape, seed=0):
    return np.random.default_rng(seed).uniform(size=shape)


def test_weights_validation_and_presets():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(0.0, float("inf"))
    assert (SMOOTHER_WEIGHTS.lam, SMOOTHER_WEIGHTS.mu) == (0.0, 0.01)
    assert (STN_WEIGHTS.lam, STN_WEIGHTS.mu) == (0.02, 1.0)


def test_dist_l2_examples():
    x = _rand((1, 12, 10))
    assert dist_l2(x, x).item() == 0.0
    assert dist_l2(x, x + 0.1).item() == pytest.approx(0.01, abs=1e-12)
    a, b = _rand((3, 9, 7), 1), _rand((3, 9, 7), 2)
    assert dist_l2(a, b).item() == pytest.approx(np.sum((a - b) ** 2) / 63, abs=1e-12)
    with pytest.raises(ValueError):
        dist_l2(a, b[:, :8])


def test_dist_perceptual_examples():
    a, b = _rand((3, 16, 16), 3), _rand((3, 16, 16), 4)
    for feats in (IdentityFeatures(), PyramidFeatures()):
        assert dist_perceptual(feats, a, a).item() == 0.0
    assert dist_perceptual(IdentityFeatures(), a, b).item() == pytest.approx(np.mean(np.abs(a - b)), abs=1e-12)


def test_pyramid_features_deterministic_shapes():
    x = _rand((3, 32, 24), 5)
    f1 = PyramidFeatures()(x)
    f2 = PyramidFeatures()(x.copy())
    assert [f.shape for f in f1] == [f.shape for f in f2]
    assert len(f1) == 9
    assert all(np.array_equal(a.value, b.value) for a, b in zip(f1, f2))
    assert f1[0].shape == (1, 3, 32, 24) and f1[3].shape == (1, 3, 16, 12) and f1[6].shape == (1, 3, 8, 6)


def test_pyramid_is_more_shift_tolerant_than_pixels_on_a_ramp():
    h, w = 64, 64
    ramp = np.broadcast_to(np.add.outer(np.arange(h), np.arange(w)) / (h + w), (3, h, w)).copy()
    shifted = np.concatenate([ramp[:, :, 1:], ramp[:, :, -1:]], axis=2)
    reference = np.full_like(ramp, ramp.mean())

    def relative(feats):
        return dist_perceptual(feats, ramp, shifted).item() / dist_perceptual(feats, ramp, reference).item()

    assert relative(PyramidFeatures()) < relative(IdentityFeatures())


def test_quality_tv_examples():
    assert quality_tv(np.full((3, 8, 8), 0.3)).item() == 0.0
    h, w, step = 10, 12, 0.4
    img = np.zeros((1, h, w))
    img[:, :, 5:] = step
    assert quality_tv(img).item() == pytest.approx(step * h / (h * w), abs=1e-15)
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)[None]
    assert quality_tv(checker).item() > 0.0
    assert quality_tv(np.stack([checker[0]] * 3)).item() == pytest.approx(3 * 2 * 8 * 7 / 64)


def test_constant_image_identity_tables_per_term_oracles():
    ones = QuantTables(100, np.ones((8, 8)), np.ones((8, 8)))
    entropy = EntropyModel(seed=1)
    z = np.full((3, 8, 8), 0.5)
    edited = np.full((3, 8, 8), 0.6)  # Y = 153, DC = 8 * 25 = 200, chroma DC 0
    weights = LossWeights(lam=0.7, mu=0.3)
    terms = total_loss(weights, None, z, edited, ones, entropy, subsample=False)

    dist = 3 * 64 * 0.1**2 / 64
    quality = 0.0

    def nll(group, values):
        p = bin_probability(entropy.models[group], np.asarray(values, float)).value
        return -np.sum(np.log2(np.maximum(p, 1e-9)))

    bits = (nll("y_dc", [200]) + nll("uv_dc", [0, 0]) + nll("y_ac", np.zeros(63)) + nll("uv_ac", np.zeros(126))) / 64
    assert terms.dist.item() == pytest.approx(dist, abs=1e-9)
    assert abs(terms.quality.item() - quality) < 1e-9
    assert terms.bits.item() == pytest.approx(bits, abs=1e-9)
    assert terms.total.item() == pytest.approx(dist + 0.7 * quality + 0.3 * bits, abs=1e-9)


def test_single_term_reduction_at_quality_100():
    z = _rand((3, 16, 16), 6)
    terms = total_loss(LossWeights(0.0, 0.0), None, z, z, 100, EntropyModel(), subsample=False)
    assert terms.total.item() == terms.dist.item()
    decoded = proxy_codec(z, 100, subsample=False).decoded.value
    assert terms.dist.item() == pytest.approx(np.sum((decoded - z) ** 2) / 256, rel=1e-12)
    assert 0 < terms.dist.item() < 1e-3


def test_terms_nonnegative_and_groups_shared():
    z = _rand((3, 32, 32), 7)
    edited = np.clip(z + 0.05 * _rand((3, 32, 32), 8), 0, 1)
    entropy = EntropyModel(seed=2)
    terms = total_loss(STN_WEIGHTS, PyramidFeatures(), z, edited, 15, entropy)
    assert terms.dist.item() >= 0 and terms.quality.item() >= 0 and terms.bits.item() >= 0
    groups = proxy_codec(edited, 15).groups
    assert terms.bits.item() == pytest.approx(estimate_bits(entropy, groups).item() / 1024, rel=1e-12)


def test_loss_gradient_wrt_edited_image():
    z = _rand((3, 16, 16), 9)
    edited = np.clip(z + 0.1 * (_rand((3, 16, 16), 10) - 0.5), 0.05, 0.95)
    entropy = EntropyModel(seed=3)
    # step 1e-4: smaller steps drown the tiny rate gradients in round-off
    for feats, weights in ((None, SMOOTHER_WEIGHTS), (PyramidFeatures(), STN_WEIGHTS)):
        f = lambda t: total_loss(weights, feats, z, t, 20, entropy).total
        assert ad.finite_diff_check(f, edited, step=1e-4) < 1e-3


def test_mu_zero_gives_zero_entropy_gradients():
    z = _rand((3, 16, 16), 11)
    entropy = EntropyModel(seed=4)
    edited = ad.Tensor(np.clip(z + 0.02, 0, 1), requires_grad=True)
    ad.backward(total_loss(LossWeights(0.02, 0.0), None, z, edited, 20, entropy).total)
    assert all(not np.any(t.grad) for t in entropy.parameters().values())
    ad.backward(total_loss(LossWeights(0.02, 0.5), None, z, edited, 20, entropy).total)
    assert any(np.any(t.grad) for t in entropy.parameters().values())
