import numpy as np
import pytest

from preedit import autodiff as ad
from preedit import entropy as E
from preedit.optim import TrainingDivergence
from preedit.proxy import proxy_codec


@pytest.fixture(scope="module")
def uniform_fit():
    rng = np.random.default_rng(0)
    corpus = [E.scalar_groups(rng.integers(-2, 3, 4096)) for _ in range(8)]
    model, losses = E.fit_entropy_model(corpus, 1500, seed=0)
    return model, losses


def test_dpcm_examples():
    y = np.zeros((1, 2, 8, 8))
    y[0, 0, 0, 0], y[0, 1, 0, 0] = 10, 12
    c = np.zeros((1, 1, 8, 8))
    c[0, 0, 0, 0] = 5
    g = E.group_coefficients([y, c, c])
    assert g.y_dc.value.tolist() == [10.0, 2.0]
    assert g.uv_dc.value.tolist() == [5.0, 5.0]  # each chroma channel starts from predictor 0
    single = E.group_coefficients([c, c, c])
    assert single.y_dc.value.tolist() == [5.0]


def test_group_sizes_and_coverage():
    rng = np.random.default_rng(1)
    y = rng.integers(-5, 5, (2, 2, 8, 8)).astype(float)
    u = rng.integers(-5, 5, (1, 1, 8, 8)).astype(float)
    v = rng.integers(-5, 5, (1, 1, 8, 8)).astype(float)
    g = E.group_coefficients([y, u, v])
    assert g.y_ac.size == 4 * 63 and g.uv_ac.size == 2 * 63
    assert g.y_dc.size == 4 and g.uv_dc.size == 2
    assert g.count() == 6 * 64
    ac = np.concatenate([g.y_ac.value, g.uv_ac.value])
    expected = np.concatenate([f.reshape(-1, 64)[:, 1:].ravel() for f in (y, u, v)])
    assert np.array_equal(ac, expected)


def test_cdf_tails_and_monotone_at_init():
    model = E.EntropyModel(seed=3)
    for m in model.models.values():
        ends = m.cdf(np.array([-1e4, 1e4])).value
        assert ends[0] < 1e-3 and ends[1] > 1 - 1e-3
        grid = m.cdf(np.arange(-10240, 10241) / 10.0).value
        assert np.all(np.diff(grid) >= 0)


def test_bin_probability_range_and_telescoping():
    model = E.EntropyModel(seed=4)
    m = model.models["y_ac"]
    v = np.arange(-1000, 1001, dtype=float)
    p = E.bin_probability(m, v).value
    assert np.all(p >= 0) and np.all(p <= 1)
    assert 0.99 <= p.sum() <= 1.0
    rng = np.random.default_rng(5)
    x = rng.normal(0, 50, 100)
    assert np.all((E.bin_probability(m, x).value >= 0) & (E.bin_probability(m, x).value <= 1))


def test_probability_floor():
    m = E.EntropyModel(seed=6).models["y_dc"]
    assert E.bin_probability(m, np.array([1e7])).value[0] < E.PROBABILITY_FLOOR
    assert E.symbol_bits(m, np.array([1e7])).value[0] == pytest.approx(-np.log2(E.PROBABILITY_FLOOR))


def test_estimate_bits_on_identical_symbols():
    model = E.EntropyModel(seed=7)
    p0 = E.bin_probability(model.models["y_ac"], np.array([0.0])).value[0]
    bits = E.estimate_bits(model, E.scalar_groups(np.zeros(500))).item()
    assert bits == pytest.approx(500 * -np.log2(p0), rel=1e-12)


def test_estimate_bits_noise_requires_rng():
    with pytest.raises(ValueError):
        E.estimate_bits(E.EntropyModel(), E.scalar_groups(np.zeros(3)), noise=True)


def test_estimate_bits_gradient_wrt_coefficients():
    model = E.EntropyModel(seed=8)
    rng = np.random.default_rng(9)
    y = rng.normal(0, 3, (1, 2, 8, 8))
    uv = rng.normal(0, 2, (1, 1, 8, 8))

    def f(t):
        return E.estimate_bits(model, E.group_coefficients([t, uv, uv]))

    assert ad.finite_diff_check(f, y, step=1e-6) < 1e-3


def test_estimate_bits_gradient_wrt_parameters():
    model = E.EntropyModel(seed=10)
    groups = E.scalar_groups(np.random.default_rng(11).integers(-4, 5, 200))
    name = "y_ac/matrix1"
    param = model.parameters()[name]

    def f(t):
        saved = param.value
        model.models["y_ac"].params["matrix1"] = t
        try:
            return E.estimate_bits(model, groups)
        finally:
            model.models["y_ac"].params["matrix1"] = param
            param.value = saved

    assert ad.finite_diff_check(f, param.value.copy(), step=1e-6) < 1e-3


def test_fit_uniform_recovers_log2_5(uniform_fit):
    model, _ = uniform_fit
    rng = np.random.default_rng(12)
    values = rng.integers(-2, 3, 20000)
    per_symbol = E.estimate_bits(model, E.scalar_groups(values)).item() / values.size
    assert abs(per_symbol - np.log2(5)) <= 0.1
    assert abs(E.bin_probability(model.models["y_ac"], np.array([0.0])).value[0] - 0.2) <= 0.03


def test_fitted_cdf_monotone_on_dense_grid(uniform_fit):
    model, _ = uniform_fit
    for m in model.models.values():
        c = m.cdf(np.arange(-10240, 10241) / 10.0).value
        assert np.all(np.diff(c) >= 0)
        tails = m.cdf(np.array([-1e4, 1e4])).value
        assert tails[0] < 1e-3 and tails[1] > 1 - 1e-3


def test_fit_loss_moving_average_non_increasing(uniform_fit):
    # The per-step loss is stochastic (fresh noise, sampled batches), so the
    # 100-step moving average is allowed rises up to 1e-3 bits per symbol.
    _, losses = uniform_fit
    ma = np.convolve(losses, np.ones(100) / 100, mode="valid")
    assert np.max(np.diff(ma)) <= 1e-3
    assert ma[-1] < ma[0]


def test_fit_all_zero_data():
    corpus = [E.scalar_groups(np.zeros(2048)) for _ in range(2)]
    model, _ = E.fit_entropy_model(corpus, 600, seed=0)
    assert E.estimate_bits(model, E.scalar_groups(np.zeros(1000))).item() / 1000 < 0.1


def test_fit_laplacian_within_five_percent_of_histogram_entropy():
    rng = np.random.default_rng(13)
    corpus = [E.scalar_groups(np.round(rng.laplace(0, 3, 4096))) for _ in range(8)]
    model, _ = E.fit_entropy_model(corpus, 1500, seed=0)
    held_out = np.round(rng.laplace(0, 3, 40000))
    _, counts = np.unique(held_out, return_counts=True)
    p = counts / counts.sum()
    plug_in = -np.sum(p * np.log2(p))
    estimate = E.estimate_bits(model, E.scalar_groups(held_out)).item() / held_out.size
    assert abs(estimate - plug_in) <= 0.05 * plug_in


def test_refit_is_deterministic():
    rng = np.random.default_rng(14)
    corpus = [E.scalar_groups(rng.integers(-3, 4, 256)) for _ in range(3)]
    a, la = E.fit_entropy_model(corpus, 40, seed=5)
    b, lb = E.fit_entropy_model(corpus, 40, seed=5)
    assert la == lb
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_rejects_empty_and_reports_divergence():
    with pytest.raises(ValueError):
        E.fit_entropy_model([], 10)
    corpus = [E.scalar_groups(np.zeros(16))]
    with pytest.raises(TrainingDivergence):
        E.fit_entropy_model(corpus, 5, lr=np.inf)


def test_save_load_round_trip(tmp_path):
    model = E.EntropyModel(seed=15)
    model.save(tmp_path / "e.params")
    again = E.EntropyModel.load(tmp_path / "e.params")
    for k, v in model.state_dict().items():
        assert np.array_equal(v, again.state_dict()[k])


def test_groups_from_proxy_cover_every_coefficient():
    x = np.random.default_rng(16).uniform(size=(3, 32, 32))
    g = proxy_codec(x, 20, rounding="hard").groups
    assert g.count() == (4 * 4 + 2 * 2 * 2) * 64
