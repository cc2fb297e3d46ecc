"""Learned bit-rate estimate for quantized DCT coefficients.

Each of the four coefficient groups (luma DC differences, chroma DC
differences, luma AC, chroma AC) gets its own univariate density, defined by
a small monotone network whose sigmoid output is the cumulative distribution.
The probability of an integer symbol is the CDF mass of its unit bin; the
estimated rate is the sum of negative log2 probabilities.
"""

from __future__ import annotations

from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import params as param_io
from .autodiff import Tensor
from .optim import AdamState, TrainingDivergence, adam_step

GROUP_NAMES = ("y_dc", "uv_dc", "y_ac", "uv_ac")
PROBABILITY_FLOOR = 1e-9


class CoefficientGroups(NamedTuple):
    y_dc: Tensor
    uv_dc: Tensor
    y_ac: Tensor
    uv_ac: Tensor

    def count(self) -> int:
        return sum(g.size for g in self)

    def detach(self) -> "CoefficientGroups":
        return CoefficientGroups(*(Tensor(g.value.copy()) for g in self))


def _dpcm(dc: Tensor) -> Tensor:
    previous = ad.concat([Tensor(np.zeros(1)), dc[:-1]], axis=0)
    return ad.sub(dc, previous)


def group_coefficients(quantized: Sequence) -> CoefficientGroups:
    """Split (Y, U, V) block fields into the four entropy groups.

    DC terms become raster-order differences per channel with an initial
    predictor of zero; AC terms are taken as they are.
    """
    dcs, acs = [], []
    for field in quantized:
        field = ad.as_tensor(field)
        n = field.shape[0] * field.shape[1]
        flat = field.reshape(n, 64)
        dcs.append(_dpcm(flat[:, 0]))
        acs.append(flat[:, 1:].reshape(n * 63))
    return CoefficientGroups(dcs[0], ad.concat(dcs[1:], axis=0), acs[0], ad.concat(acs[1:], axis=0))


class MonotoneCdf:
    """Nondecreasing map R -> (0, 1) built from 1-3-3-3-1 layers.

    Layer weights are squared so they stay nonnegative; each hidden layer adds
    ``tanh(a) * tanh(x)`` with ``tanh(a) > -1`` so it stays increasing.
    """

    WIDTHS = (1, 3, 3, 3, 1)

    def __init__(self, rng: np.random.Generator, init_scale: float = 10.0):
        self.params: dict[str, Tensor] = {}
        layers = len(self.WIDTHS) - 1
        scale = init_scale ** (1.0 / layers)
        for k in range(layers):
            fan_out, fan_in = self.WIDTHS[k + 1], self.WIDTHS[k]
            init = np.sqrt(1.0 / scale / fan_out)
            self.params[f"matrix{k}"] = Tensor(np.full((fan_out, fan_in), init), requires_grad=True)
            self.params[f"bias{k}"] = Tensor(rng.uniform(-0.5, 0.5, (fan_out, 1)), requires_grad=True)
            if k < layers - 1:
                self.params[f"factor{k}"] = Tensor(np.zeros((fan_out, 1)), requires_grad=True)

    def logits(self, v) -> Tensor:
        v = ad.as_tensor(v)
        x = v.reshape(1, v.size)
        layers = len(self.WIDTHS) - 1
        for k in range(layers):
            x = ad.add(ad.matmul(ad.square(self.params[f"matrix{k}"]), x), self.params[f"bias{k}"])
            if k < layers - 1:
                x = ad.add(x, ad.mul(ad.tanh(self.params[f"factor{k}"]), ad.tanh(x)))
        return x.reshape(v.size)

    def cdf(self, v) -> Tensor:
        return ad.sigmoid(self.logits(v))


def bin_probability(model: MonotoneCdf, v) -> Tensor:
    """Mass of the unit-width bin centred at each value."""
    v = ad.as_tensor(v)
    lower = model.logits(ad.sub(v, 0.5))
    upper = model.logits(ad.add(v, 0.5))
    # Evaluate in whichever tail keeps the difference well conditioned.
    sign = np.where(lower.value + upper.value > 0, -1.0, 1.0)
    return ad.abs_(ad.sub(ad.sigmoid(ad.mul(upper, sign)), ad.sigmoid(ad.mul(lower, sign))))


def symbol_bits(model: MonotoneCdf, v) -> Tensor:
    """-log2 of the bin mass, floored at 1e-9 so tail values stay finite."""
    return ad.mul(ad.log2(ad.maximum(bin_probability(model, v), PROBABILITY_FLOOR)), -1.0)


class EntropyModel:
    """Four independent :class:`MonotoneCdf` densities, one per coefficient group."""

    kind = "entropy_model"

    def __init__(self, seed: int = 0, init_scale: float = 10.0):
        rng = np.random.default_rng(seed)
        self.models = {name: MonotoneCdf(rng, init_scale) for name in GROUP_NAMES}

    def parameters(self) -> dict[str, Tensor]:
        return {f"{g}/{k}": t for g, m in self.models.items() for k, t in m.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, arrays) -> None:
        for k, t in self.parameters().items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.value = np.array(arrays[k], dtype=np.float64)

    def save(self, path, metadata=None) -> None:
        param_io.save(path, self.kind, self.state_dict(), metadata)

    @classmethod
    def load(cls, path) -> "EntropyModel":
        kind, arrays, _ = param_io.load(path)
        if kind != cls.kind:
            raise param_io.ParamFileError(f"expected {cls.kind!r} parameters, found {kind!r}")
        model = cls()
        model.load_state_dict(arrays)
        return model


def estimate_bits(
    model: EntropyModel,
    groups: CoefficientGroups,
    noise: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Estimated bit count of all coefficients (sum of -log2 bin masses).

    With ``noise`` set, each value is perturbed by uniform noise on (-0.5, 0.5)
    as during training; otherwise values are used as given.
    """
    total = None
    for name, values in zip(GROUP_NAMES, groups):
        values = ad.as_tensor(values)
        if values.size == 0:
            continue
        if noise:
            if rng is None:
                raise ValueError("noise=True requires an rng")
            values = ad.add(values, rng.uniform(-0.5, 0.5, values.shape))
        bits = ad.sum_(symbol_bits(model.models[name], values))
        total = bits if total is None else ad.add(total, bits)
    return total if total is not None else Tensor(0.0)


def _epochs(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from rng.permutation(n)


def fit_entropy_model(
    corpus: Sequence[CoefficientGroups],
    steps: int,
    lr: float = 1e-2,
    seed: int = 0,
    model: EntropyModel | None = None,
) -> tuple[EntropyModel, list[float]]:
    """Fit by Adam on the noisy rate estimate; returns the model and per-step bits/symbol."""
    if not corpus:
        raise ValueError("entropy corpus is empty")
    rng = np.random.default_rng(seed)
    model = model if model is not None else EntropyModel(seed=seed)
    params = model.parameters()
    state = AdamState()
    order = _epochs(len(corpus), rng)
    losses = []
    for step in range(steps):
        groups = corpus[next(order)]
        count = groups.count()
        loss = ad.div(estimate_bits(model, groups, noise=True, rng=rng), float(count))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(f"entropy fit diverged at step {step}: loss={value}")
        ad.backward(loss)
        adam_step(state, params, {k: t.grad for k, t in params.items()}, lr)
        losses.append(value)
    return model, losses


def scalar_groups(values, group: str = "y_ac") -> CoefficientGroups:
    """Put a flat array of symbols into one group, leaving the others empty."""
    empty = Tensor(np.zeros(0))
    parts = {name: empty for name in GROUP_NAMES}
    parts[group] = Tensor(np.asarray(values, dtype=np.float64).ravel())
    return CoefficientGroups(**parts)
