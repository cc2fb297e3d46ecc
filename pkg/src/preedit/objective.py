"""Training loss: distance to the original, a no-reference quality penalty and
the estimated bit-rate, all measured on the proxy-compressed edited image.

Every term is normalised per pixel (summed over channels, divided by H * W)
so that the weights carry over between patch and image sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy import EntropyModel, estimate_bits
from .proxy import proxy_codec
from .tables import as_tables


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.0  # quality term
    mu: float = 0.01  # rate term

    def __post_init__(self):
        for name in ("lam", "mu"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


SMOOTHER_WEIGHTS = LossWeights(lam=0.0, mu=0.01)
STN_WEIGHTS = LossWeights(lam=0.02, mu=1.0)


def _same_shape(x1: Tensor, x2: Tensor) -> None:
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x1.shape} vs {x2.shape}")


def _pixels(x: Tensor) -> float:
    return float(x.shape[-2] * x.shape[-1])


def dist_l2(x1, x2) -> Tensor:
    """Squared error summed over all samples (channels included), divided by H * W."""
    x1, x2 = ad.as_tensor(x1), ad.as_tensor(x2)
    _same_shape(x1, x2)
    return ad.div(ad.sum_(ad.square(ad.sub(x1, x2))), _pixels(x1))


class IdentityFeatures:
    """Pixels as features; makes the perceptual distance a plain mean absolute error."""

    name = "identity"

    def __call__(self, x) -> list[Tensor]:
        return [ad.as_tensor(x)]


_BINOMIAL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


class PyramidFeatures:
    """Fixed blur / downsample pyramid with gradient-magnitude channels.

    Each level blurs with a 3x3 binomial kernel, records the blurred image
    and its absolute horizontal and vertical differences, and halves the
    resolution for the next level.
    """

    name = "pyramid"

    def __init__(self, levels: int = 3):
        self.levels = levels

    @staticmethod
    def _blur(x: Tensor) -> Tensor:
        c = x.shape[1]
        kernel = np.zeros((c, c, 3, 3))
        for i in range(c):
            kernel[i, i] = _BINOMIAL
        return ad.conv2d(x, kernel, padding="symmetric")

    def __call__(self, x) -> list[Tensor]:
        x = ad.as_tensor(x)
        c, h, w = x.shape
        cur = x.reshape(1, c, h, w)
        feats = []
        for level in range(self.levels):
            blurred = self._blur(cur)
            feats.append(blurred)
            feats.append(ad.abs_(ad.sub(blurred[:, :, :, 1:], blurred[:, :, :, :-1])))
            feats.append(ad.abs_(ad.sub(blurred[:, :, 1:, :], blurred[:, :, :-1, :])))
            if level < self.levels - 1:
                hh, ww = blurred.shape[2] // 2 * 2, blurred.shape[3] // 2 * 2
                if hh < 2 or ww < 2:
                    break
                pooled = ad.avg_pool2x2(blurred[:, :, :hh, :ww].reshape(c, hh, ww))
                cur = pooled.reshape(1, c, hh // 2, ww // 2)
        return feats


FEATURES = {"identity": IdentityFeatures, "pyramid": PyramidFeatures}


def dist_perceptual(features, x1, x2) -> Tensor:
    """Mean absolute feature difference, averaged over all feature samples."""
    x1, x2 = ad.as_tensor(x1), ad.as_tensor(x2)
    _same_shape(x1, x2)
    total, count = None, 0
    for f1, f2 in zip(features(x1), features(x2)):
        s = ad.sum_(ad.abs_(ad.sub(f1, f2)))
        total = s if total is None else ad.add(total, s)
        count += f1.size
    return ad.div(total, float(count))


def quality_tv(x) -> Tensor:
    """Anisotropic total variation (all channels) divided by H * W; 0 for a constant image."""
    x = ad.as_tensor(x)
    dh = ad.sum_(ad.abs_(ad.sub(x[..., :, 1:], x[..., :, :-1])))
    dv = ad.sum_(ad.abs_(ad.sub(x[..., 1:, :], x[..., :-1, :])))
    return ad.div(ad.add(dh, dv), _pixels(x))


class LossTerms(NamedTuple):
    total: Tensor
    dist: Tensor
    quality: Tensor
    bits: Tensor  # estimated bits per pixel

    def values(self) -> dict[str, float]:
        return {"loss": self.total.item(), "dist": self.dist.item(), "quality": self.quality.item(), "bits": self.bits.item()}


def total_loss(
    weights: LossWeights,
    features,
    z,
    edited,
    q,
    entropy: EntropyModel,
    subsample: bool = True,
    rounding: str = "soft",
) -> LossTerms:
    """dist(C(x), z) + lam * Q(C(x)) + mu * bits(C(x)) / pixels for the edited image x.

    ``features`` is None for the squared-error distance, otherwise a feature
    extractor for the perceptual distance. ``q`` may be a quality factor or
    a :class:`QuantTables`.
    """
    z, edited = ad.as_tensor(z), ad.as_tensor(edited)
    _same_shape(z, edited)
    result = proxy_codec(edited, as_tables(q), subsample, rounding)
    decoded = result.decoded
    dist = dist_l2(decoded, z) if features is None else dist_perceptual(features, decoded, z)
    quality = quality_tv(decoded)
    bits = ad.div(estimate_bits(entropy, result.groups), _pixels(z))
    total = ad.add(ad.add(dist, ad.mul(quality, weights.lam)), ad.mul(bits, weights.mu))
    return LossTerms(total, dist, quality, bits)
