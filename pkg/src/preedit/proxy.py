"""Differentiable JPEG compression-decompression.

The transforms here are written once, in autodiff primitives. The real codec
(:mod:`preedit.codec`) calls the same functions under :func:`no_grad`, so the
proxy with hard rounding and the real decoder agree bit for bit before the
final clamp to the displayable range.

Planar layout throughout: an RGB or YUV444 image is a (3, H, W) tensor; a
YUV420 image is a tuple of three planes (Y full size, U and V half size).
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy import CoefficientGroups, group_coefficients
from .tables import QuantTables, as_tables

# Full-range BT.601 (JFIF) on the 0..255 scale.
RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)
CHROMA_OFFSET = np.array([0.0, 128.0, 128.0]).reshape(3, 1)


@lru_cache(maxsize=None)
def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; row k is frequency k."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def _check_planar_rgb(img: Tensor) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a planar RGB image of shape (3, H, W), got {img.shape}")


def rgb_to_yuv(img) -> Tensor:
    """RGB in [0, 1] to YUV on the codec's 0..255 scale (chroma centred on 128)."""
    img = ad.as_tensor(img)
    _check_planar_rgb(img)
    _, h, w = img.shape
    flat = ad.matmul(RGB_TO_YUV * 255.0, img.reshape(3, h * w))
    return ad.add(flat, CHROMA_OFFSET).reshape(3, h, w)


def yuv_to_rgb(img) -> Tensor:
    """Exact inverse of :func:`rgb_to_yuv`; no clamping."""
    img = ad.as_tensor(img)
    _check_planar_rgb(img)
    _, h, w = img.shape
    flat = ad.sub(img.reshape(3, h * w), CHROMA_OFFSET)
    return ad.matmul(YUV_TO_RGB / 255.0, flat).reshape(3, h, w)


def chroma_downsample(yuv) -> tuple[Tensor, Tensor, Tensor]:
    """YUV444 (3, H, W) to YUV420 planes by 2x2 averaging of U and V."""
    yuv = ad.as_tensor(yuv)
    _, h, w = yuv.shape
    if h % 2 or w % 2:
        raise ValueError(f"chroma_downsample needs even dimensions, got {(h, w)}; pad first")
    return yuv[0], ad.avg_pool2x2(yuv[1]), ad.avg_pool2x2(yuv[2])


@lru_cache(maxsize=None)
def upsample_matrix(out_len: int, in_len: int, valid_len: int | None = None) -> np.ndarray:
    """Linear map for 2x bilinear upsampling with half-pixel-aligned centres.

    Output sample i sits at input coordinate i/2 - 1/4. Only the first
    ``valid_len`` input samples are used; coordinates outside them are clamped
    to the nearest valid sample (edge replication).
    """
    valid_len = in_len if valid_len is None else valid_len
    m = np.zeros((out_len, in_len))
    for i in range(out_len):
        src = min(max(i / 2.0 - 0.25, 0.0), valid_len - 1.0)
        k0 = int(np.floor(src))
        frac = src - k0
        m[i, k0] += 1.0 - frac
        if frac > 0:
            m[i, k0 + 1] += frac
    return m


def upsample_plane(plane, out_h: int, out_w: int) -> Tensor:
    plane = ad.as_tensor(plane)
    ih, iw = plane.shape
    rows = upsample_matrix(out_h, ih, min(ih, (out_h + 1) // 2))
    cols = upsample_matrix(out_w, iw, min(iw, (out_w + 1) // 2))
    return ad.matmul(ad.matmul(rows, plane), cols.T)


def chroma_upsample(planes: Sequence, size: tuple[int, int] | None = None) -> Tensor:
    """YUV420 planes back to a (3, H, W) YUV444 tensor.

    ``size`` defaults to twice the chroma extent; a smaller size crops, with
    chroma samples beyond ``ceil(size / 2)`` ignored as padding.
    """
    y, u, v = (ad.as_tensor(p) for p in planes)
    h, w = size if size is not None else (2 * u.shape[0], 2 * u.shape[1])
    y = y[:h, :w]
    return ad.concat([p.reshape(1, h, w) for p in (y, upsample_plane(u, h, w), upsample_plane(v, h, w))], axis=0)


def dct8x8(plane) -> Tensor:
    """Level-shift by -128 and take the orthonormal DCT of each 8x8 block.

    Returns a block field of shape (H/8, W/8, 8, 8) in raster block order.
    """
    plane = ad.as_tensor(plane)
    h, w = plane.shape
    if h % 8 or w % 8:
        raise ValueError(f"dct8x8 needs dimensions divisible by 8, got {(h, w)}")
    c = dct_matrix(8)
    blocks = ad.sub(plane, 128.0).reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    return ad.matmul(ad.matmul(c, blocks), c.T)


def idct8x8(blocks) -> Tensor:
    """Inverse of :func:`dct8x8`, including the +128 level shift."""
    blocks = ad.as_tensor(blocks)
    nby, nbx = blocks.shape[:2]
    c = dct_matrix(8)
    pixels = ad.matmul(ad.matmul(c.T, blocks), c)
    return ad.add(pixels.transpose(0, 2, 1, 3).reshape(nby * 8, nbx * 8), 128.0)


def soft_round(x) -> Tensor:
    """Cubic rounding surrogate ``r + (x - r)**3`` with ``r`` the nearest integer held constant."""
    x = ad.as_tensor(x)
    r = ad.round_(x)
    return ad.add(r, ad.cube(ad.sub(x, r)))


def _quantize(blocks: Tensor, table: np.ndarray, rounding: str) -> Tensor:
    scaled = ad.div(blocks, table.astype(np.float64))
    if rounding == "soft":
        return soft_round(scaled)
    if rounding == "hard":
        return ad.round_(scaled)
    if rounding == "none":
        return scaled
    raise ValueError(f"unknown rounding mode {rounding!r}")


def pad_to_multiple(img, multiple: int) -> Tensor:
    """Edge-replicate a (C, H, W) image so H and W divide ``multiple``."""
    img = ad.as_tensor(img)
    _, h, w = img.shape
    hp = -(-h // multiple) * multiple
    wp = -(-w // multiple) * multiple
    if (hp, wp) == (h, w):
        return img
    rows = np.minimum(np.arange(hp), h - 1)
    cols = np.minimum(np.arange(wp), w - 1)
    return img[:, rows[:, None], cols[None, :]]


def mcu_size(subsample: bool) -> int:
    return 16 if subsample else 8


def forward_transform(img, tables, subsample: bool = True, rounding: str = "soft") -> tuple[Tensor, Tensor, Tensor]:
    """RGB image to quantized block fields (Y, U, V), each (nby, nbx, 8, 8)."""
    img = ad.as_tensor(img)
    _check_planar_rgb(img)
    tables = as_tables(tables)
    padded = pad_to_multiple(img, mcu_size(subsample))
    yuv = rgb_to_yuv(padded)
    planes = chroma_downsample(yuv) if subsample else (yuv[0], yuv[1], yuv[2])
    return tuple(
        _quantize(dct8x8(plane), tables.for_channel(ch), rounding) for ch, plane in enumerate(planes)
    )


def inverse_transform(quantized: Sequence, tables, size: tuple[int, int], subsample: bool = True) -> Tensor:
    """Dequantize, inverse-DCT, upsample and convert back to RGB, cropped to ``size``. No clamping."""
    tables = as_tables(tables)
    planes = [
        idct8x8(ad.mul(ad.as_tensor(q), tables.for_channel(ch).astype(np.float64)))
        for ch, q in enumerate(quantized)
    ]
    h, w = size
    if subsample:
        yuv = chroma_upsample(planes, (h, w))
    else:
        yuv = ad.concat([p[:h, :w].reshape(1, h, w) for p in planes], axis=0)
    return yuv_to_rgb(yuv)


class ProxyResult(NamedTuple):
    decoded: Tensor
    quantized: tuple[Tensor, Tensor, Tensor]
    groups: CoefficientGroups


def proxy_codec(img, tables, subsample: bool = True, rounding: str = "soft") -> ProxyResult:
    """Differentiable stand-in for JPEG compression followed by decompression.

    ``rounding`` is ``"soft"`` (training), ``"hard"`` (matches the real codec)
    or ``"none"`` (quantization bypassed).
    """
    img = ad.as_tensor(img)
    tables = as_tables(tables)
    quantized = forward_transform(img, tables, subsample, rounding)
    decoded = inverse_transform(quantized, tables, img.shape[1:], subsample)
    return ProxyResult(decoded, quantized, group_coefficients(quantized))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


__all__ = [
    "QuantTables",
    "ProxyResult",
    "chroma_downsample",
    "chroma_upsample",
    "dct8x8",
    "idct8x8",
    "forward_transform",
    "inverse_transform",
    "proxy_codec",
    "rgb_to_yuv",
    "yuv_to_rgb",
    "soft_round",
]
