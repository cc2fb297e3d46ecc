"""Trainable pre-editing networks: a residual smoothing CNN, a block-wise
spatial transformer, and their cascade.

Both editors see the RGB image plus two constant conditioning planes (noise
level and quality factor) and start out as the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import params as param_io
from .autodiff import BatchNormState, Tensor

MAX_NOISE_STD = 0.15
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class Conditioning:
    """Constant extra input planes: noise standard deviation and q / 100."""

    noise_std: float = 0.0
    q: int = 20

    def __post_init__(self):
        if not 0.0 <= self.noise_std <= MAX_NOISE_STD:
            raise ValueError(f"noise_std must lie in [0, {MAX_NOISE_STD}], got {self.noise_std}")
        if not 1 <= self.q <= 100:
            raise ValueError(f"q must lie in [1, 100], got {self.q}")

    def planes(self, h: int, w: int) -> np.ndarray:
        out = np.empty((2, h, w))
        out[0] = self.noise_std
        out[1] = self.q / 100.0
        return out


def with_conditioning(img, cond: Conditioning) -> Tensor:
    """Append the conditioning planes to a (3, H, W) image, giving (1, 5, H, W)."""
    img = ad.as_tensor(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected planar RGB (3, H, W), got {img.shape}")
    _, h, w = img.shape
    x = ad.concat([img, Tensor(cond.planes(h, w))], axis=0)
    return x.reshape(1, 5, h, w)


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def _conv_bias(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    y = ad.conv2d(x, weight, stride=stride, padding="symmetric")
    if bias is not None:
        y = ad.add(y, bias.reshape(1, bias.size, 1, 1))
    return y


class _Editor:
    """Shared parameter bookkeeping and file I/O."""

    kind = "editor"

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffers(self, arrays) -> None:
        pass

    def config(self) -> dict:
        return {}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.value.copy() for k, t in self.parameters().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state_dict(self, arrays) -> None:
        for k, t in self.parameters().items():
            if k not in arrays:
                raise param_io.ParamFileError(f"missing parameter {k!r}")
            if arrays[k].shape != t.shape:
                raise param_io.ParamFileError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.value = np.array(arrays[k], dtype=np.float64)
        self.set_buffers(arrays)

    def save(self, path, metadata=None) -> None:
        meta = {"config": self.config()}
        meta.update(metadata or {})
        param_io.save(path, self.kind, self.state_dict(), meta)

    def __call__(self, img, cond: Conditioning, training: bool = False) -> Tensor:
        raise NotImplementedError


class IdentityEditor(_Editor):
    """No-op editor; the baseline."""

    kind = "identity"

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def __call__(self, img, cond: Conditioning, training: bool = False) -> Tensor:
        return ad.as_tensor(img)


class Smoother(_Editor):
    """Residual CNN: input conv, ``blocks`` residual blocks with batch norm,
    zero-initialised output conv and a global skip from the RGB input."""

    kind = "smoother"

    def __init__(self, seed: int = 0, features: int = 64, blocks: int = 2, in_channels: int = 5):
        rng = np.random.default_rng(seed)
        self.features, self.blocks = features, blocks
        p: dict[str, Tensor] = {}
        p["in/weight"] = Tensor(_he(rng, (features, in_channels, 3, 3)), requires_grad=True)
        p["in/bias"] = Tensor(np.zeros(features), requires_grad=True)
        self.bn: dict[str, BatchNormState] = {}
        for b in range(blocks):
            for k in (1, 2):
                name = f"block{b}/conv{k}"
                p[f"{name}/weight"] = Tensor(_he(rng, (features, features, 3, 3)), requires_grad=True)
                p[f"{name}/gamma"] = Tensor(np.ones(features), requires_grad=True)
                p[f"{name}/beta"] = Tensor(np.zeros(features), requires_grad=True)
                self.bn[name] = BatchNormState(features)
        p["out/weight"] = Tensor(np.zeros((3, features, 3, 3)), requires_grad=True)
        p["out/bias"] = Tensor(np.zeros(3), requires_grad=True)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, state in self.bn.items():
            out[f"{name}/running_mean"] = state.mean
            out[f"{name}/running_var"] = state.var
        return out

    def set_buffers(self, arrays) -> None:
        for name, state in self.bn.items():
            state.mean = np.array(arrays[f"{name}/running_mean"], dtype=np.float64)
            state.var = np.array(arrays[f"{name}/running_var"], dtype=np.float64)

    def config(self) -> dict:
        return {"features": self.features, "blocks": self.blocks}

    def __call__(self, img, cond: Conditioning, training: bool = False) -> Tensor:
        img = ad.as_tensor(img)
        p = self.params
        x = with_conditioning(img, cond)
        h = ad.leaky_relu(_conv_bias(x, p["in/weight"], p["in/bias"]), LEAKY_SLOPE)
        for b in range(self.blocks):
            n1, n2 = f"block{b}/conv1", f"block{b}/conv2"
            r = _conv_bias(h, p[f"{n1}/weight"])
            r = ad.batch_norm(r, p[f"{n1}/gamma"], p[f"{n1}/beta"], self.bn[n1], training)
            r = ad.leaky_relu(r, LEAKY_SLOPE)
            r = _conv_bias(r, p[f"{n2}/weight"])
            r = ad.batch_norm(r, p[f"{n2}/gamma"], p[f"{n2}/beta"], self.bn[n2], training)
            h = ad.add(h, r)
        residual = _conv_bias(h, p["out/weight"], p["out/bias"])
        _, hh, ww = img.shape
        return ad.add(img, residual.reshape(3, hh, ww))


# ---------------------------------------------------------------- spatial transformer

WINDOW, TILE = 32, 8
MARGIN = (WINDOW - TILE) // 2
IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def _tile_grid(h: int, w: int) -> tuple[int, int]:
    return -(-h // TILE), -(-w // TILE)


def window_index(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column gather indices of every 32x32 window, edge-clamped.

    Window (i, j) starts at (8i - 12, 8j - 12) so that its central 8x8 is
    output tile (i, j).
    """
    nby, nbx = _tile_grid(h, w)
    k = np.arange(WINDOW)
    rows = np.clip(TILE * np.arange(nby)[:, None] - MARGIN + k[None, :], 0, h - 1)
    cols = np.clip(TILE * np.arange(nbx)[:, None] - MARGIN + k[None, :], 0, w - 1)
    return rows, cols


def extract_windows(x, h: int, w: int) -> Tensor:
    """(C, H, W) -> (nby * nbx, C, 32, 32) overlapping windows."""
    x = ad.as_tensor(x)
    rows, cols = window_index(h, w)
    nby, nbx = rows.shape[0], cols.shape[0]
    r = rows[:, None, :, None]
    c = cols[None, :, None, :]
    win = x[:, r, c]  # C, nby, nbx, 32, 32
    return win.transpose(1, 2, 0, 3, 4).reshape(nby * nbx, x.shape[0], WINDOW, WINDOW)


@lru_cache(maxsize=32)
def _averaging_plan(h: int, w: int):
    """Constants for averaging window-local affine grids at shared pixels.

    For every output pixel, lists the (up to 16) windows covering it, the
    pixel's normalised coordinates inside each and the uniform averaging
    weights, folded into per-parameter bases. Window-local normalised coordinates
    run over [-1, 1] with pixel centres at (k - 15.5) / 16.
    """
    nby, nbx = _tile_grid(h, w)
    half = WINDOW / 2.0

    def axis_plan(n_pix, n_tiles):
        pix = np.arange(n_pix)[:, None]
        first = (pix + MARGIN) // TILE  # last tile whose window starts at or before pix
        tiles = first - np.arange(WINDOW // TILE)[None, :]
        origin = TILE * tiles - MARGIN
        local = pix - origin
        valid = (tiles >= 0) & (tiles < n_tiles) & (local >= 0) & (local < WINDOW)
        norm = (local - (half - 0.5)) / half
        return np.clip(tiles, 0, n_tiles - 1), norm, valid

    ty, ny, vy = axis_plan(h, nby)
    tx, nx, vx = axis_plan(w, nbx)
    # broadcast to (H, W, 4, 4): axis 2 indexes vertical neighbours, axis 3 horizontal
    block = (ty[:, None, :, None] * nbx + tx[None, :, None, :]).reshape(h, w, 16)
    mask = (vy[:, None, :, None] & vx[None, :, None, :]).reshape(h, w, 16).astype(np.float64)
    u = np.broadcast_to(nx[None, :, None, :], (h, w, 4, 4)).reshape(h, w, 16)
    v = np.broadcast_to(ny[:, None, :, None], (h, w, 4, 4)).reshape(h, w, 16)
    count = mask.sum(axis=-1)
    weight = mask / count[..., None]
    # x' = a u + b v + tx ; y' = c u + d v + ty
    basis_x = np.stack([u, v, np.ones_like(u), 0 * u, 0 * u, 0 * u], axis=-1) * weight[..., None]
    basis_y = np.stack([0 * u, 0 * u, 0 * u, u, v, np.ones_like(u)], axis=-1) * weight[..., None]
    return block, basis_x, basis_y


def averaged_grid(theta, h: int, w: int) -> Tensor:
    """Absolute (row, col) sampling coordinates (H, W, 2) after averaging
    every overlapping window's affine grid at each pixel.

    Each window maps pixel p to p + 16 * ((theta - identity) . basis), so the
    average is taken over displacements; identity parameters give exactly
    the integer pixel grid.
    """
    theta = ad.as_tensor(theta)
    block, basis_x, basis_y = _averaging_plan(h, w)
    gathered = ad.sub(theta, IDENTITY_THETA)[block]  # H, W, 16, 6
    half = WINDOW / 2.0
    cols = np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w))
    rows = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    xs = ad.add(ad.mul(ad.sum_(ad.mul(gathered, basis_x), axis=(2, 3)), half), cols)
    ys = ad.add(ad.mul(ad.sum_(ad.mul(gathered, basis_y), axis=(2, 3)), half), rows)
    return ad.concat([ys.reshape(h, w, 1), xs.reshape(h, w, 1)], axis=2)


def warp_blocks(img, theta) -> Tensor:
    """Warp a (3, H, W) image with per-tile affine parameters ``theta`` (nby * nbx, 6)."""
    img = ad.as_tensor(img)
    _, h, w = img.shape
    nby, nbx = _tile_grid(h, w)
    if ad.as_tensor(theta).shape != (nby * nbx, 6):
        raise ValueError(f"theta must have shape {(nby * nbx, 6)}, got {ad.as_tensor(theta).shape}")
    return ad.bilinear_sample(img, averaged_grid(theta, h, w))


class SpatialTransformer(_Editor):
    """Predicts one affine transform per 8x8 tile from its 32x32 context window."""

    kind = "stn"

    def __init__(self, seed: int = 0, features: int = 16, layers: int = 3, in_channels: int = 5):
        rng = np.random.default_rng(seed)
        self.features, self.layers = features, layers
        p: dict[str, Tensor] = {}
        c = in_channels
        for k in range(layers):
            p[f"conv{k}/weight"] = Tensor(_he(rng, (features, c, 3, 3)), requires_grad=True)
            p[f"conv{k}/bias"] = Tensor(np.zeros(features), requires_grad=True)
            c = features
        p["head/weight"] = Tensor(np.zeros((6, features)), requires_grad=True)
        p["head/bias"] = Tensor(IDENTITY_THETA.copy(), requires_grad=True)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def config(self) -> dict:
        return {"features": self.features, "layers": self.layers}

    def thetas(self, img, cond: Conditioning) -> Tensor:
        img = ad.as_tensor(img)
        _, h, w = img.shape
        x = with_conditioning(img, cond)
        win = extract_windows(x.reshape(5, h, w), h, w)
        for k in range(self.layers):
            win = _conv_bias(win, self.params[f"conv{k}/weight"], self.params[f"conv{k}/bias"], stride=2)
            win = ad.leaky_relu(win, LEAKY_SLOPE)
        pooled = ad.mean(win, axis=(2, 3))  # N, features
        theta = ad.matmul(pooled, self.params["head/weight"].transpose(1, 0))
        return ad.add(theta, self.params["head/bias"])

    def __call__(self, img, cond: Conditioning, training: bool = False) -> Tensor:
        img = ad.as_tensor(img)
        return warp_blocks(img, self.thetas(img, cond))


class Cascade(_Editor):
    """Smoothing followed by warping."""

    kind = "cascade"

    def __init__(self, smoother: Smoother | None = None, stn: SpatialTransformer | None = None, seed: int = 0):
        self.smoother = smoother if smoother is not None else Smoother(seed)
        self.stn = stn if stn is not None else SpatialTransformer(seed + 1)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"smoother/{k}": t for k, t in self.smoother.parameters().items()}
        out.update({f"stn/{k}": t for k, t in self.stn.parameters().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"smoother/{k}": v for k, v in self.smoother.buffers().items()}

    def set_buffers(self, arrays) -> None:
        prefix = "smoother/"
        self.smoother.set_buffers({k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)})

    def config(self) -> dict:
        return {"smoother": self.smoother.config(), "stn": self.stn.config()}

    def __call__(self, img, cond: Conditioning, training: bool = False) -> Tensor:
        return self.stn(self.smoother(img, cond, training), cond, training)


def smooth(params: Smoother, img, cond: Conditioning, training: bool = False) -> Tensor:
    return params(img, cond, training)


def stn_warp(params: SpatialTransformer, img, cond: Conditioning) -> Tensor:
    return params(img, cond)


def cascade(smoother: Smoother, stn: SpatialTransformer, img, cond: Conditioning, training: bool = False) -> Tensor:
    return stn(smoother(img, cond, training), cond)


EDITOR_KINDS = {cls.kind: cls for cls in (IdentityEditor, Smoother, SpatialTransformer, Cascade)}


def build_editor(kind: str, config: dict | None = None, seed: int = 0) -> _Editor:
    config = config or {}
    if kind == "identity":
        return IdentityEditor()
    if kind == "smoother":
        return Smoother(seed, **config)
    if kind == "stn":
        return SpatialTransformer(seed, **config)
    if kind == "cascade":
        return Cascade(Smoother(seed, **config.get("smoother", {})), SpatialTransformer(seed + 1, **config.get("stn", {})))
    raise ValueError(f"unknown editor kind {kind!r}")


def load_editor(path) -> _Editor:
    """Load any editor parameter file, dispatching on its stored kind."""
    kind, arrays, meta = param_io.load(path)
    if kind not in EDITOR_KINDS:
        raise param_io.ParamFileError(f"{path}: not an editor parameter file (kind {kind!r})")
    editor = build_editor(kind, meta.get("config"))
    editor.load_state_dict(arrays)
    return editor
