"""Training loops for the entropy model and the editors, plus rate-distortion evaluation.

All randomness of step ``k`` comes from generators seeded with ``(seed, k)``
and from the epoch permutation seeded with ``(seed, epoch)``, so a run
resumed from a checkpoint follows the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import codec
from . import params as param_io
from .editors import Conditioning, EDITOR_KINDS, Cascade, IdentityEditor, Smoother, SpatialTransformer, build_editor
from .entropy import EntropyModel, estimate_bits, group_coefficients
from .objective import FEATURES, LossWeights, total_loss
from .optim import AdamState, TrainingDivergence, adam_step
from .proxy import psnr

log = logging.getLogger(__name__)

STAGES = ("entropy", "smoother", "stn", "cascade")

_STAGE_DEFAULTS = {
    "entropy": {"lr": 1e-2},
    "smoother": {"lam": 0.0, "mu": 0.01, "distance": "l2"},
    "stn": {"lam": 0.02, "mu": 1.0, "distance": "pyramid"},
    "cascade": {"lam": 0.02, "mu": 1.0, "distance": "pyramid"},
}


@dataclass
class TrainConfig:
    stage: str = "smoother"
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 1
    q_range: tuple[int, int] = (8, 25)
    noise_range: tuple[float, float] = (0.0, 0.15)
    lam: float = 0.0
    mu: float = 0.01
    distance: str = "l2"  # "l2", or a feature extractor name for the perceptual distance
    seed: int = 0
    checkpoint_interval: int = 0
    freeze_entropy: bool = False
    subsample: bool = True

    def __post_init__(self):
        self.q_range = tuple(int(v) for v in self.q_range)
        self.noise_range = tuple(float(v) for v in self.noise_range)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        lo, hi = self.q_range
        if not 1 <= lo <= hi <= 100:
            raise ValueError(f"q range must satisfy 1 <= q_lo <= q_hi <= 100, got {self.q_range}")
        nlo, nhi = self.noise_range
        if not 0.0 <= nlo <= nhi <= 0.15:
            raise ValueError(f"noise range must lie within [0, 0.15], got {self.noise_range}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint interval must be >= 0")
        if self.distance != "l2" and self.distance not in FEATURES:
            raise ValueError(f"unknown distance {self.distance!r}")
        LossWeights(self.lam, self.mu)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """Config with the stage's customary defaults, then ``overrides``."""
        values = dict(_STAGE_DEFAULTS.get(stage, {}))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(stage=stage, **values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_range"] = list(self.q_range)
        d["noise_range"] = list(self.noise_range)
        return d

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.mu)


@dataclass
class TrainResult:
    editor: object
    entropy: EntropyModel
    log: list[dict] = field(default_factory=list)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def _batch_indices(n: int, seed: int, step: int, batch: int) -> list[int]:
    """Indices for ``step`` under reshuffled epochs; depends only on (seed, step)."""
    out = []
    for k in range(step * batch, (step + 1) * batch):
        epoch, pos = divmod(k, n)
        out.append(int(np.random.default_rng([seed, 1_000_003, epoch]).permutation(n)[pos]))
    return out


def _as_float_image(patch) -> np.ndarray:
    a = np.asarray(patch)
    return a.astype(np.float64) / 255.0 if a.dtype == np.uint8 else a.astype(np.float64)


def _trainable(cfg: TrainConfig, editor, entropy: EntropyModel) -> dict:
    params = {}
    if cfg.stage != "entropy":
        params.update({f"editor/{k}": t for k, t in editor.parameters().items()})
    if cfg.stage == "entropy" or not cfg.freeze_entropy:
        params.update({f"entropy/{k}": t for k, t in entropy.parameters().items()})
    return params


def _editor_for_stage(stage: str, editor):
    if stage == "entropy":
        return editor if editor is not None else IdentityEditor()
    if editor is not None:
        expected = {"smoother": Smoother, "stn": SpatialTransformer, "cascade": Cascade}[stage]
        if not isinstance(editor, expected):
            raise TypeError(f"stage {stage!r} needs a {expected.__name__}, got {type(editor).__name__}")
        return editor
    return build_editor(stage)


def train_step(cfg: TrainConfig, corpus: Sequence, editor, entropy: EntropyModel, step: int):
    """Forward and backward for one step. Returns (loss terms dict, grads by name)."""
    rng = _step_rng(cfg.seed, step)
    idx = _batch_indices(len(corpus), cfg.seed, step, cfg.batch_size)
    features = None if cfg.distance == "l2" else FEATURES[cfg.distance]()
    totals = {"loss": 0.0, "dist": 0.0, "quality": 0.0, "bits": 0.0}
    record = {"q": [], "noise_std": []}
    loss_sum = None
    for i in idx:
        z = _as_float_image(corpus[i])
        q = int(rng.integers(cfg.q_range[0], cfg.q_range[1] + 1))
        if cfg.stage == "entropy":
            with ad.no_grad():
                groups = group_coefficients(codec.quantize_image(z, q, cfg.subsample))
            groups = type(groups)(*(ad.Tensor(g.value) for g in groups))
            bits = ad.div(estimate_bits(entropy, groups, noise=True, rng=rng), float(groups.count()))
            loss = bits
            values = {"loss": bits.item(), "dist": 0.0, "quality": 0.0, "bits": bits.item()}
            sigma = 0.0
        else:
            sigma = float(rng.uniform(*cfg.noise_range)) if cfg.stage in ("smoother", "cascade") else 0.0
            noisy = z + rng.normal(0.0, sigma, z.shape) if sigma > 0 else z
            edited = editor(noisy, Conditioning(sigma, q), training=True)
            terms = total_loss(cfg.weights, features, z, edited, q, entropy, cfg.subsample)
            loss = terms.total
            values = terms.values()
        record["q"].append(q)
        record["noise_std"].append(sigma)
        for k in totals:
            totals[k] += values[k] / len(idx)
        loss_sum = loss if loss_sum is None else ad.add(loss_sum, loss)
    mean_loss = ad.div(loss_sum, float(len(idx)))
    if not np.isfinite(mean_loss.item()):
        raise TrainingDivergence(f"non-finite loss at step {step}: {mean_loss.item()}")
    params = _trainable(cfg, editor, entropy)
    for t in params.values():
        t.zero_grad()
    ad.backward(mean_loss)
    grads = {k: t.grad for k, t in params.items()}
    record.update(totals)
    return record, grads


def _checkpoint_arrays(editor, entropy: EntropyModel, state: AdamState) -> dict:
    arrays = {f"editor/{k}": v for k, v in editor.state_dict().items()}
    arrays.update({f"entropy/{k}": v for k, v in entropy.state_dict().items()})
    arrays.update({f"adam/{k}": v for k, v in state.arrays().items()})
    return arrays


def save_checkpoint(path, cfg: TrainConfig, editor, entropy: EntropyModel, state: AdamState, step: int) -> None:
    meta = {"config": cfg.to_dict(), "step": step, "editor_kind": editor.kind, "editor_config": editor.config()}
    param_io.save(path, "checkpoint", _checkpoint_arrays(editor, entropy, state), meta)


def load_checkpoint(path):
    """Returns (config, editor, entropy, adam state, next step)."""
    kind, arrays, meta = param_io.load(path)
    if kind != "checkpoint":
        raise param_io.ParamFileError(f"{path}: expected a checkpoint, found {kind!r}")
    cfg = TrainConfig(**{**meta["config"], "q_range": tuple(meta["config"]["q_range"]), "noise_range": tuple(meta["config"]["noise_range"])})
    editor = build_editor(meta["editor_kind"], meta["editor_config"])

    def section(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    editor.load_state_dict(section("editor/"))
    entropy = EntropyModel()
    entropy.load_state_dict(section("entropy/"))
    state = AdamState.from_arrays(section("adam/"), step=int(meta["step"]))
    return cfg, editor, entropy, state, int(meta["step"])


def train_stage(
    cfg: TrainConfig,
    corpus: Sequence,
    editor=None,
    entropy: EntropyModel | None = None,
    log_path=None,
    checkpoint_dir=None,
    resume=None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one stage on ``corpus`` (a sequence of (3, H, W) images, uint8 or float).

    Returns the trained editor, the entropy model and the per-step log.
    With ``resume`` (a checkpoint path) the run continues where it stopped.
    """
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    if resume is not None:
        saved_cfg, editor, entropy, state, start = load_checkpoint(resume)
        if replace(saved_cfg, steps=cfg.steps, checkpoint_interval=cfg.checkpoint_interval) != cfg:
            raise ValueError("resume: configuration differs from the checkpoint's")
    else:
        editor = _editor_for_stage(cfg.stage, editor)
        entropy = entropy if entropy is not None else EntropyModel(seed=cfg.seed)
        state = AdamState()
        start = 0
    params = _trainable(cfg, editor, entropy)
    records = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if resume is not None else "w", encoding="utf-8")
    try:
        for step in range(start, cfg.steps):
            record, grads = train_step(cfg, corpus, editor, entropy, step)
            adam_step(state, params, grads, cfg.lr)
            record = {"step": step, **record}
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_step is not None:
                on_step(record)
            done = step + 1
            if checkpoint_dir is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step{done:07d}.ckpt", cfg, editor, entropy, state, done)
            if step % 100 == 0:
                log.info("%s step %d loss %.5f bits %.4f", cfg.stage, step, record["loss"], record["bits"])
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(editor, entropy, records)


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalRow:
    image_id: str
    method: str
    q: int  # nominal quality of the baseline this row is compared with
    q_used: int
    bpp: float
    bpp_est: float | None
    mse: float
    psnr: float

    def to_dict(self) -> dict:
        return asdict(self)


def estimated_bpp(entropy: EntropyModel, img, q: int, subsample: bool = True) -> float:
    with ad.no_grad():
        groups = group_coefficients(codec.quantize_image(img, q, subsample))
        bits = estimate_bits(entropy, groups).item()
    return bits / (img.shape[-2] * img.shape[-1])


def _encode_stats(img: np.ndarray, original: np.ndarray, q: int, subsample: bool):
    bs = codec.encode(img, q, subsample)
    decoded = codec.decode(bs)
    mse = float(np.mean((decoded - original) ** 2))
    return 8 * len(bs.data) / (img.shape[1] * img.shape[2]), mse, psnr(decoded, original)


def closest_fewer_bits(img: np.ndarray, budget_bpp: float, nominal_q: int, subsample: bool = True) -> int:
    """Quality factor whose actual bpp is the largest not exceeding ``budget_bpp``.

    Ties prefer ``nominal_q``, then the larger q. Falls back to q=1 when
    nothing fits.
    """
    best_q, best_bpp = None, -1.0
    for q in range(100, 0, -1):
        bpp = 8 * len(codec.encode(img, q, subsample).data) / (img.shape[1] * img.shape[2])
        if bpp <= budget_bpp and (bpp > best_bpp or (bpp == best_bpp and q == nominal_q)):
            best_q, best_bpp = q, bpp
    return best_q if best_q is not None else 1


def edit_image(editor, img: np.ndarray, q: int) -> np.ndarray:
    """Run an editor in evaluation mode and clamp to the displayable range."""
    with ad.no_grad():
        out = editor(img, Conditioning(0.0, q), training=False).value
    return np.clip(out, 0.0, 1.0)


def evaluate(
    editors: dict,
    entropy: EntropyModel | None,
    images: Sequence,
    q_list: Sequence[int],
    ids: Sequence[str] | None = None,
    subsample: bool = True,
) -> list[EvalRow]:
    """Baseline and edited rate-distortion rows for every image and nominal q.

    ``editors`` maps a method name to an editor. Each edited image is coded at
    the quality whose bit-rate comes closest to, without exceeding, the
    baseline's at the nominal q.
    """
    ids = list(ids) if ids is not None else [f"img{i:03d}" for i in range(len(images))]
    rows = []
    for image_id, raw in zip(ids, images):
        img = _as_float_image(raw)
        for q in q_list:
            bpp, mse, p = _encode_stats(img, img, q, subsample)
            est = estimated_bpp(entropy, img, q, subsample) if entropy is not None else None
            rows.append(EvalRow(image_id, "baseline", q, q, bpp, est, mse, p))
            for method, editor in editors.items():
                edited = edit_image(editor, img, q)
                q_used = closest_fewer_bits(edited, bpp, q, subsample)
                e_bpp, e_mse, e_p = _encode_stats(edited, img, q_used, subsample)
                e_est = estimated_bpp(entropy, edited, q_used, subsample) if entropy is not None else None
                rows.append(EvalRow(image_id, method, q, q_used, e_bpp, e_est, e_mse, e_p))
    return rows


def mean_bpp_at(editor, images: Sequence, q: int, subsample: bool = True) -> tuple[float, float]:
    """Mean actual bpp and MSE of edited images coded at a fixed q."""
    bpps, mses = [], []
    for raw in images:
        img = _as_float_image(raw)
        edited = edit_image(editor, img, q)
        bpp, mse, _ = _encode_stats(edited, img, q, subsample)
        bpps.append(bpp)
        mses.append(mse)
    return float(np.mean(bpps)), float(np.mean(mses))


__all__ = [
    "EDITOR_KINDS",
    "EvalRow",
    "TrainConfig",
    "TrainResult",
    "closest_fewer_bits",
    "evaluate",
    "load_checkpoint",
    "mean_bpp_at",
    "save_checkpoint",
    "train_stage",
]
