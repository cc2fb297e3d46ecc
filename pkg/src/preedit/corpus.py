"""PNG corpus ingestion: manifest, deterministic train/test split and patch store."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .params import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PATCH_FILES = {"train": "train_patches.npy", "test": "test_patches.npy"}
TEST_FRACTION_BUCKETS = 10  # one bucket in ten goes to the test split


@dataclass
class SourceEntry:
    path: str
    width: int
    height: int
    split: str
    sha256: str
    patches: int = 0


@dataclass
class CorpusManifest:
    patch_size: int
    patches_per_image: int
    seed: int
    sources: list[SourceEntry] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        raw = json.loads(text)
        raw["sources"] = [SourceEntry(**s) for s in raw["sources"]]
        return cls(**raw)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def split(self, name: str) -> list[SourceEntry]:
        return [s for s in self.sources if s.split == name]


def split_for(name: str) -> str:
    """Deterministic 90/10 split on the file name's hash."""
    bucket = int(hashlib.sha256(name.encode("utf-8")).hexdigest(), 16) % TEST_FRACTION_BUCKETS
    return "test" if bucket == 0 else "train"


def read_png(path) -> np.ndarray:
    """8-bit RGB PNG as a planar uint8 array (3, H, W)."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ValueError(f"{path}: not a PNG (found {im.format})")
        rgb = np.asarray(im.convert("RGB"))
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def write_png(path, img) -> None:
    """Write a planar image (uint8, or float in [0, 1]) as an 8-bit RGB PNG, atomically."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def tile_patches(img: np.ndarray, size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``count`` non-overlapping ``size`` x ``size`` tiles, chosen at random from the tile grid."""
    _, h, w = img.shape
    rows, cols = h // size, w // size
    if rows == 0 or cols == 0:
        return np.zeros((0, 3, size, size), dtype=np.uint8)
    order = rng.permutation(rows * cols)[:count]
    tiles = [img[:, (k // cols) * size : (k // cols + 1) * size, (k % cols) * size : (k % cols + 1) * size] for k in sorted(order)]
    return np.stack(tiles)


def ingest(corpus_dir, out_dir, patch_size: int = 96, patches_per_image: int = 30, seed: int = 0) -> CorpusManifest:
    """Scan ``corpus_dir`` for PNGs, split them, extract patches and write the store.

    Writes ``manifest.json`` plus ``train_patches.npy`` and ``test_patches.npy``
    (uint8, N x 3 x size x size) into ``out_dir``. Undecodable files are
    skipped with a warning and listed in the manifest.
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus_dir}")
    if patch_size <= 0 or patches_per_image <= 0:
        raise ValueError("patch size and patches per image must be positive")
    manifest = CorpusManifest(patch_size, patches_per_image, seed)
    store = {"train": [], "test": []}
    for path in sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() == ".png"):
        rel = path.name
        data = path.read_bytes()
        try:
            img = read_png(path)
        except Exception as exc:  # PIL raises several unrelated types for bad files
            warnings.warn(f"skipping {rel}: {exc}")
            manifest.skipped.append({"path": rel, "reason": str(exc)})
            continue
        digest = hashlib.sha256(data).hexdigest()
        split = split_for(rel)
        rng = np.random.default_rng([seed, int(digest[:12], 16)])
        tiles = tile_patches(img, patch_size, patches_per_image, rng)
        store[split].extend(tiles)
        manifest.sources.append(SourceEntry(rel, img.shape[2], img.shape[1], split, digest, len(tiles)))
        log.info("%s: %dx%d -> %d patches (%s)", rel, img.shape[2], img.shape[1], len(tiles), split)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, name in PATCH_FILES.items():
        arr = np.stack(store[split]) if store[split] else np.zeros((0, 3, patch_size, patch_size), dtype=np.uint8)
        buf = io.BytesIO()
        np.save(buf, arr)
        atomic_write_bytes(out_dir / name, buf.getvalue())
    atomic_write_text(out_dir / MANIFEST, manifest.to_json())
    return manifest


def load_manifest(run_dir) -> CorpusManifest:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest in {run_dir}; run ingest first")
    return CorpusManifest.from_json(path.read_text(encoding="utf-8"))


def load_patches(run_dir, split: str) -> np.ndarray:
    path = Path(run_dir) / PATCH_FILES[split]
    if not path.exists():
        raise FileNotFoundError(f"no {split} patches in {run_dir}; run ingest first")
    return np.load(path)
