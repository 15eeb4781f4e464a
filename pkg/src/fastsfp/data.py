"""Synthetic CT-like phantoms, intensity preprocessing and a text stub.

Phantoms are built in Hounsfield units.  The teacher view clips to
[-1000, 1000] HU; the student view applies a lung window (center -600,
width 1500) and then a lossy block-DCT codec that mimics JPEG.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from . import container
from .exceptions import DimensionError, RangeError
from .tensor import as_tensor

MAGIC = b"VOL1"
TEXT_DIM = 768
LUNG_WINDOW = (-600.0, 1500.0)
TEACHER_CLIP = (-1000.0, 1000.0)
JPEG_QUALITY = 90

# ITU T.81 Annex K luminance table
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def hu_convert(raw, slope: float, intercept: float) -> np.ndarray:
    """Rescale stored voxel values to Hounsfield units."""
    return slope * as_tensor(raw) + intercept


def clip_normalize(hu, lo: float, hi: float) -> np.ndarray:
    """Clip to ``[lo, hi]`` and map affinely onto ``[-1, 1]``."""
    if not lo < hi:
        raise RangeError("clip range must satisfy lo < hi")
    x = np.clip(as_tensor(hu), lo, hi)
    return np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def window_normalize(hu, center: float, width: float) -> np.ndarray:
    if width <= 0:
        raise RangeError("window width must be positive")
    return clip_normalize(hu, center - width / 2.0, center + width / 2.0)


def quant_table(quality: int) -> np.ndarray:
    """Quality-scaled quantization table (IJG convention)."""
    if not 1 <= quality <= 100:
        raise RangeError("quality must be in 1..100")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    q = np.floor((LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(q, 1.0, 255.0)


def to_uint8_levels(vol) -> np.ndarray:
    """Map ``[-1, 1]`` onto the integer grey levels 0..255 (as floats)."""
    return np.clip(np.round((as_tensor(vol) + 1.0) * 127.5), 0.0, 255.0)


def degrade(vol, quality: int = JPEG_QUALITY) -> np.ndarray:
    """Lossy block-DCT round trip of every depth slice.

    Slices are quantized to 8 bits, cut into 8x8 blocks (edge padded), and
    their AC coefficients quantized with :func:`quant_table`.  The DC term
    is kept at integer precision so block means survive and the loss is
    purely spectral.
    """
    vol = as_tensor(vol)
    if vol.ndim != 3:
        raise DimensionError("degrade expects a (D, H, W) volume")
    Q = quant_table(quality).copy()
    Q[0, 0] = 1.0
    D, H, W = vol.shape
    Hp, Wp = -(-H // 8) * 8, -(-W // 8) * 8
    levels = to_uint8_levels(vol)
    padded = np.pad(levels, ((0, 0), (0, Hp - H), (0, Wp - W)), mode="edge") - 128.0
    blocks = padded.reshape(D, Hp // 8, 8, Wp // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / Q) * Q
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(D, Hp, Wp)[:, :H, :W] + 128.0
    rec = np.clip(np.round(rec), 0.0, 255.0)
    return rec / 127.5 - 1.0


@dataclass
class VolumePair:
    clean: np.ndarray
    degraded: np.ndarray
    labels: np.ndarray
    prompt_pos: list = field(default_factory=list)
    prompt_neg: list = field(default_factory=list)

    @property
    def report(self) -> str:
        """Synthetic report text: one sentence per label."""
        if len(self.labels) == 0:
            return "no findings"
        parts = [self.prompt_pos[k] if self.labels[k] else self.prompt_neg[k]
                 for k in range(len(self.labels))]
        return ". ".join(parts)


def prompts(n_labels: int) -> tuple[list, list]:
    return ([f"pattern {k} present" for k in range(n_labels)],
            [f"no pattern {k}" for k in range(n_labels)])


def pattern_region(k: int, shape) -> tuple[slice, slice, slice]:
    """Octant assigned to label ``k`` (wrapping after eight labels)."""
    D, H, W = shape
    o = k % 8
    sd = slice(0, D // 2) if o & 4 == 0 else slice(D // 2, D)
    sh = slice(0, H // 2) if o & 2 == 0 else slice(H // 2, H)
    sw = slice(0, W // 2) if o & 1 == 0 else slice(W // 2, W)
    return sd, sh, sw


def _pattern(k: int, shape) -> np.ndarray:
    D, H, W = shape
    z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    axis = (z, y, x)[(k // 8) % 3]
    stripes = 0.5 + 0.5 * np.cos(np.pi * (axis + k % 2))
    mask = np.zeros(shape)
    mask[pattern_region(k, shape)] = 1.0
    return 500.0 * stripes * mask


def hu_phantom(rng: np.random.Generator, shape, labels) -> np.ndarray:
    D, H, W = shape
    z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    hu = np.full(shape, -850.0)
    for _ in range(3):
        c = rng.uniform(0, 1, 3) * np.array(shape)
        sigma = rng.uniform(0.15, 0.3) * max(shape)
        amp = rng.uniform(200.0, 600.0)
        r2 = (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2
        hu += amp * np.exp(-r2 / (2 * sigma * sigma))
    hu += 20.0 * rng.standard_normal(shape)
    for k, on in enumerate(labels):
        if on:
            hu += _pattern(k, shape)
    return hu


def gen_pair(seed: int, shape=(8, 8, 8), n_labels: int = 3, labels=None,
             quality: int = JPEG_QUALITY) -> VolumePair:
    """Deterministic phantom pair; ``labels`` overrides the drawn label bits."""
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    drawn = rng.integers(0, 2, size=n_labels).astype(np.int8)
    labels = drawn if labels is None else np.asarray(labels, dtype=np.int8)
    if labels.shape != (n_labels,):
        raise DimensionError("labels must have length n_labels")
    hu = hu_phantom(rng, shape, labels)
    clean = clip_normalize(hu, *TEACHER_CLIP)
    degraded = degrade(window_normalize(hu, *LUNG_WINDOW), quality)
    pos, neg = prompts(n_labels)
    return VolumePair(clean, degraded, labels, pos, neg)


def make_dataset(n: int, seed: int, shape=(8, 8, 8), n_labels: int = 3) -> list:
    return [gen_pair(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), shape, n_labels)
            for i in range(n)]


_TOKEN = re.compile(r"[a-z0-9]+")


def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    return v / np.linalg.norm(v)


def text_embed_stub(prompt: str, dim: int = TEXT_DIM) -> np.ndarray:
    """Bag of hashed unigrams and within-sentence bigrams, unit normalized."""
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be a non-empty string")
    acc = np.zeros(dim)
    for sentence in re.split(r"[.;\n]", prompt.lower()):
        words = _TOKEN.findall(sentence)
        for w in words:
            acc += _token_vector(w, dim)
        for a, b in zip(words, words[1:]):
            acc += _token_vector(a + "_" + b, dim)
    norm = np.linalg.norm(acc)
    if norm == 0:
        raise ValueError("prompt contains no tokens")
    return acc / norm


def pair_to_bytes(pair: VolumePair) -> bytes:
    return container.pack(MAGIC, list(pair.clean.shape), [pair.clean, pair.degraded])


def pair_from_bytes(blob: bytes, labels=(), n_labels=None) -> VolumePair:
    header, payload = container.unpack(blob, MAGIC)
    shape = tuple(header)
    clean, off = container.take(payload, 0, shape)
    degraded, _ = container.take(payload, off, shape)
    labels = np.asarray(labels, dtype=np.int8)
    pos, neg = prompts(len(labels))
    return VolumePair(clean, degraded, labels, pos, neg)


def export_dataset(pairs: list, out_dir, seeds=None) -> list:
    """Write ``pair_XXXX.vol`` files plus a ``labels.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, pair in enumerate(pairs):
        name = f"pair_{i:04d}.vol"
        container.write_file(out / name, pair_to_bytes(pair))
        index.append({"file": name, "labels": [int(b) for b in pair.labels],
                      "report": pair.report})
    (out / "labels.json").write_text(json.dumps(index, indent=2) + "\n")
    return index


def import_dataset(in_dir) -> list:
    root = Path(in_dir)
    index = json.loads((root / "labels.json").read_text())
    return [pair_from_bytes(container.read_file(root / e["file"]), e["labels"]) for e in index]
