"""Samples, label-file loading, image I/O and padded batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from abm.vocab import PAD, Vocabulary


class DatasetError(IOError):
    """A label line refers to something that cannot be loaded."""


@dataclass
class Sample:
    id: str
    image: np.ndarray          # (H, W) float32 in [0, 1], ink high
    target: list               # symbol ids, no markers

    def __post_init__(self):
        if len(self.target) < 1:
            raise ValueError(f"sample {self.id}: empty target")
        if self.image.size == 0:
            raise ValueError(f"sample {self.id}: empty image")


@dataclass
class Batch:
    ids: list
    images: np.ndarray         # (B, 1, H, W)
    pixel_mask: np.ndarray     # (B, H, W) float32
    targets: list              # list of id lists (unpadded)
    padded: np.ndarray         # (B, Tmax) int64, PAD filled
    token_mask: np.ndarray     # (B, Tmax) bool

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    """8-bit grayscale PNG/PGM -> float32 [0, 1] with ink as high values."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0:
        raise DatasetError(f"empty image {path}")
    if arr.mean() > 0.5:  # black ink on white paper
        arr = 1.0 - arr
    return arr


def write_png(path, image: np.ndarray, ink_dark: bool = True) -> None:
    """Store a [0, 1] ink-high image; by default as dark ink on white."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if ink_dark:
        arr = 255 - arr
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)


def write_pgm(path, values: np.ndarray) -> None:
    """Binary 8-bit PGM of values scaled so the maximum maps to 255."""
    v = np.asarray(values, dtype=np.float64)
    top = v.max() if v.size and v.max() > 0 else 1.0
    arr = np.clip(np.round(v / top * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# label files


def parse_label_line(line: str, lineno: int) -> tuple[str, list[str]]:
    if "\t" not in line:
        raise DatasetError(f"line {lineno}: expected '<id>\\t<tokens>', got {line!r}")
    sid, text = line.split("\t", 1)
    toks = text.split(" ") if text else []
    if not sid or not toks or any(t == "" for t in toks):
        raise DatasetError(f"line {lineno}: malformed label line {line!r}")
    return sid, toks


def read_labels(label_file) -> list[tuple[str, list[str]]]:
    text = Path(label_file).read_text(encoding="utf-8")
    out = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if line.strip() == "":
            continue
        out.append(parse_label_line(line.rstrip("\r"), lineno))
    return out


def write_labels(label_file, rows: Sequence[tuple[str, Sequence[str]]]) -> None:
    with open(label_file, "w", encoding="utf-8", newline="\n") as fh:
        for sid, toks in rows:
            fh.write(f"{sid}\t{' '.join(toks)}\n")


def load_dataset(image_dir, label_file, vocab: Vocabulary) -> list[Sample]:
    image_dir = Path(image_dir)
    samples = []
    for lineno, (sid, toks) in enumerate(read_labels(label_file), 1):
        target = vocab.encode(toks, where=f"{label_file} line {lineno}, id {sid}")
        for ext in (".png", ".pgm"):
            path = image_dir / f"{sid}{ext}"
            if path.exists():
                break
        else:
            raise DatasetError(f"line {lineno}: no image for id {sid!r} in {image_dir}")
        samples.append(Sample(sid, read_image(path), target))
    return samples


def save_dataset(out_dir, samples: Sequence[Sample], vocab: Vocabulary) -> None:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_png(out_dir / "images" / f"{s.id}.png", s.image)
    write_labels(out_dir / "labels.txt", [(s.id, vocab.decode(s.target)) for s in samples])
    vocab.save(out_dir / "vocab.txt")


def load_dir(data_dir, vocab: Vocabulary | None = None) -> tuple[list[Sample], Vocabulary]:
    """Load ``<dir>/labels.txt`` with images from ``<dir>/images`` (or ``<dir>``)."""
    data_dir = Path(data_dir)
    if vocab is None:
        vocab = Vocabulary.load(data_dir / "vocab.txt")
    image_dir = data_dir / "images" if (data_dir / "images").is_dir() else data_dir
    return load_dataset(image_dir, data_dir / "labels.txt", vocab), vocab


# ---------------------------------------------------------------------------
# batching


def collate(samples: Sequence[Sample]) -> Batch:
    B = len(samples)
    H = max(s.image.shape[0] for s in samples)
    W = max(s.image.shape[1] for s in samples)
    T = max(len(s.target) for s in samples)
    images = np.zeros((B, 1, H, W), dtype=np.float32)
    mask = np.zeros((B, H, W), dtype=np.float32)
    padded = np.full((B, T), PAD, dtype=np.int64)
    tmask = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(samples):
        h, w = s.image.shape
        images[b, 0, :h, :w] = s.image
        mask[b, :h, :w] = 1.0
        padded[b, :len(s.target)] = s.target
        tmask[b, :len(s.target)] = True
    return Batch([s.id for s in samples], images, mask, [list(s.target) for s in samples], padded, tmask)


def make_batches(samples: Sequence[Sample], batch_size: int, sort_by_length: bool = False) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(len(samples)))
    if sort_by_length:
        order.sort(key=lambda i: (len(samples[i].target), samples[i].image.shape[1]))
    return [collate([samples[i] for i in order[k:k + batch_size]])
            for k in range(0, len(order), batch_size)]


def split_validation(samples: Sequence[Sample], fraction: float, seed: int):
    """Deterministic hold-out; ``fraction == 0`` validates on the training set itself."""
    if fraction <= 0:
        return list(samples), list(samples)
    rng = np.random.default_rng([int(seed), 7919])
    idx = rng.permutation(len(samples))
    n_val = max(1, int(round(len(samples) * fraction)))
    val = sorted(idx[:n_val].tolist())
    train = sorted(idx[n_val:].tolist())
    return [samples[i] for i in train], [samples[i] for i in val]
