"""Desk-scale datasets for the bench harness.

Two tasks: a seeded 2-D Gaussian-mixture classification set, and
next-character prediction over a bundled ASCII corpus with the context
window presented as concatenated one-hot vectors.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .numerics import Rng
from .train_core import Dataset

CORPUS_PATH = Path(__file__).parent / "data" / "corpus.txt"

TASKS = ("synthetic-classify", "char-lm")


def gen_classify(
    rng: Rng,
    n_train: int = 2000,
    n_val: int = 1000,
    classes: int = 10,
    spread: float = 0.16,
) -> Dataset:
    """Gaussian mixture on a circle: one blob per class, uniform priors."""
    n = n_train + n_val
    labels = rng.integers(n, 0, classes)
    angles = 2.0 * np.pi * labels / classes
    centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points = centers + spread * rng.normal(2 * n).reshape(n, 2)
    x = points.astype(np.float32)
    y = labels.astype(np.int64)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], metric="accuracy")


def load_corpus() -> str:
    if not CORPUS_PATH.exists():
        raise FileNotFoundError(f"bundled corpus missing: {CORPUS_PATH}")
    text = CORPUS_PATH.read_text(encoding="ascii")
    if not all(32 <= ord(c) < 127 or c == "\n" for c in set(text)):
        raise ValueError("corpus must be printable ASCII")
    return text


def corpus_vocab(text: str) -> list[str]:
    return sorted(set(text))


def gen_char_lm(
    rng: Rng,
    context: int = 8,
    n_train: int = 4000,
    n_val: int = 1000,
) -> tuple[Dataset, list[str]]:
    """Sampled next-character windows from the bundled corpus.

    Inputs are context * vocab one-hot concatenations; targets the id of the
    following character.
    """
    text = load_corpus()
    vocab = corpus_vocab(text)
    lookup = {c: i for i, c in enumerate(vocab)}
    ids = np.array([lookup[c] for c in text], dtype=np.int64)
    n_pos = len(ids) - context
    order = rng.permutation(n_pos)[: n_train + n_val]
    v = len(vocab)
    x = np.zeros((len(order), context * v), dtype=np.float32)
    y = np.empty(len(order), dtype=np.int64)
    for row, pos in enumerate(order):
        window = ids[pos : pos + context]
        x[row, np.arange(context) * v + window] = 1.0
        y[row] = ids[pos + context]
    ds = Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], metric="char_perplexity")
    return ds, vocab


def gen_dataset(task: str, rng: Rng, **kw):
    """Dispatch by task tag; char-lm returns (dataset, vocab)."""
    if task == "synthetic-classify":
        return gen_classify(rng, **kw)
    if task == "char-lm":
        return gen_char_lm(rng, **kw)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
