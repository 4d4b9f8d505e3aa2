"""Corruption operators for denoising auto-encoder training.

Three noise types: replace one word with ``[MASK]``, drop one middle
character from 30-50% of the words, or shuffle the word order.  All three
are deterministic functions of the supplied generator.
"""

from __future__ import annotations

import enum

import numpy as np

from .tokenizer import MASK_STRING


class NoiseKind(enum.Enum):
    MASK = "mask"
    DROPCHAR = "dropchar"
    SHUFFLE = "shuffle"


ALL_NOISE_KINDS = (NoiseKind.MASK, NoiseKind.DROPCHAR, NoiseKind.SHUFFLE)

DROPCHAR_MIN_FRACTION = 0.30
DROPCHAR_MAX_FRACTION = 0.50
MIN_DROPPABLE_LEN = 3


def _words(line: str) -> list[str]:
    words = line.split()
    if not words:
        raise ValueError("noise operators require at least one word")
    return words


def apply_mask(line: str, rng: np.random.Generator) -> str:
    """Replace exactly one uniformly chosen word with the mask token."""
    words = _words(line)
    i = int(rng.integers(0, len(words)))
    words[i] = MASK_STRING
    return " ".join(words)


def apply_dropchar(line: str, rng: np.random.Generator) -> str:
    """Drop one middle character from 30-50% of the eligible words.

    Words shorter than three characters are never touched; the first and
    last character of a word are never dropped.  When any word is eligible
    at least one is altered.
    """
    words = _words(line)
    eligible = [i for i, w in enumerate(words) if len(w) >= MIN_DROPPABLE_LEN]
    if not eligible:
        return " ".join(words)
    frac = float(rng.uniform(DROPCHAR_MIN_FRACTION, DROPCHAR_MAX_FRACTION))
    count = max(1, round(frac * len(eligible)))
    chosen = rng.choice(len(eligible), size=count, replace=False)
    for k in chosen:
        i = eligible[int(k)]
        w = words[i]
        pos = int(rng.integers(1, len(w) - 1))
        words[i] = w[:pos] + w[pos + 1:]
    return " ".join(words)


def apply_shuffle(line: str, rng: np.random.Generator) -> str:
    """Uniformly permute the word order; surface forms are unchanged."""
    words = _words(line)
    perm = rng.permutation(len(words))
    return " ".join(words[int(i)] for i in perm)


def sample_noise_kind(rng: np.random.Generator,
                      enabled=ALL_NOISE_KINDS) -> NoiseKind:
    """Uniform draw over the enabled noise kinds."""
    kinds = sorted(set(enabled), key=lambda k: k.value)
    if not kinds:
        raise ValueError("no noise kinds enabled")
    return kinds[int(rng.integers(0, len(kinds)))]


def apply_noise(kind: NoiseKind, line: str, rng: np.random.Generator) -> str:
    if kind is NoiseKind.MASK:
        return apply_mask(line, rng)
    if kind is NoiseKind.DROPCHAR:
        return apply_dropchar(line, rng)
    return apply_shuffle(line, rng)
