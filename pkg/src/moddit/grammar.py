"""Closed caption grammar for the synthetic shapes world.

Captions follow ``a {size?} {color} {shape} [and ...] on a {bg} background``.
A subject phrase may also be the generic ``a shape``, which names no
attributes at all; that variant is what makes reference images the only
identity channel in the benchmark prompts. The vocabulary is closed and
ordered, so token ids and the vocabulary hash are stable.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .rng import fnv1a64

SHAPES = ["circle", "square", "triangle", "star", "cross"]
SIZES = ["small", "large"]

SUBJECT_COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
    "orange": (255, 128, 0),
    "purple": (128, 0, 255),
}

BG_COLORS = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
}

PAD = "<pad>"
GENERIC = "shape"

VOCAB = (
    [PAD, "a", "and", "on", "background", GENERIC]
    + SIZES
    + list(SUBJECT_COLORS)
    + SHAPES
    + list(BG_COLORS)
)
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_TO_ID[PAD]
T_MAX = 24


def vocab_hash() -> int:
    return fnv1a64("\n".join(VOCAB).encode("utf-8"))


def tokenize(tokens) -> list[int]:
    ids = []
    for tok in tokens:
        if tok not in TOKEN_TO_ID:
            raise ValidationError(f"unknown token {tok!r}")
        ids.append(TOKEN_TO_ID[tok])
    return ids


def detokenize(ids) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= int(i) < len(VOCAB):
            raise ValidationError(f"token id {i} outside vocabulary of {len(VOCAB)}")
        out.append(VOCAB[int(i)])
    return out


def pad_caption(ids, t_max: int = T_MAX):
    """Pad to fixed length; returns (ids[t_max], valid mask[t_max])."""
    if len(ids) > t_max:
        raise ValidationError(f"caption of {len(ids)} tokens exceeds T_max={t_max}")
    out = np.full(t_max, PAD_ID, dtype=np.int64)
    mask = np.zeros(t_max, dtype=np.float64)
    out[: len(ids)] = ids
    mask[: len(ids)] = 1.0
    return out, mask


def subject_phrase(shape: str, color: str, size: str, generic: bool = False,
                   with_size: bool = True) -> list[str]:
    """Token list naming one subject; generic drops every attribute."""
    if generic:
        return ["a", GENERIC]
    if with_size:
        return ["a", size, color, shape]
    return ["a", color, shape]


def build_caption(phrases: list[list[str]], bg: str):
    """Join subject phrases with 'and' and close with the background clause.

    Returns (tokens, spans) where spans[i] = [start, end) of phrase i.
    """
    if bg not in BG_COLORS:
        raise ValidationError(f"unknown background color {bg!r}")
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    for i, ph in enumerate(phrases):
        if i:
            tokens.append("and")
        spans.append((len(tokens), len(tokens) + len(ph)))
        tokens.extend(ph)
    tokens.extend(["on", "a", bg, "background"])
    return tokens, spans


def merge_captions(left_tokens, left_spans, right_tokens, right_spans):
    """Concatenate two complete captions with a joining 'and'.

    Right-caption spans shift by the left length plus the separator.
    """
    tokens = list(left_tokens) + ["and"] + list(right_tokens)
    shift = len(left_tokens) + 1
    spans = [tuple(s) for s in left_spans] + [(a + shift, b + shift) for a, b in right_spans]
    return tokens, spans
