"""Attention-driven token pruning and cross-tokenizer mask alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, InvalidInputError, InvalidParameterError

DEFAULT_ALPHA = 0.8
ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise InvalidInputError("importance must be a non-empty 1-d vector")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InvalidInputError("importance entries must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def ave(self) -> float:
        return float(self.values.mean())

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class PruneParams:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InvalidParameterError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class Segmentation:
    """How a tokenizer split a word sequence.

    ``spans[w]`` is the half-open token range of word ``w``; ``special[i]``
    flags tokens (such as sequence start/end markers) that belong to no word.
    """

    words: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]
    special: tuple[bool, ...]

    def __post_init__(self):
        if len(self.words) != len(self.spans):
            raise InvalidInputError("one span per word required")
        covered = [False] * len(self.special)
        prev_end = 0
        for start, end in self.spans:
            if not (prev_end <= start < end <= len(self.special)):
                raise InvalidInputError(f"spans must be ordered, disjoint and non-empty: {self.spans}")
            for i in range(start, end):
                if self.special[i]:
                    raise InvalidInputError("special token inside a word span")
                covered[i] = True
            prev_end = end
        if any(not c and not s for c, s in zip(covered, self.special)):
            raise InvalidInputError("every non-special token must belong to a word")

    @property
    def n_tokens(self) -> int:
        return len(self.special)

    def word_of_token(self) -> list[int | None]:
        owner: list[int | None] = [None] * self.n_tokens
        for w, (start, end) in enumerate(self.spans):
            for i in range(start, end):
                owner[i] = w
        return owner


def accumulate_importance(attention_maps) -> ImportanceVector:
    """Total attention each token receives, summed over layers, heads and query rows.

    ``attention_maps`` has shape ``(layers, heads, n, n)``; each row must be a
    probability distribution.
    """
    a = np.asarray(attention_maps, dtype=np.float64)
    if a.ndim != 4 or a.shape[-1] != a.shape[-2] or a.shape[-1] == 0:
        raise InvalidInputError(f"expected (layers, heads, n, n) attention, got shape {a.shape}")
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
        raise InvalidInputError("attention rows must be non-negative and sum to 1")
    return ImportanceVector(a.sum(axis=(0, 1, 2)))


def prune_mask(importance: ImportanceVector, params: PruneParams,
               special=None) -> np.ndarray:
    """Keep token y iff imp_y > alpha * ave, with special tokens always kept.

    If nothing prunable survives, the most important prunable token is kept
    (lowest index on ties) so the next model never sees an empty input.
    """
    imp = importance.values
    special = np.zeros(imp.size, dtype=bool) if special is None else np.asarray(special, dtype=bool)
    if special.shape != imp.shape:
        raise InvalidInputError("special-token flags must match importance length")
    keep = (imp > params.alpha * importance.ave) | special
    prunable = ~special
    if prunable.any() and not keep[prunable].any():
        candidates = np.where(prunable, imp, -np.inf)
        keep[int(np.argmax(candidates))] = True
    return keep


def word_importance(importance: ImportanceVector, seg: Segmentation) -> np.ndarray:
    """Per-word importance as the mean over the word's tokens."""
    if len(importance) != seg.n_tokens:
        raise InvalidInputError("importance length does not match segmentation")
    return np.array([importance.values[s:e].mean() for s, e in seg.spans])


def align_mask(mask, source: Segmentation, target: Segmentation) -> np.ndarray:
    """Carry a keep-mask from one tokenization of a text to another.

    Words split the same way are copied token by token. A word that the
    target splits differently is kept whole if any of its source tokens was
    kept and pruned whole otherwise; this covers both the word-to-subword and
    subword-to-word directions.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (source.n_tokens,):
        raise InvalidInputError("mask length does not match source segmentation")
    if tuple(source.words) != tuple(target.words):
        raise AlignmentError("source and target segment different word sequences")
    if source == target:
        return mask.copy()
    out = np.array(target.special, dtype=bool)
    for (s0, s1), (t0, t1) in zip(source.spans, target.spans):
        if s1 - s0 == t1 - t0:
            out[t0:t1] = mask[s0:s1]
        else:
            out[t0:t1] = mask[s0:s1].any()
    return out


def word_mask_from_tokens(mask, seg: Segmentation) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return np.array([mask[s:e].any() for s, e in seg.spans], dtype=bool)


def prune_text(words, word_mask, word_scores=None) -> str:
    """Join retained words in their original order.

    An all-false mask keeps the single best word by ``word_scores`` (the
    first word when no scores are given).
    """
    if isinstance(words, Segmentation):
        words = words.words
    words = list(words)
    word_mask = np.asarray(word_mask, dtype=bool)
    if word_mask.shape != (len(words),):
        raise InvalidInputError("word mask length does not match word count")
    if words and not word_mask.any():
        word_mask = word_mask.copy()
        best = 0 if word_scores is None else int(np.argmax(word_scores))
        word_mask[best] = True
    return " ".join(w for w, k in zip(words, word_mask) if k)


def prune_for_handoff(importance: ImportanceVector, source: Segmentation,
                      target: Segmentation, params: PruneParams):
    """Full hand-off: mask at the source tier, align to the next tier, emit text.

    Returns ``(text, target_token_mask)``.
    """
    keep = prune_mask(importance, params, special=source.special)
    aligned = align_mask(keep, source, target)
    wmask = word_mask_from_tokens(aligned, target)
    text = prune_text(target.words, wmask, word_importance(importance, source))
    return text, aligned
