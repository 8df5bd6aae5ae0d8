"""Synthetic labelled text workloads.

Sentences mix words of a single sentiment polarity with filler words; the
label is the polarity. Long words are included on purpose so sub-word
tokenizers actually split something.
"""
from __future__ import annotations

import numpy as np

from .streams import derive_rng

POSITIVE = ("good", "great", "superb", "brilliant", "enjoyable", "unforgettable",
            "delightful", "charming")
NEGATIVE = ("bad", "awful", "boring", "terrible", "unwatchable", "dull", "tedious",
            "forgettable")
FILLER = ("the", "movie", "film", "was", "a", "in", "at", "on", "and", "story", "acting",
          "cinematography")


def make_sentence(rng: np.random.Generator, label: int, min_words: int = 8,
                  max_words: int = 24) -> str:
    """Shuffle 30-50% sentiment words of one polarity with filler words."""
    n = int(rng.integers(min_words, max_words + 1))
    n_sent = max(1, int(round(n * rng.uniform(0.3, 0.5))))
    vocab = POSITIVE if label == 1 else NEGATIVE
    words = [vocab[i] for i in rng.integers(0, len(vocab), n_sent)]
    words += [FILLER[i] for i in rng.integers(0, len(FILLER), n - n_sent)]
    return " ".join(words[i] for i in rng.permutation(n))


def make_tasks(n: int, seed: int, prefix: str = "t", n_classes: int = 2,
               min_words: int = 8, max_words: int = 24):
    """``n`` tasks with ids ``{prefix}{index:05d}``, each from its own stream."""
    from .orchestrator import Task

    tasks = []
    for i in range(n):
        tid = f"{prefix}{i:05d}"
        rng = derive_rng(seed, tid, "workload")
        label = int(rng.integers(0, n_classes))
        text = make_sentence(rng, 1 if label == 1 else 0, min_words, max_words)
        tasks.append(Task(tid, text, label))
    return tasks
