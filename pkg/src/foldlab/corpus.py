"""Character-level corpus handling and a synthetic text generator.

The tokenizer is the sorted character alphabet of the corpus itself, so no
external vocabulary is needed. The synthetic generator produces Zipf-ish
pseudo-English with enough local structure for a small character model to
learn.
"""

from __future__ import annotations

import numpy as np

_SYLLABLES = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du",
    "ka", "ke", "ki", "ko", "ku", "la", "le", "li", "lo", "lu",
    "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
    "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su",
    "ta", "te", "ti", "to", "tu", "va", "ve", "vi", "vo", "vu",
]


class CharVocab:
    """Bidirectional char<->id map over a fixed alphabet."""

    def __init__(self, chars):
        self.chars = "".join(sorted(set(chars)))
        self.index = {c: i for i, c in enumerate(self.chars)}

    def __len__(self):
        return len(self.chars)

    @classmethod
    def from_text(cls, text):
        return cls(text)

    def encode(self, text):
        try:
            return np.array([self.index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids):
        return "".join(self.chars[i] for i in ids)


def synthetic_corpus(n_chars, seed=0):
    """Deterministic pseudo-text: Zipf-weighted words in short templated sentences."""
    rng = np.random.default_rng(seed)
    n_words = 800
    words = []
    for _ in range(n_words):
        k = rng.integers(1, 4)
        words.append("".join(_SYLLABLES[rng.integers(0, len(_SYLLABLES))] for _ in range(k + 1)))
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()

    parts = []
    total = 0
    while total < n_chars:
        n = int(rng.integers(4, 11))
        picks = rng.choice(n_words, size=n, p=probs)
        sentence = " ".join(words[i] for i in picks)
        sentence = sentence.capitalize() + (". " if rng.random() < 0.8 else ".\n")
        parts.append(sentence)
        total += len(sentence)
    return "".join(parts)[:n_chars]


def load_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def split_tokens(tokens, train_frac=0.9):
    """Held-in / held-out split at a fixed fraction."""
    cut = int(len(tokens) * train_frac)
    return tokens[:cut], tokens[cut:]


def sample_batch(tokens, batch_size, seq_len, rng):
    """Random (inputs, targets) windows; needs seq_len+1 tokens per row."""
    if len(tokens) < seq_len + 1:
        raise ValueError(f"corpus too short: {len(tokens)} tokens for seq_len {seq_len}")
    starts = rng.integers(0, len(tokens) - seq_len - 1, size=batch_size)
    x = np.stack([tokens[s : s + seq_len] for s in starts])
    y = np.stack([tokens[s + 1 : s + seq_len + 1] for s in starts])
    return x, y


def windows(tokens, seq_len):
    """Non-overlapping (inputs, targets) windows; the final partial window is dropped."""
    stride = seq_len + 1
    n = len(tokens) // stride
    if n == 0:
        raise ValueError(f"corpus too short for even one window of {seq_len} tokens")
    xs = np.stack([tokens[i * stride : i * stride + seq_len] for i in range(n)])
    ys = np.stack([tokens[i * stride + 1 : i * stride + seq_len + 1] for i in range(n)])
    return xs, ys
