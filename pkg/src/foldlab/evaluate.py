"""Perplexity over non-overlapping token windows and head-to-head model
comparison tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import windows


@dataclass
class EvalReport:
    model_id: str
    corpus_id: str
    seq_len: int
    token_count: int
    perplexity: float

    def to_dict(self):
        return {"model_id": self.model_id, "corpus_id": self.corpus_id,
                "seq_len": self.seq_len, "token_count": self.token_count,
                "perplexity": self.perplexity}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def perplexity(model, tokens, seq_len, model_id="model", corpus_id="corpus", batch_size=16):
    """exp(mean next-token cross-entropy) over non-overlapping windows.

    Accumulated in log space (total nll / token count); the final partial
    window is dropped.
    """
    if seq_len > model.config.max_seq:
        raise ValueError(f"seq_len {seq_len} exceeds model max_seq {model.config.max_seq}")
    xs, ys = windows(np.asarray(tokens), seq_len)
    frozen = model.frozen()
    total_nll = 0.0
    token_count = 0
    for lo in range(0, len(xs), batch_size):
        x, y = xs[lo : lo + batch_size], ys[lo : lo + batch_size]
        ce = frozen.loss(x, y).item()
        n = x.shape[0] * x.shape[1]
        total_nll += ce * n
        token_count += n
    return EvalReport(model_id=model_id, corpus_id=corpus_id, seq_len=seq_len,
                      token_count=token_count, perplexity=float(np.exp(total_nll / token_count)))


@dataclass
class ComparisonRow:
    model_id: str
    removal_ratio: float
    fold_ratio: float
    total_ratio: float
    perplexity: float
    retained_pct: float


@dataclass
class ComparisonTable:
    rows: list
    corpus_id: str

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "removal_ratio", "fold_ratio", "total_ratio",
                             "perplexity", "retained_pct"])
            for r in self.rows:
                writer.writerow([r.model_id] + [repr(v) for v in
                                (r.removal_ratio, r.fold_ratio, r.total_ratio,
                                 r.perplexity, r.retained_pct)])

    def to_text(self):
        header = f"{'model':<12} {'removal':>8} {'fold':>8} {'total':>8} {'ppl':>12} {'retained%':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.model_id:<12} {r.removal_ratio:>8.4f} {r.fold_ratio:>8.4f} "
                         f"{r.total_ratio:>8.4f} {r.perplexity:>12.4f} {r.retained_pct:>10.2f}")
        return "\n".join(lines)


def compare(reports, ratios):
    """Comparison table: retained % = dense ppl / variant ppl (lower is
    better, inverted), rows sorted by total compression ratio descending.

    `ratios` maps model_id -> (removal_ratio, fold_ratio).
    """
    if len(reports) < 2:
        raise ValueError("compare: at least two reports required")
    corpus_ids = {r.corpus_id for r in reports}
    if len(corpus_ids) != 1:
        raise ValueError(f"compare: mismatched corpora {sorted(corpus_ids)}")
    if (len({r.seq_len for r in reports})) != 1:
        raise ValueError("compare: mismatched seq_len across reports")
    dense = min(reports, key=lambda r: sum(ratios.get(r.model_id, (0.0, 0.0))))
    rows = []
    for r in reports:
        rem, fld = ratios.get(r.model_id, (0.0, 0.0))
        rows.append(ComparisonRow(
            model_id=r.model_id, removal_ratio=rem, fold_ratio=fld, total_ratio=rem + fld,
            perplexity=r.perplexity,
            retained_pct=100.0 * dense.perplexity / r.perplexity))
    rows.sort(key=lambda r: (-r.total_ratio, r.model_id))
    return ComparisonTable(rows=rows, corpus_id=corpus_ids.pop())
