"""Block redundancy statistics: per-block input/output cosine similarity,
group similarity against a starting block, and the block-influence (BI)
baseline score 1 - cosine."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def cosine(u, v):
    """Cosine similarity with explicit zero-vector conventions.

    Both zero -> 1 (identical); exactly one zero -> 0. Residual-identity
    blocks make the both-zero case reachable, so it is defined, not an
    error.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"cosine: lengths {u.size} and {v.size} differ")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 and nv == 0.0:
        log.info("cosine: both vectors zero, returning 1")
        return 1.0
    if nu == 0.0 or nv == 0.0:
        log.info("cosine: exactly one vector zero, returning 0")
        return 0.0
    return float(u @ v / (nu * nv))


def _mean_token_cosine(a, b):
    """Mean per-token cosine between two (b, s, d) hidden-state arrays."""
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    na = np.linalg.norm(a2, axis=1)
    nb = np.linalg.norm(b2, axis=1)
    both_zero = (na == 0) & (nb == 0)
    one_zero = (na == 0) ^ (nb == 0)
    if both_zero.any() or one_zero.any():
        log.info("cosine: %d both-zero and %d one-zero token pairs",
                 int(both_zero.sum()), int(one_zero.sum()))
    denom = np.where(na * nb == 0, 1.0, na * nb)
    cos = np.einsum("td,td->t", a2, b2) / denom
    cos[both_zero] = 1.0
    cos[one_zero] = 0.0
    return float(cos.sum()), cos.size


@dataclass
class SimilarityProfile:
    per_block: np.ndarray                      # L values: cos(X^i, X^{i+1})
    group_from_start: dict = field(default_factory=dict)  # start k -> cos(X^k, X^{j+1}), j >= k
    sample_count: int = 0

    def to_dict(self):
        return {
            "per_block": self.per_block.tolist(),
            "group_from_start": {str(k): v.tolist() for k, v in self.group_from_start.items()},
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(per_block=np.array(d["per_block"]),
                   group_from_start={int(k): np.array(v) for k, v in d["group_from_start"].items()},
                   sample_count=d["sample_count"])


@dataclass
class BIReport:
    scores: np.ndarray  # 1 - mean cosine, per block
    ranking: list       # block indices, ascending importance

    def to_dict(self):
        return {"scores": self.scores.tolist(), "ranking": self.ranking}


def _collect_states(model, batches):
    frozen = model.frozen()
    for ids in batches:
        _, hidden = frozen.forward_collect(ids)
        yield [h.data for h in hidden]


def profile_blocks(model, batches, group_starts=()):
    """Per-block similarity, optionally with group curves from given starts."""
    batches = list(batches)
    if not batches:
        raise ValueError("profile_blocks: at least one evaluation batch required")
    L = model.config.n_layers
    sums = np.zeros(L)
    group_sums = {k: np.zeros(L - k) for k in group_starts}
    count = 0
    for hidden in _collect_states(model, batches):
        n = 0
        for i in range(L):
            s, n = _mean_token_cosine(hidden[i], hidden[i + 1])
            sums[i] += s
        for k in group_sums:
            for j in range(k, L):
                s, _ = _mean_token_cosine(hidden[k], hidden[j + 1])
                group_sums[k][j - k] += s
        count += n
    return SimilarityProfile(per_block=sums / count,
                             group_from_start={k: v / count for k, v in group_sums.items()},
                             sample_count=count)


def profile_groups(model, batches, start):
    """cos(X^start, X^{j+1}) for j from start to L-1."""
    L = model.config.n_layers
    if not 0 <= start < L:
        raise ValueError(f"profile_groups: start {start} out of range [0, {L})")
    return profile_blocks(model, batches, group_starts=(start,)).group_from_start[start]


def rank_ascending(scores):
    """Indices sorted ascending by score; ties broken by lower index."""
    return [int(i) for i in np.lexsort((np.arange(len(scores)), np.asarray(scores)))]


def compute_bi(model, batches):
    """ShortGPT block influence: 1 - mean input/output cosine, ranked ascending."""
    profile = profile_blocks(model, batches)
    scores = 1.0 - profile.per_block
    return BIReport(scores=scores, ranking=rank_ascending(scores))


def profile_to_csv(path, profile, bi=None):
    """One row per block: index, cos_io, bi, and any group curves present."""
    L = len(profile.per_block)
    starts = sorted(profile.group_from_start)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "cos_io", "bi"] + [f"group_cos_from_{k}" for k in starts])
        for i in range(L):
            row = [i, repr(profile.per_block[i]),
                   repr(bi.scores[i]) if bi is not None else ""]
            for k in starts:
                row.append(repr(profile.group_from_start[k][i - k]) if i >= k else "")
            writer.writerow(row)
