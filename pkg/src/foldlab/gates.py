"""Learnable gated block removal: smoothed-L0 gate function, gated forward,
FLOPs-penalized training of the gate parameters with eps annealing, and
importance ranking / block removal."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import DenseModel, attention_forward, block_forward, ffn_forward, _plain
from .corpus import sample_batch
from .optim import SGDMomentum

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# gate function
# ---------------------------------------------------------------------------


def gate_forward(x, eps):
    """g(x) = x^2 / (x^2 + eps); values in [0, 1), even in x, g(0) = 0."""
    if eps <= 0:
        raise ValueError(f"gate_forward: eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    out = x**2 / (x**2 + eps)
    return float(out) if out.ndim == 0 else out


def gate_backward(x, eps, exact=True):
    """Derivative of the gate.

    exact=True is the analytic derivative 2*x*eps / (x^2 + eps)^2.
    exact=False is the modified rule 2*x*eps / (x^2 + eps) kept behind this
    flag for comparison runs; it is not the derivative of gate_forward.
    """
    if eps <= 0:
        raise ValueError(f"gate_backward: eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    denom = x**2 + eps
    out = 2.0 * x * eps / (denom**2 if exact else denom)
    return float(out) if out.ndim == 0 else out


def gate_init_alpha(eps0, g0=0.95):
    """Alpha with g(alpha, eps0) = g0: start near the identity-of-training regime."""
    return float(np.sqrt(g0 / (1.0 - g0) * eps0))


@dataclass
class GateSet:
    """L x 2 gate parameters (ATT, FFN per block) plus the eps schedule state."""

    alpha: np.ndarray
    eps0: float = 0.1
    decay: float = 0.97
    decay_interval: int = 120
    step: int = 0

    @classmethod
    def init(cls, n_layers, eps0=0.1, decay=0.97, decay_interval=120):
        a = np.full((n_layers, 2), gate_init_alpha(eps0))
        return cls(alpha=a, eps0=eps0, decay=decay, decay_interval=decay_interval)

    @property
    def eps(self):
        return self.eps0 * self.decay ** (self.step // self.decay_interval)

    def gate_values(self):
        return gate_forward(self.alpha, self.eps)

    def to_dict(self):
        return {"alpha": self.alpha.tolist(), "eps0": self.eps0, "decay": self.decay,
                "decay_interval": self.decay_interval, "step": self.step}

    @classmethod
    def from_dict(cls, d):
        return cls(alpha=np.array(d["alpha"]), eps0=d["eps0"], decay=d["decay"],
                   decay_interval=d["decay_interval"], step=d["step"])


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockFlops:
    s_att: float
    s_ffn: float

    @property
    def total(self):
        return self.s_att + self.s_ffn


def flops_of_block(config, seq_len=None):
    """Multiply-add counted as 2 FLOPs. Attention: QKV + output projections
    (8*s*d^2) plus score and weighted-sum matmuls (4*s^2*d); FFN: the two
    projections (4*s*d*d_ff)."""
    s = seq_len or config.max_seq
    d, dff = config.d_model, config.d_ff
    return BlockFlops(s_att=8.0 * s * d * d + 4.0 * s * s * d, s_ffn=4.0 * s * d * dff)


# ---------------------------------------------------------------------------
# gated forward
# ---------------------------------------------------------------------------


def gated_block_forward(x, weights, g1, g2, n_heads):
    """Gate-interpolated block: g = 0 is the exact identity, g = 1 the
    original block. (1-g)*X + g*(X + branch(X)) simplifies to X + g*branch."""
    for name, g in (("g1", g1), ("g2", g2)):
        if not 0.0 <= float(g) <= 1.0:
            raise ValueError(f"gated_block_forward: {name}={float(g)} outside [0, 1]")
    x = T.as_tensor(x)
    att = attention_forward(x, _plain(weights.qkv), _plain(weights.o),
                            weights.norm_attn, n_heads)
    x_att = T.add(x, att if float(g1) == 1.0 else T.scale(att, float(g1)))
    ffn = ffn_forward(x_att, _plain(weights.up), _plain(weights.down), weights.norm_ffn)
    return T.add(x_att, ffn if float(g2) == 1.0 else T.scale(ffn, float(g2)))


def _gated_model_loss(model, alpha_t, eps, inputs, targets, exact_grad=True):
    """Cross-entropy of the gated model with gates g(alpha) on the tape."""
    gates = T.gate(alpha_t, eps, exact_grad=exact_grad)  # (L, 2)
    x = model.embed(np.asarray(inputs))
    for i in range(model.config.n_layers):
        w = model.block_weights(i)
        g1 = T.reshape(T.narrow(T.narrow(gates, 0, i, 1), 1, 0, 1), ())
        g2 = T.reshape(T.narrow(T.narrow(gates, 0, i, 1), 1, 1, 1), ())
        att = attention_forward(x, _plain(w.qkv), _plain(w.o), w.norm_attn, model.config.n_heads)
        x = T.add(x, T.mul(g1, att))
        ffn = ffn_forward(x, _plain(w.up), _plain(w.down), w.norm_ffn)
        x = T.add(x, T.mul(g2, ffn))
    logits = model.logits_from_hidden(x)
    n, v = logits.shape[0] * logits.shape[1], logits.shape[2]
    ce = T.cross_entropy(T.reshape(logits, (n, v)), np.asarray(targets).reshape(-1))
    return ce, gates


# ---------------------------------------------------------------------------
# importance, removal
# ---------------------------------------------------------------------------


@dataclass
class RemovalReport:
    block_scores: np.ndarray
    ranking: list
    removed: list = field(default_factory=list)
    realized_ratio: float = 0.0

    def to_dict(self):
        return {"block_scores": self.block_scores.tolist(), "ranking": self.ranking,
                "removed": self.removed, "realized_ratio": self.realized_ratio}

    @classmethod
    def from_dict(cls, d):
        return cls(block_scores=np.array(d["block_scores"]), ranking=d["ranking"],
                   removed=d["removed"], realized_ratio=d["realized_ratio"])


def block_scores(gate_values, flops):
    """FLOPs-weighted mean of the two sub-module gates per block."""
    g = np.asarray(gate_values)
    return (g[:, 0] * flops.s_att + g[:, 1] * flops.s_ffn) / flops.total


def _rank(scores):
    from .profiler import rank_ascending

    return rank_ascending(scores)


def block_param_count(config):
    d, dff = config.d_model, config.d_ff
    return 4 * d * d + 2 * d * dff + 2 * d  # 4 dense layers + 2 norm scales


def remove_blocks(model, scores, ratio):
    """Remove whole blocks in ascending score order until the removed
    block-parameter fraction reaches `ratio`; at least one block remains."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"remove_blocks: ratio {ratio} outside [0, 1)")
    L = model.config.n_layers
    scores = np.asarray(scores, dtype=np.float64)
    ranking = _rank(scores)
    per_block = block_param_count(model.config)
    total = per_block * L
    removed = []
    realized = 0.0
    for idx in ranking:
        if realized >= ratio or len(removed) == L - 1:
            break
        removed.append(idx)
        realized = len(removed) * per_block / total
    if ratio > 0 and realized < ratio and len(removed) == L - 1:
        log.warning("remove_blocks: capped at %d removed blocks (ratio %.3f < requested %.3f)",
                    len(removed), realized, ratio)
    if len(removed) >= L:
        raise ValueError("remove_blocks: ratio would leave zero blocks")
    keep = [i for i in range(L) if i not in removed]
    if not keep:
        raise ValueError("remove_blocks: ratio would leave zero blocks")

    cfg = model.config
    new_cfg = type(cfg)(n_layers=len(keep), d_model=cfg.d_model, n_heads=cfg.n_heads,
                        d_ff=cfg.d_ff, vocab_size=cfg.vocab_size, max_seq=cfg.max_seq,
                        seed=cfg.seed)
    params = {}
    for name in ("tok_emb", "pos_emb", "norm_final", "head"):
        params[name] = T.Tensor(model.params[name].data.copy(), requires_grad=True)
    for new_i, old_i in enumerate(keep):
        for part in ("qkv", "o", "up", "down", "norm_attn", "norm_ffn"):
            params[f"block{new_i}.{part}"] = T.Tensor(
                model.params[f"block{old_i}.{part}"].data.copy(), requires_grad=True)
    report = RemovalReport(block_scores=scores, ranking=ranking,
                           removed=sorted(removed), realized_ratio=realized)
    return DenseModel(new_cfg, params), report


def rank_and_remove(model, gate_set, ratio, flops=None):
    """Removal driven by trained gate values (the model itself carries no gates)."""
    flops = flops or flops_of_block(model.config)
    scores = block_scores(gate_set.gate_values(), flops)
    return remove_blocks(model, scores, ratio)


# ---------------------------------------------------------------------------
# gate training
# ---------------------------------------------------------------------------


@dataclass
class GateTrainResult:
    gate_set: GateSet
    trajectory: list          # (step, eps, gate values (L,2)) per step
    report: RemovalReport
    lambda_resource: float
    losses: list


def train_gates(model, tokens, lambda_resource=None, steps=1000, seed=0,
                batch_size=4, seq_len=None, lr=0.05, momentum=0.9,
                eps0=0.1, decay=0.97, decay_interval=120, exact_grad=True,
                escalation=2.0):
    """Train only the gate parameters of a frozen model.

    lambda_resource=None auto-balances the penalty so that at
    initialization it equals the initial task loss.

    A constant penalty cannot polarize every gate: a gate whose task-loss
    slope crosses the penalty level settles at a stable interior value.
    So the pressure adapts: at each eps-decay boundary, a gate still in the
    indecisive band (0.1, 0.9) is committed toward its nearer pole. Below
    0.5 its penalty weight grows by `escalation`; at or above 0.5 the weight
    flips sign (an opening bonus, needed because the task loss alone may
    peak inside the band) and then grows the same way. Decisive gates keep
    whatever pressure they last had.
    """
    if lambda_resource is not None and lambda_resource < 0:
        raise ValueError(f"train_gates: lambda_resource must be >= 0, got {lambda_resource}")
    cfg = model.config
    seq_len = seq_len or min(cfg.max_seq, 64)
    frozen = model.frozen()
    gs = GateSet.init(cfg.n_layers, eps0=eps0, decay=decay, decay_interval=decay_interval)
    alpha_t = T.Tensor(gs.alpha, requires_grad=True)
    flops = flops_of_block(cfg, seq_len=seq_len)
    s_const = np.tile([flops.s_att, flops.s_ffn], (cfg.n_layers, 1))
    rng = np.random.default_rng(seed)

    if lambda_resource is None:
        x0, y0 = sample_batch(tokens, batch_size, seq_len, np.random.default_rng(seed))
        ce0, gates0 = _gated_model_loss(frozen, T.Tensor(gs.alpha), gs.eps, x0, y0)
        lambda_resource = ce0.item() / float((gates0.data * s_const).sum())
        log.info("train_gates: auto lambda_resource = %.3e", lambda_resource)

    opt = SGDMomentum({"alpha": alpha_t}, lr=lr, momentum=momentum)
    lam_gate = np.ones_like(gs.alpha)
    trajectory = []
    losses = []
    for step in range(steps):
        gs.step = step
        if step and step % decay_interval == 0:
            g_now = gate_forward(alpha_t.data, gs.eps)
            lo = (g_now > 0.1) & (g_now < 0.5)
            hi = (g_now >= 0.5) & (g_now < 0.9)
            lam_gate[lo] = np.where(lam_gate[lo] > 0, lam_gate[lo] * escalation, 1.0)
            lam_gate[hi] = np.where(lam_gate[hi] < 0, lam_gate[hi] * escalation, -1.0)
        x, y = sample_batch(tokens, batch_size, seq_len, rng)
        ce, gates = _gated_model_loss(frozen, alpha_t, gs.eps, x, y, exact_grad=exact_grad)
        penalty = T.sum_all(T.mul(gates, T.constant(s_const * lam_gate)))
        loss = T.add(ce, T.scale(penalty, lambda_resource))
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"train_gates: non-finite loss at step {step}")
        (g_alpha,) = T.grad_of(loss, [alpha_t])
        opt.step({"alpha": g_alpha})
        trajectory.append((step, gs.eps, gate_forward(alpha_t.data, gs.eps)))
        losses.append(loss.item())
    gs.alpha = alpha_t.data.copy()
    gs.step = steps - 1 if steps else 0

    scores = block_scores(gs.gate_values(), flops)
    report = RemovalReport(block_scores=scores, ranking=_rank(scores))
    return GateTrainResult(gate_set=gs, trajectory=trajectory, report=report,
                           lambda_resource=lambda_resource, losses=losses)


def trajectory_to_csv(path, trajectory):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_layers = trajectory[0][2].shape[0] if trajectory else 0
        header = ["step", "eps"]
        for i in range(n_layers):
            header += [f"g{i}_att", f"g{i}_ffn"]
        writer.writerow(header)
        for step, eps, g in trajectory:
            writer.writerow([step, repr(eps)] + [repr(v) for v in g.reshape(-1)])
