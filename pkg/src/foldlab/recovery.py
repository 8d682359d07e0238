"""Accuracy recovery after removal and folding: low-rank adapters on parent
dense layers, trainable child scales and norms, and last-block distillation
(attention distributions and value relations) from the dense teacher."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import windows
from .fold import SCALE_PARTS, layer_dims
from .optim import AdamW


@dataclass
class RecoveryConfig:
    lr: float = 1e-5
    warmup_steps: int = 100
    batch_size: int = 32
    epochs: int = 2
    lambda_distill: float = 1e-5
    lora_rank: int = 8
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    freeze_child_norms: bool = False  # ablation switch for the norm re-adaptation study

    def __post_init__(self):
        for name in ("lr", "warmup_steps", "batch_size", "epochs", "lambda_distill", "lora_rank"):
            if getattr(self, name) < 0:
                raise ValueError(f"RecoveryConfig.{name} must be non-negative")


def attach_lora(folded, rank=8, seed=0):
    """Attach one zero-initialized adapter per parent dense layer, in place.

    Down projections get a small Gaussian init, up projections start at
    zero, so the model's outputs are unchanged until training moves them.
    """
    if rank < 1:
        raise ValueError(f"attach_lora: rank must be >= 1, got {rank}")
    dims = layer_dims(folded.config)
    rng = np.random.default_rng(seed)
    parents = sorted({p for j, p in enumerate(folded.parent_of) if p != j})
    for p in parents:
        for part in SCALE_PARTS:
            d_in, d_out = dims[part]
            if rank >= min(d_in, d_out):
                raise ValueError(
                    f"attach_lora: rank {rank} >= min(d_in, d_out) = {min(d_in, d_out)} for {part}")
            folded.params[f"block{p}.{part}.lora_down"] = T.Tensor(
                rng.normal(0.0, 0.02, size=(d_in, rank)), requires_grad=True)
            folded.params[f"block{p}.{part}.lora_up"] = T.Tensor(
                np.zeros((rank, d_out)), requires_grad=True)
    return folded


def select_trainable(folded):
    """Recovery trains only: adapter factors, child scale vectors, child norm
    scales. Everything else stays frozen."""
    names = []
    for name in folded.params:
        if "lora" in name:
            names.append(name)
        elif ".scale_" in name:
            names.append(name)
        elif name.startswith("slot") and "norm" in name:
            slot = int(name[4:].split(".")[0])
            if slot in folded.child_set:
                names.append(name)
    return names


# ---------------------------------------------------------------------------
# distillation signals
# ---------------------------------------------------------------------------


def value_relation(v):
    """Row-softmax of V V^T / sqrt(d_head) per head; v is (b, h, s, hd)."""
    hd = v.shape[-1]
    rel = T.scale(T.matmul(v, T.transpose(v, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    return T.softmax(rel)


def last_block_signals(model, ids):
    """(attention distributions, value relations) of the final block."""
    logits, sig = model.forward(ids, collect_last_attn=True)
    return logits, sig["probs"], value_relation(sig["values"])


def distill_losses(teacher, student, ids):
    """(L_AT, L_VR): mean-over-rows KL(teacher || student) at the final block."""
    _, at_t, vr_t = last_block_signals(teacher.frozen(), ids)
    _, at_s, vr_s = last_block_signals(student.frozen(), ids)
    if at_t.shape != at_s.shape or vr_t.shape != vr_s.shape:
        raise ValueError(
            f"distill_losses: signal shapes differ, {at_t.shape} vs {at_s.shape}")
    return T.kl_rows(at_t.data, at_s).item(), T.kl_rows(vr_t.data, vr_s).item()


# ---------------------------------------------------------------------------
# recovery training
# ---------------------------------------------------------------------------


@dataclass
class RecoveryResult:
    trace: list = field(default_factory=list)  # (step, ce, l_at, l_vr, lr)
    ppl_before: float = float("nan")
    ppl_after: float = float("nan")


def recover_train(folded, teacher, tokens, config, eval_tokens=None, seq_len=None):
    """LoRA + scale + child-norm fine-tuning with tail-block distillation.

    Loss: cross-entropy + lambda_distill * (L_AT + L_VR). AdamW with linear
    warmup then constant lr; exactly config.epochs passes over the
    non-overlapping window set, deterministically shuffled per epoch."""
    from .evaluate import perplexity

    seq_len = seq_len or min(folded.config.max_seq, 64)
    if not folded.has_lora():
        attach_lora(folded, rank=config.lora_rank, seed=config.seed)
    trainable = select_trainable(folded)
    if config.freeze_child_norms:
        trainable = [n for n in trainable if not ("norm" in n and n.startswith("slot"))]
    train_params = {n: folded.params[n] for n in trainable}
    opt = AdamW(train_params, lr=config.lr, betas=config.betas,
                eps=config.adam_eps, weight_decay=config.weight_decay)
    teacher = teacher.frozen()

    result = RecoveryResult()
    if eval_tokens is not None:
        result.ppl_before = perplexity(folded, eval_tokens, seq_len, model_id="pre").perplexity

    xs, ys = windows(tokens, seq_len)
    rng = np.random.default_rng(config.seed)
    step = 0
    for _epoch in range(config.epochs):
        order = rng.permutation(len(xs))
        for lo in range(0, len(order) - config.batch_size + 1, config.batch_size):
            batch = order[lo : lo + config.batch_size]
            x, y = xs[batch], ys[batch]
            lr = config.lr * min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps else config.lr

            logits, sig = folded.forward(x, collect_last_attn=True)
            n, v = logits.shape[0] * logits.shape[1], logits.shape[2]
            ce = T.cross_entropy(T.reshape(logits, (n, v)), y.reshape(-1))
            if config.lambda_distill > 0:
                _, at_t, vr_t = last_block_signals(teacher, x)
                at_s, vr_s = sig["probs"], value_relation(sig["values"])
                l_at = T.kl_rows(at_t.data, at_s)
                l_vr = T.kl_rows(vr_t.data, vr_s)
                loss = T.add(ce, T.scale(T.add(l_at, l_vr), config.lambda_distill))
                at_val, vr_val = l_at.item(), l_vr.item()
            else:
                loss = ce
                at_val = vr_val = 0.0
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"recover_train: non-finite loss at step {step}")
            grads = dict(zip(train_params,
                             T.grad_of(loss, list(train_params.values()))))
            opt.step(grads, lr=lr)
            result.trace.append((step, ce.item(), at_val, vr_val, lr))
            step += 1

    if eval_tokens is not None:
        result.ppl_after = perplexity(folded, eval_tokens, seq_len, model_id="post").perplexity
    return result


def trace_to_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ce_loss", "l_at", "l_vr", "lr"])
        for row in trace:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
