"""Grouped parameter sharing: fold plans over retained blocks, parent/child
weight sharing with per-output-channel scales, and parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import DenseModel, ModelConfig, attention_forward, ffn_forward

SCALE_PARTS = ("qkv", "o", "up", "down")


def layer_dims(config):
    d, dff = config.d_model, config.d_ff
    return {"qkv": (d, 3 * d), "o": (d, d), "up": (d, dff), "down": (dff, d)}


def dense_params_per_block(config):
    return sum(di * do for di, do in layer_dims(config).values())


def scale_params_per_child(config):
    return sum(do for _, do in layer_dims(config).values())


@dataclass
class FoldPlan:
    """Removal bookkeeping plus parent/child groups in retained-block order.

    Group indices refer to the pruned model's block order; the parent is
    always the first, lowest-index member and members are consecutive.
    """

    removed: list = field(default_factory=list)   # original block indices
    groups: list = field(default_factory=list)    # (parent, [children...])
    group_size: int = 2

    def validate(self, n_blocks):
        seen = set()
        for parent, children in self.groups:
            members = [parent] + list(children)
            if members != list(range(parent, parent + len(members))):
                raise ValueError(f"fold group {members} is not consecutive from its parent")
            if members[-1] >= n_blocks:
                raise ValueError(f"fold group {members} exceeds the {n_blocks} retained blocks")
            if seen & set(members):
                raise ValueError(f"fold group {members} overlaps another group")
            seen |= set(members)

    def child_slots(self):
        return sorted(c for _, children in self.groups for c in children)

    def to_dict(self):
        return {"removed": self.removed,
                "groups": [[p, list(c)] for p, c in self.groups],
                "group_size": self.group_size}

    @classmethod
    def from_dict(cls, d):
        return cls(removed=d["removed"], groups=[(p, list(c)) for p, c in d["groups"]],
                   group_size=d["group_size"])


def plan_fold(profile, removal_report, fold_ratio, group_size, config):
    """Greedy non-overlapping window selection by group similarity.

    Windows are `group_size` consecutive retained blocks scored by
    cos(X^start, X^{start+group_size}); highest similarity first, ties to
    the lower start index, until the converted child dense-parameter
    fraction (relative to the original model's block parameters) reaches
    fold_ratio.
    """
    if not 0.0 <= fold_ratio < 1.0:
        raise ValueError(f"plan_fold: fold_ratio {fold_ratio} outside [0, 1)")
    if group_size < 2:
        raise ValueError(f"plan_fold: group_size must be >= 2, got {group_size}")
    base_layers = len(removal_report.block_scores)
    per_block = dense_params_per_block(config) + 2 * config.d_model
    base_total = base_layers * per_block
    child_cost = (group_size - 1) * dense_params_per_block(config)

    plan = FoldPlan(removed=list(removal_report.removed), group_size=group_size)
    if fold_ratio == 0.0:
        return plan

    n_retained = base_layers - len(removal_report.removed)
    candidates = []
    for start in range(0, n_retained - group_size + 1):
        vec = profile.group_from_start.get(start)
        if vec is None or len(vec) < group_size:
            raise ValueError(f"plan_fold: profile lacks group curve for start {start}")
        candidates.append((start, float(vec[group_size - 1])))
    candidates.sort(key=lambda sc: (-sc[1], sc[0]))

    taken = set()
    converted = 0
    for start, _score in candidates:
        if converted / base_total >= fold_ratio:
            break
        members = set(range(start, start + group_size))
        if members & taken:
            continue
        taken |= members
        plan.groups.append((start, list(range(start + 1, start + group_size))))
        converted += child_cost
    if converted / base_total < fold_ratio:
        raise ValueError(
            f"plan_fold: fold_ratio {fold_ratio} infeasible with {n_retained} retained "
            f"blocks; maximum feasible is {converted / base_total:.4f}")
    plan.groups.sort(key=lambda g: g[0])
    return plan


def apply_shared_dense(x, w, scale=None, lora=None, bias=None):
    """Shared dense layer in fused tail form: scale * ((W + dW) @ x) + B.

    The low-rank update, when present, is applied as two thin matmuls; the
    per-output-channel scale multiplies after the matmul, which is exactly
    equivalent to materializing the row-scaled weight matrix.
    """
    if scale is not None and scale.shape != (w.shape[1],):
        raise ValueError(f"scale length {scale.shape} does not match layer d_out {w.shape[1]}")
    y = T.matmul(x, w)
    if lora is not None:
        down, up = lora
        y = T.add(y, T.matmul(T.matmul(x, down), up))
    if scale is not None:
        y = T.mul(y, scale)
    if bias is not None:
        y = T.add(y, bias)
    return y


class FoldedModel:
    """Retained blocks with shared parent dense storage.

    Child slots own no dense weights: every dense access resolves through
    `parent_of` to the parent slot's arrays, scaled by the child's
    per-output-channel vectors. Norm scales are per slot.
    """

    def __init__(self, config, params, plan, parent_of, base_layers):
        self.config = config
        self.params = params
        self.plan = plan
        self.parent_of = parent_of
        self.base_layers = base_layers

    @property
    def child_set(self):
        return {j for j, p in enumerate(self.parent_of) if p != j}

    def frozen(self):
        frozen = {k: T.Tensor(t.data) for k, t in self.params.items()}
        return FoldedModel(self.config, frozen, self.plan, self.parent_of, self.base_layers)

    def copy(self):
        params = {k: T.Tensor(t.data.copy(), requires_grad=t.requires_grad)
                  for k, t in self.params.items()}
        return FoldedModel(self.config, params, self.plan, self.parent_of, self.base_layers)

    def has_lora(self):
        return any(k.endswith(".lora_down") for k in self.params)

    def _dense(self, slot, part):
        """Callable computing the slot's dense layer through shared storage."""
        p = self.parent_of[slot]
        w = self.params[f"block{p}.{part}"]
        lora_key = f"block{p}.{part}.lora_down"
        lora = None
        if lora_key in self.params:
            lora = (self.params[lora_key], self.params[f"block{p}.{part}.lora_up"])
        scale = self.params[f"slot{slot}.scale_{part}"] if slot in self.child_set else None
        return lambda x: apply_shared_dense(x, w, scale=scale, lora=lora)

    def _check_ids(self, ids):
        return DenseModel._check_ids(self, ids)

    def embed(self, ids):
        return DenseModel.embed(self, ids)

    def logits_from_hidden(self, x):
        return DenseModel.logits_from_hidden(self, x)

    def forward(self, ids, collect_last_attn=False):
        ids = self._check_ids(ids)
        x = self.embed(ids)
        sig = None
        for j in range(self.config.n_layers):
            collect = {} if (collect_last_attn and j == self.config.n_layers - 1) else None
            att = attention_forward(x, self._dense(j, "qkv"), self._dense(j, "o"),
                                    self.params[f"slot{j}.norm_attn"], self.config.n_heads,
                                    collect)
            x = T.add(x, att)
            x = T.add(x, ffn_forward(x, self._dense(j, "up"), self._dense(j, "down"),
                                     self.params[f"slot{j}.norm_ffn"]))
            if collect is not None:
                sig = collect
        logits = self.logits_from_hidden(x)
        return (logits, sig) if collect_last_attn else logits

    def loss(self, inputs, targets):
        logits = self.forward(inputs)
        n, v = logits.shape[0] * logits.shape[1], logits.shape[2]
        return T.cross_entropy(T.reshape(logits, (n, v)), np.asarray(targets).reshape(-1))


def apply_fold(model, plan):
    """Convert a pruned dense model into parent/child shared-weight form.

    Parent dense storage is shared; child scales start at ones (identity
    fold) and child norm scales are copied from the child's own original
    block, ready for re-adaptation."""
    L = model.config.n_layers
    plan.validate(L)
    children = set(plan.child_slots())
    parent_of = list(range(L))
    for parent, kids in plan.groups:
        for c in kids:
            parent_of[c] = parent

    dims = layer_dims(model.config)
    params = {}
    for name in ("tok_emb", "pos_emb", "norm_final", "head"):
        params[name] = T.Tensor(model.params[name].data.copy(), requires_grad=True)
    for j in range(L):
        if parent_of[j] == j:
            for part in SCALE_PARTS:
                params[f"block{j}.{part}"] = T.Tensor(
                    model.params[f"block{j}.{part}"].data.copy(), requires_grad=True)
        else:
            for part in SCALE_PARTS:
                params[f"slot{j}.scale_{part}"] = T.Tensor(
                    np.ones(dims[part][1]), requires_grad=True)
        for part in ("norm_attn", "norm_ffn"):
            params[f"slot{j}.{part}"] = T.Tensor(
                model.params[f"block{j}.{part}"].data.copy(), requires_grad=True)
    return FoldedModel(model.config, params, plan, parent_of, base_layers=L + len(plan.removed))


def realized_fold_ratio(plan, config, base_layers):
    """Gross fraction of the dense base's block parameters converted to
    shared (child) form by this plan."""
    per_block = dense_params_per_block(config) + 2 * config.d_model
    return len(plan.child_slots()) * dense_params_per_block(config) / (base_layers * per_block)


def folded_to_checkpoint(model, vocab="", extra=None):
    from .checkpoint import CheckpointData

    meta = {"plan": model.plan.to_dict(), "parent_of": model.parent_of,
            "base_layers": model.base_layers}
    meta.update(extra or {})
    return CheckpointData(kind="folded", config=model.config.to_dict(),
                          arrays={k: t.data for k, t in model.params.items()},
                          vocab=vocab, extra=meta)


def folded_from_checkpoint(ckpt):
    if ckpt.kind != "folded":
        raise ValueError(f"expected a folded checkpoint, got kind {ckpt.kind!r}")
    params = {k: T.Tensor(a.copy(), requires_grad=True) for k, a in ckpt.arrays.items()}
    return FoldedModel(ModelConfig.from_dict(ckpt.config), params,
                       FoldPlan.from_dict(ckpt.extra["plan"]),
                       list(ckpt.extra["parent_of"]), ckpt.extra["base_layers"])


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamEntry:
    name: str
    shape: tuple
    count: int
    trainable: bool


@dataclass
class ParamManifest:
    entries: list
    totals: dict            # category -> stored parameter count
    total: int
    block_total: int        # stored block-side parameters (dense + scales + norms + adapters)
    base_block_total: int   # block parameters of the dense base model
    compression_ratio: float  # fraction of base block parameters eliminated

    def to_dict(self):
        return {"entries": [[e.name, list(e.shape), e.count, e.trainable] for e in self.entries],
                "totals": self.totals, "total": self.total,
                "block_total": self.block_total, "base_block_total": self.base_block_total,
                "compression_ratio": self.compression_ratio}


def _category(name):
    if name in ("tok_emb", "pos_emb", "head"):
        return "embed_head"
    if "lora" in name:
        return "adapters"
    if ".scale_" in name:
        return "child_scales"
    if "norm" in name:
        return "norms"
    return "shared_dense"


def count_params(model, trainable_names=None):
    """Exact enumeration of every stored array, with category totals and the
    realized compression ratio over the dense base's block parameters."""
    cfg = model.config
    base_layers = getattr(model, "base_layers", cfg.n_layers)
    base_block_total = base_layers * (dense_params_per_block(cfg) + 2 * cfg.d_model)

    if trainable_names is None:
        if isinstance(model, FoldedModel):
            from .recovery import select_trainable

            trainable_names = set(select_trainable(model))
        else:
            trainable_names = set(model.params)

    entries = []
    totals = {}
    block_total = 0
    for name, t in model.params.items():
        count = int(np.prod(t.shape)) if t.shape else 1
        cat = _category(name)
        totals[cat] = totals.get(cat, 0) + count
        if cat != "embed_head" and name != "norm_final":
            block_total += count
        entries.append(ParamEntry(name, t.shape, count, name in trainable_names))
    total = sum(e.count for e in entries)
    ratio = (base_block_total - block_total) / base_block_total
    return ParamManifest(entries=entries, totals=totals, total=total,
                         block_total=block_total, base_block_total=base_block_total,
                         compression_ratio=ratio)
