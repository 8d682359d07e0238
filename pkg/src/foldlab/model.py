"""Decoder-only toy transformer: pre-norm residual blocks with a fused QKV
projection, an output projection, and a two-layer GELU FFN (4 dense layers
per block). Learned absolute positions, RMS norms, no biases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import sample_batch
from .optim import Adam


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size) < 1:
            raise ValueError("all config extents must be >= 1")
        if self.max_seq < 2:
            raise ValueError(f"max_seq must be >= 2, got {self.max_seq}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {
            "n_layers": self.n_layers, "d_model": self.d_model, "n_heads": self.n_heads,
            "d_ff": self.d_ff, "vocab_size": self.vocab_size, "max_seq": self.max_seq,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class BlockWeights:
    """One block's parameters: exactly 4 dense layers plus 2 norm scales.

    Dense layers are stored input-major, i.e. y = x @ W with W of shape
    (d_in, d_out); output-channel scaling therefore scales columns.
    """

    qkv: T.Tensor   # (d, 3d)
    o: T.Tensor     # (d, d)
    up: T.Tensor    # (d, d_ff)
    down: T.Tensor  # (d_ff, d)
    norm_attn: T.Tensor  # (d,)
    norm_ffn: T.Tensor   # (d,)

    DENSE_NAMES = ("qkv", "o", "up", "down")


def causal_mask(s):
    """Additive mask: 0 on/below the diagonal, -inf above."""
    m = np.zeros((s, s))
    m[np.triu_indices(s, k=1)] = -np.inf
    return m


def attention_forward(x, dense_qkv, dense_o, norm_gain, n_heads, collect=None):
    """Pre-norm causal self-attention branch (residual not included).

    dense_qkv / dense_o are callables so folded child blocks can inject
    scaled shared weights. `collect`, if given, receives the attention
    probabilities and the per-head value tensor.
    """
    b, s, d = x.shape
    hd = d // n_heads
    h = T.rms_norm(x, norm_gain)
    qkv = dense_qkv(h)  # (b, s, 3d)
    q, k, v = (T.narrow(qkv, 2, i * d, d) for i in range(3))

    def heads(t):
        return T.transpose(T.reshape(t, (b, s, n_heads, hd)), (0, 2, 1, 3))

    q, k, v = heads(q), heads(k), heads(v)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    scores = T.add(scores, T.constant(causal_mask(s)))
    probs = T.softmax(scores)  # (b, h, s, s)
    if collect is not None:
        collect["probs"] = probs
        collect["values"] = v
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
    return dense_o(ctx)


def ffn_forward(x, dense_up, dense_down, norm_gain):
    h = T.rms_norm(x, norm_gain)
    return dense_down(T.gelu(dense_up(h)))


def _plain(w):
    return lambda x: T.matmul(x, w)


def block_forward(x, weights, n_heads, collect=None):
    """X_att = X + Attention(norm(X)); X_next = X_att + FFN(norm(X_att))."""
    x = T.as_tensor(x)
    x_att = T.add(x, attention_forward(x, _plain(weights.qkv), _plain(weights.o),
                                       weights.norm_attn, n_heads, collect))
    return T.add(x_att, ffn_forward(x_att, _plain(weights.up), _plain(weights.down),
                                    weights.norm_ffn))


def init_params(config):
    """Deterministic parameter initialization from config.seed."""
    rng = np.random.default_rng(config.seed)
    d, dff, v, s = config.d_model, config.d_ff, config.vocab_size, config.max_seq
    resid_std = 0.02 / np.sqrt(2 * config.n_layers)

    def normal(shape, std=0.02):
        return T.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    params = {
        "tok_emb": normal((v, d)),
        "pos_emb": normal((s, d)),
    }
    for i in range(config.n_layers):
        params[f"block{i}.qkv"] = normal((d, 3 * d))
        params[f"block{i}.o"] = normal((d, d), std=resid_std)
        params[f"block{i}.up"] = normal((d, dff))
        params[f"block{i}.down"] = normal((dff, d), std=resid_std)
        params[f"block{i}.norm_attn"] = T.Tensor(np.ones(d), requires_grad=True)
        params[f"block{i}.norm_ffn"] = T.Tensor(np.ones(d), requires_grad=True)
    params["norm_final"] = T.Tensor(np.ones(d), requires_grad=True)
    params["head"] = normal((d, v))
    return params


class DenseModel:
    """The trainable toy transformer over a named parameter store."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config):
        return cls(config, init_params(config))

    def frozen(self):
        """Same weights, gradients disabled (cheap evaluation view)."""
        frozen = {k: T.Tensor(t.data) for k, t in self.params.items()}
        return DenseModel(self.config, frozen)

    def copy(self):
        return DenseModel(self.config,
                          {k: T.Tensor(t.data.copy(), requires_grad=t.requires_grad)
                           for k, t in self.params.items()})

    def block_weights(self, i):
        p = self.params
        return BlockWeights(p[f"block{i}.qkv"], p[f"block{i}.o"], p[f"block{i}.up"],
                            p[f"block{i}.down"], p[f"block{i}.norm_attn"], p[f"block{i}.norm_ffn"])

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"token batch must be 2-d, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_seq:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq {self.config.max_seq}")
        bad = (ids < 0) | (ids >= self.config.vocab_size)
        if bad.any():
            pos = tuple(int(x) for x in np.argwhere(bad)[0])
            raise ValueError(f"token id out of range at position {pos}")
        return ids

    def embed(self, ids):
        s = ids.shape[1]
        tok = T.embedding(self.params["tok_emb"], ids)
        pos = T.narrow(self.params["pos_emb"], 0, 0, s)
        return T.add(tok, pos)

    def logits_from_hidden(self, x):
        return T.matmul(T.rms_norm(x, self.params["norm_final"]), self.params["head"])

    def forward(self, ids, collect_last_attn=False):
        ids = self._check_ids(ids)
        x = self.embed(ids)
        sig = None
        for i in range(self.config.n_layers):
            collect = {} if (collect_last_attn and i == self.config.n_layers - 1) else None
            x = block_forward(x, self.block_weights(i), self.config.n_heads, collect)
            if collect is not None:
                sig = collect
        logits = self.logits_from_hidden(x)
        return (logits, sig) if collect_last_attn else logits

    def forward_collect(self, ids):
        """Logits plus all per-block hidden states [X^0 .. X^L]."""
        ids = self._check_ids(ids)
        x = self.embed(ids)
        hidden = [x]
        for i in range(self.config.n_layers):
            x = block_forward(x, self.block_weights(i), self.config.n_heads)
            hidden.append(x)
        return self.logits_from_hidden(x), hidden

    def loss(self, inputs, targets):
        logits = self.forward(inputs)
        n, v = logits.shape[0] * logits.shape[1], logits.shape[2]
        return T.cross_entropy(T.reshape(logits, (n, v)), np.asarray(targets).reshape(-1))


def train_base(config, tokens, steps, lr=1.5e-3, batch_size=8, seq_len=None, seed=None):
    """Train a fresh model from scratch; returns (model, per-step losses)."""
    seq_len = seq_len or config.max_seq
    seed = config.seed if seed is None else seed
    model = DenseModel.init(config)
    opt = Adam(model.params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    losses = []
    for step in range(steps):
        x, y = sample_batch(tokens, batch_size, seq_len, rng)
        loss = model.loss(x, y)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")
        grads = {name: g for name, g in zip(
            model.params, T.grad_of(loss, list(model.params.values())))}
        opt.step(grads)
        losses.append(loss.item())
    return model, losses
