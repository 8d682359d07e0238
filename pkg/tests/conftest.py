import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

import foldlab.checkpoint as ck
from foldlab.corpus import CharVocab, load_corpus, split_tokens, windows
from foldlab.model import ModelConfig, train_base

DATA = Path(__file__).resolve().parent.parent / "data" / "sample_corpus.txt"
CACHE = Path(os.environ.get("FOLDLAB_TEST_CACHE",
                            Path.home() / ".cache" / "foldlab-tests"))

# shared desk-scale test model: deep enough for removal + folding, trains in
# a couple of minutes on CPU
TEST_CONFIG = dict(n_layers=12, d_model=48, n_heads=4, d_ff=192, max_seq=64, seed=0)
TRAIN_STEPS = 700
EVAL_SEQ = 64


@pytest.fixture(scope="session")
def corpus():
    """(vocab, train_tokens, held_out_tokens) for the bundled sample corpus."""
    text = load_corpus(DATA)
    vocab = CharVocab.from_text(text)
    tokens = vocab.encode(text)
    tr, ho = split_tokens(tokens)
    return vocab, tr, ho


def _cached_train(cfg, tokens, steps, tag):
    CACHE.mkdir(parents=True, exist_ok=True)
    key = hashlib.sha256(f"{cfg}|{steps}|{tag}|v1".encode()).hexdigest()[:16]
    path = CACHE / f"{tag}-{key}.bin"
    if path.exists():
        ckpt = ck.load_checkpoint(path)
        return ck.dense_from_checkpoint(ckpt), ckpt.extra["losses"]
    model, losses = train_base(cfg, tokens, steps=steps, batch_size=6, seq_len=64)
    ck.save_checkpoint(path, ck.dense_to_checkpoint(model, extra={"losses": losses}))
    return model, losses


@pytest.fixture(scope="session")
def trained(corpus):
    """(model, loss trace): the 12-layer toy model trained on the sample corpus."""
    vocab, tr, _ = corpus
    cfg = ModelConfig(vocab_size=len(vocab), **TEST_CONFIG)
    return _cached_train(cfg, tr, TRAIN_STEPS, "base")


@pytest.fixture(scope="session")
def trained_model(trained):
    return trained[0]


PLANTED_BLOCK = 6


@pytest.fixture(scope="session")
def planted_model(trained_model):
    """Trained model with one block forced to near-identity (planted redundancy)."""
    model = trained_model.copy()
    for part in ("o", "down"):
        model.params[f"block{PLANTED_BLOCK}.{part}"].data *= 1e-3
    return model


@pytest.fixture(scope="session")
def eval_batches(corpus):
    _, _, ho = corpus
    xs, _ = windows(ho, EVAL_SEQ)
    return [xs[i : i + 4] for i in range(0, 16, 4)]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
