"""Acceptance suite: one test per criterion, each emitting a single
pass/fail line. Criteria 4, 5 and 10 train gates / run recovery on the
shared 12-layer toy model and dominate the runtime."""

import hashlib
import math
import sys

import numpy as np
import pytest

from foldlab import tensor as T
from foldlab.cli import main as cli_main
from foldlab.corpus import synthetic_corpus
from foldlab.evaluate import perplexity
from foldlab.fold import (FoldPlan, apply_fold, apply_shared_dense, count_params,
                          dense_params_per_block, plan_fold, scale_params_per_child)
from foldlab.gates import (gate_backward, gate_forward, gated_block_forward,
                           rank_and_remove, remove_blocks, train_gates)
from foldlab.model import DenseModel, ModelConfig, block_forward
from foldlab.profiler import compute_bi, profile_blocks
from foldlab.recovery import (RecoveryConfig, attach_lora, distill_losses,
                              recover_train, select_trainable)

from conftest import EVAL_SEQ, PLANTED_BLOCK


_CAPMAN = None


@pytest.fixture(autouse=True)
def _stash_capture_manager(request):
    global _CAPMAN
    _CAPMAN = request.config.pluginmanager.getplugin("capturemanager")


def _verdict(num, desc, checks):
    """checks: {name: bool}. Prints one line per criterion, then asserts."""
    failed = [name for name, ok in checks.items() if not ok]
    line = f"[criterion {num:2d}] {'FAIL' if failed else 'PASS'} - {desc}"
    if failed:
        line += f" (failed: {', '.join(failed)})"
    # pytest's fd-level capture swallows even sys.__stdout__; suspend it so
    # the verdict line always reaches the terminal.
    if _CAPMAN is not None:
        with _CAPMAN.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, file=sys.__stdout__, flush=True)
    assert not failed, line


# --- shared expensive artifacts ----------------------------------------------


@pytest.fixture(scope="module")
def gate_runs(trained_model, corpus):
    """Gate training on the trained 12-layer model, 3 seeds."""
    _, tr, _ = corpus
    return [train_gates(trained_model, tr, steps=1000, seed=s) for s in range(3)]


@pytest.fixture(scope="module")
def planted_gate_runs(planted_model, corpus):
    _, tr, _ = corpus
    return [train_gates(planted_model, tr, steps=1000, seed=s) for s in range(3)]


@pytest.fixture(scope="module")
def folded_pipeline(trained_model, gate_runs, corpus, eval_batches):
    """25% removal (gate ranking) + one folded group of 2, plus the pruned
    model's similarity profile used to plan the fold."""
    pruned, report = rank_and_remove(trained_model, gate_runs[0].gate_set, 0.25)
    profile = profile_blocks(pruned, eval_batches,
                             group_starts=range(pruned.config.n_layers))
    plan = plan_fold(profile, report, 0.08, 2, pruned.config)
    assert len(plan.groups) == 1
    return apply_fold(pruned, plan)


# --- criteria ------------------------------------------------------------------


def test_criterion_01_gate_function():
    closed_form = all(
        math.isclose(gate_forward(x, eps), want, rel_tol=1e-12, abs_tol=1e-12)
        for eps in (0.1, 0.01, 1e-3)
        for x, want in ((0.0, 0.0), (math.sqrt(eps), 0.5), (1.0, 1.0 / (1.0 + eps))))
    xs = np.linspace(-3.0, 3.0, 601)
    h = 1e-6
    worst = 0.0
    for eps in (0.1, 0.01, 1e-3):
        fd = (gate_forward(xs + h, eps) - gate_forward(xs - h, eps)) / (2 * h)
        rel = np.abs(gate_backward(xs, eps) - fd) / np.maximum(np.abs(fd), 1e-12)
        worst = max(worst, float(rel[np.abs(fd) > 1e-9].max()))
    _verdict(1, "gate forward/backward closed-form and finite differences",
             {"closed_form": closed_form, "backward_fd": worst <= 1e-6})


def test_criterion_02_autodiff_soundness(rng):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=11,
                      max_seq=12, seed=21)
    model = DenseModel.init(cfg)
    for t in model.params.values():
        t.data += rng.normal(0, 0.05, t.shape)
    x = rng.integers(0, cfg.vocab_size, size=(2, 6))
    y = rng.integers(0, cfg.vocab_size, size=(2, 6))
    params = list(model.params.values())
    err = T.grad_check(lambda: model.loss(x, y), params, step=1e-5)
    _verdict(2, "full-model gradients vs finite differences on 2-block d=8",
             {"max_rel_err<=1e-4": err <= 1e-4})


def test_criterion_03_gated_identity_recovery(rng):
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=4, d_ff=32, vocab_size=9,
                      max_seq=12, seed=22)
    model = DenseModel.init(cfg)
    for t in model.params.values():
        t.data += rng.normal(0, 0.1, t.shape)
    w = model.block_weights(0)
    x = T.Tensor(rng.normal(size=(2, 5, cfg.d_model)))
    closed = gated_block_forward(x, w, 0.0, 0.0, cfg.n_heads).data
    opened = gated_block_forward(x, w, 1.0, 1.0, cfg.n_heads).data
    full = block_forward(x, w, cfg.n_heads).data
    _verdict(3, "gate 0 is exact identity, gate 1 recovers the block",
             {"identity_exact": np.array_equal(closed, x.data),
              "recovery<=1e-12": np.abs(opened - full).max() <= 1e-12})


def test_criterion_04_polarization(gate_runs):
    checks = {}
    for s, run in enumerate(gate_runs):
        g = run.gate_set.gate_values()
        mid = g[(g >= 0.1) & (g <= 0.9)]
        checks[f"seed{s}_polarized"] = mid.size == 0
        checks[f"seed{s}_lambda>0"] = run.lambda_resource > 0
    _verdict(4, "all gates < 0.1 or > 0.9 after 1000 steps, 3 seeds", checks)


def test_criterion_05_planted_ranking(planted_model, planted_gate_runs, corpus):
    _, _, held_out = corpus
    checks = {f"seed{s}_rank_first": run.report.ranking[0] == PLANTED_BLOCK
              for s, run in enumerate(planted_gate_runs)}

    gated_pruned, _ = remove_blocks(planted_model,
                                    planted_gate_runs[0].report.block_scores, 0.25)
    xs_batches = [held_out[i * 300:(i + 1) * 300] for i in range(4)]
    from foldlab.corpus import windows
    bi_batches = [windows(b, EVAL_SEQ)[0] for b in xs_batches if len(b) > EVAL_SEQ]
    bi = compute_bi(planted_model, [b for b in bi_batches if len(b)])
    bi_pruned, _ = remove_blocks(planted_model, bi.scores, 0.25)

    ppl_gated = perplexity(gated_pruned, held_out, EVAL_SEQ).perplexity
    ppl_bi = perplexity(bi_pruned, held_out, EVAL_SEQ).perplexity
    checks["gated_ppl<=bi_ppl"] = ppl_gated <= ppl_bi
    print(f"    25% removal held-out ppl: gate ranking {ppl_gated:.4f}, "
          f"BI ranking {ppl_bi:.4f}", file=sys.__stdout__, flush=True)
    _verdict(5, "planted near-identity block ranked least important; "
                "gated removal beats BI removal", checks)


def test_criterion_06_fold_equivalence(rng):
    cfg = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=32, vocab_size=9,
                      max_seq=16, seed=24)
    model = DenseModel.init(cfg)
    for t in model.params.values():
        t.data += rng.normal(0, 0.05, t.shape)
    folded = attach_lora(apply_fold(model, FoldPlan(groups=[(1, [2])])), rank=2)
    copied = model.copy()
    for part in ("qkv", "o", "up", "down"):
        copied.params[f"block2.{part}"].data[:] = model.params[f"block1.{part}"].data
    ids = rng.integers(0, cfg.vocab_size, size=(2, 7))
    logit_diff = np.abs(folded.frozen().forward(ids).data
                        - copied.frozen().forward(ids).data).max()

    x = T.Tensor(rng.normal(size=(5, 8)))
    w = T.Tensor(rng.normal(size=(8, 32)))
    scale = T.Tensor(rng.normal(1.0, 0.2, 32))
    fused = apply_shared_dense(x, w, scale=scale).data
    materialized = x.data @ (w.data * scale.data[None, :])
    _verdict(6, "identity fold equals weight-copied model; fused scale equals "
                "materialized matrix",
             {"logits<=1e-12": logit_diff <= 1e-12,
              "fusion<=1e-12": np.abs(fused - materialized).max() <= 1e-12})


def test_criterion_07_parameter_accounting(rng):
    cfg = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=32, vocab_size=9,
                      max_seq=16, seed=25)
    model = DenseModel.init(cfg)
    dense_manifest = count_params(model)
    brute_dense = sum(int(np.prod(t.shape)) for t in model.params.values())

    folded = apply_fold(model, FoldPlan(groups=[(0, [1])]))
    manifest = count_params(folded)
    brute = sum(int(np.prod(t.shape)) for t in folded.params.values())
    # one group of 2: drop one block's dense weights, add per-channel scales
    expected_block = dense_manifest.block_total - dense_params_per_block(cfg) \
        + scale_params_per_child(cfg)
    _verdict(7, "parameter counts equal brute-force enumeration and closed form",
             {"dense_total": dense_manifest.total == brute_dense,
              "folded_total": manifest.total == brute,
              "closed_form": manifest.block_total == expected_block})


def test_criterion_08_lora_zero_start(rng):
    cfg = ModelConfig(n_layers=3, d_model=8, n_heads=2, d_ff=16, vocab_size=9,
                      max_seq=16, seed=26)
    model = DenseModel.init(cfg)
    for t in model.params.values():
        t.data += rng.normal(0, 0.05, t.shape)
    folded = apply_fold(model, FoldPlan(groups=[(0, [1])]))
    ids = rng.integers(0, cfg.vocab_size, size=(2, 7))
    before = folded.frozen().forward(ids).data
    attach_lora(folded, rank=2, seed=1)
    after = folded.frozen().forward(ids).data

    tokens = rng.integers(0, cfg.vocab_size, size=15000)
    rcfg = RecoveryConfig(lr=1e-3, warmup_steps=10, batch_size=4, epochs=1,
                          lora_rank=2, seed=2)
    snapshot = {k: v.data.copy() for k, v in folded.params.items()}
    result = recover_train(folded, model, tokens, rcfg, seq_len=16)
    trainable = set(select_trainable(folded))
    frozen_ok = all(np.array_equal(folded.params[k].data, snapshot[k])
                    for k in snapshot if k not in trainable)
    _verdict(8, "LoRA attach is a no-op; frozen weights bit-identical after "
                "200 recovery steps",
             {"zero_start<=1e-12": np.abs(after - before).max() <= 1e-12,
              "ran>=200_steps": len(result.trace) >= 200,
              "frozen_bitwise": frozen_ok})


def test_criterion_09_distillation_sanity(rng):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=9,
                      max_seq=16, seed=27)
    model = DenseModel.init(cfg)
    for t in model.params.values():
        t.data += rng.normal(0, 0.05, t.shape)
    ids = rng.integers(0, cfg.vocab_size, size=(2, 6))
    l_at, l_vr = distill_losses(model, model, ids)

    p = np.array([[0.9, 0.1], [0.5, 0.5]])
    q = T.Tensor(np.array([[0.5, 0.5], [0.25, 0.75]]))
    hand = (0.9 * math.log(1.8) + 0.1 * math.log(0.2)
            + 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)) / 2.0
    _verdict(9, "self-distillation losses are zero; 2x2 KL matches hand value",
             {"self_zero": l_at == 0.0 and l_vr == 0.0,
              "hand_kl<=1e-6": abs(T.kl_rows(p, q).item() - hand) <= 1e-6})


def test_criterion_10_recovery_efficacy(folded_pipeline, trained_model, corpus):
    _, tr, held_out = corpus
    train_tokens = tr[:60000]
    ppl_folded = perplexity(folded_pipeline, held_out, EVAL_SEQ).perplexity
    results = {True: [], False: []}
    for freeze in (False, True):
        for seed in range(3):
            student = folded_pipeline.copy()
            rcfg = RecoveryConfig(lr=1e-3, warmup_steps=20, batch_size=16,
                                  epochs=2, lora_rank=8, seed=seed,
                                  freeze_child_norms=freeze)
            recover_train(student, trained_model, train_tokens, rcfg, seq_len=EVAL_SEQ)
            results[freeze].append(perplexity(student, held_out, EVAL_SEQ).perplexity)
    mean_unfrozen = float(np.mean(results[False]))
    mean_frozen = float(np.mean(results[True]))
    print(f"    folded ppl {ppl_folded:.4f}; recovered (norms trained) "
          f"{mean_unfrozen:.4f}; recovered (norms frozen) {mean_frozen:.4f}",
          file=sys.__stdout__, flush=True)
    _verdict(10, "recovery lowers perplexity; training child norms helps",
             {"recovered<folded": mean_unfrozen < ppl_folded,
              "unfrozen<=frozen": mean_unfrozen <= mean_frozen})


CLI_INI = """\
[model]
n_layers = 4
d_model = 8
n_heads = 2
d_ff = 16
max_seq = 16

[train]
steps = 25
batch_size = 4
seq_len = 16

[gate]
steps = 15
batch_size = 2
seq_len = 16

[fold]
removal_ratio = 0.25
fold_ratio = 0.2
group_size = 2

[recovery]
lr = 1e-3
warmup_steps = 5
batch_size = 4
epochs = 1
lora_rank = 2
max_train_tokens = 2000

[eval]
seq_len = 16

[paths]
corpus = {corpus}
workdir = {workdir}

[run]
seed = 11
"""


def test_criterion_11_cli_determinism(tmp_path):
    corpus_path = tmp_path / "tiny.txt"
    corpus_path.write_text(synthetic_corpus(6000, seed=9))
    digests = []
    for sub in ("a", "b"):
        wd = tmp_path / sub
        ini = tmp_path / f"{sub}.ini"
        ini.write_text(CLI_INI.format(corpus=corpus_path, workdir=wd))
        for cmd in ("train-base", "profile", "gate-train", "remove", "fold",
                    "recover", "eval", "compare", "report"):
            assert cli_main([cmd, "--config", str(ini)]) == 0, cmd
        digests.append({
            p.relative_to(wd).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(wd.rglob("*"))
            if p.is_file() and p.name != "manifest.json"})  # manifests embed paths
    _verdict(11, "full pipeline rerun produces bit-identical artifacts",
             {"same_files": set(digests[0]) == set(digests[1]),
              "same_hashes": digests[0] == digests[1],
              "nonempty": len(digests[0]) > 10})
