"""Pipeline stages behind the CLI: each stage reads its upstream artifacts,
writes versioned outputs plus a manifest (config hash, seed, input/output
hashes) into its own workdir subdirectory, and is a no-op when re-run with
identical inputs unless forced."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import corpus as corpus_mod
from . import evaluate as ev
from . import fold as foldkit
from . import gates as gatekit
from . import profiler, recovery
from .config import ConfigError
from .model import ModelConfig, train_base


class MissingArtifact(ConfigError):
    pass


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _stage_dir(cfg, stage):
    d = Path(cfg.workdir) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


# stage directory name -> CLI command that produces it
_STAGE_COMMAND = {"base": "train-base", "profile": "profile", "gates": "gate-train",
                  "removed": "remove", "folded": "fold", "recovered": "recover",
                  "eval": "eval", "compare": "compare"}


def _require(cfg, stage, filename, needed_by):
    p = Path(cfg.workdir) / stage / filename
    if not p.exists():
        raise MissingArtifact(
            f"missing artifact {p}; run `foldlab {_STAGE_COMMAND[stage]}` before `{needed_by}`")
    return p


def _manifest_path(stage_dir):
    return stage_dir / "manifest.json"


def _up_to_date(cfg, stage_dir, inputs):
    mp = _manifest_path(stage_dir)
    if not mp.exists():
        return False
    manifest = json.loads(mp.read_text())
    if manifest.get("config_hash") != cfg.config_hash() or manifest.get("seed") != cfg.seed:
        return False
    if manifest.get("inputs") != {str(p): _sha256(p) for p in inputs}:
        return False
    return all((stage_dir / name).exists() for name in manifest.get("outputs", {}))


def _write_manifest(cfg, stage, stage_dir, inputs, outputs):
    manifest = {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {name: _sha256(stage_dir / name) for name in outputs},
    }
    _manifest_path(stage_dir).write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1))


class stage:
    """Decorator handling idempotence and manifest writing.

    The wrapped function receives (cfg, stage_dir) and returns
    (input_paths, output_filenames).
    """

    def __init__(self, name):
        self.name = name

    def __call__(self, fn):
        def run(cfg, force=False):
            sd = _stage_dir(cfg, self.name)
            inputs = fn(cfg, sd, dry=True)
            if not force and _up_to_date(cfg, sd, inputs):
                print(f"[{self.name}] up to date, skipping (use --force to re-run)")
                return sd
            inputs, outputs = fn(cfg, sd, dry=False)
            _write_manifest(cfg, self.name, sd, inputs, outputs)
            print(f"[{self.name}] wrote {', '.join(outputs)}")
            return sd

        run.stage_name = self.name
        return run


def _corpus_path(cfg):
    p = Path(cfg["paths"]["corpus"])
    if not p.exists():
        raise ConfigError(f"corpus file not found: {p}")
    return p


def _load_tokens(cfg):
    text = corpus_mod.load_corpus(_corpus_path(cfg))
    vocab = corpus_mod.CharVocab.from_text(text)
    return vocab, vocab.encode(text)


def _model_config(cfg, vocab_size):
    m = cfg["model"]
    return ModelConfig(n_layers=m["n_layers"], d_model=m["d_model"], n_heads=m["n_heads"],
                       d_ff=m["d_ff"], vocab_size=vocab_size, max_seq=m["max_seq"],
                       seed=cfg.seed)


def _load_dense(path):
    ckpt = ck.load_checkpoint(path)
    return ck.dense_from_checkpoint(ckpt), ckpt.vocab


def _eval_batches(model, tokens, seq_len, n_batches=4, batch_size=4):
    xs, _ = corpus_mod.windows(tokens, seq_len)
    xs = xs[: n_batches * batch_size]
    return [xs[i : i + batch_size] for i in range(0, len(xs), batch_size)]


@stage("base")
def run_train_base(cfg, sd, dry):
    inputs = [_corpus_path(cfg)]
    if dry:
        return inputs
    vocab, tokens = _load_tokens(cfg)
    train_tokens, _ = corpus_mod.split_tokens(tokens)
    t = cfg["train"]
    model, losses = train_base(_model_config(cfg, len(vocab)), train_tokens,
                               steps=t["steps"], lr=t["lr"], batch_size=t["batch_size"],
                               seq_len=t["seq_len"], seed=cfg.seed)
    ck.save_checkpoint(sd / "checkpoint.bin", ck.dense_to_checkpoint(model, vocab=vocab.chars))
    with open(sd / "loss_trace.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{loss!r}\n" for i, loss in enumerate(losses))
    return inputs, ["checkpoint.bin", "loss_trace.csv"]


@stage("profile")
def run_profile(cfg, sd, dry):
    inputs = [_corpus_path(cfg), _require(cfg, "base", "checkpoint.bin", "profile")]
    if dry:
        return inputs
    model, _ = _load_dense(inputs[1])
    _, tokens = _load_tokens(cfg)
    _, held_out = corpus_mod.split_tokens(tokens)
    batches = _eval_batches(model, held_out, cfg["eval"]["seq_len"])
    profile = profiler.profile_blocks(model, batches,
                                      group_starts=range(model.config.n_layers))
    bi = profiler.compute_bi(model, batches)
    _write_json(sd / "profile.json", {"profile": profile.to_dict(), "bi": bi.to_dict()})
    profiler.profile_to_csv(sd / "profile.csv", profile, bi)
    return inputs, ["profile.json", "profile.csv"]


@stage("gates")
def run_gate_train(cfg, sd, dry):
    inputs = [_corpus_path(cfg), _require(cfg, "base", "checkpoint.bin", "gate-train")]
    if dry:
        return inputs
    model, _ = _load_dense(inputs[1])
    _, tokens = _load_tokens(cfg)
    train_tokens, _ = corpus_mod.split_tokens(tokens)
    g = cfg["gate"]
    result = gatekit.train_gates(model, train_tokens, lambda_resource=g["lambda_resource"],
                                 steps=g["steps"], seed=cfg.seed, batch_size=g["batch_size"],
                                 seq_len=g["seq_len"], lr=g["lr"], momentum=g["momentum"],
                                 eps0=g["eps0"], decay=g["decay"],
                                 decay_interval=g["decay_interval"],
                                 escalation=g["escalation"])
    _write_json(sd / "gateset.json", result.gate_set.to_dict())
    _write_json(sd / "removal_report.json", result.report.to_dict())
    if result.trajectory:
        gatekit.trajectory_to_csv(sd / "trajectory.csv", result.trajectory)
    else:
        (sd / "trajectory.csv").write_text("step,eps\n")
    return inputs, ["gateset.json", "removal_report.json", "trajectory.csv"]


@stage("removed")
def run_remove(cfg, sd, dry):
    inputs = [_require(cfg, "base", "checkpoint.bin", "remove"),
              _require(cfg, "gates", "gateset.json", "remove")]
    if dry:
        return inputs
    model, vocab = _load_dense(inputs[0])
    gate_set = gatekit.GateSet.from_dict(json.loads(Path(inputs[1]).read_text()))
    pruned, report = gatekit.rank_and_remove(model, gate_set, cfg["fold"]["removal_ratio"])
    ck.save_checkpoint(sd / "checkpoint.bin", ck.dense_to_checkpoint(pruned, vocab=vocab))
    _write_json(sd / "removal_report.json", report.to_dict())
    return inputs, ["checkpoint.bin", "removal_report.json"]


@stage("folded")
def run_fold(cfg, sd, dry):
    inputs = [_corpus_path(cfg),
              _require(cfg, "removed", "checkpoint.bin", "fold"),
              _require(cfg, "removed", "removal_report.json", "fold")]
    if dry:
        return inputs
    pruned, vocab = _load_dense(inputs[1])
    report = gatekit.RemovalReport.from_dict(json.loads(Path(inputs[2]).read_text()))
    _, tokens = _load_tokens(cfg)
    _, held_out = corpus_mod.split_tokens(tokens)
    batches = _eval_batches(pruned, held_out, cfg["eval"]["seq_len"])
    profile = profiler.profile_blocks(pruned, batches,
                                      group_starts=range(pruned.config.n_layers))
    f = cfg["fold"]
    plan = foldkit.plan_fold(profile, report, f["fold_ratio"], f["group_size"], pruned.config)
    folded = foldkit.apply_fold(pruned, plan)
    ck.save_checkpoint(sd / "checkpoint.bin", foldkit.folded_to_checkpoint(folded, vocab=vocab))
    _write_json(sd / "fold_plan.json", plan.to_dict())
    return inputs, ["checkpoint.bin", "fold_plan.json"]


@stage("recovered")
def run_recover(cfg, sd, dry):
    inputs = [_corpus_path(cfg),
              _require(cfg, "folded", "checkpoint.bin", "recover"),
              _require(cfg, "base", "checkpoint.bin", "recover")]
    if dry:
        return inputs
    folded = foldkit.folded_from_checkpoint(ck.load_checkpoint(inputs[1]))
    teacher, vocab = _load_dense(inputs[2])
    _, tokens = _load_tokens(cfg)
    train_tokens, held_out = corpus_mod.split_tokens(tokens)
    r = cfg["recovery"]
    if r["max_train_tokens"]:
        train_tokens = train_tokens[: r["max_train_tokens"]]
    rcfg = recovery.RecoveryConfig(lr=r["lr"], warmup_steps=r["warmup_steps"],
                                   batch_size=r["batch_size"], epochs=r["epochs"],
                                   lambda_distill=r["lambda_distill"], lora_rank=r["lora_rank"],
                                   freeze_child_norms=r["freeze_child_norms"], seed=cfg.seed)
    result = recovery.recover_train(folded, teacher, train_tokens, rcfg,
                                    eval_tokens=held_out, seq_len=cfg["eval"]["seq_len"])
    ck.save_checkpoint(sd / "checkpoint.bin", foldkit.folded_to_checkpoint(folded, vocab=vocab))
    recovery.trace_to_csv(sd / "trace.csv", result.trace)
    _write_json(sd / "recovery.json",
                {"ppl_before": result.ppl_before, "ppl_after": result.ppl_after})
    return inputs, ["checkpoint.bin", "trace.csv", "recovery.json"]


def _available_models(cfg):
    out = []
    for model_id, stage_name in (("dense", "base"), ("removed", "removed"),
                                 ("folded", "folded"), ("recovered", "recovered")):
        p = Path(cfg.workdir) / stage_name / "checkpoint.bin"
        if p.exists():
            out.append((model_id, p))
    return out


def _load_any(path):
    ckpt = ck.load_checkpoint(path)
    if ckpt.kind == "dense":
        return ck.dense_from_checkpoint(ckpt)
    return foldkit.folded_from_checkpoint(ckpt)


@stage("eval")
def run_eval(cfg, sd, dry):
    models = _available_models(cfg)
    if not models:
        raise MissingArtifact("no checkpoints to evaluate; run `foldlab train-base` first")
    inputs = [_corpus_path(cfg)] + [p for _, p in models]
    if dry:
        return inputs
    _, tokens = _load_tokens(cfg)
    _, held_out = corpus_mod.split_tokens(tokens)
    seq_len = cfg["eval"]["seq_len"]
    corpus_id = hashlib.sha256(np.asarray(held_out).tobytes()).hexdigest()[:12]
    reports = []
    for model_id, path in models:
        model = _load_any(path)
        reports.append(ev.perplexity(model, held_out, seq_len, model_id=model_id,
                                     corpus_id=corpus_id).to_dict())
    _write_json(sd / "reports.json", reports)
    return inputs, ["reports.json"]


def _ratios(cfg):
    ratios = {"dense": (0.0, 0.0)}
    removed_report = Path(cfg.workdir) / "removed" / "removal_report.json"
    if removed_report.exists():
        rem = json.loads(removed_report.read_text())["realized_ratio"]
        ratios["removed"] = (rem, 0.0)
        plan_path = Path(cfg.workdir) / "folded" / "fold_plan.json"
        if plan_path.exists():
            folded = foldkit.folded_from_checkpoint(
                ck.load_checkpoint(Path(cfg.workdir) / "folded" / "checkpoint.bin"))
            fr = foldkit.realized_fold_ratio(folded.plan, folded.config, folded.base_layers)
            ratios["folded"] = (rem, fr)
            ratios["recovered"] = (rem, fr)
    return ratios


@stage("compare")
def run_compare(cfg, sd, dry):
    inputs = [_require(cfg, "eval", "reports.json", "compare")]
    if dry:
        return inputs
    reports = [ev.EvalReport.from_dict(d) for d in json.loads(Path(inputs[0]).read_text())]
    table = ev.compare(reports, _ratios(cfg))
    table.to_csv(sd / "table.csv")
    (sd / "table.txt").write_text(table.to_text() + "\n")
    return inputs, ["table.csv", "table.txt"]


def run_report(cfg):
    """Human-readable summary plus plot-ready CSVs for whatever stages exist."""
    wd = Path(cfg.workdir)
    done = [p.name for p in sorted(wd.iterdir()) if (p / "manifest.json").exists()] if wd.exists() else []
    if not done:
        raise MissingArtifact(f"workdir {wd} has no completed stages")
    sd = wd / "report"
    sd.mkdir(exist_ok=True)
    lines = [f"foldlab pipeline summary (seed {cfg.seed})", ""]
    if "base" in done:
        trace = (wd / "base" / "loss_trace.csv").read_text().strip().splitlines()
        if len(trace) > 1:
            first, last = trace[1].split(","), trace[-1].split(",")
            lines += ["[base] trained model",
                      f"  steps: {int(last[0]) + 1}",
                      f"  loss: {float(first[1]):.4f} -> {float(last[1]):.4f}", ""]
    if "profile" in done:
        (sd / "fig_similarity.csv").write_text((wd / "profile" / "profile.csv").read_text())
        lines += ["[profile] similarity profile written to report/fig_similarity.csv", ""]
    if "gates" in done:
        (sd / "fig_gates.csv").write_text((wd / "gates" / "trajectory.csv").read_text())
        report = json.loads((wd / "gates" / "removal_report.json").read_text())
        lines += ["[gates] importance ranking (least important first): "
                  + ", ".join(map(str, report["ranking"])), ""]
    if "removed" in done:
        report = json.loads((wd / "removed" / "removal_report.json").read_text())
        lines += [f"[removed] blocks {report['removed']} "
                  f"(realized ratio {report['realized_ratio']:.4f})", ""]
    if "folded" in done:
        plan = json.loads((wd / "folded" / "fold_plan.json").read_text())
        lines += [f"[folded] groups {plan['groups']} (group size {plan['group_size']})", ""]
    if "recovered" in done:
        rec = json.loads((wd / "recovered" / "recovery.json").read_text())
        lines += [f"[recovered] ppl {rec['ppl_before']:.4f} -> {rec['ppl_after']:.4f}", ""]
    if "compare" in done:
        lines += ["[compare]"] + (wd / "compare" / "table.txt").read_text().splitlines() + [""]
    (sd / "summary.txt").write_text("\n".join(lines))
    print(f"[report] wrote {sd / 'summary.txt'}")
    return sd


class WorkdirLock:
    """Advisory per-workdir lock: one command at a time."""

    def __init__(self, workdir):
        Path(workdir).mkdir(parents=True, exist_ok=True)
        self.path = Path(workdir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"workdir locked by another command ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
