"""End-to-end desk-scale experiments: data, SFT, preference optimization, reports.

Every run writes into its own output directory:

``sft``      ``sft.ckpt``, ``sft_log.csv`` (step, lr, loss)
``po``       ``po.ckpt``, ``train_log.csv`` (one row per update),
             ``metrics.csv`` (one row per cadence point), ``energy.csv``,
             ``summary.json``

Log-probabilities and divergences are in nats. Floats are written with
``repr`` so identical runs produce byte-identical files.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import SyntheticTask, generate_pairs, sft_examples
from .metrics import diversity, energy_report, export_neurons, hyperspherical_energy, length_weighted_winrate
from .policy import EOS, PolicyConfig, PolicyModel, sample, snapshot_reference
from .preference import (
    StepReport,
    TrainHyperparams,
    dpo_loss,
    fit_preference,
    pair_logps,
    reward_accuracy,
    track_divergence,
)
from .training import Adam, fit_sft

log = logging.getLogger(__name__)

METHODS = ("sft", "dpo-full", "ropo")

__all__ = [
    "RunConfig",
    "load_config",
    "model_to_checkpoint",
    "model_from_checkpoint",
    "run_sft",
    "run_po",
    "diagnose",
    "merge_checkpoint",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = (
    "step",
    "heldout_loss",
    "heldout_reward_accuracy",
    "heldout_margin",
    "token_chosen",
    "token_rejected",
    "seq_chosen",
    "seq_rejected",
    "kl_full_chosen",
    "kl_full_rejected",
)
TRAIN_COLUMNS = tuple(f.name for f in fields(StepReport))


@dataclass(frozen=True)
class RunConfig:
    method: str = "ropo"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    hyper: TrainHyperparams = field(default_factory=TrainHyperparams)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    data_seed: int = 0
    train_pairs: int = 4096
    heldout_pairs: int = 256
    sft_examples: int = 4096
    cadence: int = 100
    tracked: tuple = ()
    out: str = "runs/default"
    jsonl: bool = False
    sample_prompts: int = 64
    sample_max_tokens: int = 16

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.cadence < 1 or self.hyper.steps % self.cadence:
            raise ValueError(f"cadence {self.cadence} must divide steps {self.hyper.steps}")
        if self.heldout_pairs < 1:
            raise ValueError("held-out set must be non-empty")

    @classmethod
    def default(cls, method: str, **overrides) -> "RunConfig":
        steps = 2000 if method == "sft" else 1000
        hyper = TrainHyperparams(steps=steps, lr=1e-3)
        return cls(method=method, hyper=hyper, **overrides)

    def with_overrides(self, *, seed=None, out=None, beta=None, steps=None, cadence=None, lr=None) -> "RunConfig":
        hyper = self.hyper
        changes = {k: v for k, v in dict(seed=seed, beta=beta, steps=steps, lr=lr).items() if v is not None}
        if changes:
            hyper = replace(hyper, **changes)
        cfg = {"hyper": hyper}
        if out is not None:
            cfg["out"] = str(out)
        if cadence is not None:
            cfg["cadence"] = cadence
        return replace(self, **cfg)

    def tracked_matrices(self, model: PolicyModel) -> list[str]:
        return list(self.tracked) or model.wrapped_names()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tracked"] = list(self.tracked)
        return d


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v) if like else v.strip() for v in value.split(",") if v.strip())
    return value.strip()


def _section(parser, name, obj):
    if not parser.has_section(name):
        return obj
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    changes = {}
    for key, value in parser.items(name):
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{name}]")
        changes[key] = _coerce(value, known[key])
    return replace(obj, **changes)


def load_config(path, method: str | None = None) -> RunConfig:
    """Read a ``key = value`` file with sections ``[run] [policy] [train] [data] [task]``."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"cannot read config file {path}")
    run = dict(parser.items("run")) if parser.has_section("run") else {}
    method = method or run.get("method", "ropo")
    base = RunConfig.default(method)
    policy = _section(parser, "policy", base.policy)
    hyper = _section(parser, "train", base.hyper)
    task = _section(parser, "task", base.task)
    top = {}
    for key, value in run.items():
        if key == "method":
            continue
        if key not in {f.name for f in fields(RunConfig)}:
            raise ValueError(f"unknown key {key!r} in section [run]")
        top[key] = _coerce(value, getattr(base, key))
    if parser.has_section("data"):
        for key, value in parser.items("data"):
            if key not in ("data_seed", "train_pairs", "heldout_pairs", "sft_examples"):
                raise ValueError(f"unknown key {key!r} in section [data]")
            top[key] = int(value)
    return replace(base, policy=policy, hyper=hyper, task=task, method=method, **top)


# ------------------------------------------------------------------ checkpoints


def model_to_checkpoint(model: PolicyModel, opt: Adam | None = None, **metadata) -> Checkpoint:
    tensors = {f"param.{k}": v for k, v in model.params.items()}
    if opt is not None:
        tensors.update(opt.state_arrays())
    meta = {"policy": model.config.to_dict(), "trainable": sorted(model.trainable), **metadata}
    return Checkpoint(tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> PolicyModel:
    cfg = PolicyConfig(**ckpt.metadata["policy"])
    params = {k[len("param.") :]: np.array(v) for k, v in ckpt.tensors.items() if k.startswith("param.")}
    return PolicyModel(cfg, params, trainable=set(ckpt.metadata.get("trainable", [])))


def _optimizer_from_checkpoint(ckpt: Checkpoint) -> Adam:
    return Adam.from_state_arrays({k: v for k, v in ckpt.tensors.items() if k.startswith("adam.")})


# ------------------------------------------------------------------ logging


class _Log:
    """Append-only CSV log with an optional JSONL mirror, flushed per row."""

    def __init__(self, path: Path, columns: Sequence[str], append: bool, jsonl: bool = False):
        self.columns = list(columns)
        mode = "a" if append else "w"
        self.fh = path.open(mode, newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.jfh = path.with_suffix(".jsonl").open(mode) if jsonl else None
        if not append:
            self.writer.writerow(self.columns)

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row[c]) for c in self.columns])
        self.fh.flush()
        if self.jfh is not None:
            self.jfh.write(json.dumps({c: row[c] for c in self.columns}) + "\n")
            self.jfh.flush()

    def close(self) -> None:
        self.fh.close()
        if self.jfh is not None:
            self.jfh.close()


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ------------------------------------------------------------------ stages


@dataclass
class SFTResult:
    model: PolicyModel
    checkpoint: Path
    log: Path
    losses: list


def run_sft(config: RunConfig) -> SFTResult:
    if config.method != "sft":
        raise ValueError("run_sft needs method='sft'")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    model = PolicyModel.init(replace(config.policy, wrap_mode="none"))
    prompts, completions = sft_examples(config.task, config.sft_examples, config.data_seed + 2)
    log_path = out / "sft_log.csv"
    sink = _Log(log_path, ("step", "lr", "loss"), append=False, jsonl=config.jsonl)
    losses = []

    def on_step(report):
        losses.append(report.loss)
        sink.write(asdict(report))

    try:
        opt = fit_sft(model, prompts, completions, config.hyper, on_step=on_step)
    finally:
        sink.close()
    ckpt = save_checkpoint(
        model_to_checkpoint(model, opt, method="sft", step=config.hyper.steps, run=config.to_dict()),
        out / "sft.ckpt",
    )
    log.info("SFT finished: %d steps, final loss %.4f", config.hyper.steps, losses[-1] if losses else float("nan"))
    return SFTResult(model, ckpt, log_path, losses)


@dataclass
class POResult:
    model: PolicyModel
    reference: PolicyModel
    checkpoint: Path
    metrics: Path
    energy: list
    summary: dict


def _build_policy(method: str, sft_model: PolicyModel, policy_cfg: PolicyConfig) -> PolicyModel:
    if method == "ropo":
        wrapped = sft_model.wrap()
        if not policy_cfg.rotation_trainable:
            cfg = replace(wrapped.config, rotation_trainable=False)
            wrapped = PolicyModel(cfg, wrapped.params)
        return wrapped
    return PolicyModel(sft_model.config, {k: v.copy() for k, v in sft_model.params.items()})


def _cadence_row(step, model, reference, heldout, beta, tracked, baseline):
    lp = pair_logps(model, reference, heldout)
    loss, margin = dpo_loss(lp, beta)
    div = track_divergence(model, reference, heldout)
    row = {
        "step": step,
        "heldout_loss": loss,
        "heldout_reward_accuracy": reward_accuracy(lp, beta),
        "heldout_margin": margin,
        **asdict(div),
    }
    for name in tracked:
        he = hyperspherical_energy(model.effective_weight(name))
        row[f"he:{name}"] = he
        row[f"dhe:{name}"] = he - baseline[name]
    return row


def _generation_summary(model, reference, task, prompts, max_tokens, seed):
    gens = [sample(model, p, max_tokens, temperature=0.95, top_k=50, seed=seed + i) for i, p in enumerate(prompts)]
    refs = [sample(reference, p, max_tokens, temperature=0.95, top_k=50, seed=seed + i) for i, p in enumerate(prompts)]
    wins = 0.0
    for p, g, r in zip(prompts, gens, refs):
        sg, sr = task.score(p, g + [EOS]), task.score(p, r + [EOS])
        wins += 1.0 if sg > sr else 0.5 if sg == sr else 0.0
    wr = wins / len(prompts)
    len_g = float(np.mean([len(g) + 1 for g in gens]))
    len_r = float(np.mean([len(r) + 1 for r in refs]))

    def div(xs):
        try:
            return diversity(xs)
        except ValueError:
            return float("nan")

    return {
        "win_rate_vs_reference": wr,
        "mean_length": len_g,
        "reference_mean_length": len_r,
        "length_weighted_win_rate": length_weighted_winrate(wr, len_r, len_g),
        "diversity": div(gens),
        "reference_diversity": div(refs),
    }


def run_po(config: RunConfig, sft_checkpoint, resume=None, stop_after: int | None = None) -> POResult:
    """Preference optimization from an SFT checkpoint.

    ``stop_after`` ends the run early (checkpoint and logs reflect that step);
    ``resume`` continues such a run from its checkpoint to ``hyper.steps``.
    """
    if config.method not in ("dpo-full", "ropo"):
        raise ValueError("run_po needs method 'dpo-full' or 'ropo'")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    sft_ckpt = load_checkpoint(sft_checkpoint)
    sft_model = model_from_checkpoint(sft_ckpt)
    if sft_model.config.wrap_mode != "none":
        raise ValueError("SFT checkpoint must hold a dense model")
    reference = snapshot_reference(sft_model)
    hyper = config.hyper

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.metadata.get("method") != config.method:
            raise ValueError(f"resume checkpoint was written by method {ck.metadata.get('method')!r}")
        model = model_from_checkpoint(ck)
        opt = _optimizer_from_checkpoint(ck)
        start = int(ck.metadata["step"])
    else:
        model = _build_policy(config.method, sft_model, config.policy)
        opt = Adam()
        start = 0
    stop = hyper.steps if stop_after is None else min(stop_after, hyper.steps)

    train = generate_pairs(config.task, config.train_pairs, config.data_seed)
    heldout = generate_pairs(config.task, config.heldout_pairs, config.data_seed + 1)
    tracked = config.tracked_matrices(model)
    baseline = {name: hyperspherical_energy(sft_model.effective_weight(name)) for name in tracked}
    columns = list(METRIC_COLUMNS) + [f"{p}:{n}" for n in tracked for p in ("he", "dhe")]

    appending = resume is not None
    metrics_path = out / "metrics.csv"
    metrics = _Log(metrics_path, columns, append=appending, jsonl=config.jsonl)
    train_log = _Log(out / "train_log.csv", TRAIN_COLUMNS, append=appending, jsonl=config.jsonl)

    def record(step):
        metrics.write(_cadence_row(step, model, reference, heldout, hyper.beta, tracked, baseline))

    def on_step(report: StepReport):
        train_log.write(asdict(report))
        done = report.step + 1
        if done % config.cadence == 0:
            record(done)

    try:
        if start == 0:
            record(0)
        opt = fit_preference(model, reference, train, hyper, opt=opt, start=start, stop=stop, on_step=on_step)
    finally:
        metrics.close()
        train_log.close()

    ckpt_path = save_checkpoint(
        model_to_checkpoint(
            model, opt, method=config.method, step=stop, total_steps=hyper.steps,
            sft_checkpoint=str(sft_checkpoint), run=config.to_dict(),
        ),
        out / "po.ckpt",
    )
    energy = [energy_report(n, model.effective_weight(n), sft_model.effective_weight(n)) for n in tracked]
    _write_energy(out / "energy.csv", energy)

    summary = {"method": config.method, "step": stop, "beta": hyper.beta}
    if stop == hyper.steps and config.sample_prompts > 0:
        prompts = [p.prompt for p in heldout[: config.sample_prompts]]
        summary.update(
            _generation_summary(model, reference, config.task, prompts, config.sample_max_tokens, hyper.seed)
        )
    summary["delta_he"] = {e.name: e.delta_he for e in energy}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return POResult(model, reference, ckpt_path, metrics_path, energy, summary)


def _write_energy(path: Path, reports) -> None:
    with path.open("w", newline="") as fh:
        writer = None
        for rep in reports:
            row = rep.row()
            if writer is None:
                writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
                writer.writeheader()
            writer.writerow(row)


def _architecture(cfg: PolicyConfig) -> dict:
    d = cfg.to_dict()
    for key in ("wrap_mode", "rotation_trainable", "init_seed"):
        d.pop(key)
    return d


def diagnose(checkpoint, baseline_checkpoint, out_dir) -> list:
    """Energy report of ``checkpoint`` against ``baseline_checkpoint`` plus neuron exports."""
    model = model_from_checkpoint(load_checkpoint(checkpoint))
    base = model_from_checkpoint(load_checkpoint(baseline_checkpoint))
    if _architecture(model.config) != _architecture(base.config):
        raise ValueError("checkpoints do not share an architecture")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = model.wrapped_names()
    reports = [energy_report(n, model.effective_weight(n), base.effective_weight(n)) for n in names]
    _write_energy(out / "energy_report.csv", reports)
    for n in names:
        export_neurons(base.effective_weight(n), out / f"neurons_baseline_{n}.csv")
        export_neurons(model.effective_weight(n), out / f"neurons_checkpoint_{n}.csv")
    return reports


def merge_checkpoint(checkpoint, out_path) -> Path:
    """Fold RoPO factors into dense weights and save a plain model checkpoint."""
    ck = load_checkpoint(checkpoint)
    merged = model_from_checkpoint(ck).merged()
    meta = {k: v for k, v in ck.metadata.items() if k not in ("policy", "trainable")}
    meta["merged_from"] = str(checkpoint)
    return save_checkpoint(model_to_checkpoint(merged, None, **meta), out_path)
