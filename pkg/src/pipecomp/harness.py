"""Experiment orchestration: config parsing, seeded runs, sweeps and persistence.

A config is one JSON document::

    {
      "dataset":   {"kind": "gaussian_blobs", "n_samples": 2000, ...},
      "model":     {"layers": [8, 32, 2], "activation": "relu"},
      "optimizer": {"eta": 0.01, "momentum": 0.9, "mitigation": {"method": "lwp_plus_gsc"}},
      "pipeline":  {"runner": "pb", "consistency": "inconsistent"},
      "steps": 4000, "eval_every": 500, "seeds": [0, 1, 2], "output_dir": "runs"
    }

Unknown keys anywhere are errors. ``pipeline.runner`` picks the simulator:
``sgdm`` (sequential), ``pb`` (pipelined backprop / fill-and-drain) or
``delay`` (buffer of old weights with ``pipeline.delay``).
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import modelkit as mk
from . import pipeline as pl
from .data import DatasetSpec, gen_dataset
from .optim import MitigationSpec, OptimizerConfig, scale_hyperparams

ConfigError = mk.ConfigError
OUT_ENV = "PIPECOMP_OUT"
RUNNERS = ("sgdm", "pb", "delay")
SCHEMA_PATH = Path(__file__).with_name("config.schema.json")


def _strict(cls, d: Any, where: str):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys with their full path."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    for k in d:
        if k not in names:
            raise ConfigError(f"unknown config key '{where}.{k}'")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class PipelineSection:
    runner: str = "pb"
    S: int | None = None
    delays: tuple[int, ...] | None = None
    delay: int = 0
    schedule: str = "pipelined_backprop"
    consistency: str = "inconsistent"
    micro_batch: int = 1
    n_micro: int = 1
    update_timing: str = "after_backward"

    def __post_init__(self):
        if self.runner not in RUNNERS:
            raise ConfigError(f"pipeline.runner must be one of {RUNNERS}")
        if self.delay < 0:
            raise ConfigError("pipeline.delay must be >= 0")
        if self.runner == "delay" and self.consistency == "stashed":
            raise ConfigError("the delay runner supports consistent or inconsistent weights only")

    def spec(self, n_stages: int) -> pl.PipelineSpec:
        S = n_stages if self.S is None else self.S
        return pl.PipelineSpec(S, self.delays, self.schedule, self.consistency, self.micro_batch,
                               self.n_micro, self.update_timing)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    model: mk.Model
    optimizer: OptimizerConfig
    pipeline: PipelineSection
    steps: int = 1000
    eval_every: int = 0
    seeds: tuple[int, ...] = (0,)
    output_dir: str = ""
    name: str = "run"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {"dataset", "model", "optimizer", "pipeline", "steps", "eval_every", "seeds", "output_dir", "name"}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown config key '{k}'")
        for k in ("dataset", "model", "optimizer"):
            if k not in d:
                raise ConfigError(f"missing config key '{k}'")
        dataset = _strict(DatasetSpec, d["dataset"], "dataset")
        model = _parse_model(d["model"])
        pipe = _strict(PipelineSection, d.get("pipeline", {}), "pipeline")
        optimizer = _parse_optimizer(d["optimizer"], pipe)
        steps, every = d.get("steps", 1000), d.get("eval_every", 0)
        if not isinstance(steps, int) or steps < 0:
            raise ConfigError("steps must be a non-negative integer")
        if not isinstance(every, int) or every < 0:
            raise ConfigError("eval_every must be a non-negative integer")
        seeds = d.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a nonempty list of integers")
        if model.in_dim != dataset.n_features:
            raise ConfigError(f"model input width {model.in_dim} != dataset n_features {dataset.n_features}")
        cfg = cls(dataset, model, optimizer, pipe, steps, every, tuple(seeds),
                  d.get("output_dir") or os.environ.get(OUT_ENV, "runs"), d.get("name", "run"), copy.deepcopy(d))
        spec = cfg.pipeline.spec(len(model.stages))
        if pipe.runner == "pb" and spec.S != len(model.stages):
            raise ConfigError(f"pipeline.S={spec.S} but the model has {len(model.stages)} stages")
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _parse_model(d) -> mk.Model:
    if not isinstance(d, dict):
        raise ConfigError("model: expected an object")
    allowed = {"layers", "activation", "loss"} if "layers" in d else {"stages"}
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown config key 'model.{k}'")
    return mk.Model.from_dict(d)


def _parse_optimizer(d, pipe: PipelineSection) -> OptimizerConfig:
    if not isinstance(d, dict):
        raise ConfigError("optimizer: expected an object")
    for k in d:
        if k not in ("eta", "momentum", "mitigation", "scale_from"):
            raise ConfigError(f"unknown config key 'optimizer.{k}'")
    mit_d = dict(d.get("mitigation", {}))
    if mit_d.get("method") == "none":
        mit_d["method"] = "plain"
    mitigation = _strict(MitigationSpec, mit_d, "optimizer.mitigation")
    if "scale_from" in d:
        if "eta" in d or "momentum" in d:
            raise ConfigError("optimizer: give either eta/momentum or scale_from, not both")
        ref = d["scale_from"]
        for k in ref:
            if k not in ("eta", "momentum", "batch_size"):
                raise ConfigError(f"unknown config key 'optimizer.scale_from.{k}'")
        N = pipe.micro_batch * (pipe.n_micro if pipe.schedule == "fill_and_drain" else 1)
        try:
            eta, m = scale_hyperparams(ref["eta"], ref.get("momentum", 0.0), ref.get("batch_size", 1), N)
        except KeyError:
            raise ConfigError("optimizer.scale_from needs eta") from None
    else:
        if "eta" not in d:
            raise ConfigError("missing config key 'optimizer.eta'")
        eta, m = d["eta"], d.get("momentum", 0.0)
    try:
        return OptimizerConfig(float(eta), float(m), mitigation)
    except ValueError as exc:
        raise ConfigError(f"optimizer: {exc}") from None


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(d)


def evaluator(model: mk.Model, X: np.ndarray, y: np.ndarray):
    """Hook computing full-dataset loss (and accuracy for classification)."""

    def hook(step_no, weights):
        res = mk.forward(model, X, weights, y)
        out = {"loss": res.loss}
        if model.loss_fn == "softmax_cross_entropy":
            out["accuracy"] = res.correct / len(X)
        return out

    return hook


def run_single(cfg: ExperimentConfig, seed: int, data=None) -> pl.RunTrace:
    """One seeded run; the seed drives weight init and sample order."""
    X, y = gen_dataset(cfg.dataset) if data is None else data
    model = cfg.model
    pipe = cfg.pipeline
    weights = model.init_params(seed)
    stream = pl.array_stream(X, y, pipe.micro_batch, seed=seed + 1_000_003)
    hook = evaluator(model, X, y)
    # a diverging run overflows on its way to a non-finite loss; the trace records that
    with np.errstate(over="ignore", invalid="ignore"):
        trace = _dispatch(cfg, model, pipe, stream, weights, seed, hook)
    trace.config = cfg.to_dict()
    trace.seed = seed
    return trace


def _dispatch(cfg, model, pipe, stream, weights, seed, hook) -> pl.RunTrace:
    if pipe.runner == "sgdm":
        trace = pl.sgdm_train(model, stream, cfg.optimizer, cfg.steps, weights, seed, hook, cfg.eval_every)
    elif pipe.runner == "delay":
        D = pipe.delays if pipe.delays is not None else pipe.delay
        trace = pl.uniform_delay_train(model, stream, D, pipe.consistency, cfg.optimizer, cfg.steps, weights,
                                       seed, hook, cfg.eval_every)
    else:
        trace = pl.pb_train(model, stream, pipe.spec(len(model.stages)), cfg.optimizer, cfg.steps, weights,
                            seed, hook, cfg.eval_every)
    return trace


def _final(trace: pl.RunTrace) -> dict:
    ev = trace.evals[-1] if trace.evals else {}
    loss = ev.get("loss", math.nan)
    if trace.diverged or not math.isfinite(loss):
        loss = math.inf
    return {"final_loss": loss, "final_accuracy": ev.get("accuracy"), "diverged": trace.diverged,
            "steps": len(trace.records)}


def _run_seed(args):
    cfg_dict, seed, out_dir, save = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    trace = run_single(cfg, seed)
    if save:
        trace.save(out_dir, f"{cfg.name}_seed{seed}", len(cfg.model.stages))
    return seed, _final(trace)


def _aggregate(per_seed: dict[int, dict]) -> dict:
    seeds = sorted(per_seed)
    losses = np.array([per_seed[s]["final_loss"] for s in seeds], dtype=np.float64)
    accs = [per_seed[s]["final_accuracy"] for s in seeds]
    ok = np.isfinite(losses)
    return {
        "mean_final_loss": float(losses[ok].mean()) if ok.any() else math.inf,
        "std_final_loss": float(losses[ok].std(ddof=1)) if ok.sum() >= 2 else None,
        "mean_accuracy": float(np.mean([a for a, o in zip(accs, ok) if o and a is not None]))
        if any(a is not None for a, o in zip(accs, ok) if o) else None,
        "diverged": int((~ok).sum()),
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, save: bool = True, workers: int = 1) -> dict:
    """Run every seed, write traces plus ``{name}.summary.json``; returns the summary."""
    out = Path(out_dir or cfg.output_dir)
    jobs = [(cfg.to_dict(), s, str(out), save) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = dict(ex.map(_run_seed, jobs))
    else:
        results = dict(map(_run_seed, jobs))
    summary = {"name": cfg.name, "steps": cfg.steps, "seeds": sorted(results),
               "runs": {str(s): results[s] for s in sorted(results)}, **_aggregate(results)}
    if save:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{cfg.name}.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (out / f"{cfg.name}.config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return summary


def set_path(d: dict, path: str, value) -> dict:
    """Copy of config dict ``d`` with dotted ``path`` set; the path must already be a valid key."""
    out = copy.deepcopy(d)
    keys = path.split(".")
    node = out
    schema = _KEY_TREE
    for k in keys[:-1]:
        if not isinstance(schema, dict) or k not in schema:
            raise ConfigError(f"unknown param_path '{path}'")
        schema = schema[k]
        node = node.setdefault(k, {})
    if not isinstance(schema, dict) or keys[-1] not in schema:
        raise ConfigError(f"unknown param_path '{path}'")
    node[keys[-1]] = value
    return out


_KEY_TREE = {
    "dataset": {f.name: None for f in fields(DatasetSpec)},
    "model": {"layers": None, "activation": None, "loss": None, "stages": None},
    "optimizer": {"eta": None, "momentum": None, "scale_from": {"eta": None, "momentum": None, "batch_size": None},
                  "mitigation": {f.name: None for f in fields(MitigationSpec)}},
    "pipeline": {f.name: None for f in fields(PipelineSection)},
    "steps": None, "eval_every": None, "seeds": None, "output_dir": None, "name": None,
}

SWEEP_COLUMNS = ("value", "mean_final_loss", "std_final_loss", "mean_accuracy", "diverged", "n_seeds")


def sweep(cfg: ExperimentConfig, param_path: str, values: Sequence, out_dir=None, save: bool = True,
          workers: int = 1) -> list[dict]:
    """Grid of runs over ``values`` x seeds; one aggregated row per value."""
    base = cfg.to_dict()
    configs = [ExperimentConfig.from_dict(set_path(base, param_path, v)) for v in values]
    jobs = [(c.to_dict(), s, "", False) for c in configs for s in c.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_seed, jobs))
    else:
        results = list(map(_run_seed, jobs))
    rows, k = [], 0
    for v, c in zip(values, configs):
        per_seed = dict(results[k:k + len(c.seeds)])
        k += len(c.seeds)
        rows.append({"value": v, **_aggregate(per_seed), "n_seeds": len(per_seed)})
    if save:
        out = Path(out_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{cfg.name}.sweep_{param_path.replace('.', '_')}"
        write_rows(out / f"{stem}.csv", rows, SWEEP_COLUMNS)
        (out / f"{stem}.config.json").write_text(json.dumps(
            {"config": base, "param_path": param_path, "values": list(values)}, indent=2, sort_keys=True))
    return rows


def write_rows(path, rows: Sequence[dict], columns: Sequence[str]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])


def read_rows(path) -> list[dict]:
    """Inverse of :func:`write_rows`: numbers back to int/float, booleans back to bool, blanks to None."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [{k: _parse_cell(v) for k, v in row.items()} for row in reader]


def _parse_cell(v: str):
    if v == "":
        return None
    if v in ("True", "False"):
        return v == "True"
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v
