"""Discrete-time simulation of fine-grained Pipelined Backpropagation.

Time is counted in ticks; one tick is one micro-batch entering the pipeline
and one optimizer update per stage. Within tick ``i``:

1. micro-batch ``i`` runs forward through every stage using that stage's
   current (or predicted) weights;
2. every stage ``s`` then runs backward for micro-batch ``i - D[s]`` in
   reverse stage order and immediately applies the update.

Stage ``s`` therefore reads weight version ``i - D[s]`` on the forward pass and
applies the gradient of micro-batch ``i`` as its ``i``-th update. Activations
and upstream gradients are buffered between ticks exactly as a pipeline would;
weight stashing keeps a real per-stage queue. Reads before the first update
clamp to the initial weights (pipeline fill).

:func:`uniform_delay_train` is the independent "buffer of old parameters"
simulator: it loads delayed weights for each step and updates a master copy.
With consistent weights the two agree exactly.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import modelkit as mk
from .optim import OptimizerConfig, OptState, predict_weights, shrink_gradient, step

SCHEDULES = ("pipelined_backprop", "fill_and_drain")
CONSISTENCY = ("inconsistent", "consistent", "stashed")
UPDATE_TIMING = ("after_backward", "before_forward")


def stage_delays(S: int) -> list[int]:
    """Per-stage delay of PB with micro-batch one: ``2 (S - 1 - s)``."""
    if S < 1:
        raise ValueError("need at least one stage")
    return [2 * (S - 1 - s) for s in range(S)]


def spectrain_horizons(S: int) -> list[tuple[int, int]]:
    """(forward, backward) prediction horizons that sync every stage to tick ``t0 + 2S - 2``."""
    if S < 1:
        raise ValueError("need at least one stage")
    return [(2 * (S - 1) - s, s) for s in range(S)]


def pipeline_utilization(N: int, S: int) -> float:
    """Upper bound on fill-and-drain utilization, ``N / (N + 2S)``."""
    if N < 1 or S < 1:
        raise ValueError("N and S must be >= 1")
    return N / (N + 2 * S)


def fill_drain_ticks(N: int, S: int) -> tuple[int, int]:
    """Ticks per fill-and-drain update: ``N + 2S - 2`` and the faster-worker bound ``N + S``."""
    return N + 2 * S - 2, N + S


def dp_utilization(flop_per_sample: float, samples_per_sec: float, peak_flops: float) -> float:
    """Useful FLOPS over peak FLOPS. Raises if the inputs imply more than 100%."""
    if min(flop_per_sample, samples_per_sec, peak_flops) <= 0:
        raise ValueError("all inputs must be > 0")
    u = flop_per_sample * samples_per_sec / peak_flops
    if u > 1.0:
        raise ValueError(f"inconsistent inputs: utilization {u:.4g} exceeds 1")
    return u


@dataclass(frozen=True)
class PipelineSpec:
    S: int
    delays: tuple[int, ...] | None = None
    schedule: str = "pipelined_backprop"
    consistency: str = "inconsistent"
    micro_batch: int = 1
    n_micro: int = 1  # micro-batches per update (fill_and_drain only)
    update_timing: str = "after_backward"

    def __post_init__(self):
        if self.S < 1:
            raise mk.ConfigError("S must be >= 1")
        if self.schedule not in SCHEDULES:
            raise mk.ConfigError(f"unknown schedule {self.schedule!r}")
        if self.consistency not in CONSISTENCY:
            raise mk.ConfigError(f"unknown consistency mode {self.consistency!r}")
        if self.update_timing not in UPDATE_TIMING:
            raise mk.ConfigError(f"unknown update timing {self.update_timing!r}")
        if self.micro_batch < 1 or self.n_micro < 1:
            raise mk.ConfigError("micro_batch and n_micro must be >= 1")
        if self.delays is not None:
            d = tuple(int(x) for x in self.delays)
            object.__setattr__(self, "delays", d)
            if len(d) != self.S:
                raise mk.ConfigError(f"need {self.S} delays, got {len(d)}")
            if min(d) < 0:
                raise mk.ConfigError("delays must be >= 0")

    @property
    def stage_delays(self) -> list[int]:
        if self.schedule == "fill_and_drain":
            return [0] * self.S
        return list(self.delays) if self.delays is not None else stage_delays(self.S)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delays"] = list(self.stage_delays)
        return d


@dataclass
class StepRecord:
    step: int
    sample_id: int
    loss: float
    correct: int
    wnorms: list[float]


@dataclass
class RunTrace:
    records: list[StepRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    diverged: bool = False
    evals: list[dict] = field(default_factory=list)
    versions: list[tuple[int, int, int, int]] = field(default_factory=list)  # (sample, stage, fwd, update)
    meta: dict = field(default_factory=dict)
    final_weights: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def csv_header(self, n_stages: int | None = None) -> list[str]:
        n = n_stages if n_stages is not None else (len(self.records[0].wnorms) if self.records else 0)
        return ["step", "sample_id", "loss", "correct"] + [f"stage{k}_wnorm" for k in range(n)]

    def write_csv(self, path, n_stages: int | None = None):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.csv_header(n_stages))
            for r in self.records:
                w.writerow([r.step, r.sample_id, repr(r.loss), r.correct] + [repr(x) for x in r.wnorms])

    @staticmethod
    def read_csv(path) -> list[StepRecord]:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        out = []
        for row in rows[1:]:
            out.append(StepRecord(int(row[0]), int(row[1]), float(row[2]), int(row[3]), [float(x) for x in row[4:]]))
        return out

    def save(self, out_dir, run_id: str, n_stages: int | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_path = out / f"{run_id}.trace.csv"
        cfg_path = out / f"{run_id}.config.json"
        self.write_csv(trace_path, n_stages)
        snapshot = {"config": self.config, "seed": self.seed, "diverged": self.diverged, "meta": self.meta}
        cfg_path.write_text(json.dumps(snapshot, indent=2, sort_keys=True))
        if self.evals:
            with open(out / f"{run_id}.eval.csv", "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=list(self.evals[0]))
                w.writeheader()
                w.writerows(self.evals)
        return trace_path, cfg_path


def _norms(states: Sequence[OptState | None]) -> list[float]:
    return [0.0 if st is None else float(np.linalg.norm(st.w)) for st in states]


def _make_states(model: mk.Model, weights, delays: Sequence[int]) -> list[OptState | None]:
    states: list[OptState | None] = []
    for s, w, d in zip(model.stages, weights, delays):
        states.append(OptState.for_delay(w, d) if s.n_params else None)
    return states


def _finite(x: float) -> bool:
    return math.isfinite(x)


def _forward_weights(st: OptState, cfg: OptimizerConfig, D: int, lag: int, spectrain_T: float | None) -> np.ndarray:
    """Weights a stage uses on the forward pass, read ``lag`` updates back."""
    mit = cfg.mitigation
    if mit.method == "spectrain":
        return predict_weights(st, lag, spectrain_T, "velocity", cfg.eta)
    if mit.uses_prediction:
        return predict_weights(st, lag, mit.horizon(D), mit.form, cfg.eta)
    return st.w_at(lag)


def _apply_update(st: OptState, g: np.ndarray, cfg: OptimizerConfig, D: int):
    mit = cfg.mitigation
    if mit.gamma != 1.0:
        g = shrink_gradient(g, mit.gamma, D)
    a, b = mit.coefficients(cfg.m, D)
    step(st, g, cfg, a, b)


def _batch_ids(ids) -> int:
    return int(np.atleast_1d(ids)[0])


def pb_train(model: mk.Model, data_stream: Iterable, spec: PipelineSpec, cfg: OptimizerConfig, steps: int,
             weights=None, seed: int | None = None, eval_hook=None, eval_every: int = 0,
             record_versions: bool = False) -> RunTrace:
    """Train with Pipelined Backpropagation (or fill-and-drain) for ``steps`` updates.

    ``data_stream`` yields ``(x, y, ids)`` micro-batches.
    """
    if spec.S != len(model.stages):
        raise mk.ConfigError(f"pipeline has S={spec.S} stages but the model has {len(model.stages)}")
    if weights is None:
        weights = model.init_params(seed)
    if spec.schedule == "fill_and_drain":
        return _fill_and_drain(model, data_stream, spec, cfg, steps, weights, seed, eval_hook, eval_every)

    delays = spec.stage_delays
    S = spec.S
    for s in range(S - 2):
        if delays[s] < delays[s + 1]:
            raise mk.ConfigError("PB delays must be nonincreasing along the pipeline")
    before = spec.update_timing == "before_forward"
    if before and min(delays[:-1], default=1) < 1:
        raise mk.ConfigError("before_forward updates need every non-head stage delay >= 1")
    # stage s reads version i - D[s] (after_backward) or i - D[s] + 1 (before_forward)
    eff = [max(d - 1, 0) for d in delays] if before else list(delays)
    stashed = spec.consistency == "stashed" or cfg.mitigation.method == "weight_stash"
    consistent = spec.consistency == "consistent"
    spectrain = cfg.mitigation.method == "spectrain"
    horizons = spectrain_horizons(S) if spectrain else [(0, 0)] * S
    states = _make_states(model, weights, eff)
    stash: list[deque] = [deque() for _ in range(S)]
    acts: dict[tuple[int, int], np.ndarray] = {}  # (stage, sample) -> stage input
    outs: dict[tuple[int, int], np.ndarray] = {}  # (stage, sample) -> stage output
    deltas: dict[tuple[int, int], np.ndarray] = {}  # (stage, sample) -> dL/d(stage output)
    trace = RunTrace(config={"pipeline": spec.to_dict(), "optimizer": _cfg_dict(cfg), "model": model.to_dict()},
                     seed=seed, meta={"delays": delays, "effective_delays": eff})
    stream = iter(data_stream)

    def backward_phase(i):
        for s in range(S - 2, -1, -1):
            j = i - delays[s]
            if j < 0:
                continue
            st = states[s]
            stage = model.stages[s]
            if st is None:
                w_b = np.zeros(0)
            elif spectrain:
                w_b = predict_weights(st, 0, horizons[s][1], "velocity", cfg.eta)
            elif stashed:
                sid, w_b = stash[s].popleft()
                assert sid == j, "stash out of order"
            elif consistent:
                w_b = _forward_weights(st, cfg, eff[s], eff[s], horizons[s][0])
            else:
                w_b = st.w
            d_in, grad = mk.stage_backward(stage, acts.pop((s, j)), outs.pop((s, j)), w_b, deltas.pop((s, j)))
            if s > 0:
                deltas[(s - 1, j)] = d_in
            if st is not None:
                if record_versions:
                    trace.versions.append((j, s, -1, st.step_count))
                _apply_update(st, grad, cfg, eff[s])

    for i in range(steps):
        try:
            x, y, ids = next(stream)
        except StopIteration:
            break
        if before:
            backward_phase(i)
        a = mk._as_batch(x)
        for s in range(S - 1):
            st = states[s]
            if st is None:
                w_f = np.zeros(0)
            else:
                w_f = _forward_weights(st, cfg, eff[s], 0, horizons[s][0])
                if stashed:
                    stash[s].append((i, w_f))
                if record_versions:
                    trace.versions.append((i, s, st.step_count, -1))
            acts[(s, i)] = a
            a = mk.stage_forward(model.stages[s], a, w_f)
            outs[(s, i)] = a
        t = mk._targets(model, y, a.shape[0])
        loss, d_head, correct = mk.head_loss(model, a, t)
        if not _finite(loss):
            trace.diverged = True
            trace.records.append(StepRecord(i, _batch_ids(ids), loss, correct, _norms(states)))
            break
        if S > 1:
            deltas[(S - 2, i)] = d_head
        if not before:
            backward_phase(i)
        trace.records.append(StepRecord(i, _batch_ids(ids), loss, correct, _norms(states)))
        if eval_hook is not None and eval_every and (i + 1) % eval_every == 0:
            _run_eval(trace, eval_hook, i + 1, states, weights)
    trace.final_weights = _master(states, weights)
    if eval_hook is not None:
        _run_eval(trace, eval_hook, len(trace.records), states, weights, final=True)
    return trace


def _master(states, weights) -> list[np.ndarray]:
    return [np.zeros(0) if st is None else st.w.copy() for st, w in zip(states, weights)]


def _run_eval(trace: RunTrace, hook, step_no: int, states, weights, final: bool = False):
    res = hook(step_no, _master(states, weights))
    if res is not None:
        row = {"step": step_no, **res}
        if final and trace.evals and trace.evals[-1]["step"] == step_no:
            return
        trace.evals.append(row)


def _cfg_dict(cfg: OptimizerConfig) -> dict:
    return {"eta": cfg.eta, "momentum": cfg.m, "mitigation": cfg.mitigation.to_dict()}


def _fill_and_drain(model, data_stream, spec, cfg, steps, weights, seed, eval_hook, eval_every) -> RunTrace:
    states = _make_states(model, weights, [0] * spec.S)
    N = spec.n_micro
    ticks, ticks_fast = fill_drain_ticks(N, spec.S)
    trace = RunTrace(config={"pipeline": spec.to_dict(), "optimizer": _cfg_dict(cfg), "model": model.to_dict()},
                     seed=seed, meta={"delays": [0] * spec.S, "ticks_per_update": ticks,
                                      "ticks_per_update_fast": ticks_fast,
                                      "utilization_bound": pipeline_utilization(N, spec.S)})
    stream = iter(data_stream)
    for u in range(steps):
        batch = []
        for _ in range(N):
            try:
                batch.append(next(stream))
            except StopIteration:
                break
        if len(batch) < N:
            break
        w = [np.zeros(0) if st is None else st.w for st in states]
        gsum = [np.zeros_like(x) for x in w]
        loss_sum, correct = 0.0, 0
        for x, y, _ in batch:
            cache, grads = mk.loss_and_grads(model, x, w, y)
            loss_sum += cache.loss
            correct += cache.correct
            for k, g in enumerate(grads):
                gsum[k] += g
        loss = loss_sum / N
        trace.records.append(StepRecord(u, _batch_ids(batch[0][2]), loss, correct, _norms(states)))
        if not _finite(loss):
            trace.diverged = True
            break
        for st, g in zip(states, gsum):
            if st is not None:
                _apply_update(st, g / N, cfg, 0)
        if eval_hook is not None and eval_every and (u + 1) % eval_every == 0:
            _run_eval(trace, eval_hook, u + 1, states, weights)
    trace.final_weights = _master(states, weights)
    if eval_hook is not None:
        _run_eval(trace, eval_hook, len(trace.records), states, weights, final=True)
    return trace


def uniform_delay_train(model: mk.Model, data_stream: Iterable, D, consistency: str, cfg: OptimizerConfig,
                        steps: int, weights=None, seed: int | None = None, eval_hook=None,
                        eval_every: int = 0) -> RunTrace:
    """Delayed-gradient training from a buffer of old weights.

    Each step loads weights from ``D`` updates ago (per stage if ``D`` is a
    sequence), runs forward, runs backward at the same old weights
    (``consistent``) or at the master weights (``inconsistent``) and updates
    the master copy.
    """
    if consistency not in ("consistent", "inconsistent"):
        raise mk.ConfigError(f"consistency must be consistent or inconsistent, got {consistency!r}")
    S = len(model.stages)
    delays = [int(D)] * S if np.isscalar(D) else [int(d) for d in D]
    if len(delays) != S or min(delays) < 0:
        raise mk.ConfigError("need one non-negative delay per stage")
    if weights is None:
        weights = model.init_params(seed)
    states = _make_states(model, weights, delays)
    spectrain = cfg.mitigation.method == "spectrain"
    horizons = spectrain_horizons(S) if spectrain else [(0, 0)] * S
    trace = RunTrace(config={"delays": delays, "consistency": consistency, "optimizer": _cfg_dict(cfg),
                             "model": model.to_dict()}, seed=seed, meta={"delays": delays})
    stream = iter(data_stream)
    for t in range(steps):
        try:
            x, y, ids = next(stream)
        except StopIteration:
            break
        fw = [np.zeros(0) if st is None else _forward_weights(st, cfg, delays[k], delays[k], horizons[k][0])
              for k, st in enumerate(states)]
        cache = mk.forward(model, x, fw, y)
        if not _finite(cache.loss):
            trace.diverged = True
            trace.records.append(StepRecord(t, _batch_ids(ids), cache.loss, cache.correct, _norms(states)))
            break
        if spectrain:
            bw = [np.zeros(0) if st is None else predict_weights(st, 0, horizons[k][1], "velocity", cfg.eta)
                  for k, st in enumerate(states)]
        elif consistency == "consistent":
            bw = fw
        else:
            bw = [np.zeros(0) if st is None else st.w for st in states]
        grads = mk.backward(model, cache, bw)
        for k, st in enumerate(states):
            if st is not None:
                _apply_update(st, grads[k], cfg, delays[k])
        trace.records.append(StepRecord(t, _batch_ids(ids), cache.loss, cache.correct, _norms(states)))
        if eval_hook is not None and eval_every and (t + 1) % eval_every == 0:
            _run_eval(trace, eval_hook, t + 1, states, weights)
    trace.final_weights = _master(states, weights)
    if eval_hook is not None:
        _run_eval(trace, eval_hook, len(trace.records), states, weights, final=True)
    return trace


def sgdm_train(model: mk.Model, data_stream: Iterable, cfg: OptimizerConfig, steps: int, weights=None,
               seed: int | None = None, eval_hook=None, eval_every: int = 0) -> RunTrace:
    """Plain sequential SGDM; the zero-delay reference for the simulators above."""
    if weights is None:
        weights = model.init_params(seed)
    w = [np.array(x, dtype=np.float64) for x in weights]
    v = [np.zeros_like(x) for x in w]
    trace = RunTrace(config={"optimizer": _cfg_dict(cfg), "model": model.to_dict()}, seed=seed)
    stream = iter(data_stream)
    for t in range(steps):
        try:
            x, y, ids = next(stream)
        except StopIteration:
            break
        cache, grads = mk.loss_and_grads(model, x, w, y)
        if not _finite(cache.loss):
            trace.diverged = True
            trace.records.append(StepRecord(t, _batch_ids(ids), cache.loss, cache.correct, [float(np.linalg.norm(p)) for p in w]))
            break
        for k, g in enumerate(grads):
            if g.size:
                v[k] = cfg.m * v[k] + g
                w[k] = w[k] - cfg.eta * v[k]
        trace.records.append(StepRecord(t, _batch_ids(ids), cache.loss, cache.correct, [float(np.linalg.norm(p)) for p in w]))
        if eval_hook is not None and eval_every and (t + 1) % eval_every == 0:
            res = eval_hook(t + 1, w)
            if res is not None:
                trace.evals.append({"step": t + 1, **res})
    trace.final_weights = [p.copy() for p in w]
    if eval_hook is not None:
        res = eval_hook(len(trace.records), w)
        if res is not None and not (trace.evals and trace.evals[-1]["step"] == len(trace.records)):
            trace.evals.append({"step": len(trace.records), **res})
    return trace


def array_stream(X: np.ndarray, y: np.ndarray, batch: int = 1, seed: int | None = 0,
                 shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Endless epochs of micro-batches ``(x, y, ids)``; reshuffled every epoch."""
    rng = np.random.default_rng(seed)
    n = len(X)
    while True:
        order = rng.permutation(n) if shuffle else np.arange(n)
        for k in range(0, n - batch + 1, batch):
            ids = order[k:k + batch]
            yield X[ids], y[ids], ids
