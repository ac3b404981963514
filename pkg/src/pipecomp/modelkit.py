"""Small stage-structured models with exact per-stage gradients.

A model is an ordered list of stages. Dense stages own parameters, activation
stages are parameter-free, and the final stage is a loss head. Weights are
never stored on the model itself: every call receives one flat float64 array
per stage, so a pipeline simulator can feed each stage whichever weight
version it is supposed to see.

Dense parameter layout is ``W`` (out_dim x in_dim, row-major) followed by the
bias ``b``; the stage computes ``y = x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("softmax_cross_entropy", "mean_squared_error")


class ConfigError(ValueError):
    """Raised for malformed models, configs or dimension mismatches."""


@dataclass(frozen=True)
class Stage:
    kind: str  # "dense" | "activation" | "loss"
    in_dim: int
    out_dim: int
    fn: str = ""

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"stage dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind == "dense":
            return
        if self.kind == "activation":
            if self.fn not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {self.fn!r}")
        elif self.kind == "loss":
            if self.fn not in LOSSES:
                raise ConfigError(f"unknown loss {self.fn!r}")
        else:
            raise ConfigError(f"unknown stage kind {self.kind!r}")
        if self.in_dim != self.out_dim:
            raise ConfigError(f"{self.kind} stage must preserve width")

    @property
    def n_params(self) -> int:
        if self.kind == "dense":
            return self.in_dim * self.out_dim + self.out_dim
        return 0


@dataclass(frozen=True)
class Model:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ConfigError("model needs at least one stage")
        for k, (s0, s1) in enumerate(zip(stages[:-1], stages[1:])):
            if s0.out_dim != s1.in_dim:
                raise ConfigError(f"stage {k} out_dim {s0.out_dim} != stage {k + 1} in_dim {s1.in_dim}")
        heads = [k for k, s in enumerate(stages) if s.kind == "loss"]
        if heads != [len(stages) - 1]:
            raise ConfigError("model must have exactly one loss head, as the last stage")

    def __len__(self):
        return len(self.stages)

    @property
    def in_dim(self) -> int:
        return self.stages[0].in_dim

    @property
    def loss_fn(self) -> str:
        return self.stages[-1].fn

    @property
    def param_sizes(self) -> list[int]:
        return [s.n_params for s in self.stages]

    def init_params(self, rng: np.random.Generator | int | None = None) -> list[np.ndarray]:
        """He-style init for dense weights, zero biases."""
        rng = np.random.default_rng(rng)
        params = []
        for s in self.stages:
            if s.kind != "dense":
                params.append(np.zeros(0))
                continue
            W = rng.normal(0.0, np.sqrt(2.0 / s.in_dim), size=(s.out_dim, s.in_dim))
            params.append(np.concatenate([W.ravel(), np.zeros(s.out_dim)]))
        return params

    def to_dict(self) -> dict:
        return {"stages": [
            {"kind": s.kind, "in_dim": s.in_dim, "out_dim": s.out_dim, **({"fn": s.fn} if s.fn else {})}
            for s in self.stages
        ]}

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        if "layers" in d:
            return mlp(d["layers"], activation=d.get("activation", "relu"), loss=d.get("loss", "softmax_cross_entropy"))
        try:
            return cls(tuple(Stage(**s) for s in d["stages"]))
        except TypeError as exc:
            raise ConfigError(f"bad stage description: {exc}") from None


def mlp(layers: Sequence[int], activation: str = "relu", loss: str = "softmax_cross_entropy") -> Model:
    """Dense/activation stack ending in a loss head, e.g. ``mlp([8, 32, 2])``."""
    if len(layers) < 2:
        raise ConfigError("mlp needs at least input and output widths")
    stages: list[Stage] = []
    for k, (i, o) in enumerate(zip(layers[:-1], layers[1:])):
        stages.append(Stage("dense", i, o))
        if k < len(layers) - 2:
            stages.append(Stage("activation", o, o, activation))
    stages.append(Stage("loss", layers[-1], layers[-1], loss))
    return Model(tuple(stages))


@dataclass
class ForwardResult:
    activations: list[np.ndarray]  # activations[k] is the input of stage k; last is the head output
    loss: float
    correct: int = 0
    batch: int = 1
    targets: np.ndarray | None = field(default=None, repr=False)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _check_weights(model: Model, weights: Sequence[np.ndarray]):
    if len(weights) != len(model.stages):
        raise ConfigError(f"expected {len(model.stages)} weight arrays, got {len(weights)}")
    for k, (s, w) in enumerate(zip(model.stages, weights)):
        if np.size(w) != s.n_params:
            raise ConfigError(f"stage {k} expects {s.n_params} params, got {np.size(w)}")


def _targets(model: Model, target, batch: int) -> np.ndarray:
    if model.loss_fn == "softmax_cross_entropy":
        t = np.atleast_1d(np.asarray(target)).astype(np.int64)
        if t.shape != (batch,):
            raise ConfigError(f"need {batch} class labels, got shape {t.shape}")
        if t.min() < 0 or t.max() >= model.stages[-1].in_dim:
            raise ConfigError("class label out of range")
        return t
    t = np.asarray(target, dtype=np.float64).reshape(batch, -1)
    if t.shape[1] != model.stages[-1].in_dim:
        raise ConfigError(f"regression target width {t.shape[1]} != {model.stages[-1].in_dim}")
    return t


def stage_forward(stage: Stage, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply one non-head stage to a batch."""
    if stage.kind == "dense":
        n = stage.in_dim * stage.out_dim
        return x @ w[:n].reshape(stage.out_dim, stage.in_dim).T + w[n:]
    if stage.kind == "activation":
        if stage.fn == "relu":
            return np.maximum(x, 0.0)
        if stage.fn == "tanh":
            return np.tanh(x)
        return x.copy()
    raise ConfigError("loss head has no plain forward; use head_loss")


def stage_backward(stage: Stage, x: np.ndarray, y: np.ndarray, w: np.ndarray, delta: np.ndarray):
    """Return ``(delta_in, grad)`` given the upstream gradient ``delta`` at the stage output."""
    if stage.kind == "dense":
        n = stage.in_dim * stage.out_dim
        W = w[:n].reshape(stage.out_dim, stage.in_dim)
        grad = np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0)])
        return delta @ W, grad
    if stage.kind == "activation":
        if stage.fn == "relu":
            return delta * (x > 0.0), np.zeros(0)
        if stage.fn == "tanh":
            return delta * (1.0 - y * y), np.zeros(0)
        return delta, np.zeros(0)
    raise ConfigError("loss head is handled by head_loss")


def head_loss(model: Model, z: np.ndarray, t: np.ndarray):
    """Mean loss over the batch, its gradient w.r.t. ``z`` and the number of correct predictions."""
    B = z.shape[0]
    if model.loss_fn == "softmax_cross_entropy":
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(B), t].mean()
        d = np.exp(logp)
        d[np.arange(B), t] -= 1.0
        correct = int((z.argmax(axis=1) == t).sum())
        return float(loss), d / B, correct
    r = z - t
    return float((r * r).sum() / B), 2.0 * r / B, 0


def forward(model: Model, x, weights: Sequence[np.ndarray], target) -> ForwardResult:
    """Full forward pass; keeps every intermediate activation for :func:`backward`."""
    _check_weights(model, weights)
    a = _as_batch(x)
    if a.shape[1] != model.in_dim:
        raise ConfigError(f"input width {a.shape[1]} != model in_dim {model.in_dim}")
    t = _targets(model, target, a.shape[0])
    acts = [a]
    for s, w in zip(model.stages[:-1], weights[:-1]):
        a = stage_forward(s, a, np.asarray(w, dtype=np.float64))
        acts.append(a)
    loss, _, correct = head_loss(model, a, t)
    return ForwardResult(acts, loss, correct, a.shape[0], t)


def backward(model: Model, cache: ForwardResult | None, weights: Sequence[np.ndarray], target=None) -> list[np.ndarray]:
    """Per-stage parameter gradients of the mean batch loss.

    ``weights`` may differ from the ones used in :func:`forward`; that is how
    weight inconsistency is modelled (activations from one version, backward
    through another).
    """
    if cache is None or not cache.activations:
        raise RuntimeError("backward needs the cache returned by forward")
    _check_weights(model, weights)
    t = cache.targets if target is None else _targets(model, target, cache.batch)
    acts = cache.activations
    _, delta, _ = head_loss(model, acts[-1], t)
    grads: list[np.ndarray] = [np.zeros(0)] * len(model.stages)
    for k in range(len(model.stages) - 2, -1, -1):
        delta, grads[k] = stage_backward(model.stages[k], acts[k], acts[k + 1], np.asarray(weights[k], dtype=np.float64), delta)
    return grads


def loss_and_grads(model: Model, x, weights, target):
    cache = forward(model, x, weights, target)
    return cache, backward(model, cache, weights)


def grad_check(model: Model, x, target, epsilon: float = 1e-5, weights=None, rng=None) -> float:
    """Max relative error between analytic gradients and central differences."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if weights is None:
        weights = model.init_params(rng)
    weights = [np.array(w, dtype=np.float64) for w in weights]
    _, grads = loss_and_grads(model, x, weights, target)
    worst = 0.0
    for k, w in enumerate(weights):
        for i in range(w.size):
            old = w[i]
            w[i] = old + epsilon
            up = forward(model, x, weights, target).loss
            w[i] = old - epsilon
            down = forward(model, x, weights, target).loss
            w[i] = old
            num = (up - down) / (2.0 * epsilon)
            ana = grads[k][i]
            worst = max(worst, abs(ana - num) / max(1e-12, abs(ana) + abs(num)))
    return worst
