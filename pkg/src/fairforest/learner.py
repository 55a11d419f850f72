"""Online learning loop: predict, observe, update.

Every arriving instance is handled in a fixed order: predict from the
current parameters, fold the outcome into the running metrics, feed the
gate statistics to the aggregate store, assemble the total gradient, and
take one Adam step.  The loop is fully deterministic given the seed, the
configuration, and the instance stream.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    DomainError,
    FairForestError,
    ShapeError,
)
from .forest import AncestorMask, ObliqueForest, build_mask
from .gradients import (
    ForestGradient,
    HuberPenalty,
    _ForwardCache,
    _task_gradient_cached,
    fairness_gradient,
    gradient_norm,
    total_gradient,
)
from .stats import AggregateStore, GroupKey

FAIRNESS_NOTIONS = ("none", "dp", "equalized_odds", "multigroup")


@dataclass(frozen=True)
class AdamParams:
    """Adam hyperparameters."""

    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


class AdamState:
    """First and second moment estimates for a list of parameter arrays."""

    def __init__(self, templates: list[np.ndarray], hyper: AdamParams):
        self.hyper = hyper
        self.m = [np.zeros_like(a) for a in templates]
        self.v = [np.zeros_like(a) for a in templates]
        self.t = 0

    def apply(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """One bias-corrected Adam update, in place on ``params``."""
        self.t += 1
        h = self.hyper
        c1 = 1.0 - h.beta1**self.t
        c2 = 1.0 - h.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * g * g
            p -= h.learning_rate * (m / c1) / (np.sqrt(v / c2) + h.epsilon)

    def snapshot(self) -> dict:
        return {
            "t": self.t,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    def restore(self, data: dict) -> None:
        self.t = int(data["t"])
        self.m = [np.asarray(a, dtype=np.float64) for a in data["m"]]
        self.v = [np.asarray(a, dtype=np.float64) for a in data["v"]]


class MetricsTracker:
    """Running accuracy and demographic-parity gaps of the prediction stream.

    The hard gap compares per-group rates of the predicted label; the
    soft gap compares per-group means of the raw forest output.  Both are
    undefined (``None``) while fewer than two groups have been observed.
    """

    def __init__(self, n_groups: int = 2, n_outputs: int = 2):
        self.n_groups = n_groups
        self.n_outputs = n_outputs
        self.total = 0
        self.correct = 0
        self.group_counts = np.zeros(n_groups, dtype=np.int64)
        self.group_label_sums = np.zeros(n_groups)
        self.group_output_sums = np.zeros((n_groups, n_outputs))

    def update(self, prediction: int, soft_output: np.ndarray, y: int,
               a: int) -> None:
        self.total += 1
        if prediction == y:
            self.correct += 1
        self.group_counts[a] += 1
        self.group_label_sums[a] += prediction
        self.group_output_sums[a] += soft_output

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def dp_hard(self) -> float | None:
        seen = self.group_counts > 0
        if seen.sum() < 2:
            return None
        rates = np.zeros(self.n_groups)
        rates[seen] = self.group_label_sums[seen] / self.group_counts[seen]
        if self.n_groups == 2:
            return float(abs(rates[0] - rates[1]))
        overall = self.group_label_sums.sum() / self.total
        return float(np.max(np.abs(overall - rates[seen])))

    @property
    def dp_soft(self) -> float | None:
        seen = self.group_counts > 0
        if seen.sum() < 2:
            return None
        means = self.group_output_sums[seen] / self.group_counts[seen, None]
        if self.n_groups == 2:
            return float(np.linalg.norm(means[0] - means[1]))
        overall = self.group_output_sums.sum(axis=0) / self.total
        return float(np.max(np.linalg.norm(overall - means, axis=1)))

    def snapshot(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "n_outputs": self.n_outputs,
            "total": self.total,
            "correct": self.correct,
            "group_counts": self.group_counts.tolist(),
            "group_label_sums": self.group_label_sums.tolist(),
            "group_output_sums": self.group_output_sums.tolist(),
        }

    @classmethod
    def from_snapshot(cls, data: dict) -> "MetricsTracker":
        tracker = cls(data["n_groups"], data["n_outputs"])
        tracker.total = int(data["total"])
        tracker.correct = int(data["correct"])
        tracker.group_counts = np.asarray(data["group_counts"], dtype=np.int64)
        tracker.group_label_sums = np.asarray(
            data["group_label_sums"], dtype=np.float64
        )
        tracker.group_output_sums = np.asarray(
            data["group_output_sums"], dtype=np.float64
        )
        return tracker


def dp_metric(tracker: MetricsTracker) -> float | None:
    """Demographic-parity gap of the hard predictions seen so far."""
    return tracker.dp_hard


@dataclass(frozen=True)
class StepSnapshot:
    """Metrics emitted after one learning step."""

    step: int
    accuracy: float
    dp_hard: float | None
    dp_soft: float | None
    grad_norm_total: float
    grad_norm_fair: float


@dataclass(frozen=True)
class TrajectoryRow:
    """One row of a run's trajectory."""

    step: int
    y: int
    a: int
    prediction: int
    accuracy: float
    dp_hard: float | None
    dp_soft: float | None
    grad_norm_total: float
    grad_norm_fair: float


@dataclass
class LearnerConfig:
    """Full configuration of an online forest learner."""

    n_features: int
    n_outputs: int = 2
    height: int = 4
    tree_count: int = 3
    fairness: str = "dp"
    fairness_weight: float = 0.0
    huber_delta: float = 0.01
    n_groups: int = 2
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    aggregate_decay: float | None = None

    def __post_init__(self) -> None:
        if self.n_features < 1:
            raise ConfigurationError(f"n_features must be >= 1, got {self.n_features}")
        if self.n_outputs < 2:
            raise ConfigurationError(f"n_outputs must be >= 2, got {self.n_outputs}")
        if self.tree_count < 1:
            raise ConfigurationError(f"tree_count must be >= 1, got {self.tree_count}")
        if self.fairness not in FAIRNESS_NOTIONS:
            raise ConfigurationError(f"unknown fairness notion {self.fairness!r}")
        if self.fairness_weight < 0:
            raise ConfigurationError("fairness_weight must be non-negative")
        if self.huber_delta <= 0:
            raise ConfigurationError("huber_delta must be positive")
        if self.n_groups < 2:
            raise ConfigurationError(f"n_groups must be >= 2, got {self.n_groups}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.fairness == "dp" and self.n_groups != 2:
            raise ConfigurationError(
                "the dp notion compares exactly 2 groups; use multigroup for more"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LearnerConfig":
        return cls(**data)

    def adam_params(self) -> AdamParams:
        return AdamParams(self.learning_rate, self.beta1, self.beta2,
                          self.adam_epsilon)


@dataclass
class TraceStep:
    """One recorded step: parameters in force plus the instance."""

    forest: ObliqueForest
    x: np.ndarray
    a: int


CHECKPOINT_FORMAT = "fairforest-checkpoint-v1"


class OnlineForestLearner:
    """Per-instance fair learner over an oblique forest.

    Each ``step`` runs the normative order: predict, update metrics, feed
    the aggregate store, build the total gradient, Adam-update.  With
    ``record_trace=True`` the pre-step parameters and the instance are
    kept for later estimation-error audits.
    """

    def __init__(self, config: LearnerConfig, record_trace: bool = False):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.forest = ObliqueForest.random(
            config.height, config.n_features, config.n_outputs,
            config.tree_count, rng=rng,
        )
        self.mask: AncestorMask = build_mask(config.height)
        self.penalty = HuberPenalty(config.huber_delta, config.fairness_weight)
        self.store = self._build_store()
        self.adam = AdamState(self.forest.param_arrays(), config.adam_params())
        self.metrics = MetricsTracker(config.n_groups, config.n_outputs)
        self.step_count = 0
        self.trace: list[TraceStep] | None = [] if record_trace else None
        self._last_total_norm = 0.0
        self._last_fair_norm = 0.0
        self._last_total: ForestGradient | None = None

    def _build_store(self) -> AggregateStore | None:
        cfg = self.config
        if cfg.fairness == "none":
            return None
        return AggregateStore(
            self.forest.shape,
            n_groups=cfg.n_groups,
            notion=cfg.fairness,
            n_classes=cfg.n_outputs if cfg.fairness == "equalized_odds" else None,
            decay=cfg.aggregate_decay,
        )

    # -- stepping ----------------------------------------------------------

    def predict(self, x: np.ndarray) -> int:
        """Prediction only, no state change."""
        x = self._check_instance(x)
        cache = _ForwardCache(self.forest, x, self.mask)
        return int(np.argmax(cache.output))

    def step(self, x: np.ndarray, y: int, a: int) -> tuple[int, StepSnapshot]:
        """Process one instance; returns the prediction made before any
        parameter update, plus the post-step metrics."""
        x = self._check_instance(x)
        if not 0 <= y < self.config.n_outputs:
            raise DomainError(f"label {y} outside [0, {self.config.n_outputs})")
        if not 0 <= a < self.config.n_groups:
            raise DomainError(f"group {a} outside [0, {self.config.n_groups})")
        if self.trace is not None:
            self.trace.append(TraceStep(self.forest.copy(), x.copy(), int(a)))
        cache = _ForwardCache(self.forest, x, self.mask)
        prediction = self._emit(int(np.argmax(cache.output)))
        self.metrics.update(prediction, cache.output, y, a)
        self._update_fairness_state(x, y, a, cache)
        task = _task_gradient_cached(self.forest, x, y, cache)
        fair = self._fairness_gradient()
        total = total_gradient(task, fair)
        self._last_fair_norm = gradient_norm(fair)
        self._last_total_norm = gradient_norm(total)
        self._last_total = total
        self.adam.apply(self.forest.param_arrays(), total.arrays())
        self.step_count += 1
        self._after_feedback(int(y))
        return prediction, self.snapshot()

    def _check_instance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.config.n_features,):
            raise ShapeError(
                f"expected feature vector of shape ({self.config.n_features},), "
                f"got {x.shape}"
            )
        if not np.isfinite(x).all():
            raise DataError("feature vector contains non-finite values")
        return x

    def _emit(self, prediction: int) -> int:
        return prediction

    def _after_feedback(self, y: int) -> None:
        pass

    def _update_fairness_state(self, x: np.ndarray, y: int, a: int,
                               cache: _ForwardCache) -> None:
        if self.store is None:
            return
        if self.config.fairness == "equalized_odds":
            key = GroupKey(a, y)
        else:
            key = GroupKey(a)
        slope = cache.gates * (1.0 - cache.gates)  # (T, m)
        grads_w = slope[:, :, None] * x[None, None, :]
        self.store.update_all(key, cache.gates, grads_w, slope)

    def _fairness_gradient(self) -> ForestGradient:
        if self.store is None or self.penalty.weight == 0.0:
            return ForestGradient.zeros(self.forest.shape)
        return fairness_gradient(self.store, self.penalty, self.forest.shape)

    def snapshot(self) -> StepSnapshot:
        return StepSnapshot(
            step=self.step_count,
            accuracy=self.metrics.accuracy,
            dp_hard=self.metrics.dp_hard,
            dp_soft=self.metrics.dp_soft,
            grad_norm_total=self._last_total_norm,
            grad_norm_fair=self._last_fair_norm,
        )

    # -- checkpointing -------------------------------------------------------

    def checkpoint(self) -> dict:
        """JSON-serializable full state; restoring reproduces the run."""
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "step_count": self.step_count,
            "forest": {
                "height": self.forest.height,
                "weights": self.forest.weights.tolist(),
                "biases": self.forest.biases.tolist(),
                "leaves": self.forest.leaves.tolist(),
            },
            "adam": self.adam.snapshot(),
            "store": None if self.store is None else self.store.snapshot(),
            "metrics": self.metrics.snapshot(),
        }

    def save_checkpoint(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.checkpoint(), fh)

    @classmethod
    def restore(cls, data: dict) -> "OnlineForestLearner":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"unrecognized checkpoint format: {data.get('format')!r}")
        learner = cls(LearnerConfig.from_dict(data["config"]))
        fdata = data["forest"]
        learner.forest = ObliqueForest.from_arrays(
            int(fdata["height"]),
            np.asarray(fdata["weights"], dtype=np.float64),
            np.asarray(fdata["biases"], dtype=np.float64),
            np.asarray(fdata["leaves"], dtype=np.float64),
        )
        learner.adam = AdamState(learner.forest.param_arrays(),
                                 learner.config.adam_params())
        learner.adam.restore(data["adam"])
        if data["store"] is not None:
            learner.store = AggregateStore.from_snapshot(data["store"])
        learner.metrics = MetricsTracker.from_snapshot(data["metrics"])
        learner.step_count = int(data["step_count"])
        return learner

    @classmethod
    def load_checkpoint(cls, path) -> "OnlineForestLearner":
        with open(path, encoding="utf-8") as fh:
            return cls.restore(json.load(fh))


def run_stream(learner, stream: Iterable[tuple]) -> Iterator[TrajectoryRow]:
    """Drive a learner over an instance stream, yielding one row per step.

    Errors raised by a step propagate with the 1-based failing step index
    prefixed to the message.
    """
    for index, (x, y, a) in enumerate(stream, start=1):
        try:
            prediction, snap = learner.step(x, y, a)
        except FairForestError as exc:
            raise type(exc)(f"step {index}: {exc}") from exc
        yield TrajectoryRow(
            step=index,
            y=int(y),
            a=int(a),
            prediction=prediction,
            accuracy=snap.accuracy,
            dp_hard=snap.dp_hard,
            dp_soft=snap.dp_soft,
            grad_norm_total=snap.grad_norm_total,
            grad_norm_fair=snap.grad_norm_fair,
        )
