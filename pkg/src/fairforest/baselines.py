"""Alternative constraint placements and reference baselines.

Four contrast points against the node-level penalty:

* ``OnlineMlpLearner``: a two-layer ReLU network with one fairness
  constraint on the output vector itself, aggregates kept for all four
  parameter blocks.
* ``LeafPenaltyLearner``: the same forest learner, but the penalty sits
  on the leaf probabilities (products of gates) instead of on the gates.
* ``ReservoirLearner``: stores every past instance and recomputes the
  exact batch fairness gradient at the current parameters each step.
* ``MajorityLearner``: emits the model's prediction with probability
  ``p`` and a majority label otherwise.

Every learner exposes the same ``step``/``snapshot`` protocol as
``OnlineForestLearner``, so all of them run under ``run_stream``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DataError, DomainError, ShapeError
from .forest import AncestorMask, ObliqueForest, build_mask
from .gradients import (
    ForestGradient,
    HuberPenalty,
    _huber_slope_array,
    softmax,
)
from .learner import (
    AdamParams,
    AdamState,
    LearnerConfig,
    MetricsTracker,
    OnlineForestLearner,
    StepSnapshot,
)

BASELINE_NAMES = ("aranyani", "mlp", "leaf", "reservoir", "majority")


# ---------------------------------------------------------------------------
# Reservoir: exact batch recomputation over the full history.
# ---------------------------------------------------------------------------


class Reservoir:
    """Unbounded store of every instance seen so far."""

    def __init__(self, n_features: int):
        self.n_features = n_features
        self.features: list[np.ndarray] = []
        self.groups: list[int] = []
        self.labels: list[int] = []

    def add(self, x: np.ndarray, a: int, y: int | None = None) -> None:
        self.features.append(np.asarray(x, dtype=np.float64))
        self.groups.append(int(a))
        self.labels.append(-1 if y is None else int(y))

    def __len__(self) -> int:
        return len(self.features)

    def group_features(self, group: int) -> np.ndarray:
        rows = [x for x, g in zip(self.features, self.groups) if g == group]
        if not rows:
            return np.empty((0, self.n_features))
        return np.stack(rows)


def reservoir_fairness_gradient(
    reservoir: Reservoir, forest: ObliqueForest, penalty: HuberPenalty,
    mask: AncestorMask | None = None,
) -> tuple[ForestGradient, bool]:
    """Exact weighted fairness gradient over the stored history.

    Recomputes every gate output and gate gradient at the current
    parameters, takes exact per-group means, and applies the Huber slope
    to the exact gap.  Returns ``(gradient, cold)``; the gradient is zero
    and ``cold`` is True while either group is absent from the history.
    """
    grad = ForestGradient.zeros(forest.shape)
    x0 = reservoir.group_features(0)
    x1 = reservoir.group_features(1)
    if len(x0) == 0 or len(x1) == 0:
        return grad, True
    if penalty.weight == 0.0:
        return grad, False
    stats = [_reservoir_group_stats(forest, x) for x in (x0, x1)]
    gap = stats[0][0] - stats[1][0]  # (T, m)
    coeff = _huber_slope_array(gap, penalty.delta) * penalty.weight
    grad.weights += coeff[:, :, None] * (stats[0][1] - stats[1][1])
    grad.biases += coeff * (stats[0][2] - stats[1][2])
    return grad, False


def _reservoir_group_stats(forest: ObliqueForest, features: np.ndarray):
    """Per-node means of gate outputs and gate gradients over a batch."""
    gates = expit(
        np.einsum("tmd,nd->tnm", forest.weights, features)
        + forest.biases[:, None, :]
    )  # (T, n, m)
    slopes = gates * (1.0 - gates)
    n = features.shape[0]
    mean_out = gates.mean(axis=1)
    mean_gw = np.einsum("tnm,nd->tmd", slopes, features) / n
    mean_gb = slopes.mean(axis=1)
    return mean_out, mean_gw, mean_gb


class ReservoirLearner(OnlineForestLearner):
    """Forest learner whose fairness gradient is recomputed from scratch
    over the full history each step.  The task path is unchanged."""

    def __init__(self, config: LearnerConfig, record_trace: bool = False):
        if config.fairness not in ("dp", "none"):
            raise ConfigurationError(
                "the reservoir baseline supports the dp notion only"
            )
        super().__init__(config, record_trace=record_trace)
        self.store = None
        self.reservoir = Reservoir(config.n_features)
        self._cold = True

    def _update_fairness_state(self, x, y, a, cache) -> None:
        self.reservoir.add(x, a, y)

    def _fairness_gradient(self) -> ForestGradient:
        if self.config.fairness == "none" or self.penalty.weight == 0.0:
            grad = ForestGradient.zeros(self.forest.shape)
            self._cold = len(self.reservoir.group_features(0)) == 0 or \
                len(self.reservoir.group_features(1)) == 0
            return grad
        grad, self._cold = reservoir_fairness_gradient(
            self.reservoir, self.forest, self.penalty, self.mask
        )
        return grad

    def checkpoint(self) -> dict:
        raise ConfigurationError(
            "checkpointing is implemented for the node-statistics learner only"
        )


# ---------------------------------------------------------------------------
# Leaf-level constraint.
# ---------------------------------------------------------------------------


class LeafAggregateStore:
    """Running per-group means of leaf probabilities and their parameter
    Jacobians, one cell per (tree, group)."""

    def __init__(self, tree_count: int, n_leaves: int, n_nodes: int,
                 n_features: int, n_groups: int = 2):
        self.counts = np.zeros((tree_count, n_groups), dtype=np.int64)
        self.mean_probs = np.zeros((tree_count, n_groups, n_leaves))
        self.mean_jac_w = np.zeros((tree_count, n_groups, n_leaves, n_nodes,
                                    n_features))
        self.mean_jac_b = np.zeros((tree_count, n_groups, n_leaves, n_nodes))

    def update_all(self, group: int, probs: np.ndarray, jac_w: np.ndarray,
                   jac_b: np.ndarray) -> None:
        """probs (T, L); jac_w (T, L, m, d); jac_b (T, L, m)."""
        self.counts[:, group] += 1
        counts = self.counts[:, group]
        self.mean_probs[:, group] += (
            probs - self.mean_probs[:, group]
        ) / counts[:, None]
        self.mean_jac_w[:, group] += (
            jac_w - self.mean_jac_w[:, group]
        ) / counts[:, None, None, None]
        self.mean_jac_b[:, group] += (
            jac_b - self.mean_jac_b[:, group]
        ) / counts[:, None, None]


class LeafPenaltyLearner(OnlineForestLearner):
    """Forest learner with the Huber penalty on per-leaf probability gaps.

    The constrained quantity is the signed difference of group-conditional
    mean leaf probabilities; its parameter gradient reaches every gate on
    the leaf's path.  Leaf rows still receive no fairness gradient.
    """

    def __init__(self, config: LearnerConfig, record_trace: bool = False):
        if config.fairness not in ("dp", "none"):
            raise ConfigurationError(
                "the leaf-penalty baseline supports the dp notion only"
            )
        super().__init__(config, record_trace=record_trace)
        self.store = None
        shape = self.forest.shape
        self.leaf_store = LeafAggregateStore(
            shape.tree_count, shape.n_leaves, shape.n_nodes, shape.n_features,
            config.n_groups,
        )

    def _update_fairness_state(self, x, y, a, cache) -> None:
        slope = cache.gates * (1.0 - cache.gates)  # (T, m)
        # d p_l / d w_i = (d p_l / d n_i) * n_i (1 - n_i) * x
        jac_b = np.swapaxes(cache.leaf_jac, 1, 2) * slope[:, None, :]  # (T, L, m)
        jac_w = jac_b[:, :, :, None] * x[None, None, None, :]
        self.leaf_store.update_all(a, cache.leaf_probs, jac_w, jac_b)

    def _fairness_gradient(self) -> ForestGradient:
        grad = ForestGradient.zeros(self.forest.shape)
        if self.config.fairness == "none" or self.penalty.weight == 0.0:
            return grad
        store = self.leaf_store
        warm = (store.counts[:, 0] > 0) & (store.counts[:, 1] > 0)  # (T,)
        if not warm.any():
            return grad
        gap = store.mean_probs[:, 0] - store.mean_probs[:, 1]  # (T, L)
        coeff = _huber_slope_array(gap, self.penalty.delta)
        coeff *= warm[:, None] * self.penalty.weight
        grad.weights += np.einsum(
            "tl,tlmd->tmd", coeff, store.mean_jac_w[:, 0] - store.mean_jac_w[:, 1]
        )
        grad.biases += np.einsum(
            "tl,tlm->tm", coeff, store.mean_jac_b[:, 0] - store.mean_jac_b[:, 1]
        )
        return grad

    def checkpoint(self) -> dict:
        raise ConfigurationError(
            "checkpointing is implemented for the node-statistics learner only"
        )


# ---------------------------------------------------------------------------
# Two-layer MLP with an output-level constraint.
# ---------------------------------------------------------------------------


@dataclass
class MlpConfig:
    """Configuration of the MLP baseline."""

    n_features: int
    n_outputs: int = 2
    hidden: int = 64
    fairness_weight: float = 0.0
    huber_delta: float = 0.01
    n_groups: int = 2
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden < 1:
            raise ConfigurationError(f"hidden width must be >= 1, got {self.hidden}")
        if self.n_features < 1 or self.n_outputs < 2:
            raise ConfigurationError("need n_features >= 1 and n_outputs >= 2")
        if self.n_groups != 2:
            raise ConfigurationError("the MLP baseline compares exactly 2 groups")
        if self.fairness_weight < 0 or self.huber_delta <= 0:
            raise ConfigurationError("bad penalty parameters")

    @classmethod
    def from_learner_config(cls, config: LearnerConfig,
                            hidden: int = 64) -> "MlpConfig":
        return cls(
            n_features=config.n_features,
            n_outputs=config.n_outputs,
            hidden=hidden,
            fairness_weight=config.fairness_weight,
            huber_delta=config.huber_delta,
            n_groups=config.n_groups,
            learning_rate=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            adam_epsilon=config.adam_epsilon,
            seed=config.seed,
        )


@dataclass
class MlpParams:
    """Parameters of the two-layer ReLU network."""

    w1: np.ndarray  # (d, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, c)
    b2: np.ndarray  # (c,)

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


class _MlpOutputStore:
    """Per-group means of the output vector and of its Jacobian in each
    parameter block."""

    def __init__(self, n_features: int, hidden: int, n_outputs: int,
                 n_groups: int = 2):
        d, h, c = n_features, hidden, n_outputs
        self.counts = np.zeros(n_groups, dtype=np.int64)
        self.mean_out = np.zeros((n_groups, c))
        self.mean_j_w1 = np.zeros((n_groups, d, h, c))
        self.mean_j_b1 = np.zeros((n_groups, h, c))
        self.mean_j_w2 = np.zeros((n_groups, h, c, c))
        self.mean_j_b2 = np.zeros((n_groups, c, c))

    def update(self, group: int, out, j_w1, j_b1, j_w2, j_b2) -> None:
        self.counts[group] += 1
        n = self.counts[group]
        for mean, value in (
            (self.mean_out, out), (self.mean_j_w1, j_w1),
            (self.mean_j_b1, j_b1), (self.mean_j_w2, j_w2),
            (self.mean_j_b2, j_b2),
        ):
            mean[group] += (value - mean[group]) / n


class OnlineMlpLearner:
    """Two-layer ReLU network with the fairness penalty on the mean
    output gap between groups, trained one instance at a time."""

    def __init__(self, config: MlpConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, h, c = config.n_features, config.hidden, config.n_outputs
        self.params = MlpParams(
            w1=rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(d, h)),
            b1=np.zeros(h),
            w2=rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), size=(h, c)),
            b2=np.zeros(c),
        )
        self.penalty = HuberPenalty(config.huber_delta, config.fairness_weight)
        self.store = _MlpOutputStore(d, h, c, config.n_groups)
        self.adam = AdamState(
            self.params.arrays(),
            AdamParams(config.learning_rate, config.beta1, config.beta2,
                       config.adam_epsilon),
        )
        self.metrics = MetricsTracker(config.n_groups, c)
        self.step_count = 0
        self._last_total_norm = 0.0
        self._last_fair_norm = 0.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        hidden = np.maximum(x @ self.params.w1 + self.params.b1, 0.0)
        return hidden @ self.params.w2 + self.params.b2

    def predict(self, x: np.ndarray) -> int:
        return int(np.argmax(self.forward(np.asarray(x, dtype=np.float64))))

    def step(self, x: np.ndarray, y: int, a: int) -> tuple[int, StepSnapshot]:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (cfg.n_features,):
            raise ShapeError(
                f"expected feature vector of shape ({cfg.n_features},), got {x.shape}"
            )
        if not np.isfinite(x).all():
            raise DataError("feature vector contains non-finite values")
        if not 0 <= y < cfg.n_outputs:
            raise DomainError(f"label {y} outside [0, {cfg.n_outputs})")
        if not 0 <= a < cfg.n_groups:
            raise DomainError(f"group {a} outside [0, {cfg.n_groups})")
        pre = x @ self.params.w1 + self.params.b1
        hidden = np.maximum(pre, 0.0)
        active = (pre > 0.0).astype(np.float64)
        out = hidden @ self.params.w2 + self.params.b2
        prediction = int(np.argmax(out))
        self.metrics.update(prediction, out, y, a)
        # Output Jacobians in each block, for the aggregate store.
        c = cfg.n_outputs
        eye = np.eye(c)
        gate = active[:, None] * self.params.w2  # (h, c): d out_c / d pre_j
        j_w1 = x[:, None, None] * gate[None, :, :]
        j_b1 = gate
        j_w2 = hidden[:, None, None] * eye[None, :, :]
        j_b2 = eye
        self.store.update(a, out, j_w1, j_b1, j_w2, j_b2)
        # Task gradient.
        residual = softmax(out)
        residual[y] -= 1.0
        g_b2 = residual
        g_w2 = np.outer(hidden, residual)
        g_hidden = (self.params.w2 @ residual) * active
        g_b1 = g_hidden
        g_w1 = np.outer(x, g_hidden)
        task = [g_w1, g_b1, g_w2, g_b2]
        fair = self._fairness_gradient()
        total = [t + f for t, f in zip(task, fair)]
        self._last_fair_norm = float(np.sqrt(sum(np.sum(f**2) for f in fair)))
        self._last_total_norm = float(np.sqrt(sum(np.sum(g**2) for g in total)))
        self.adam.apply(self.params.arrays(), total)
        self.step_count += 1
        return prediction, self.snapshot()

    def _fairness_gradient(self) -> list[np.ndarray]:
        p = self.params
        zeros = [np.zeros_like(a) for a in p.arrays()]
        if self.penalty.weight == 0.0:
            return zeros
        store = self.store
        if store.counts[0] == 0 or store.counts[1] == 0:
            return zeros
        gap = store.mean_out[0] - store.mean_out[1]  # (c,)
        coeff = _huber_slope_array(gap, self.penalty.delta) * self.penalty.weight
        return [
            np.einsum("...c,c->...", store.mean_j_w1[0] - store.mean_j_w1[1], coeff),
            np.einsum("...c,c->...", store.mean_j_b1[0] - store.mean_j_b1[1], coeff),
            np.einsum("...c,c->...", store.mean_j_w2[0] - store.mean_j_w2[1], coeff),
            np.einsum("...c,c->...", store.mean_j_b2[0] - store.mean_j_b2[1], coeff),
        ]

    def snapshot(self) -> StepSnapshot:
        return StepSnapshot(
            step=self.step_count,
            accuracy=self.metrics.accuracy,
            dp_hard=self.metrics.dp_hard,
            dp_soft=self.metrics.dp_soft,
            grad_norm_total=self._last_total_norm,
            grad_norm_fair=self._last_fair_norm,
        )


# ---------------------------------------------------------------------------
# Majority post-processing.
# ---------------------------------------------------------------------------


@dataclass
class MajorityConfig:
    """Mixture weight and majority source for the post-processing baseline."""

    p: float = 0.5
    source: str = "running"  # "running" or "fixed"
    fixed_label: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"mixing probability must be in [0, 1], got {self.p}")
        if self.source not in ("running", "fixed"):
            raise ConfigurationError(f"unknown majority source {self.source!r}")
        if self.source == "fixed" and self.fixed_label is None:
            raise ConfigurationError("fixed majority source needs fixed_label")


def majority_postprocess(prediction: int, p: float, majority_label: int,
                         rng: np.random.Generator) -> int:
    """Emit the model's prediction with probability ``p``, else the
    majority label.  One uniform draw per call."""
    return prediction if rng.random() < p else majority_label


class MajorityLearner(OnlineForestLearner):
    """Forest learner whose emitted predictions are mixed with a majority
    label.  Training is unaffected; only the emitted stream (and hence the
    metrics) changes."""

    def __init__(self, config: LearnerConfig, majority: MajorityConfig,
                 record_trace: bool = False):
        super().__init__(config, record_trace=record_trace)
        self.majority = majority
        self._mix_rng = np.random.default_rng((config.seed, 1))
        self._label_counts = np.zeros(config.n_outputs, dtype=np.int64)

    def _majority_label(self) -> int | None:
        if self.majority.source == "fixed":
            return self.majority.fixed_label
        if self._label_counts.sum() == 0:
            return None
        return int(np.argmax(self._label_counts))

    def _emit(self, prediction: int) -> int:
        label = self._majority_label()
        if label is None:
            return prediction
        return majority_postprocess(prediction, self.majority.p, label,
                                    self._mix_rng)

    def _after_feedback(self, y: int) -> None:
        self._label_counts[y] += 1

    def checkpoint(self) -> dict:
        raise ConfigurationError(
            "checkpointing is implemented for the node-statistics learner only"
        )


# ---------------------------------------------------------------------------
# Factory used by the command-line interface.
# ---------------------------------------------------------------------------


def make_learner(name: str, config: LearnerConfig, mlp_hidden: int = 64,
                 majority: MajorityConfig | None = None):
    """Build a learner by baseline name."""
    if name == "aranyani":
        return OnlineForestLearner(config)
    if name == "mlp":
        return OnlineMlpLearner(MlpConfig.from_learner_config(config, mlp_hidden))
    if name == "leaf":
        return LeafPenaltyLearner(config)
    if name == "reservoir":
        return ReservoirLearner(config)
    if name == "majority":
        return MajorityLearner(config, majority or MajorityConfig())
    raise ConfigurationError(
        f"unknown baseline {name!r}; expected one of {BASELINE_NAMES}"
    )
