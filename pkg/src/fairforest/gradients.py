"""Closed-form gradients: task loss, fairness penalty, and their sum.

The task loss is cross-entropy of a softmax over the forest output.  Its
gradient is assembled analytically from the leaf probabilities and their
derivatives in the gate outputs, never by automatic differentiation.

The fairness penalty is a Huber surrogate applied to each node's
group-output gap as estimated by an ``AggregateStore``.  Its gradient
touches node weights and biases only; leaf rows carry no fairness
gradient under any notion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError, ShapeError
from .forest import (
    AncestorMask,
    ForestShape,
    ObliqueForest,
    _all_node_outputs,
    _leaf_probability_gradients_stacked,
    build_mask,
)
from .stats import AggregateStore


@dataclass(frozen=True)
class HuberPenalty:
    """Huber smoothing width and overall weight of the fairness penalty."""

    delta: float
    weight: float

    def __post_init__(self) -> None:
        if not self.delta > 0 or not np.isfinite(self.delta):
            raise ConfigurationError(f"delta must be positive, got {self.delta}")
        if self.weight < 0 or not np.isfinite(self.weight):
            raise ConfigurationError(
                f"penalty weight must be non-negative, got {self.weight}"
            )


@dataclass
class TreeGradient:
    """Gradient of one tree's parameters (views into the forest arrays)."""

    weights: np.ndarray
    biases: np.ndarray
    leaves: np.ndarray


@dataclass
class ForestGradient:
    """Gradient over every parameter of a forest, stacked per tree."""

    weights: np.ndarray  # (T, m, d)
    biases: np.ndarray  # (T, m)
    leaves: np.ndarray  # (T, 2**h, c)

    @classmethod
    def zeros(cls, shape: ForestShape) -> "ForestGradient":
        t, m, d, c = shape.tree_count, shape.n_nodes, shape.n_features, shape.n_outputs
        return cls(np.zeros((t, m, d)), np.zeros((t, m)),
                   np.zeros((t, m + 1, c)))

    def tree(self, index: int) -> TreeGradient:
        return TreeGradient(self.weights[index], self.biases[index],
                            self.leaves[index])

    def arrays(self) -> list[np.ndarray]:
        return [self.weights, self.biases, self.leaves]

    def copy(self) -> "ForestGradient":
        return ForestGradient(self.weights.copy(), self.biases.copy(),
                              self.leaves.copy())

    def tree_norm(self, index: int) -> float:
        """Euclidean norm of one tree's slice of the gradient."""
        return float(np.sqrt(
            np.sum(self.weights[index] ** 2)
            + np.sum(self.biases[index] ** 2)
            + np.sum(self.leaves[index] ** 2)
        ))


def node_grad(n_value: float, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of one gate output in its weights and bias.

    The logistic gate differentiates to ``n (1 - n)`` times the input for
    the weights and ``n (1 - n)`` for the bias.
    """
    x = np.asarray(x, dtype=np.float64)
    slope = n_value * (1.0 - n_value)
    return slope * x, float(slope)


def huber(gap: float, delta: float) -> float:
    """Huber surrogate of the absolute gap: quadratic inside ``|gap| < delta``,
    linear outside."""
    if abs(gap) < delta:
        return 0.5 * gap * gap
    return delta * abs(gap - 0.5 * delta)


def huber_slope(gap: float, delta: float) -> float:
    """Derivative of the Huber surrogate in the gap.

    Inside the quadratic region this is the gap itself; outside it is
    ``delta`` times the sign of ``gap - delta/2`` (zero at the kink).
    """
    if abs(gap) < delta:
        return gap
    return delta * float(np.sign(gap - 0.5 * delta))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log softmax probability of the label."""
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


class _ForwardCache:
    """Per-instance forward intermediates shared by the gradient paths."""

    __slots__ = ("gates", "leaf_probs", "leaf_jac", "output")

    def __init__(self, forest: ObliqueForest, x: np.ndarray, mask: AncestorMask):
        self.gates = _all_node_outputs(forest, x)  # (T, m)
        self.leaf_probs, self.leaf_jac = _leaf_probability_gradients_stacked(
            self.gates, mask
        )
        self.output = np.einsum(
            "tl,tlc->c", self.leaf_probs, forest.leaves
        ) / forest.tree_count


def task_gradient(forest: ObliqueForest, x: np.ndarray, y: int,
                  mask: AncestorMask | None = None) -> ForestGradient:
    """Cross-entropy gradient for one labeled instance.

    Leaf rows receive their own leaf probability times the softmax
    residual; gate parameters receive the residual backpropagated through
    the leaf-probability products, with the product over each path
    assembled exclusive of the differentiated node so saturated gates
    never divide by zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (forest.n_features,):
        raise ShapeError(
            f"expected feature vector of shape ({forest.n_features},), got {x.shape}"
        )
    if not 0 <= y < forest.n_outputs:
        raise ShapeError(f"label {y} outside [0, {forest.n_outputs})")
    if mask is None:
        mask = build_mask(forest.height)
    cache = _ForwardCache(forest, x, mask)
    return _task_gradient_cached(forest, x, y, cache)


def _task_gradient_cached(forest: ObliqueForest, x: np.ndarray, y: int,
                          cache: _ForwardCache) -> ForestGradient:
    if not np.isfinite(cache.output).all():
        raise NumericalError(
            f"forest output is not finite: {cache.output!r}"
        )
    residual = softmax(cache.output)
    residual[y] -= 1.0
    t = forest.tree_count
    grad_leaves = cache.leaf_probs[:, :, None] * residual[None, None, :] / t
    leaf_sensitivity = np.einsum("tlc,c->tl", forest.leaves, residual) / t
    dldn = np.einsum("tml,tl->tm", cache.leaf_jac, leaf_sensitivity)
    slope = cache.gates * (1.0 - cache.gates)
    grad_b = dldn * slope
    grad_w = grad_b[:, :, None] * x[None, None, :]
    return ForestGradient(grad_w, grad_b, grad_leaves)


def fairness_gradient(store: AggregateStore, penalty: HuberPenalty,
                      shape: ForestShape) -> ForestGradient:
    """Weighted Huber-penalty gradient from the store's running means.

    Cold cells (any required group unseen) contribute zero.  The penalty
    weight is folded in here; leaf rows are untouched.
    """
    if (store.shape.tree_count, store.shape.n_nodes, store.shape.n_features) != (
        shape.tree_count, shape.n_nodes, shape.n_features
    ):
        raise ShapeError("store and forest shapes disagree")
    grad = ForestGradient.zeros(shape)
    if penalty.weight == 0.0:
        return grad
    if store.notion == "dp":
        warm = (store.counts[:, :, 0] > 0) & (store.counts[:, :, 1] > 0)
        gap = store.mean_output[:, :, 0] - store.mean_output[:, :, 1]
        coeff = _huber_slope_array(gap, penalty.delta) * warm
        grad.weights += coeff[:, :, None] * (
            store.mean_grad_w[:, :, 0] - store.mean_grad_w[:, :, 1]
        )
        grad.biases += coeff * (
            store.mean_grad_b[:, :, 0] - store.mean_grad_b[:, :, 1]
        )
    elif store.notion == "multigroup":
        overall_warm = store.overall_counts > 0
        for k in range(store.n_groups):
            warm = overall_warm & (store.counts[:, :, k] > 0)
            gap = store.overall_mean_output - store.mean_output[:, :, k]
            coeff = _huber_slope_array(gap, penalty.delta) * warm
            grad.weights += coeff[:, :, None] * (
                store.overall_mean_grad_w - store.mean_grad_w[:, :, k]
            )
            grad.biases += coeff * (
                store.overall_mean_grad_b - store.mean_grad_b[:, :, k]
            )
    elif store.notion == "equalized_odds":
        for c in range(store.n_classes):
            warm = (store.counts[:, :, 0, c] > 0) & (store.counts[:, :, 1, c] > 0)
            gap = store.mean_output[:, :, 0, c] - store.mean_output[:, :, 1, c]
            coeff = _huber_slope_array(gap, penalty.delta) * warm
            grad.weights += coeff[:, :, None] * (
                store.mean_grad_w[:, :, 0, c] - store.mean_grad_w[:, :, 1, c]
            )
            grad.biases += coeff * (
                store.mean_grad_b[:, :, 0, c] - store.mean_grad_b[:, :, 1, c]
            )
    else:
        raise ConfigurationError(
            f"no fairness gradient for notion {store.notion!r}"
        )
    grad.weights *= penalty.weight
    grad.biases *= penalty.weight
    return grad


def _huber_slope_array(gap: np.ndarray, delta: float) -> np.ndarray:
    return np.where(np.abs(gap) < delta, gap, delta * np.sign(gap - 0.5 * delta))


def total_gradient(task: ForestGradient, fairness: ForestGradient) -> ForestGradient:
    """Sum of the task and fairness gradients."""
    return ForestGradient(
        task.weights + fairness.weights,
        task.biases + fairness.biases,
        task.leaves + fairness.leaves,
    )


def gradient_norm(grad: ForestGradient) -> float:
    """Euclidean norm over every parameter of the forest."""
    return float(np.sqrt(
        np.sum(grad.weights**2) + np.sum(grad.biases**2) + np.sum(grad.leaves**2)
    ))
