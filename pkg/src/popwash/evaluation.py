"""Population evaluation: ensembling, soups, interpolation grids, telemetry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .nn import Dataset, accuracy, forward, softmax
from .params import (LayeredParams, PopulationView, consensus_distance, interpolate,
                     weighted_average)


@dataclass
class MetricsRecord:
    """One telemetry row of a training run."""

    step: int
    lr: float
    mean_loss: float
    avg_consensus_dist: float
    sum_sq_dist: float
    comm_scalars_cum: float
    comm_scalars_effective_cum: float

    CSV_HEADER = ("step", "lr", "mean_loss", "avg_consensus_dist", "sum_sq_dist",
                  "comm_scalars_cum", "comm_scalars_effective_cum")

    def as_row(self) -> tuple:
        return (self.step, self.lr, self.mean_loss, self.avg_consensus_dist,
                self.sum_sq_dist, self.comm_scalars_cum, self.comm_scalars_effective_cum)


@dataclass
class GreedySoupResult:
    subset: list[int]
    val_accuracy: float
    test_accuracy: float


@dataclass
class EvalSummary:
    """Post-training scores of one population."""

    ensemble_acc: float
    averaged_acc: float
    per_model_acc: list[float]
    best_model_acc: float
    worst_model_acc: float
    per_model_val_acc: list[float] | None = None
    greedy_soup: GreedySoupResult | None = None

    def to_dict(self) -> dict:
        out = {
            "ensemble_acc": self.ensemble_acc,
            "averaged_acc": self.averaged_acc,
            "per_model_acc": self.per_model_acc,
            "best_model_acc": self.best_model_acc,
            "worst_model_acc": self.worst_model_acc,
            "per_model_val_acc": self.per_model_val_acc,
        }
        if self.greedy_soup is not None:
            out["greedy_soup"] = {
                "subset": self.greedy_soup.subset,
                "val_accuracy": self.greedy_soup.val_accuracy,
                "test_accuracy": self.greedy_soup.test_accuracy,
            }
        else:
            out["greedy_soup"] = None
        return out


def ensemble_accuracy(pop: PopulationView, x: np.ndarray, y: np.ndarray,
                      activation: str = "relu", average: str = "probs") -> float:
    """Prediction-level ensembling: average the per-model predictions, then argmax.

    ``average`` selects the averaging space: post-softmax probabilities
    (the default) or raw logits.  Ties go to the lowest class index.
    """
    if average not in ("probs", "logits"):
        raise ValidationError(f"unknown averaging space {average!r}")
    acc = None
    for m in pop.models:
        logits = forward(m, x, activation)
        contrib = softmax(logits) if average == "probs" else logits
        acc = contrib if acc is None else acc + contrib
    preds = np.argmax(acc, axis=1)
    return float(np.mean(preds == np.asarray(y)))


def averaged_model(pop: PopulationView) -> LayeredParams:
    """The uniform soup: coordinatewise mean of all models."""
    n = pop.n_models
    return weighted_average(pop.models, [1.0 / n] * n)


def greedy_soup(pop: PopulationView, dataset: Dataset, activation: str = "relu",
                strict: bool = False) -> GreedySoupResult:
    """Greedy soup over the population.

    Models are visited in descending validation accuracy (ties by model
    index); each is kept iff adding it does not drop the soup's
    validation accuracy (strictly improves it, with ``strict``).
    """
    if len(dataset.y_val) == 0:
        raise ValidationError("greedy soup requires a non-empty validation split")
    val_accs = [accuracy(m, dataset.x_val, dataset.y_val, activation) for m in pop.models]
    order = sorted(range(pop.n_models), key=lambda n: (-val_accs[n], n))

    subset = [order[0]]
    current_val = val_accs[order[0]]
    for n in order[1:]:
        candidate = subset + [n]
        cand_params = weighted_average([pop.models[i] for i in candidate],
                                       [1.0 / len(candidate)] * len(candidate))
        cand_val = accuracy(cand_params, dataset.x_val, dataset.y_val, activation)
        keep = cand_val > current_val if strict else cand_val >= current_val
        if keep:
            subset = candidate
            current_val = cand_val
    soup = weighted_average([pop.models[i] for i in subset], [1.0 / len(subset)] * len(subset))
    test_acc = accuracy(soup, dataset.x_test, dataset.y_test, activation)
    return GreedySoupResult(subset=subset, val_accuracy=current_val, test_accuracy=test_acc)


def interpolation_grid(pop: PopulationView, lambdas, x: np.ndarray, y: np.ndarray,
                       activation: str = "relu") -> np.ndarray:
    """Accuracy of (1-lam)*model_i + lam*model_j for every pair and coefficient.

    Returns an (N, N, len(lambdas)) array; the diagonal reproduces the
    per-model accuracies and grid[i, j, k] mirrors grid[j, i, -1-k] for a
    symmetric coefficient grid.
    """
    lambdas = list(lambdas)
    n = pop.n_models
    grid = np.empty((n, n, len(lambdas)))
    for i in range(n):
        for j in range(n):
            for k, lam in enumerate(lambdas):
                grid[i, j, k] = accuracy(interpolate(pop.models[i], pop.models[j], lam),
                                         x, y, activation)
    return grid


def write_interpolation_csv(grid: np.ndarray, lambdas, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model_a,model_b,lambda,accuracy\n")
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                for k, lam in enumerate(lambdas):
                    fh.write(f"{i},{j},{lam:.17g},{grid[i, j, k]:.17g}\n")


def evaluate_population(pop: PopulationView, dataset: Dataset,
                        activation: str = "relu", with_greedy: bool = True) -> EvalSummary:
    per_model = [accuracy(m, dataset.x_test, dataset.y_test, activation) for m in pop.models]
    per_model_val = None
    greedy = None
    if with_greedy and len(dataset.y_val):
        per_model_val = [accuracy(m, dataset.x_val, dataset.y_val, activation)
                         for m in pop.models]
        greedy = greedy_soup(pop, dataset, activation)
    avg_acc = accuracy(averaged_model(pop), dataset.x_test, dataset.y_test, activation)
    return EvalSummary(
        ensemble_acc=ensemble_accuracy(pop, dataset.x_test, dataset.y_test, activation),
        averaged_acc=avg_acc,
        per_model_acc=per_model,
        best_model_acc=max(per_model),
        worst_model_acc=min(per_model),
        per_model_val_acc=per_model_val,
        greedy_soup=greedy,
    )


def telemetry_hook(pop: PopulationView, step: int, lr: float, mean_loss: float,
                   ledger) -> MetricsRecord:
    """Snapshot consensus distance and cumulative traffic at one step."""
    sum_sq, avg_dist = consensus_distance(pop)
    return MetricsRecord(step=step, lr=lr, mean_loss=mean_loss,
                         avg_consensus_dist=avg_dist, sum_sq_dist=sum_sq,
                         comm_scalars_cum=ledger.nominal_mean,
                         comm_scalars_effective_cum=ledger.effective_mean)
