"""Continual-learning metrics over a lower-triangular accuracy matrix.

Entry a[t][tau] is the accuracy on dataset tau's test set measured after
training update t (tau <= t, both 1-based). Correct counts and test-set
sizes are kept separately so pooled accuracy is exact.
"""

from __future__ import annotations

from .errors import ContractError

__all__ = ["AccuracyMatrix", "average_accuracy", "forgetting"]


class AccuracyMatrix:
    def __init__(self):
        self._correct = {}  # (t, tau) -> correct count
        self._sizes = {}    # tau -> test-set size

    def record(self, t: int, tau: int, correct: int, size: int):
        if tau < 1 or t < tau:
            raise ContractError(
                f"entry ({t}, {tau}) outside the lower triangle")
        if size < 1 or not 0 <= correct <= size:
            raise ContractError(
                f"invalid counts for ({t}, {tau}): {correct}/{size}")
        if (t, tau) in self._correct:
            raise ContractError(f"entry ({t}, {tau}) recorded twice")
        if tau in self._sizes and self._sizes[tau] != size:
            raise ContractError(
                f"test set {tau} changed size: {self._sizes[tau]} vs {size}")
        self._correct[(t, tau)] = int(correct)
        self._sizes[tau] = int(size)

    def accuracy(self, t: int, tau: int) -> float:
        if (t, tau) not in self._correct:
            raise ContractError(f"entry ({t}, {tau}) missing")
        return self._correct[(t, tau)] / self._sizes[tau]

    def correct(self, t: int, tau: int) -> int:
        if (t, tau) not in self._correct:
            raise ContractError(f"entry ({t}, {tau}) missing")
        return self._correct[(t, tau)]

    def size(self, tau: int) -> int:
        return self._sizes[tau]

    @property
    def num_updates(self) -> int:
        return max((t for t, _ in self._correct), default=0)


def average_accuracy(matrix: AccuracyMatrix, t: int, *,
                     pooled: bool = True) -> float:
    """Accuracy over all test sets seen up to update t.

    Default pools instances: sum of correct over sum of sizes. The
    task-mean variant (pooled=False) averages per-dataset accuracies and
    is provided for cross-checking only.
    """
    if t < 1:
        raise ContractError(f"update index must be >= 1, got {t}")
    if pooled:
        total_correct = sum(matrix.correct(t, tau) for tau in range(1, t + 1))
        total_size = sum(matrix.size(tau) for tau in range(1, t + 1))
        return total_correct / total_size
    return sum(matrix.accuracy(t, tau) for tau in range(1, t + 1)) / t


def forgetting(matrix: AccuracyMatrix, t_final: int) -> float:
    """Mean over earlier datasets of (best historical accuracy - final).

    F = (1/(T-1)) * sum_{tau=1}^{T-1} [max_{t in tau..T-1} a[t][tau] - a[T][tau]]
    """
    if t_final < 2:
        raise ContractError(
            f"forgetting needs at least 2 updates, got {t_final}")
    total = 0.0
    for tau in range(1, t_final):
        best = max(matrix.accuracy(t, tau) for t in range(tau, t_final))
        total += best - matrix.accuracy(t_final, tau)
    return total / (t_final - 1)
