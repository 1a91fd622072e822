"""Training losses and evaluation statistics.

Losses operate on normalized scores in [0.2, 1] and return (value, gradient
with respect to each head's predictions).  Evaluation uses Spearman rank
correlation r and mean squared error e; e is reported on the denormalized
1-5 scale.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np


class ConstantInputError(ValueError):
    """Spearman correlation is undefined when either vector is constant."""


@dataclass(frozen=True)
class BatchLabels:
    """Normalized targets per head plus dataset provenance for loss weighting.

    sizes maps each dataset tag in the training mix to its training-set size;
    tags lists the source dataset of each sample in the batch.
    """

    targets: dict[str, np.ndarray]
    tags: tuple[str, ...]
    sizes: dict[str, int]

    def __post_init__(self):
        targets = {k: np.asarray(v, dtype=np.float64) for k, v in self.targets.items()}
        n = len(self.tags)
        for head, values in targets.items():
            if values.shape != (n,):
                raise ValueError(f"head {head}: {values.shape} targets for {n} samples")
            if np.any(values < 0.2) or np.any(values > 1.0):
                raise ValueError(f"head {head}: labels outside [0.2, 1]")
        for tag, size in self.sizes.items():
            if size <= 0:
                raise ValueError(f"dataset {tag}: nonpositive recorded size {size}")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "tags", tuple(self.tags))


@dataclass(frozen=True)
class EvalResult:
    r: float
    e: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("Spearman correlation needs at least 2 samples")


def mse_loss(preds: dict[str, np.ndarray], targets: dict[str, np.ndarray]):
    """Mean over samples and heads of squared error, with d loss / d pred."""
    if set(preds) != set(targets):
        raise ValueError(f"prediction heads {sorted(preds)} != targets {sorted(targets)}")
    count = sum(np.asarray(p).size for p in preds.values())
    if count == 0:
        raise ValueError("empty batch")
    loss = 0.0
    grads = {}
    for head in preds:
        diff = np.asarray(preds[head], dtype=np.float64) - np.asarray(
            targets[head], dtype=np.float64
        )
        loss += float(np.sum(diff * diff))
        grads[head] = 2.0 * diff / count
    return loss / count, grads


def bias_aware_loss(preds: dict[str, np.ndarray], labels: BatchLabels):
    """Squared error weighted by inverse relative dataset size.

    Sample i from dataset d gets weight N / (D * N_d) with N the total
    training size over D datasets; weights are renormalized to mean 1 within
    the batch so the dataset mix does not change the effective step size.
    """
    if set(preds) != set(labels.targets):
        raise ValueError(
            f"prediction heads {sorted(preds)} != targets {sorted(labels.targets)}"
        )
    n_batch = len(labels.tags)
    if n_batch == 0:
        raise ValueError("empty batch")
    for tag in labels.tags:
        if tag not in labels.sizes:
            raise ValueError(f"unknown dataset tag {tag!r}; sizes cover {sorted(labels.sizes)}")
    total = sum(labels.sizes.values())
    n_sets = len(labels.sizes)
    weights = np.array(
        [total / (n_sets * labels.sizes[tag]) for tag in labels.tags], dtype=np.float64
    )
    weights = weights / weights.mean()
    count = n_batch * len(preds)
    loss = 0.0
    grads = {}
    for head in preds:
        diff = np.asarray(preds[head], dtype=np.float64) - labels.targets[head]
        loss += float(np.sum(weights * diff * diff))
        grads[head] = 2.0 * weights * diff / count
    return loss / count, grads


def sample_weights(labels: BatchLabels) -> np.ndarray:
    """Per-sample bias-aware weights after batch renormalization to mean 1."""
    total = sum(labels.sizes.values())
    n_sets = len(labels.sizes)
    weights = np.array(
        [total / (n_sets * labels.sizes[tag]) for tag in labels.tags], dtype=np.float64
    )
    return weights / weights.mean()


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties replaced by the mean rank of the tied group."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation; exactly +/-1 for strictly monotone pairs."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least 2 samples")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ConstantInputError("correlation undefined for a constant vector")
    ra = average_ranks(a)
    rb = average_ranks(b)
    if np.array_equal(ra, rb):
        return 1.0
    if np.array_equal(ra + rb, np.full(a.size, a.size + 1.0)):
        return -1.0
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    return float(np.sum(ra * rb) / np.sqrt(np.sum(ra * ra) * np.sum(rb * rb)))


def mse_metric(pred_mos, true_mos) -> float:
    """Mean squared error on the denormalized 1-5 scale."""
    p = np.asarray(pred_mos, dtype=np.float64).reshape(-1)
    t = np.asarray(true_mos, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.mean((p - t) ** 2))


def correlation_matrix(columns: dict[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    """Pairwise Spearman matrix over named columns; unit diagonal, symmetric."""
    names = list(columns)
    vectors = [np.asarray(columns[n], dtype=np.float64).reshape(-1) for n in names]
    length = vectors[0].size if vectors else 0
    for name, vec in zip(names, vectors):
        if vec.size != length:
            raise ValueError(f"column {name!r} has length {vec.size}, expected {length}")
    k = len(names)
    matrix = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            r = spearman(vectors[i], vectors[j])
            matrix[i, j] = r
            matrix[j, i] = r
    return names, matrix


def correlation_matrix_csv(names: list[str], matrix: np.ndarray) -> str:
    out = io.StringIO()
    out.write("," + ",".join(names) + "\n")
    for name, row in zip(names, matrix):
        out.write(name + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def eval_results_csv(rows: list[tuple[str, EvalResult]], with_average: bool = True) -> str:
    """One row per testset; optionally an AVERAGE row (unweighted means)."""
    out = io.StringIO()
    out.write("testset,r,e,n\n")
    for name, res in rows:
        out.write(f"{name},{res.r!r},{res.e!r},{res.n}\n")
    if with_average and rows:
        r_avg = sum(res.r for _, res in rows) / len(rows)
        e_avg = sum(res.e for _, res in rows) / len(rows)
        n_total = sum(res.n for _, res in rows)
        out.write(f"AVERAGE,{r_avg!r},{e_avg!r},{n_total}\n")
    return out.getvalue()
