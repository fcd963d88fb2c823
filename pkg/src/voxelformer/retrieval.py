"""Cosine nearest-neighbour retrieval between brain and image embeddings."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, ShapeError


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def cosine_matrix(a, b) -> np.ndarray:
    """Entry (i, j) is the cosine similarity of ``a[i]`` and ``b[j]``."""
    a, b = _array(a), _array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: shapes {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    for name, norms in (("a", na), ("b", nb)):
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ContractError(f"row {int(zero[0])} of {name} has zero norm")
    return np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)


def diagonal_ranks(sim: np.ndarray) -> np.ndarray:
    """Rank of the diagonal entry within each row, ties going to the lower index."""
    diag = np.diag(sim)[:, None]
    n = sim.shape[0]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    return (sim > diag).sum(axis=1) + ((sim == diag) & lower).sum(axis=1)


def topk_retrieval(sim, k: int = 1, direction: str = "fwd") -> float:
    """Fraction of queries whose true match (the diagonal) lands in the top ``k``.

    ``fwd`` ranks within rows (brain -> image), ``bwd`` within columns.
    """
    sim = _array(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    if not 1 <= k <= sim.shape[0]:
        raise ContractError(f"k={k} out of range for a pool of {sim.shape[0]}")
    if direction == "bwd":
        sim = sim.T
    elif direction != "fwd":
        raise ContractError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    return float(np.mean(diagonal_ranks(sim) < k))


def orthonormal_projection(d_in: int, d_out: int, seed: int) -> np.ndarray:
    """Frozen [d_in, d_out] map with orthonormal columns (or rows when d_out > d_in)."""
    rng = np.random.default_rng(seed)
    if d_out <= d_in:
        q, _ = np.linalg.qr(rng.normal(size=(d_in, d_out)))
        return q
    q, _ = np.linalg.qr(rng.normal(size=(d_out, d_in)))
    return q.T


def image_embeddings(targets: np.ndarray, projection: np.ndarray) -> np.ndarray:
    z = _array(targets) @ projection
    return z / np.sqrt((z * z).sum(axis=1, keepdims=True) + 1e-12)


@dataclass
class RetrievalReport:
    pool_size: int
    trials: int
    seed: int
    k: int = 1
    fwd_top1: float = 0.0
    bwd_top1: float = 0.0
    per_subject: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["subject_id", "fwd_top1", "bwd_top1", "pool_size", "trials"])
        for row in self.per_subject:
            writer.writerow([row["subject_id"], repr(row["fwd_top1"]), repr(row["bwd_top1"]),
                             self.pool_size, self.trials])
        return buf.getvalue()


def trial_pools(n: int, pool_size: int, trials: int, seed: int, stream: int = 0) -> list[np.ndarray]:
    """Per-trial candidate pools, sampled without replacement."""
    if pool_size > n:
        raise ContractError(f"pool of {pool_size} needs at least that many test samples, have {n}")
    return [np.random.default_rng([seed, stream, t]).choice(n, pool_size, replace=False) for t in range(trials)]


def evaluate_embeddings(brain: dict, image: dict, pool_size: int, trials: int, seed: int, k: int = 1,
                        subjects: Sequence | None = None) -> RetrievalReport:
    """Average top-k accuracy over random pools, per subject then across subjects.

    ``brain`` and ``image`` map subject id to aligned [n, D] arrays (row i of
    both belongs to the same stimulus).
    """
    if trials < 1:
        raise ContractError(f"need at least one trial, got {trials}")
    report = RetrievalReport(pool_size=pool_size, trials=trials, seed=seed, k=k)
    for sid in subjects if subjects is not None else sorted(brain):
        b, im = _array(brain[sid]), _array(image[sid])
        if b.shape[0] != im.shape[0]:
            raise ShapeError(f"subject {sid}: {b.shape[0]} brain rows vs {im.shape[0]} image rows")
        fwd, bwd = [], []
        for pool in trial_pools(b.shape[0], pool_size, trials, seed, int(sid)):
            sim = cosine_matrix(b[pool], im[pool])
            fwd.append(topk_retrieval(sim, k, "fwd"))
            bwd.append(topk_retrieval(sim, k, "bwd"))
        report.per_subject.append(
            {"subject_id": int(sid), "fwd_top1": float(np.mean(fwd)), "bwd_top1": float(np.mean(bwd))}
        )
    report.fwd_top1 = float(np.mean([r["fwd_top1"] for r in report.per_subject]))
    report.bwd_top1 = float(np.mean([r["bwd_top1"] for r in report.per_subject]))
    return report


def evaluate(embed: Callable, dataset, projection: np.ndarray, pool_size: int = 50, trials: int = 30,
             seed: int = 0, k: int = 1, mode: str = "test") -> RetrievalReport:
    """Retrieval on ``dataset``'s split with brain embeddings from ``embed(responses, coords)``.

    ``embed`` is typically the trained model's projector path; image-side
    embeddings are the frozen targets mapped through ``projection``.
    """
    brain, image = {}, {}
    for subject in dataset.subjects:
        idx = subject.indices(dataset.split_ids(mode))
        if idx.size < pool_size:
            raise ContractError(
                f"subject {subject.subject_id} has {idx.size} {mode} samples, pool needs {pool_size}"
            )
        brain[subject.subject_id] = embed(subject.responses[idx], subject.coords)
        image[subject.subject_id] = image_embeddings(dataset.targets[subject.stimulus_ids[idx]], projection)
    return evaluate_embeddings(brain, image, pool_size, trials, seed, k)
