"""Exhaustive descriptor matchers and match-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .descriptors import is_bits
from .errors import ConfigError, DomainError, FormatError, MatchError, ShapeError


@dataclass
class MatchSet:
    index_a: np.ndarray
    index_b: np.ndarray
    distance: np.ndarray
    metric: str = "l2"
    ratio: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.index_a = np.asarray(self.index_a, dtype=np.int64)
        self.index_b = np.asarray(self.index_b, dtype=np.int64)
        self.distance = np.asarray(self.distance, dtype=np.float64)
        if not (self.index_a.shape == self.index_b.shape == self.distance.shape):
            raise ShapeError("match arrays must have equal length")

    def __len__(self) -> int:
        return self.index_a.size

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return list(zip(self.index_a.tolist(), self.index_b.tolist(), self.distance.tolist()))

    def swapped(self) -> "MatchSet":
        order = np.lexsort((self.index_a, self.index_b))
        return MatchSet(self.index_b[order], self.index_a[order], self.distance[order],
                        self.metric, self.ratio, dict(self.meta))

    @classmethod
    def empty(cls, metric: str = "l2", ratio: float | None = None) -> "MatchSet":
        z = np.zeros(0)
        return cls(z, z, z, metric, ratio)

    def to_tsv(self) -> str:
        lines = ["index_a\tindex_b\tdistance"]
        lines += [f"{a}\t{b}\t{d!r}" for a, b, d in self.pairs]
        return "\n".join(lines) + "\n"

    def write_tsv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv())


def read_tsv(path: str | Path, metric: str = "l2") -> MatchSet:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].split("\t") != ["index_a", "index_b", "distance"]:
        raise FormatError(f"{path}: missing 'index_a index_b distance' header")
    a, b, d = [], [], []
    for k, line in enumerate(rows[1:]):
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}: line {k + 2} does not have 3 fields")
        a.append(int(parts[0]))
        b.append(int(parts[1]))
        d.append(float(parts[2]))
    return MatchSet(np.array(a), np.array(b), np.array(d), metric)


# ---------------------------------------------------------------- distances


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack ``N x d`` {0,1} rows into ``N x ceil(d/64)`` uint64 words."""
    bits = np.asarray(bits)
    if not is_bits(bits):
        raise DomainError("hamming matching needs {0,1} descriptors")
    n, d = bits.shape
    n_words = (d + 63) // 64
    padded = np.zeros((n, n_words * 64), dtype=np.uint8)
    padded[:, :d] = bits
    return np.packbits(padded, axis=1).view(np.uint64)


def hamming_matrix(packed_a: np.ndarray, packed_b: np.ndarray) -> np.ndarray:
    out = np.zeros((packed_a.shape[0], packed_b.shape[0]), dtype=np.int64)
    for w in range(packed_a.shape[1]):
        out += np.bitwise_count(packed_a[:, w, None] ^ packed_b[None, :, w])
    return out


def l2_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0))


def distance_matrix(a: np.ndarray, b: np.ndarray, metric: str = "l2") -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"incompatible descriptor dimensions {a.shape} vs {b.shape}")
    if metric == "l2":
        return l2_matrix(a, b)
    if metric == "hamming":
        return hamming_matrix(pack_bits(a), pack_bits(b)).astype(np.float64)
    raise ConfigError(f"unknown metric {metric!r}")


def _reported(a: np.ndarray, b: np.ndarray, rows: np.ndarray, cols: np.ndarray, dist: np.ndarray,
              metric: str) -> np.ndarray:
    """Distances of the selected pairs; L2 is recomputed from the row
    differences so the Gram expansion's roundoff does not leak out."""
    if metric != "l2":
        return dist[rows, cols]
    diff = np.asarray(a, dtype=np.float64)[rows] - np.asarray(b, dtype=np.float64)[cols]
    return np.sqrt(np.sum(diff * diff, axis=1))


def _two_smallest(dist: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index of the nearest entry (lowest index on ties), its distance and
    the second-smallest distance along ``axis``."""
    nn = np.argmin(dist, axis=axis)
    if dist.shape[axis] < 2:
        d1 = np.take_along_axis(dist, np.expand_dims(nn, axis), axis).squeeze(axis)
        return nn, d1, np.full_like(d1, np.inf)
    part = np.partition(dist, 1, axis=axis)
    d1 = np.take(part, 0, axis=axis)
    d2 = np.take(part, 1, axis=axis)
    return nn, d1, d2


def match_nn(a: np.ndarray, b: np.ndarray, metric: str = "l2") -> MatchSet:
    a = np.asarray(a)
    b = np.asarray(b)
    if b.shape[0] == 0:
        raise MatchError("cannot match against an empty descriptor set")
    if a.shape[0] == 0:
        return MatchSet.empty(metric)
    dist = distance_matrix(a, b, metric)
    nn = np.argmin(dist, axis=1)
    rows = np.arange(a.shape[0])
    return MatchSet(rows, nn, _reported(a, b, rows, nn, dist, metric), metric)


def match_mutual_ratio(a: np.ndarray, b: np.ndarray, metric: str = "l2", ratio: float = 0.9,
                       dist: np.ndarray | None = None) -> MatchSet:
    """Mutual nearest neighbours that also pass the second-NN ratio test in
    both query directions."""
    if not 0 < ratio <= 1:
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        if b.shape[0] == 0:
            raise MatchError("cannot match against an empty descriptor set")
        return MatchSet.empty(metric, ratio)
    if dist is None:
        dist = distance_matrix(a, b, metric)
    nn_ab, d1_ab, d2_ab = _two_smallest(dist, axis=1)
    nn_ba, d1_ba, d2_ba = _two_smallest(dist, axis=0)
    rows = np.arange(a.shape[0])
    mutual = nn_ba[nn_ab] == rows
    with np.errstate(divide="ignore", invalid="ignore"):
        ok_ab = d1_ab <= ratio * d2_ab
        ok_ba = d1_ba <= ratio * d2_ba
    keep = mutual & ok_ab & ok_ba[nn_ab]
    # d1 == d2 == 0 must fail the test (ratio of 1)
    keep &= ~((d1_ab == 0) & (d2_ab == 0))
    keep &= ~((d1_ba[nn_ab] == 0) & (d2_ba[nn_ab] == 0))
    idx = rows[keep]
    return MatchSet(idx, nn_ab[idx], _reported(a, b, idx, nn_ab[idx], dist, metric), metric, ratio)


@dataclass(frozen=True)
class MatchMetrics:
    precision: float
    recall: float
    count: int
    correct: int

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "count": self.count,
                "correct": self.correct}


def match_metrics(matches: MatchSet, ids_a: np.ndarray, ids_b: np.ndarray,
                  ground_truth: Iterable[tuple[int, int]] | None = None) -> MatchMetrics:
    """Precision and recall of index matches against patch-id correspondences.

    Without explicit ``ground_truth``, two rows correspond when they carry the
    same patch id.
    """
    ids_a = np.asarray(ids_a, dtype=np.int64)
    ids_b = np.asarray(ids_b, dtype=np.int64)
    if ground_truth is None:
        gt = {(int(p), int(p)) for p in np.intersect1d(ids_a, ids_b)}
    else:
        gt = {(int(p), int(q)) for p, q in ground_truth}
    found = zip(ids_a[matches.index_a].tolist(), ids_b[matches.index_b].tolist())
    correct = sum(1 for pair in found if pair in gt)
    count = len(matches)
    precision = correct / count if count else 1.0
    recall = correct / len(gt) if gt else 0.0
    return MatchMetrics(precision, recall, count, correct)
