"""Held-out recall matrices for naive, translated and joint-space matching.

Rows of the matrices are query families and columns target families, in
the order given. Recall counts mutual-ratio matches whose patch ids agree,
divided by the number of shared patch ids.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .descriptors import CorrespondenceDataset, DescriptorMatrix
from .joint import ModelBank, encode, translate_via_bank
from .matching import match_metrics, match_mutual_ratio
from .pair import PairModel, translate


def recall(a: DescriptorMatrix, b: DescriptorMatrix, metric: str | None = None, ratio: float = 0.9) -> float:
    metric = metric or b.spec.metric
    m = match_mutual_ratio(a.values, b.values, metric, ratio)
    return match_metrics(m, a.patch_ids, b.patch_ids).recall


def naive_recall_matrix(dataset: CorrespondenceDataset, names: Sequence[str] | None = None,
                        ratio: float = 1.0) -> np.ndarray:
    """Raw descriptors matched directly; pairs whose dims or metrics differ
    cannot be matched and score 0. ``ratio=1`` is plain mutual NN."""
    names = list(names or dataset.names)
    out = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            sa, sb = dataset[a].spec, dataset[b].spec
            if sa.dim == sb.dim and sa.metric == sb.metric:
                out[i, j] = recall(dataset[a], dataset[b], sa.metric, ratio)
    return out


def joint_recall_matrix(bank: ModelBank, dataset: CorrespondenceDataset, names: Sequence[str] | None = None,
                        ratio: float = 0.9) -> np.ndarray:
    names = list(names or bank.names)
    emb = {n: encode(bank, n, dataset[n]) for n in names}
    out = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            out[i, j] = recall(emb[a], emb[b], "l2", ratio)
    return out


def bank_translation_matrix(bank: ModelBank, dataset: CorrespondenceDataset,
                            names: Sequence[str] | None = None, ratio: float = 0.9) -> np.ndarray:
    """Source translated through the bank, matched against native target
    descriptors. The diagonal is native self-matching."""
    names = list(names or bank.names)
    out = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            moved = dataset[a] if a == b else translate_via_bank(bank, a, b, dataset[a])
            out[i, j] = recall(moved, dataset[b], ratio=ratio)
    return out


def pair_translation_recall(model: PairModel, dataset: CorrespondenceDataset, ratio: float = 0.9) -> float:
    moved = translate(model, dataset[model.src.name])
    return recall(moved, dataset[model.dst.name], ratio=ratio)


def worst_pair(matrix: np.ndarray) -> float:
    """Smallest off-diagonal (cross-family) entry."""
    off = ~np.eye(matrix.shape[0], dtype=bool)
    return float(matrix[off].min())


def mean_cross(matrix: np.ndarray) -> float:
    off = ~np.eye(matrix.shape[0], dtype=bool)
    return float(matrix[off].mean())


def summarize(matrix: np.ndarray, names: Sequence[str]) -> Mapping:
    return {
        "algorithms": list(names),
        "recall": np.round(matrix, 6).tolist(),
        "worst_cross": round(worst_pair(matrix), 6) if len(names) > 1 else None,
        "mean_cross": round(mean_cross(matrix), 6) if len(names) > 1 else None,
        "min_same": round(float(np.diag(matrix).min()), 6),
    }
