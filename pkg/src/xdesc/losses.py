"""Translation and matching losses, each returning its value and gradient
with respect to the network outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmall, ConfigError, DomainError, ShapeError

VARIANTS = ("quadratic", "linear", "auto_encoder")
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    margin: float = 1.0
    variant: str = "quadratic"
    match_diagonal: bool = True

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        variant = self.variant.replace("-", "_")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        object.__setattr__(self, "variant", variant)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "margin": self.margin, "variant": self.variant,
                "match_diagonal": self.match_diagonal}


def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[0] < 1:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} must be equal B x n arrays")


def translation_loss_l2(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the batch of the (unsquared) Euclidean residual norm.

    Rows with an exactly zero residual get a zero subgradient.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    _check_pair(pred, target)
    r = pred - target
    norms = np.linalg.norm(r, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1)
    grad = np.where(norms > 0, r / safe, 0) / pred.shape[0]
    return float(norms.mean()), grad.astype(pred.dtype)


def translation_loss_bce(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy averaged over coordinates and batch.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the gradient is taken
    at the clamped value so saturated wrong bits keep a learning signal.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    _check_pair(pred, target)
    if not np.all((target == 0) | (target == 1)):
        raise DomainError("BCE targets must be in {0, 1}")
    x = np.clip(pred.astype(np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    y = target.astype(np.float64)
    value = -(y * np.log(x) + (1 - y) * np.log(1 - x)).mean()
    grad = (x - y) / (x * (1 - x)) / pred.size
    return float(value), grad.astype(pred.dtype)


def pairwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``D[p, q] = ||a[p] - b[q]||`` via the Gram expansion."""
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0))


def hardest_negatives(dist: np.ndarray) -> np.ndarray:
    """Column of the smallest off-diagonal entry per row; ties go to the
    lowest index."""
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    return np.argmin(masked, axis=1)


@dataclass
class TripletResult:
    value: float
    grad_i: np.ndarray
    grad_j: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    neg_index: np.ndarray


def triplet_loss_hardest(emb_i: np.ndarray, emb_j: np.ndarray, margin: float = 1.0) -> TripletResult:
    """Triplet margin loss with in-batch hardest negatives.

    Row ``p`` of ``emb_i`` is the anchor, row ``p`` of ``emb_j`` its positive,
    and the nearest other row of ``emb_j`` its negative.
    """
    emb_i = np.asarray(emb_i)
    emb_j = np.asarray(emb_j, dtype=emb_i.dtype)
    if emb_i.shape != emb_j.shape or emb_i.ndim != 2:
        raise ShapeError(f"embedding batches differ: {emb_i.shape} vs {emb_j.shape}")
    n = emb_i.shape[0]
    if n < 2:
        raise BatchTooSmall("hardest-negative mining needs at least 2 rows")
    neg_idx = hardest_negatives(pairwise_l2(emb_i, emb_j))
    dpos = emb_i - emb_j
    dneg = emb_i - emb_j[neg_idx]
    pos = np.linalg.norm(dpos, axis=1)
    neg = np.linalg.norm(dneg, axis=1)
    hinge = margin + pos - neg
    active = hinge > 0
    value = float(np.where(active, hinge, 0).mean())

    scale = active / n
    upos = np.where(pos > 0, scale / np.where(pos > 0, pos, 1), 0)[:, None] * dpos
    uneg = np.where(neg > 0, scale / np.where(neg > 0, neg, 1), 0)[:, None] * dneg
    grad_i = upos - uneg
    grad_j = -upos
    np.add.at(grad_j, neg_idx, uneg)
    return TripletResult(value, grad_i.astype(emb_i.dtype), grad_j.astype(emb_i.dtype), pos, neg, neg_idx)


def pair_weights(n_algos: int, config: LossConfig, perm: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``(wT, wM)`` over the ``n x n`` pair grid so that the final
    loss is ``sum(wT * LT) + alpha * sum(wM * LM)``."""
    n = n_algos
    if config.variant == "linear":
        if perm is None:
            raise ConfigError("the linear variant needs a permutation")
        perm = np.asarray(perm)
        if sorted(perm.tolist()) != list(range(n)):
            raise ConfigError(f"{perm} is not a permutation of range({n})")
        sel = np.zeros((n, n))
        sel[np.arange(n), perm] = 1.0
        wt = sel / n
        wm = sel.copy()
        if not config.match_diagonal:
            wm[np.diag_indices(n)] = 0
        total = wm.sum()
        wm = wm / total if total else wm
        return wt, wm
    if config.variant == "auto_encoder":
        wt = np.eye(n) / n
    else:
        wt = np.full((n, n), 1.0 / n**2)
    wm = np.ones((n, n))
    if not config.match_diagonal:
        wm[np.diag_indices(n)] = 0
    total = wm.sum()
    return wt, (wm / total if total else wm)


def aggregate_losses(per_pair_t: np.ndarray, per_pair_m: np.ndarray, config: LossConfig,
                     perm: np.ndarray | None = None) -> float:
    per_pair_t = np.asarray(per_pair_t, dtype=np.float64)
    per_pair_m = np.asarray(per_pair_m, dtype=np.float64)
    n = per_pair_t.shape[0]
    if per_pair_t.shape != (n, n) or per_pair_m.shape != (n, n):
        raise ShapeError("per-pair loss matrices must both be |A| x |A|")
    wt, wm = pair_weights(n, config, perm)
    # nan-safe: pairs with zero weight may be left uncomputed
    t = np.nansum(np.where(wt > 0, per_pair_t, 0) * wt)
    m = np.nansum(np.where(wm > 0, per_pair_m, 0) * wm)
    return float(t + config.alpha * m)
