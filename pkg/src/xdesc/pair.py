"""Directional translation networks between two descriptor families."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, head_for, hidden_dims_for
from .descriptors import AlgorithmSpec, CorrespondenceDataset, DescriptorMatrix, finalize_values
from .errors import ConfigError, DatasetError, FormatError, SpecError
from .losses import translation_loss_bce, translation_loss_l2
from .mlp import MlpModel, adam_init, backward, build_mlp, dumps_xmlp, forward, loads_xmlp, predict, step_models

log = logging.getLogger(__name__)


@dataclass
class PairModel:
    src: AlgorithmSpec
    dst: AlgorithmSpec
    net: MlpModel
    final_loss: float | None = None
    train_config: dict | None = None

    def __post_init__(self) -> None:
        if self.net.in_dim != self.src.dim or self.net.out_dim != self.dst.dim:
            raise SpecError(f"network {self.net.in_dim}->{self.net.out_dim} does not fit "
                            f"{self.src.name}({self.src.dim}) -> {self.dst.name}({self.dst.dim})")


def translation_loss(dst: AlgorithmSpec, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if dst.is_binary:
        return translation_loss_bce(pred, target)
    return translation_loss_l2(pred, target)


def build_pair_net(src: AlgorithmSpec, dst: AlgorithmSpec, seed: int = 0) -> MlpModel:
    return build_mlp(src.dim, hidden_dims_for(src), dst.dim, head_for(dst), seed=seed)


def evaluate_pair_loss(net: MlpModel, dst: AlgorithmSpec, x: np.ndarray, y: np.ndarray) -> float:
    return translation_loss(dst, predict(net, x), y)[0]


def train_pair(dataset: CorrespondenceDataset, src: str, dst: str, cfg: TrainConfig | None = None,
               net: MlpModel | None = None) -> PairModel:
    cfg = cfg or TrainConfig()
    for name in (src, dst):
        if name not in dataset:
            raise DatasetError(f"dataset has no algorithm {name!r}")
    xs, ys = dataset[src], dataset[dst]
    n = len(dataset)
    batch = cfg.resolve_batch(n)
    if n < 2 * batch:
        raise DatasetError(f"need at least {2 * batch} aligned patches, have {n}")
    if net is None:
        net = build_pair_net(xs.spec, ys.spec, seed=cfg.seed)
    net.train()
    state = adam_init(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    x_all, y_all = xs.values, ys.values
    loss = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, steps = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if idx.size < 2:
                continue
            out, cache = forward(net, x_all[idx])
            loss, grad = translation_loss(ys.spec, out, y_all[idx])
            grads, _ = backward(net, grad, cache)
            step_models(state, [net], grads)
            total += loss
            steps += 1
        loss = total / max(steps, 1)
        log.info("pair %s->%s epoch %d loss %.5f", src, dst, epoch + 1, loss)
    net.eval()
    tc = {**cfg.to_dict(), "batch": batch, "n_train": n}
    net.meta = {"kind": "pair", "src": xs.spec.to_dict(), "dst": ys.spec.to_dict(),
                "train_config": tc, "final_loss": loss}
    return PairModel(xs.spec, ys.spec, net, loss, tc)


def translate(model: PairModel, descs: DescriptorMatrix, threshold: float = 0.5) -> DescriptorMatrix:
    if not descs.spec.compatible(model.src):
        raise SpecError(f"model translates {model.src.name}, got {descs.spec.name} descriptors")
    out = predict(model.net, descs.values)
    return DescriptorMatrix(model.dst, descs.patch_ids, finalize_values(model.dst, out, threshold), finalized=True)


def save_pair(model: PairModel, path: str | Path) -> None:
    model.net.meta.setdefault("kind", "pair")
    model.net.meta["src"] = model.src.to_dict()
    model.net.meta["dst"] = model.dst.to_dict()
    Path(path).write_bytes(dumps_xmlp(model.net))


def load_pair(path: str | Path) -> PairModel:
    net = loads_xmlp(Path(path).read_bytes(), str(path))
    meta = net.meta
    if "src" not in meta or "dst" not in meta:
        raise FormatError(f"{path}: XMLP metadata lacks src/dst specs (not a pair model)")
    try:
        return PairModel(AlgorithmSpec.from_dict(meta["src"]), AlgorithmSpec.from_dict(meta["dst"]), net,
                         meta.get("final_loss"), meta.get("train_config"))
    except (SpecError, ConfigError) as exc:
        raise FormatError(f"{path}: {exc}") from None
