"""Encoder-decoder bank: one encoder and one decoder per descriptor family,
sharing a unit-norm joint embedding space.

Translating family i to family j chains ``decoder_j(encoder_i(x))``; matching
across families compares encoder outputs directly.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig, head_for, hidden_dims_for
from .descriptors import AlgorithmSpec, CorrespondenceDataset, DescriptorMatrix, finalize_values
from .errors import ConfigError, DatasetError, FormatError, ShapeError, SpecError
from .losses import LossConfig, pair_weights, triplet_loss_hardest
from .mlp import MlpModel, adam_init, backward, build_mlp, dumps_xmlp, forward, loads_xmlp, predict, step_models
from .pair import translation_loss

log = logging.getLogger(__name__)

XBNK_MAGIC = b"XBNK"
_XBNK_HEADER = struct.Struct("<4sII")


@dataclass
class ModelBank:
    specs: list[AlgorithmSpec]
    encoders: dict[str, MlpModel]
    decoders: dict[str, MlpModel]
    embed_dim: int = 128
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for spec in self.specs:
            enc, dec = self.encoders.get(spec.name), self.decoders.get(spec.name)
            if enc is None or dec is None:
                raise ConfigError(f"bank lacks an encoder or decoder for {spec.name}")
            if (enc.in_dim, enc.out_dim, dec.in_dim, dec.out_dim) != (spec.dim, self.embed_dim, self.embed_dim, spec.dim):
                raise ConfigError(f"{spec.name}: encoder/decoder dims disagree with spec and embed_dim")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def spec(self, name: str) -> AlgorithmSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise SpecError(f"bank has no algorithm {name!r}")

    def networks(self) -> list[MlpModel]:
        return [self.encoders[n] for n in self.names] + [self.decoders[n] for n in self.names]

    def train(self) -> None:
        for net in self.networks():
            net.train()

    def eval(self) -> None:
        for net in self.networks():
            net.eval()


def build_bank(specs: Sequence[AlgorithmSpec], embed_dim: int = 128, seed: int = 0,
               loss_cfg: LossConfig | None = None) -> ModelBank:
    if embed_dim < 1:
        raise ConfigError("embed_dim must be >= 1")
    names = [s.name for s in specs]
    if len(set(names)) != len(names) or not names:
        raise ConfigError(f"need distinct algorithm names, got {names}")
    seeds = np.random.SeedSequence(seed).spawn(2 * len(specs))
    encoders, decoders = {}, {}
    for k, spec in enumerate(specs):
        hidden = hidden_dims_for(spec)
        encoders[spec.name] = build_mlp(spec.dim, hidden, embed_dim, "unit_l2",
                                        seed=int(seeds[2 * k].generate_state(1)[0]))
        decoders[spec.name] = build_mlp(embed_dim, hidden, spec.dim, head_for(spec),
                                        seed=int(seeds[2 * k + 1].generate_state(1)[0]))
    return ModelBank(list(specs), encoders, decoders, embed_dim, loss_cfg or LossConfig())


def _batch_objective(bank: ModelBank, batch: dict[str, np.ndarray], cfg: LossConfig,
                     perm: np.ndarray | None, train: bool) -> tuple[float, np.ndarray, np.ndarray, list | None]:
    """Per-pair losses on one batch; in train mode also the gradients for
    every network, ordered like ``bank.networks()``."""
    names = bank.names
    n = len(names)
    wt, wm = pair_weights(n, cfg, perm)
    lt = np.full((n, n), np.nan)
    lm = np.full((n, n), np.nan)
    emb, enc_cache, d_emb = {}, {}, {}
    for name in names:
        emb[name], enc_cache[name] = forward(bank.encoders[name], batch[name], train=train)
        d_emb[name] = np.zeros_like(emb[name])
    dec_grads: dict[str, list] = {}
    for i, src in enumerate(names):
        for j, dst in enumerate(names):
            if wt[i, j] > 0:
                dec = bank.decoders[dst]
                out, cache = forward(dec, emb[src], train=train)
                value, g = translation_loss(bank.specs[j], out, batch[dst])
                lt[i, j] = value
                if train:
                    gp, gx = backward(dec, g * wt[i, j], cache)
                    if dst in dec_grads:
                        dec_grads[dst] = [a + b for a, b in zip(dec_grads[dst], gp)]
                    else:
                        dec_grads[dst] = gp
                    d_emb[src] += gx
            if wm[i, j] > 0 and (cfg.alpha > 0 or not train):
                res = triplet_loss_hardest(emb[src], emb[dst], cfg.margin)
                lm[i, j] = res.value
                if train:
                    scale = cfg.alpha * wm[i, j]
                    d_emb[src] += scale * res.grad_i
                    d_emb[dst] += scale * res.grad_j
    total = float(np.nansum(np.where(wt > 0, lt, 0) * wt) + cfg.alpha * np.nansum(np.where(wm > 0, lm, 0) * wm))
    if not train:
        return total, lt, lm, None
    grads: list = []
    for name in names:
        grads += backward(bank.encoders[name], d_emb[name], enc_cache[name])[0]
    for name in names:
        net = bank.decoders[name]
        grads += dec_grads.get(name) or [np.zeros_like(p) for p in net.parameters()]
    return total, lt, lm, grads


def _check_dataset(bank: ModelBank, dataset: CorrespondenceDataset) -> None:
    for spec in bank.specs:
        if spec.name not in dataset:
            raise DatasetError(f"dataset has no algorithm {spec.name!r}")
        if not dataset[spec.name].spec.compatible(spec):
            raise DatasetError(f"dataset spec for {spec.name} disagrees with the bank")


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)


def train_bank(dataset: CorrespondenceDataset, specs: Sequence[AlgorithmSpec] | None = None,
               loss_cfg: LossConfig | None = None, train_cfg: TrainConfig | None = None,
               embed_dim: int = 128, bank: ModelBank | None = None,
               history: TrainLog | None = None) -> ModelBank:
    """Jointly train all encoders and decoders with one Adam optimizer."""
    train_cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if bank is None:
        if specs is None:
            specs = [dataset[name].spec for name in dataset.names]
        bank = build_bank(specs, embed_dim, seed=train_cfg.seed, loss_cfg=loss_cfg)
    bank.loss_cfg = loss_cfg
    _check_dataset(bank, dataset)
    names = bank.names
    n = len(dataset)
    batch = train_cfg.resolve_batch(n)
    data = {name: dataset[name].values for name in names}
    nets = bank.networks()
    state = adam_init([p for net in nets for p in net.parameters()], lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    bank.train()
    epoch_loss = float("nan")
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        total, steps = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if idx.size < 2:
                continue
            perm = rng.permutation(len(names)) if loss_cfg.variant == "linear" else None
            value, lt, lm, grads = _batch_objective(bank, {k: v[idx] for k, v in data.items()},
                                                    loss_cfg, perm, train=True)
            step_models(state, nets, grads)
            total += value
            steps += 1
            if history is not None:
                history.iterations.append(value)
        epoch_loss = total / max(steps, 1)
        if history is not None:
            history.epochs.append(epoch_loss)
        log.info("bank epoch %d objective %.5f", epoch + 1, epoch_loss)
    bank.eval()
    bank.meta = {"train_config": {**train_cfg.to_dict(), "batch": batch, "n_train": n},
                 "loss_config": loss_cfg.to_dict(), "final_objective": epoch_loss}
    return bank


def bank_objective(bank: ModelBank, dataset: CorrespondenceDataset, loss_cfg: LossConfig | None = None,
                   perm: np.ndarray | None = None, batch: int = 256) -> dict:
    """Inference-mode objective averaged over consecutive batches.

    Returns the total and the per-pair translation / matching matrices; the
    matching loss depends on the batch size through hardest-negative mining.
    """
    loss_cfg = loss_cfg or bank.loss_cfg
    _check_dataset(bank, dataset)
    n = len(dataset)
    if loss_cfg.variant == "linear" and perm is None:
        perm = np.arange(len(bank.names))
    totals, lts, lms = [], [], []
    for start in range(0, n - 1, batch):
        stop = min(start + batch, n)
        if stop - start < 2:
            break
        value, lt, lm, _ = _batch_objective(bank, {k: dataset[k].values[start:stop] for k in bank.names},
                                            loss_cfg, perm, train=False)
        totals.append(value)
        lts.append(lt)
        lms.append(lm)
    return {"objective": float(np.mean(totals)), "translation": np.mean(lts, axis=0),
            "matching": np.mean(lms, axis=0)}


# ------------------------------------------------------------------ inference


def embedding_spec(bank: ModelBank, algo: str) -> AlgorithmSpec:
    return AlgorithmSpec(f"{algo}.joint", bank.embed_dim, "real", "l2", "unit_l2")


def encode(bank: ModelBank, algo: str, descs: DescriptorMatrix) -> DescriptorMatrix:
    spec = bank.spec(algo)
    if not descs.spec.compatible(spec):
        raise SpecError(f"encoder {algo} expects {spec.header_key()}, got {descs.spec.header_key()}")
    out = predict(bank.encoders[algo], descs.values)
    return DescriptorMatrix(embedding_spec(bank, algo), descs.patch_ids, out, finalized=True)


def decode(bank: ModelBank, algo: str, embeddings: DescriptorMatrix | np.ndarray,
           patch_ids: np.ndarray | None = None, threshold: float = 0.5) -> DescriptorMatrix:
    spec = bank.spec(algo)
    if isinstance(embeddings, DescriptorMatrix):
        values, patch_ids = embeddings.values, embeddings.patch_ids
    else:
        values = np.asarray(embeddings, dtype=np.float32)
    if values.ndim != 2 or values.shape[1] != bank.embed_dim:
        raise ShapeError(f"embeddings must be N x {bank.embed_dim}, got {values.shape}")
    if patch_ids is None:
        patch_ids = np.arange(values.shape[0])
    out = predict(bank.decoders[algo], values)
    return DescriptorMatrix(spec, patch_ids, finalize_values(spec, out, threshold), finalized=True)


def translate_via_bank(bank: ModelBank, src: str, dst: str, descs: DescriptorMatrix,
                       threshold: float = 0.5) -> DescriptorMatrix:
    return decode(bank, dst, encode(bank, src, descs), threshold=threshold)


# ------------------------------------------------------------------ XBNK


def dumps_xbnk(bank: ModelBank) -> bytes:
    blobs = []
    entries = []
    for name in bank.names:
        enc, dec = dumps_xmlp(bank.encoders[name]), dumps_xmlp(bank.decoders[name])
        blobs += [enc, dec]
        entries.append({**bank.spec(name).to_dict(), "encoder_bytes": len(enc), "decoder_bytes": len(dec)})
    manifest = {
        "embed_dim": bank.embed_dim,
        "loss_config": bank.loss_cfg.to_dict(),
        "algorithms": entries,
        "meta": bank.meta,
    }
    raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([_XBNK_HEADER.pack(XBNK_MAGIC, 1, len(raw)), raw, *blobs])


def loads_xbnk(data: bytes, source: str = "<bytes>") -> ModelBank:
    if len(data) < _XBNK_HEADER.size or not data.startswith(XBNK_MAGIC):
        raise FormatError(f"{source}: not an XBNK bank")
    _, version, raw_len = _XBNK_HEADER.unpack_from(data)
    if version != 1:
        raise FormatError(f"{source}: unsupported XBNK version {version}")
    off = _XBNK_HEADER.size
    try:
        manifest = json.loads(data[off:off + raw_len].decode("utf-8"))
        off += raw_len
        specs, encoders, decoders = [], {}, {}
        for entry in manifest["algorithms"]:
            spec = AlgorithmSpec.from_dict(entry)
            specs.append(spec)
            ne, nd = int(entry["encoder_bytes"]), int(entry["decoder_bytes"])
            encoders[spec.name] = loads_xmlp(data[off:off + ne], f"{source}:{spec.name}.encoder")
            off += ne
            decoders[spec.name] = loads_xmlp(data[off:off + nd], f"{source}:{spec.name}.decoder")
            off += nd
        if off != len(data):
            raise FormatError(f"{source}: {len(data) - off} trailing bytes")
        lc = manifest["loss_config"]
        return ModelBank(specs, encoders, decoders, int(manifest["embed_dim"]),
                         LossConfig(**lc), manifest.get("meta", {}))
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{source}: corrupt XBNK manifest ({exc})") from None


def save_bank(bank: ModelBank, path: str | Path) -> None:
    Path(path).write_bytes(dumps_xbnk(bank))


def load_bank(path: str | Path) -> ModelBank:
    return loads_xbnk(Path(path).read_bytes(), str(path))
