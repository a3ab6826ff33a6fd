"""Small feed-forward network engine with hand-written reverse mode and Adam.

Layers are row-major: a batch is a ``B x in_dim`` array and linear weights
are stored ``in_dim x out_dim`` so that ``y = x @ W + b``.
Hidden blocks are ``linear -> relu -> batchnorm``; the final linear layer
carries only the requested head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BatchTooSmall, ConfigError, FormatError, NumericsError, ShapeError, StaleCache

LAYER_KINDS = ("linear", "relu", "batchnorm", "sigmoid", "unit_l2")
HEADS = ("none", "sigmoid", "unit_l2", "relu_then_unit_l2")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
NORM_FLOOR = 1e-12

XMLP_MAGIC = b"XMLP"
_XMLP_HEADER = struct.Struct("<4sIIIdd")
_XMLP_LAYER = struct.Struct("<BII")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind != "linear" and self.in_dim != self.out_dim:
            raise ConfigError(f"{self.kind} layer must keep its width")


class MlpModel:
    """Weights, batch-norm buffers and mode of one network.

    ``params[k]`` holds ``W``/``b`` for linear layers and ``gamma``/``beta``
    for batch norm; ``buffers[k]`` holds batch-norm running statistics.
    ``version`` is bumped whenever parameters change so stale forward caches
    can be detected.
    """

    def __init__(self, layers: Sequence[LayerSpec], params: list[dict], buffers: list[dict],
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS, meta: dict | None = None,
                 dtype=None):
        layers = list(layers)
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer dims do not chain: {a} -> {b}")
        if not layers:
            raise ConfigError("a model needs at least one layer")
        self.layers = layers
        self.params = params
        self.buffers = buffers
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.meta = dict(meta or {})
        if dtype is None:
            arrays = [a for p in params for a in p.values()]
            dtype = arrays[0].dtype if arrays else np.float32
        self._dtype = np.dtype(dtype)
        self.mode = "train"
        # Open question default: inference uses running statistics.
        self.eval_batch_stats = False
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dtype(self) -> np.dtype:
        return self._dtype

    def train(self) -> "MlpModel":
        self.mode = "train"
        return self

    def eval(self) -> "MlpModel":
        self.mode = "eval"
        return self

    def parameters(self) -> list[np.ndarray]:
        out = []
        for spec, p in zip(self.layers, self.params):
            if spec.kind == "linear":
                out += [p["W"], p["b"]]
            elif spec.kind == "batchnorm":
                out += [p["gamma"], p["beta"]]
        return out

    def weight_matrices(self) -> list[np.ndarray]:
        return [p["W"] for s, p in zip(self.layers, self.params) if s.kind == "linear"]

    def n_weights(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def mark_updated(self) -> None:
        self.version += 1

    def astype(self, dtype) -> "MlpModel":
        dup = MlpModel(
            self.layers,
            [{k: v.astype(dtype, copy=True) for k, v in p.items()} for p in self.params],
            [{k: v.astype(dtype, copy=True) for k, v in b.items()} for b in self.buffers],
            self.momentum,
            self.eps,
            self.meta,
            dtype,
        )
        dup.mode = self.mode
        dup.eval_batch_stats = self.eval_batch_stats
        return dup

    def copy(self) -> "MlpModel":
        return self.astype(self.dtype)

    def __repr__(self) -> str:
        arch = " ".join(f"{s.kind}({s.out_dim})" if s.kind == "linear" else s.kind for s in self.layers)
        return f"MlpModel({self.in_dim} -> {arch}, mode={self.mode})"


def build_mlp(in_dim: int, hidden_dims: Sequence[int], out_dim: int, head: str = "none",
              seed: int = 0, dtype=np.float32, momentum: float = BN_MOMENTUM,
              eps: float = BN_EPS) -> MlpModel:
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}; expected one of {HEADS}")
    dims = [in_dim, *hidden_dims, out_dim]
    if any(int(d) < 1 for d in dims):
        raise ConfigError(f"all dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    params: list[dict] = []
    buffers: list[dict] = []

    def add_linear(n_in: int, n_out: int) -> None:
        bound = np.sqrt(6.0 / n_in)
        layers.append(LayerSpec("linear", n_in, n_out))
        params.append({
            "W": rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype),
            "b": np.zeros(n_out, dtype=dtype),
        })
        buffers.append({})

    def add_plain(kind: str, width: int) -> None:
        layers.append(LayerSpec(kind, width, width))
        params.append({})
        buffers.append({})

    for n_in, n_out in zip(dims[:-2], dims[1:-1]):
        add_linear(n_in, n_out)
        add_plain("relu", n_out)
        layers.append(LayerSpec("batchnorm", n_out, n_out))
        params.append({"gamma": np.ones(n_out, dtype=dtype), "beta": np.zeros(n_out, dtype=dtype)})
        buffers.append({"mean": np.zeros(n_out, dtype=dtype), "var": np.ones(n_out, dtype=dtype)})
    add_linear(dims[-2], dims[-1])
    if head == "sigmoid":
        add_plain("sigmoid", out_dim)
    elif head == "unit_l2":
        add_plain("unit_l2", out_dim)
    elif head == "relu_then_unit_l2":
        add_plain("relu", out_dim)
        add_plain("unit_l2", out_dim)
    return MlpModel(layers, params, buffers, momentum, eps, dtype=dtype)


@dataclass
class ForwardCache:
    model_id: int
    version: int
    entries: list = field(default_factory=list)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(model: MlpModel, x: np.ndarray, train: bool | None = None) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the network on a batch.

    Train mode uses batch statistics, updates the running statistics and
    returns a cache for :func:`backward`; eval mode returns ``(y, None)``
    and leaves the model untouched.
    """
    if train is None:
        train = model.mode == "train"
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"expected a B x {model.in_dim} batch, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericsError("non-finite network input")
    if train and x.shape[0] < 2:
        raise BatchTooSmall("train-mode forward needs at least 2 rows for batch statistics")
    h = x.astype(model.dtype, copy=False)
    cache = ForwardCache(id(model), model.version) if train else None
    for spec, p, buf in zip(model.layers, model.params, model.buffers):
        kind = spec.kind
        if kind == "linear":
            entry = h
            h = h @ p["W"] + p["b"]
        elif kind == "relu":
            entry = h > 0
            h = h * entry
        elif kind == "sigmoid":
            h = _sigmoid(h)
            entry = h
        elif kind == "unit_l2":
            norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_FLOOR).astype(h.dtype)
            h = h / norms
            entry = (h, norms)
        else:  # batchnorm
            if train or model.eval_batch_stats:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
            else:
                mu, var = buf["mean"], buf["var"]
            inv = (1.0 / np.sqrt(var + model.eps)).astype(h.dtype)
            xhat = (h - mu) * inv
            h = xhat * p["gamma"] + p["beta"]
            entry = (xhat, inv)
            if train:
                n = xhat.shape[0]
                m = model.momentum
                buf["mean"] = ((1 - m) * buf["mean"] + m * mu).astype(buf["mean"].dtype)
                buf["var"] = ((1 - m) * buf["var"] + m * var * (n / (n - 1))).astype(buf["var"].dtype)
        if cache is not None:
            cache.entries.append(entry)
    if train and not np.all(np.isfinite(h)):
        raise NumericsError("non-finite network output")
    return h, cache


def backward(model: MlpModel, upstream: np.ndarray, cache: ForwardCache) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass. Returns parameter gradients ordered like
    ``model.parameters()`` and the gradient w.r.t. the network input."""
    if cache is None or cache.model_id != id(model) or cache.version != model.version \
            or len(cache.entries) != len(model.layers):
        raise StaleCache("cache does not belong to the current state of this model")
    g = np.asarray(upstream, dtype=model.dtype)
    grads_rev: list[np.ndarray] = []
    for spec, p, entry in zip(reversed(model.layers), reversed(model.params), reversed(cache.entries)):
        kind = spec.kind
        if kind == "linear":
            grads_rev += [g.sum(axis=0), entry.T @ g]  # db, dW (reversed order)
            g = g @ p["W"].T
        elif kind == "relu":
            g = g * entry
        elif kind == "sigmoid":
            g = g * entry * (1 - entry)
        elif kind == "unit_l2":
            y, norms = entry
            g = (g - np.sum(g * y, axis=1, keepdims=True) * y) / norms
        else:  # batchnorm
            xhat, inv = entry
            n = xhat.shape[0]
            dgamma = np.sum(g * xhat, axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * p["gamma"]
            g = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            grads_rev += [dbeta, dgamma]
    return grads_rev[::-1], g


def predict(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Inference-mode forward regardless of ``model.mode``."""
    return forward(model, x, train=False)[0]


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: Sequence[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    return AdamState(lr, betas[0], betas[1], eps, 0,
                     [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Non-finite gradients reject the whole step before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError("non-finite gradient; Adam step rejected")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        if not np.all(np.isfinite(p)):
            raise NumericsError("parameter became non-finite after Adam step")
    state.step = t
    return state


def step_models(state: AdamState, models: Sequence[MlpModel], grads: Sequence[np.ndarray]) -> AdamState:
    """Adam over the concatenated parameters of several models."""
    params = [p for m in models for p in m.parameters()]
    adam_step(state, params, grads)
    for m in models:
        m.mark_updated()
    return state


# ------------------------------------------------------------------ XMLP


def dumps_xmlp(model: MlpModel) -> bytes:
    meta = json.dumps(model.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [
        _XMLP_HEADER.pack(XMLP_MAGIC, 1, len(model.layers), len(meta), model.momentum, model.eps),
        meta,
    ]
    for spec in model.layers:
        out.append(_XMLP_LAYER.pack(LAYER_KINDS.index(spec.kind), spec.in_dim, spec.out_dim))
    for spec, p, buf in zip(model.layers, model.params, model.buffers):
        if spec.kind == "linear":
            arrays = [p["W"], p["b"]]
        elif spec.kind == "batchnorm":
            arrays = [p["gamma"], p["beta"], buf["mean"], buf["var"]]
        else:
            continue
        out += [a.astype("<f4").tobytes() for a in arrays]
    return b"".join(out)


def loads_xmlp(data: bytes, source: str = "<bytes>") -> MlpModel:
    """Inverse of :func:`dumps_xmlp`; the returned model is in eval mode."""
    if len(data) < _XMLP_HEADER.size or not data.startswith(XMLP_MAGIC):
        raise FormatError(f"{source}: not an XMLP model")
    _, version, n_layers, meta_len, momentum, eps = _XMLP_HEADER.unpack_from(data)
    if version != 1:
        raise FormatError(f"{source}: unsupported XMLP version {version}")
    off = _XMLP_HEADER.size
    try:
        meta = json.loads(data[off:off + meta_len].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{source}: corrupt XMLP metadata") from None
    off += meta_len
    layers = []
    try:
        for _ in range(n_layers):
            kind, n_in, n_out = _XMLP_LAYER.unpack_from(data, off)
            off += _XMLP_LAYER.size
            layers.append(LayerSpec(LAYER_KINDS[kind], n_in, n_out))
    except (struct.error, IndexError, ConfigError) as exc:
        raise FormatError(f"{source}: bad XMLP layer table ({exc})") from None

    def take(n: int) -> np.ndarray:
        nonlocal off
        if off + 4 * n > len(data):
            raise FormatError(f"{source}: truncated XMLP parameter block")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
        return arr

    params, buffers = [], []
    for spec in layers:
        if spec.kind == "linear":
            params.append({"W": take(spec.in_dim * spec.out_dim).reshape(spec.in_dim, spec.out_dim),
                           "b": take(spec.out_dim)})
            buffers.append({})
        elif spec.kind == "batchnorm":
            params.append({"gamma": take(spec.out_dim), "beta": take(spec.out_dim)})
            buffers.append({"mean": take(spec.out_dim), "var": take(spec.out_dim)})
        else:
            params.append({})
            buffers.append({})
    if off != len(data):
        raise FormatError(f"{source}: {len(data) - off} trailing bytes after XMLP parameters")
    try:
        model = MlpModel(layers, params, buffers, momentum, eps, meta)
    except ConfigError as exc:
        raise FormatError(f"{source}: {exc}") from None
    return model.eval()
