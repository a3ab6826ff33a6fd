"""Descriptor families, descriptor matrices, metrics and the XDSC file format.

Binary descriptors are kept as {0, 1} float32 arrays everywhere except inside
the Hamming matcher, which packs them into 64-bit words.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DatasetError,
    DomainError,
    FormatError,
    NormalizationError,
    ShapeError,
    SpecError,
)

DOMAINS = ("real", "binary")
METRICS = ("l2", "hamming")
NORMS = ("none", "unit_l2")

UNIT_NORM_TOL = 1e-5

XDSC_BINARY_MAGIC = b"XDSCBIN\x00"
_XDSC_BINARY_HEADER = struct.Struct("<8sIIQBBBBI")  # 32 bytes
DATASET_SCHEMA = "xdesc.dataset/1"


@dataclass(frozen=True)
class AlgorithmSpec:
    """Metadata for one description algorithm.

    ``nonnegative`` marks SIFT-like families whose descriptors live in the
    positive orthant; ``learned`` selects the smaller hidden width used for
    learned descriptors. Neither is part of the XDSC header.
    """

    name: str
    dim: int
    domain: str = "real"
    metric: str = "l2"
    output_norm: str = "unit_l2"
    nonnegative: bool = False
    learned: bool = False

    def __post_init__(self) -> None:
        if not self.name or any(c.isspace() for c in self.name):
            raise SpecError(f"algorithm name must be a non-empty token, got {self.name!r}")
        if int(self.dim) < 1:
            raise SpecError(f"dim must be >= 1, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        if self.domain not in DOMAINS:
            raise SpecError(f"unknown domain {self.domain!r}")
        if self.metric not in METRICS:
            raise SpecError(f"unknown metric {self.metric!r}")
        if self.output_norm not in NORMS:
            raise SpecError(f"unknown output_norm {self.output_norm!r}")
        if self.domain == "binary" and (self.metric != "hamming" or self.output_norm != "none"):
            raise SpecError("binary domain requires metric=hamming and output_norm=none")
        if self.domain == "real" and self.metric != "l2":
            raise SpecError("real domain requires metric=l2")

    @property
    def is_binary(self) -> bool:
        return self.domain == "binary"

    def header_key(self) -> tuple:
        return (self.name, self.dim, self.domain, self.metric, self.output_norm)

    def compatible(self, other: "AlgorithmSpec") -> bool:
        return self.header_key() == other.header_key()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "domain": self.domain,
            "metric": self.metric,
            "output_norm": self.output_norm,
            "nonnegative": self.nonnegative,
            "learned": self.learned,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AlgorithmSpec":
        try:
            return cls(
                name=d["name"],
                dim=int(d["dim"]),
                domain=d.get("domain", "real"),
                metric=d.get("metric", "l2"),
                output_norm=d.get("output_norm", "unit_l2"),
                nonnegative=bool(d.get("nonnegative", False)),
                learned=bool(d.get("learned", False)),
            )
        except KeyError as exc:
            raise FormatError(f"algorithm spec missing field {exc.args[0]!r}") from None


def binary_spec(name: str, dim: int = 512) -> AlgorithmSpec:
    return AlgorithmSpec(name, dim, "binary", "hamming", "none")


def real_spec(name: str, dim: int = 128, *, nonnegative: bool = False, learned: bool = False) -> AlgorithmSpec:
    return AlgorithmSpec(name, dim, "real", "l2", "unit_l2", nonnegative=nonnegative, learned=learned)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` (a vector or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot normalize a zero-norm vector")
    return v / norms


def binarize(v: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    v = np.asarray(v)
    return (v >= threshold).astype(v.dtype if v.dtype.kind == "f" else np.float32)


def is_bits(v: np.ndarray) -> bool:
    v = np.asarray(v)
    return bool(np.all((v == 0) | (v == 1)))


def distance(a: np.ndarray, b: np.ndarray, metric: str = "l2") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    if metric == "l2":
        return float(np.linalg.norm(a - b))
    if metric == "hamming":
        if not (is_bits(a) and is_bits(b)):
            raise DomainError("hamming distance needs {0,1} inputs")
        return float(np.count_nonzero(a != b))
    raise SpecError(f"unknown metric {metric!r}")


@dataclass(frozen=True, eq=False)
class DescriptorMatrix:
    spec: AlgorithmSpec
    patch_ids: np.ndarray
    values: np.ndarray
    finalized: bool = False

    def __post_init__(self) -> None:
        ids = np.asarray(self.patch_ids, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2 or vals.shape[1] != self.spec.dim:
            raise ShapeError(f"values must be N x {self.spec.dim}, got {vals.shape}")
        if vals.shape[0] != ids.shape[0]:
            raise ShapeError(f"{vals.shape[0]} rows but {ids.shape[0]} patch ids")
        if np.unique(ids).size != ids.size:
            raise DatasetError(f"duplicate patch ids in {self.spec.name}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("descriptor values must be finite")
        if self.spec.is_binary and not (np.all(vals >= 0) and np.all(vals <= 1)):
            raise DomainError("binary descriptors must lie in [0, 1]")
        if self.finalized and self.spec.output_norm == "unit_l2" and len(vals):
            norms = np.linalg.norm(vals.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise NormalizationError(f"{self.spec.name}: finalized rows are not unit norm")
        ids.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "patch_ids", ids)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]

    def take(self, rows: Sequence[int] | np.ndarray) -> "DescriptorMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return DescriptorMatrix(self.spec, self.patch_ids[rows], self.values[rows], self.finalized)

    def reorder(self, patch_ids: np.ndarray) -> "DescriptorMatrix":
        """Rows permuted to follow ``patch_ids``; every id must be present."""
        index = {int(p): k for k, p in enumerate(self.patch_ids)}
        try:
            rows = [index[int(p)] for p in patch_ids]
        except KeyError as exc:
            raise DatasetError(f"{self.spec.name}: patch id {exc.args[0]} missing") from None
        return self.take(rows)


def finalize_values(spec: AlgorithmSpec, values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Apply a family's output contract to raw network outputs."""
    values = np.asarray(values, dtype=np.float32)
    if spec.is_binary:
        return binarize(values, threshold)
    if spec.output_norm == "unit_l2":
        norms = np.linalg.norm(values, axis=1, keepdims=True)
        return values / np.maximum(norms, np.float32(1e-12))
    return values


@dataclass
class CorrespondenceDataset:
    """Patch-aligned descriptors of several algorithms.

    All matrices share one patch-id order (the first matrix's); alignment is
    by id, so inputs may arrive in any row order.
    """

    matrices: dict[str, DescriptorMatrix] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.matrices:
            return
        first = next(iter(self.matrices.values()))
        ref = first.patch_ids
        ref_set = set(ref.tolist())
        aligned = {}
        for name, mat in self.matrices.items():
            if name != mat.spec.name:
                raise DatasetError(f"key {name!r} does not match spec name {mat.spec.name!r}")
            if len(mat) != len(ref) or set(mat.patch_ids.tolist()) != ref_set:
                raise DatasetError(f"{name}: patch ids are not aligned with {first.spec.name}")
            aligned[name] = mat if np.array_equal(mat.patch_ids, ref) else mat.reorder(ref)
        self.matrices = aligned

    @classmethod
    def from_matrices(cls, mats: Iterable[DescriptorMatrix]) -> "CorrespondenceDataset":
        return cls({m.spec.name: m for m in mats})

    @property
    def names(self) -> list[str]:
        return list(self.matrices)

    @property
    def specs(self) -> list[AlgorithmSpec]:
        return [m.spec for m in self.matrices.values()]

    @property
    def patch_ids(self) -> np.ndarray:
        return next(iter(self.matrices.values())).patch_ids

    def __len__(self) -> int:
        return 0 if not self.matrices else len(next(iter(self.matrices.values())))

    def __getitem__(self, name: str) -> DescriptorMatrix:
        try:
            return self.matrices[name]
        except KeyError:
            raise DatasetError(f"dataset has no algorithm {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.matrices

    def take(self, rows) -> "CorrespondenceDataset":
        return CorrespondenceDataset({k: m.take(rows) for k, m in self.matrices.items()})

    def select(self, names: Sequence[str]) -> "CorrespondenceDataset":
        return CorrespondenceDataset({n: self[n] for n in names})


# ---------------------------------------------------------------- XDSC files


def _fmt(x: float) -> str:
    s = format(float(x), ".9g")
    return "0" if s in ("0", "-0") else s


def dumps_xdsc(mat: DescriptorMatrix) -> str:
    s = mat.spec
    lines = [f"xdsc 1 {s.name} {s.dim} {s.domain} {s.metric} {s.output_norm} {len(mat)}"]
    if s.is_binary:
        for pid, row in zip(mat.patch_ids, mat.values):
            lines.append(f"{int(pid)} " + " ".join("1" if v else "0" for v in row))
    else:
        for pid, row in zip(mat.patch_ids, mat.values):
            lines.append(f"{int(pid)} " + " ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def dumps_xdsc_binary(mat: DescriptorMatrix) -> bytes:
    s = mat.spec
    name = s.name.encode("utf-8")
    header = _XDSC_BINARY_HEADER.pack(
        XDSC_BINARY_MAGIC,
        1,
        s.dim,
        len(mat),
        DOMAINS.index(s.domain),
        METRICS.index(s.metric),
        NORMS.index(s.output_norm),
        0,
        len(name),
    )
    return b"".join([
        header,
        name,
        mat.patch_ids.astype("<i8").tobytes(),
        mat.values.astype("<f4").tobytes(),
    ])


def _parse_text(text: str, source: str) -> tuple[AlgorithmSpec, np.ndarray, np.ndarray]:
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{source}: empty XDSC file")
    head = lines[0].split()
    if len(head) != 8 or head[0] != "xdsc":
        raise FormatError(f"{source}: header must be 'xdsc 1 <name> <dim> <domain> <metric> <norm> <count>'")
    if head[1] != "1":
        raise FormatError(f"{source}: unsupported XDSC version {head[1]!r}")
    try:
        dim, count = int(head[3]), int(head[7])
    except ValueError:
        raise FormatError(f"{source}: dim/count must be integers") from None
    try:
        spec = AlgorithmSpec(head[2], dim, head[4], head[5], head[6])
    except SpecError as exc:
        raise FormatError(f"{source}: bad header: {exc}") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise FormatError(f"{source}: count says {count} records, found {len(body)}")
    ids = np.empty(count, dtype=np.int64)
    vals = np.empty((count, dim), dtype=np.float32)
    for k, ln in enumerate(body):
        toks = ln.split()
        if len(toks) != dim + 1:
            raise FormatError(f"{source}: record {k} has {len(toks) - 1} values, expected dim={dim}")
        try:
            ids[k] = int(toks[0])
            vals[k] = np.asarray(toks[1:], dtype=np.float32)
        except ValueError:
            raise FormatError(f"{source}: record {k} is not numeric") from None
    return spec, ids, vals


def _parse_binary(data: bytes, source: str) -> tuple[AlgorithmSpec, np.ndarray, np.ndarray]:
    if len(data) < _XDSC_BINARY_HEADER.size:
        raise FormatError(f"{source}: truncated binary XDSC header")
    magic, version, dim, count, dom, met, norm, _, name_len = _XDSC_BINARY_HEADER.unpack_from(data)
    if version != 1:
        raise FormatError(f"{source}: unsupported XDSC version {version}")
    off = _XDSC_BINARY_HEADER.size
    expected = off + name_len + 8 * count + 4 * count * dim
    if len(data) != expected:
        raise FormatError(f"{source}: expected {expected} bytes, found {len(data)}")
    try:
        name = data[off:off + name_len].decode("utf-8")
        spec = AlgorithmSpec(name, dim, DOMAINS[dom], METRICS[met], NORMS[norm])
    except (IndexError, UnicodeDecodeError, SpecError) as exc:
        raise FormatError(f"{source}: bad header: {exc}") from None
    off += name_len
    ids = np.frombuffer(data, dtype="<i8", count=count, offset=off).astype(np.int64)
    off += 8 * count
    vals = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    return spec, ids, vals.astype(np.float32)


def read_xdsc(path: str | Path, spec: AlgorithmSpec | None = None) -> DescriptorMatrix:
    """Load a text or binary XDSC file.

    ``spec`` (e.g. from a manifest) supplies the non-header fields; it must
    agree with the file header.
    """
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(XDSC_BINARY_MAGIC):
        file_spec, ids, vals = _parse_binary(data, str(path))
    else:
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: not an XDSC file") from None
        file_spec, ids, vals = _parse_text(text, str(path))
    if spec is not None:
        if not spec.compatible(file_spec):
            raise FormatError(f"{path}: header {file_spec.header_key()} disagrees with {spec.header_key()}")
        file_spec = spec
    if file_spec.is_binary and not is_bits(vals):
        raise FormatError(f"{path}: binary descriptors must hold 0/1 values")
    try:
        return DescriptorMatrix(file_spec, ids, vals)
    except (ShapeError, DatasetError, DomainError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_xdsc(mat: DescriptorMatrix, path: str | Path, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        path.write_bytes(dumps_xdsc_binary(mat))
    else:
        path.write_bytes(dumps_xdsc(mat).encode("utf-8"))


# ----------------------------------------------------------- dataset manifest


def write_dataset(dataset: CorrespondenceDataset, directory: str | Path, binary: bool = False,
                  manifest_name: str = "manifest.json", extra: Mapping | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, mat in dataset.matrices.items():
        fname = f"{name}.xdsc"
        write_xdsc(mat, directory / fname, binary=binary)
        entries.append({**mat.spec.to_dict(), "file": fname})
    manifest = {"schema": DATASET_SCHEMA, "count": len(dataset), "algorithms": entries}
    if extra:
        manifest.update(extra)
    out = directory / manifest_name
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def read_dataset(manifest_path: str | Path) -> CorrespondenceDataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    if manifest.get("schema") != DATASET_SCHEMA:
        raise FormatError(f"{manifest_path}: unknown schema {manifest.get('schema')!r}")
    mats = []
    for entry in manifest.get("algorithms", []):
        spec = AlgorithmSpec.from_dict(entry)
        if "file" not in entry:
            raise FormatError(f"{manifest_path}: algorithm {spec.name} has no 'file'")
        mats.append(read_xdsc(manifest_path.parent / entry["file"], spec))
    if not mats:
        raise FormatError(f"{manifest_path}: no algorithms listed")
    return CorrespondenceDataset.from_matrices(mats)
