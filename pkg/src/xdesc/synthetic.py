"""Synthetic descriptor families with known correspondences.

Every family pushes shared unit-norm latent "patches" through its own frozen
random two-layer tanh map, adds Gaussian noise before the output head and
applies the head of the family it imitates (unit-norm, non-negative
unit-norm, or sign bits against random hyperplanes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .descriptors import (
    AlgorithmSpec,
    CorrespondenceDataset,
    DescriptorMatrix,
    binary_spec,
    real_spec,
)
from .errors import ConfigError
from .scenarios import ImageSet, ImageView

LATENT_DIM = 64
HIDDEN = 256
NOISE_SIGMA = 0.1


@dataclass(frozen=True, eq=False)
class SyntheticFamily:
    spec: AlgorithmSpec
    w1: np.ndarray
    w2: np.ndarray
    noise_sigma: float = NOISE_SIGMA

    @property
    def latent_dim(self) -> int:
        return self.w1.shape[0]

    def pre_head(self, latents: np.ndarray) -> np.ndarray:
        return np.tanh(latents @ self.w1) @ self.w2


def make_family(spec: AlgorithmSpec, seed: int, latent_dim: int = LATENT_DIM,
                noise_sigma: float = NOISE_SIGMA, hidden: int = HIDDEN) -> SyntheticFamily:
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((latent_dim, hidden))
    w2 = rng.standard_normal((hidden, spec.dim)) / np.sqrt(hidden)
    return SyntheticFamily(spec, w1, w2, float(noise_sigma))


DEFAULT_SPECS = (
    binary_spec("brief", 512),
    real_spec("sift", 128, nonnegative=True),
    real_spec("hardnet", 128, learned=True),
    real_spec("sosnet", 128, learned=True),
)


def default_families(family_seed: int = 0, latent_dim: int = LATENT_DIM,
                     noise_sigma: float = NOISE_SIGMA,
                     specs: Sequence[AlgorithmSpec] = DEFAULT_SPECS) -> list[SyntheticFamily]:
    """BRIEF/SIFT/HardNet/SOSNet stand-ins, each with its own frozen map."""
    seeds = np.random.SeedSequence(family_seed).spawn(len(specs))
    return [
        make_family(spec, int(ss.generate_state(1)[0]), latent_dim, noise_sigma)
        for spec, ss in zip(specs, seeds)
    ]


def gen_latents(n: int, latent_dim: int = LATENT_DIM, seed: int = 0) -> np.ndarray:
    if n < 1:
        raise ConfigError("n must be >= 1")
    z = np.random.default_rng(seed).standard_normal((n, latent_dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def describe(family: SyntheticFamily, latents: np.ndarray, noise_seed: int | Sequence[int] = 0,
             patch_ids: np.ndarray | None = None) -> DescriptorMatrix:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != family.latent_dim:
        raise ConfigError(f"latents must be N x {family.latent_dim}, got {latents.shape}")
    pre = family.pre_head(latents)
    if family.noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        pre = pre + family.noise_sigma * rng.standard_normal(pre.shape)
    spec = family.spec
    if spec.is_binary:
        values = (pre > 0).astype(np.float32)
    else:
        if spec.nonnegative:
            pre = np.maximum(pre, 0)
        if spec.output_norm == "unit_l2":
            pre = pre / np.maximum(np.linalg.norm(pre, axis=1, keepdims=True), 1e-12)
        values = pre.astype(np.float32)
        if spec.output_norm == "unit_l2":
            values /= np.maximum(np.linalg.norm(values, axis=1, keepdims=True), 1e-12)
    if patch_ids is None:
        patch_ids = np.arange(len(latents), dtype=np.int64)
    return DescriptorMatrix(spec, patch_ids, values, finalized=True)


def gen_dataset(latents: np.ndarray, families: Sequence[SyntheticFamily], noise_seed: int = 0,
                patch_ids: np.ndarray | None = None) -> CorrespondenceDataset:
    if not families:
        raise ConfigError("need at least one family")
    return CorrespondenceDataset.from_matrices(
        describe(f, latents, (noise_seed, k), patch_ids) for k, f in enumerate(families)
    )


def gen_multiview(latents: np.ndarray, n_views: int, families: Sequence[SyntheticFamily],
                  seed: int = 0, assignment: Sequence[int] | None = None,
                  visibility: float = 1.0, patch_ids: np.ndarray | None = None) -> ImageSet:
    """Several "images" of the same latent patches, one family per image.

    Rows are shuffled per image and patch ids carry the latent identity,
    which is the ground truth for cross-image correspondences.
    """
    if n_views < 2:
        raise ConfigError("n_views must be >= 2")
    if not families:
        raise ConfigError("need at least one family")
    if not 0 < visibility <= 1:
        raise ConfigError("visibility must lie in (0, 1]")
    if assignment is None:
        assignment = [v % len(families) for v in range(n_views)]
    if len(assignment) != n_views:
        raise ConfigError("assignment must name one family per view")
    n = len(latents)
    if patch_ids is None:
        patch_ids = np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    views = []
    for v, fam_idx in enumerate(assignment):
        fam = families[fam_idx]
        if visibility < 1:
            rows = np.flatnonzero(rng.random(n) < visibility)
        else:
            rows = np.arange(n)
        rows = rng.permutation(rows)
        descs = describe(fam, latents[rows], (seed, 1 + v), np.asarray(patch_ids)[rows])
        views.append(ImageView(f"view{v:03d}", fam.spec.name, descs))
    return ImageSet(views)


FAMILIES_SCHEMA = "xdesc.families/1"


def default_family_config(family_seed: int = 0, latent_dim: int = LATENT_DIM,
                          noise_sigma: float = NOISE_SIGMA) -> dict:
    return {
        "schema": FAMILIES_SCHEMA,
        "family_seed": family_seed,
        "latent_dim": latent_dim,
        "noise_sigma": noise_sigma,
        "families": [s.to_dict() for s in DEFAULT_SPECS],
    }


def families_from_config(config: dict) -> list[SyntheticFamily]:
    """Families described by a JSON-style config.

    Keys: ``family_seed``, ``latent_dim``, ``noise_sigma`` and a list of
    ``families`` (algorithm spec fields, optionally a per-family
    ``noise_sigma``). Map weights depend only on the family seed and the
    family's position in the list.
    """
    schema = config.get("schema", FAMILIES_SCHEMA)
    if schema != FAMILIES_SCHEMA:
        raise ConfigError(f"unknown families schema {schema!r}")
    entries = config.get("families")
    if not entries:
        raise ConfigError("families config lists no families")
    specs = [AlgorithmSpec.from_dict(e) for e in entries]
    fams = default_families(int(config.get("family_seed", 0)), int(config.get("latent_dim", LATENT_DIM)),
                            float(config.get("noise_sigma", NOISE_SIGMA)), specs)
    for k, e in enumerate(entries):
        if "noise_sigma" in e:
            f = fams[k]
            if e["noise_sigma"] < 0:
                raise ConfigError("noise_sigma must be >= 0")
            fams[k] = SyntheticFamily(f.spec, f.w1, f.w2, float(e["noise_sigma"]))
    return fams
