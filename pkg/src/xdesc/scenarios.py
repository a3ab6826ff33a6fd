"""Cross-descriptor mapping scenarios at the correspondence level.

Images each carry descriptors of one family. The match graph links rows of
image pairs (via the joint space, progressive translation, or naive raw
matching); consistent connected components of that graph stand in for the
observation tracks of triangulated points.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .descriptors import AlgorithmSpec, DescriptorMatrix, read_xdsc, write_xdsc
from .errors import ConfigError, FormatError, StatsError
from .joint import encode, translate_via_bank
from .matching import MatchSet, match_mutual_ratio
from .pair import translate

DEFAULT_HIERARCHY = ("brief", "sift", "hardnet", "sosnet")
STRATEGIES = ("embed", "progressive", "naive")
IMAGES_SCHEMA = "xdesc.images/1"


@dataclass(frozen=True)
class ImageView:
    image_id: str
    algo: str
    descs: DescriptorMatrix


@dataclass
class ImageSet:
    """Images with one descriptor family each.

    With ``gt_by_patch_id`` two rows of different images correspond exactly
    when they carry the same patch id.
    """

    images: list[ImageView] = field(default_factory=list)
    gt_by_patch_id: bool = True

    def __post_init__(self) -> None:
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ConfigError("image ids must be unique")
        for im in self.images:
            if im.descs.spec.name != im.algo:
                raise ConfigError(f"{im.image_id}: descriptors are {im.descs.spec.name}, not {im.algo}")

    def __len__(self) -> int:
        return len(self.images)

    def by_id(self) -> dict[str, ImageView]:
        return {im.image_id: im for im in self.images}

    @property
    def algorithms(self) -> list[str]:
        return sorted({im.algo for im in self.images})

    def sorted_images(self) -> list[ImageView]:
        return sorted(self.images, key=lambda im: im.image_id)

    def gt_count(self) -> int:
        total = 0
        for a, b in combinations(self.images, 2):
            total += np.intersect1d(a.descs.patch_ids, b.descs.patch_ids).size
        return total


def write_image_set(image_set: ImageSet, directory: str | Path, binary: bool = False,
                    manifest_name: str = "images.json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for im in image_set.images:
        fname = f"{im.image_id}.xdsc"
        write_xdsc(im.descs, directory / fname, binary=binary)
        entries.append({"image_id": im.image_id, "algo": im.algo, "file": fname, **im.descs.spec.to_dict()})
    manifest = {"schema": IMAGES_SCHEMA,
                "ground_truth": "patch_id" if image_set.gt_by_patch_id else None,
                "images": entries}
    out = directory / manifest_name
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def read_image_set(path: str | Path) -> ImageSet:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("schema") != IMAGES_SCHEMA:
        raise FormatError(f"{path}: unknown schema {manifest.get('schema')!r}")
    views = []
    for entry in manifest.get("images", []):
        for key in ("image_id", "algo", "file"):
            if key not in entry:
                raise FormatError(f"{path}: image entry lacks {key!r}")
        spec = AlgorithmSpec.from_dict({**entry, "name": entry["algo"]})
        views.append(ImageView(entry["image_id"], entry["algo"], read_xdsc(path.parent / entry["file"], spec)))
    return ImageSet(views, manifest.get("ground_truth") == "patch_id")


# ----------------------------------------------------------------- matching


def progressive_direction(hierarchy: Sequence[str], a: str, b: str) -> tuple[str, str] | None:
    """``(src, dst)`` translating the weaker family towards the stronger one,
    or ``None`` when both images use the same family."""
    rank = {name: k for k, name in enumerate(hierarchy)}
    for name in (a, b):
        if name not in rank:
            raise ConfigError(f"{name!r} is not in the hierarchy {list(hierarchy)}")
    if a == b:
        return None
    return (a, b) if rank[a] < rank[b] else (b, a)


@dataclass
class PairMatches:
    image_a: str
    image_b: str
    matches: MatchSet
    translation: tuple[str, str] | None = None
    skipped: bool = False


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("XDESC_THREADS", "1") or 1)
    return max(1, int(threads))


def build_match_graph(image_set: ImageSet, strategy: str = "embed", bank=None,
                      pair_models: Mapping[tuple[str, str], object] | None = None, ratio: float = 0.9,
                      hierarchy: Sequence[str] = DEFAULT_HIERARCHY, threads: int | None = 1) -> list[PairMatches]:
    """Mutual-ratio matches for every unordered image pair, in sorted order."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    images = image_set.sorted_images()
    pair_models = dict(pair_models or {})
    algos = {im.algo for im in images}
    if strategy == "embed":
        if bank is None:
            raise ConfigError("embed strategy needs an encoder-decoder bank")
        missing = algos - set(bank.names)
        if missing:
            raise ConfigError(f"bank has no model for {sorted(missing)}")
        embedded = {im.image_id: encode(bank, im.algo, im.descs).values for im in images}
    if strategy == "progressive":
        for a, b in combinations(sorted(algos), 2):
            direction = progressive_direction(hierarchy, a, b)
            if direction not in pair_models and (bank is None or not set(direction) <= set(bank.names)):
                raise ConfigError(f"no model to translate {direction[0]} -> {direction[1]}")

    def run(pair: tuple[ImageView, ImageView]) -> PairMatches:
        a, b = pair
        if strategy == "embed":
            return PairMatches(a.image_id, b.image_id,
                               match_mutual_ratio(embedded[a.image_id], embedded[b.image_id], "l2", ratio))
        if strategy == "naive":
            sa, sb = a.descs.spec, b.descs.spec
            if sa.dim != sb.dim or sa.metric != sb.metric:
                return PairMatches(a.image_id, b.image_id, MatchSet.empty(sa.metric, ratio), skipped=True)
            return PairMatches(a.image_id, b.image_id,
                               match_mutual_ratio(a.descs.values, b.descs.values, sa.metric, ratio))
        direction = progressive_direction(hierarchy, a.algo, b.algo)
        va, vb = a.descs, b.descs
        if direction is not None:
            src, dst = direction
            model = pair_models.get(direction)

            def move(d: DescriptorMatrix) -> DescriptorMatrix:
                return translate(model, d) if model is not None else translate_via_bank(bank, src, dst, d)

            if a.algo == src:
                va = move(va)
            else:
                vb = move(vb)
        metric = va.spec.metric
        return PairMatches(a.image_id, b.image_id, match_mutual_ratio(va.values, vb.values, metric, ratio),
                           translation=direction)

    pairs = list(combinations(images, 2))
    n_threads = resolve_threads(threads)
    if n_threads == 1:
        return [run(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(run, pairs))


def count_correct(graph: Sequence[PairMatches], image_set: ImageSet) -> int:
    """Ground-truth-correct correspondences summed over the graph."""
    if not image_set.gt_by_patch_id:
        raise ConfigError("image set carries no ground truth")
    by_id = image_set.by_id()
    total = 0
    for pm in graph:
        ids_a = by_id[pm.image_a].descs.patch_ids
        ids_b = by_id[pm.image_b].descs.patch_ids
        total += int(np.count_nonzero(ids_a[pm.matches.index_a] == ids_b[pm.matches.index_b]))
    return total


# ------------------------------------------------------------------- tracks


class UnionFind:
    def __init__(self) -> None:
        self.parent: dict = {}
        self.size: dict = {}

    def add(self, x) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> None:
        self.add(a)
        self.add(b)
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb] or (self.size[ra] == self.size[rb] and rb < ra):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]

    def groups(self) -> list[list]:
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return list(out.values())


@dataclass(frozen=True)
class Track:
    track_id: int
    members: tuple[tuple[str, int], ...]
    algos_present: frozenset


@dataclass
class TrackSet:
    tracks: list[Track] = field(default_factory=list)
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.tracks)


def build_tracks(graph: Sequence[PairMatches], image_set: ImageSet | None = None,
                 algo_of: Mapping[str, str] | None = None) -> TrackSet:
    """Consistent connected components of the match graph.

    A component holding two rows of the same image is dropped entirely.
    """
    if algo_of is None:
        if image_set is None:
            raise ConfigError("need an image set or an image -> algorithm map")
        algo_of = {im.image_id: im.algo for im in image_set.images}
    uf = UnionFind()
    for pm in graph:
        for ra, rb in zip(pm.matches.index_a.tolist(), pm.matches.index_b.tolist()):
            uf.union((pm.image_a, ra), (pm.image_b, rb))
    components = sorted((sorted(g) for g in uf.groups()), key=lambda g: g[0])
    tracks, dropped = [], 0
    for comp in components:
        images = [img for img, _ in comp]
        if len(set(images)) != len(images):
            dropped += 1
            continue
        tracks.append(Track(len(tracks), tuple(comp), frozenset(algo_of[img] for img in images)))
    return TrackSet(tracks, dropped)


def track_purity(tracks: TrackSet, image_set: ImageSet) -> float:
    """Fraction of tracks whose members all share one ground-truth patch."""
    if not tracks.tracks:
        return 0.0
    by_id = image_set.by_id()
    pure = 0
    for t in tracks.tracks:
        ids = {int(by_id[img].descs.patch_ids[row]) for img, row in t.members}
        pure += len(ids) == 1
    return pure / len(tracks.tracks)


def covisibility_stats(tracks: TrackSet, algorithms: Sequence[str] | None = None) -> dict:
    """Histogram (in %) of distinct families per track and the pairwise
    co-occurrence matrix (in % of tracks)."""
    if not tracks.tracks:
        raise StatsError("co-visibility statistics need at least one track")
    if algorithms is None:
        algorithms = sorted(set().union(*(t.algos_present for t in tracks.tracks)))
    algorithms = list(algorithms)
    k = len(algorithms)
    index = {a: i for i, a in enumerate(algorithms)}
    counts = np.zeros(k + 1, dtype=np.int64)
    co = np.zeros((k, k), dtype=np.int64)
    for t in tracks.tracks:
        present = [index[a] for a in t.algos_present]
        counts[len(present)] += 1
        for i in present:
            for j in present:
                co[i, j] += 1
    n = len(tracks.tracks)
    hist = {str(c): 100.0 * counts[c] / n for c in range(1, k + 1)}
    return {
        "algorithms": algorithms,
        "n_tracks": n,
        "histogram": hist,
        "cooccurrence": (100.0 * co / n).tolist(),
    }
