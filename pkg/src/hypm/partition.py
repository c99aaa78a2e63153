"""Per-(domain, class) prototypes, mode thresholds, clean/noisy split and
nearest-prototype label correction.

Prototype geometry is selected by ``space``: ``"hyperbolic"`` maps embeddings
through :func:`hypm.geometry.exp_map` and measures geodesic distance;
``"euclidean"`` keeps raw embeddings and uses L2 distance.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hypm import geometry
from hypm.datasets import DomainDataset
from hypm.geometry import BallConfig
from hypm.model import ModelState, embed

log = logging.getLogger(__name__)

SPACES = ("hyperbolic", "euclidean")


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class ModeConfig:
    num_bins: int = 32

    def __post_init__(self):
        if self.num_bins < 2:
            raise PartitionError("num_bins must be at least 2")


@dataclass(frozen=True)
class PrototypeTable:
    centers: dict[tuple[str, int], np.ndarray]
    thresholds: dict[tuple[str, int], float]
    computed_at_step: int = 0
    space: str = "hyperbolic"

    def classes_for(self, domain: str) -> list[int]:
        return sorted(k for (s, k) in self.centers if s == domain)


@dataclass(frozen=True)
class Partition:
    clean: frozenset[str]
    noisy: frozenset[str]
    corrected_labels: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class PartitionResult:
    """Everything one refresh produces, aligned with the flattened pool order."""

    table: PrototypeTable
    partition: Partition
    ids: tuple[str, ...]
    domains: np.ndarray
    given_labels: np.ndarray
    distances: np.ndarray
    thresholds: np.ndarray
    is_clean: np.ndarray
    labels: np.ndarray  # given label for clean samples, corrected label for noisy ones


# ----------------------------------------------------------------------
# primitives


def mode_threshold(distances: Sequence[float], cfg: ModeConfig = ModeConfig()) -> float:
    """Right edge of the modal histogram bin over [min, max].

    Ties between bins go to the lowest index. If every distance is equal the
    threshold is ``max + 1`` so that all samples count as clean.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise PartitionError("mode_threshold of an empty distance list")
    lo, hi = float(d.min()), float(d.max())
    if lo == hi:
        return hi + 1.0
    counts, edges = np.histogram(d, bins=cfg.num_bins, range=(lo, hi))
    return float(edges[int(np.argmax(counts)) + 1])


def to_space(z: np.ndarray, ball: BallConfig, space: str) -> np.ndarray:
    if space == "hyperbolic":
        return geometry.exp_map(z, ball)
    if space == "euclidean":
        return np.asarray(z, dtype=np.float64)
    raise PartitionError(f"unknown prototype space {space!r}")


def center(points: np.ndarray, ball: BallConfig, space: str) -> np.ndarray:
    if space == "hyperbolic":
        return geometry.hyperbolic_mean(points, ball)
    if len(points) == 0:
        raise PartitionError("center of an empty point set")
    return np.asarray(points, dtype=np.float64).mean(axis=0)


def distance(a: np.ndarray, b: np.ndarray, ball: BallConfig, space: str) -> np.ndarray:
    if space == "hyperbolic":
        return geometry.hyperbolic_distance(a, b, ball)
    return np.sqrt(((np.asarray(a) - np.asarray(b)) ** 2).sum(axis=-1))


# ----------------------------------------------------------------------
# table construction on already-mapped points


def build_table(
    points: np.ndarray,
    domains: Sequence[str],
    labels: np.ndarray,
    ball: BallConfig,
    space: str = "hyperbolic",
    mode: ModeConfig = ModeConfig(),
    step: int = 0,
    classes: Sequence[int] | None = None,
) -> PrototypeTable:
    """Centers and mode thresholds for every (domain, class) group present.

    With ``classes`` given, groups of a listed class that have no sample in a
    domain are reported via a warning and left out of the table.
    """
    domains = np.asarray(domains)
    labels = np.asarray(labels)
    centers: dict[tuple[str, int], np.ndarray] = {}
    thresholds: dict[tuple[str, int], float] = {}
    for s in sorted(set(domains.tolist())):
        in_s = domains == s
        present = sorted(set(labels[in_s].tolist()))
        if classes is not None:
            missing = sorted(set(classes) - set(present))
            if missing:
                log.warning("domain %s has no samples labelled %s; prototypes omitted", s, missing)
        for k in present:
            group = points[in_s & (labels == k)]
            c = center(group, ball, space)
            centers[(s, k)] = c
            thresholds[(s, k)] = mode_threshold(distance(group, c, ball, space), mode)
    return PrototypeTable(centers, thresholds, step, space)


def own_distances(
    points: np.ndarray, domains: Sequence[str], labels: np.ndarray, table: PrototypeTable, ball: BallConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Distance of each point to its own (domain, label) prototype and the
    matching threshold; both are NaN where the prototype is missing."""
    n = len(points)
    dist = np.full(n, np.nan)
    thr = np.full(n, np.nan)
    domains = np.asarray(domains)
    labels = np.asarray(labels)
    for (s, k), c in table.centers.items():
        sel = (domains == s) & (labels == k)
        if sel.any():
            dist[sel] = distance(points[sel], c, ball, table.space)
            thr[sel] = table.thresholds[(s, k)]
    return dist, thr


def split_clean_noisy(ids: Sequence[str], distances: np.ndarray, thresholds: np.ndarray) -> Partition:
    """Clean iff distance < threshold (strict); missing prototypes count as noisy."""
    with np.errstate(invalid="ignore"):
        clean = np.asarray(distances) < np.asarray(thresholds)
    return Partition(
        frozenset(i for i, c in zip(ids, clean) if c),
        frozenset(i for i, c in zip(ids, clean) if not c),
    )


def correct_labels(points: np.ndarray, table: PrototypeTable, domain: str, ball: BallConfig) -> np.ndarray:
    """Nearest-prototype class among ``domain``'s prototypes; ties go to the lower class."""
    classes = table.classes_for(domain)
    if not classes:
        raise PartitionError(f"no prototypes for domain {domain!r}")
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    protos = np.stack([table.centers[(domain, k)] for k in classes])
    d = distance(points[:, None, :], protos[None, :, :], ball, table.space)
    return np.asarray(classes, dtype=np.int64)[np.argmin(d, axis=1)]


def partition_points(
    ids: Sequence[str],
    points: np.ndarray,
    domains: Sequence[str],
    labels: np.ndarray,
    ball: BallConfig,
    space: str = "hyperbolic",
    mode: ModeConfig = ModeConfig(),
    step: int = 0,
    classes: Sequence[int] | None = None,
) -> PartitionResult:
    """Full refresh on mapped points: table, split, then per-domain correction."""
    ids = tuple(ids)
    domains = np.asarray(domains)
    labels = np.asarray(labels, dtype=np.int64)
    table = build_table(points, domains, labels, ball, space, mode, step, classes)
    dist, thr = own_distances(points, domains, labels, table, ball)
    with np.errstate(invalid="ignore"):
        is_clean = dist < thr
    new_labels = labels.copy()
    for s in sorted(set(domains.tolist())):
        sel = (domains == s) & ~is_clean
        if sel.any():
            new_labels[sel] = correct_labels(points[sel], table, s, ball)
    partition = Partition(
        frozenset(i for i, c in zip(ids, is_clean) if c),
        frozenset(i for i, c in zip(ids, is_clean) if not c),
        {ids[i]: int(new_labels[i]) for i in np.flatnonzero(~is_clean)},
    )
    return PartitionResult(table, partition, ids, domains, labels, dist, thr, is_clean, new_labels)


# ----------------------------------------------------------------------
# model-driven entry points


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HYPM_THREADS", "1")))
    except ValueError:
        return 1


def embed_images(state: ModelState, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Backbone embeddings without gradient recording.

    Chunk boundaries are fixed, so results do not depend on ``HYPM_THREADS``.
    """
    starts = list(range(0, len(images), chunk))
    threads = min(_threads(), len(starts))
    if threads <= 1:
        return embed(state, images, chunk)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda i: embed(state, images[i : i + chunk], chunk), starts))
    return np.concatenate(parts)


def compute_partition(
    state: ModelState,
    datasets: Sequence[DomainDataset],
    ball: BallConfig,
    space: str = "hyperbolic",
    mode: ModeConfig = ModeConfig(),
    step: int = 0,
    classes: Sequence[int] | None = None,
) -> PartitionResult:
    images = np.concatenate([ds.images for ds in datasets])
    points = to_space(embed_images(state, images), ball, space)
    ids = [sid for ds in datasets for sid in ds.ids]
    domains = np.array([ds.name for ds in datasets for _ in ds.ids])
    labels = np.concatenate([ds.labels for ds in datasets])
    return partition_points(ids, points, domains, labels, ball, space, mode, step, classes)


def compute_prototypes(
    state: ModelState,
    datasets: Sequence[DomainDataset],
    ball: BallConfig,
    space: str = "hyperbolic",
    mode: ModeConfig = ModeConfig(),
    step: int = 0,
) -> PrototypeTable:
    images = np.concatenate([ds.images for ds in datasets])
    points = to_space(embed_images(state, images), ball, space)
    domains = [ds.name for ds in datasets for _ in ds.ids]
    labels = np.concatenate([ds.labels for ds in datasets])
    return build_table(points, domains, labels, ball, space, mode, step)


def write_partition_csv(result: PartitionResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "domain", "given_label", "distance", "threshold", "assignment", "corrected_label"])
        for i, sid in enumerate(result.ids):
            clean = bool(result.is_clean[i])
            w.writerow(
                [
                    sid,
                    result.domains[i],
                    int(result.given_labels[i]),
                    repr(float(result.distances[i])),
                    repr(float(result.thresholds[i])),
                    "clean" if clean else "noisy",
                    "" if clean else int(result.labels[i]),
                ]
            )
