"""Seeded symmetric / similarity-weighted label noise with an audit ledger."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hypm.datasets import DomainDataset, stream


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    ratio: float = 0.2
    seed: int = 0
    similarity: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("symmetric", "asymmetric"):
            raise NoiseError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise NoiseError(f"noise ratio must lie in [0, 1], got {self.ratio}")
        if self.kind == "asymmetric" and self.similarity is None:
            raise NoiseError("asymmetric noise needs a similarity matrix")


@dataclass(frozen=True)
class LedgerEntry:
    sample_id: str
    clean_label: int
    noisy_label: int


@dataclass(frozen=True)
class NoiseLedger:
    entries: tuple[LedgerEntry, ...]
    achieved_ratio: float

    def __len__(self) -> int:
        return len(self.entries)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "clean_label", "noisy_label"])
            for e in self.entries:
                w.writerow([e.sample_id, e.clean_label, e.noisy_label])

    @classmethod
    def read_csv(cls, path: str | Path, total: int | None = None) -> "NoiseLedger":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        entries = tuple(LedgerEntry(r["sample_id"], int(r["clean_label"]), int(r["noisy_label"])) for r in rows)
        return cls(entries, len(entries) / total if total else float("nan"))


def flip_count(ratio: float, n: int) -> int:
    """round(ratio * n), halves rounded up."""
    return int(math.floor(ratio * n + 0.5))


def inject(
    datasets: Sequence[DomainDataset],
    spec: NoiseSpec,
    classes: Sequence[int] | None = None,
) -> tuple[list[DomainDataset], NoiseLedger]:
    """Flip exactly ``round(ratio * N)`` labels drawn uniformly without replacement.

    ``datasets`` must already be restricted to source domains and known
    classes; ``classes`` are the replacement candidates (default: every label
    present). Samples are addressed in dataset order, then within-dataset order.
    """
    labels = np.concatenate([ds.labels for ds in datasets]) if datasets else np.zeros(0, dtype=np.int64)
    ids = [sid for ds in datasets for sid in ds.ids]
    n = len(labels)
    classes = np.array(sorted(set(labels.tolist())) if classes is None else sorted(classes), dtype=np.int64)
    if n and not np.isin(labels, classes).all():
        raise NoiseError("labels outside the candidate class set")

    weights = None
    if spec.kind == "asymmetric":
        sim = np.asarray(spec.similarity, dtype=np.float64)
        if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] <= classes.max(initial=0):
            raise NoiseError(f"similarity matrix of shape {sim.shape} does not cover the classes")
        weights = sim[np.ix_(classes, classes)].copy()
        np.fill_diagonal(weights, 0.0)
        if (weights < 0).any():
            raise NoiseError("similarity weights must be non-negative")
        dead = weights.sum(axis=1) <= 0
        if dead.any():
            raise NoiseError(f"similarity rows of classes {classes[dead].tolist()} are all zero off the diagonal")
    elif len(classes) < 2:
        raise NoiseError("symmetric noise needs at least two classes")

    count = flip_count(spec.ratio, n)
    rng = stream(spec.seed, "noise")
    chosen = np.sort(rng.choice(n, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    noisy = labels.copy()
    for pos, y in enumerate(classes):
        at = chosen[labels[chosen] == y]
        if not at.size:
            continue
        if weights is None:
            others = classes[classes != y]
            noisy[at] = others[rng.integers(len(others), size=at.size)]
        else:
            row = weights[pos]
            noisy[at] = classes[rng.choice(len(classes), size=at.size, p=row / row.sum())]
    entries = tuple(LedgerEntry(ids[i], int(labels[i]), int(noisy[i])) for i in chosen)

    out, start = [], 0
    for ds in datasets:
        out.append(ds.with_labels(noisy[start : start + len(ds)]))
        start += len(ds)
    return out, NoiseLedger(entries, count / n if n else 0.0)


def banded_similarity(num_classes: int, near: float = 1.0, far: float = 0.1) -> np.ndarray:
    """Adjacent class indices get weight ``near``, others ``far``, zero diagonal."""
    idx = np.arange(num_classes)
    gap = np.abs(idx[:, None] - idx[None, :])
    sim = np.where(gap == 1, near, far)
    np.fill_diagonal(sim, 0.0)
    return sim


def load_similarity(path: str | Path, class_names: Sequence[str] | None = None) -> np.ndarray:
    """Read a C x C similarity CSV with a class-name header row.

    Negative entries are clipped to 0, the diagonal zeroed, and the result
    symmetrized as (M + M^T) / 2.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise NoiseError(f"{path}: empty similarity file")
    header, body = rows[0], rows[1:]
    if class_names is not None and list(header) != list(class_names):
        raise NoiseError(f"{path}: class-name header {header} does not match {list(class_names)}")
    if len(body) != len(header) or any(len(r) != len(header) for r in body):
        raise NoiseError(f"{path}: similarity matrix must be {len(header)} x {len(header)}")
    try:
        m = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise NoiseError(f"{path}: non-numeric entry ({exc})") from None
    if not np.all(np.isfinite(m)):
        raise NoiseError(f"{path}: NaN or infinite entries")
    m = np.clip(m, 0.0, None)
    np.fill_diagonal(m, 0.0)
    return (m + m.T) / 2.0


def write_similarity(path: str | Path, matrix: np.ndarray, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(class_names))
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def write_labels(path: str | Path, datasets: Sequence[DomainDataset]) -> None:
    """Training-label file (sample_id, label) consumed by the trainer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"])
        for ds in datasets:
            for sid, y in zip(ds.ids, ds.labels):
                w.writerow([sid, int(y)])


def apply_labels(path: str | Path, datasets: Sequence[DomainDataset]) -> list[DomainDataset]:
    with open(path, newline="") as fh:
        table = {r["sample_id"]: int(r["label"]) for r in csv.DictReader(fh)}
    out = []
    for ds in datasets:
        missing = [sid for sid in ds.ids if sid not in table]
        if missing:
            raise NoiseError(f"{path}: no label for {len(missing)} samples of {ds.name} (e.g. {missing[0]})")
        out.append(ds.with_labels(np.array([table[sid] for sid in ds.ids])))
    return out
