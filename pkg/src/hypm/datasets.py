"""Multi-domain datasets: synthetic generator, PPM tree I/O, open-set splits,
and seeded batch sampling."""

from __future__ import annotations

import itertools
import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DatasetError(ValueError):
    pass


class PPMError(DatasetError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    id: str
    image: np.ndarray
    label: int
    domain: str


@dataclass(frozen=True)
class DomainDataset:
    """All samples of one domain, stored as stacked arrays.

    ``images`` is (N, H, W, 3) in [0, 1]; ``labels`` holds the class index
    each sample currently carries (possibly noisy).
    """

    name: str
    ids: tuple[str, ...]
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise DatasetError(f"domain {self.name}: images must be (N, H, W, 3), got {images.shape}")
        if len(self.ids) != len(images) or len(labels) != len(images):
            raise DatasetError(f"domain {self.name}: ids/images/labels length mismatch")
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError(f"domain {self.name}: duplicate sample ids")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DatasetError(f"domain {self.name}: label outside [0, {len(self.class_names)})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.ids[i], self.images[i], int(self.labels[i]), self.name)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def with_labels(self, labels: np.ndarray) -> "DomainDataset":
        return DomainDataset(self.name, self.ids, self.images, labels, self.class_names)

    def subset(self, mask: np.ndarray) -> "DomainDataset":
        idx = np.flatnonzero(mask)
        return DomainDataset(
            self.name, tuple(self.ids[i] for i in idx), self.images[idx], self.labels[idx], self.class_names
        )


@dataclass(frozen=True)
class SplitSpec:
    test_domain: str
    known_classes: tuple[int, ...]
    unknown_classes: tuple[int, ...]

    @property
    def num_known(self) -> int:
        return len(self.known_classes)


# ----------------------------------------------------------------------
# seeded streams


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named consumer of ``root_seed``."""
    return np.random.default_rng([int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


# ----------------------------------------------------------------------
# synthetic data

# on/off run lengths of each class's row bar code
_BAR_RUNS = [(1, 1), (2, 2), (1, 3), (3, 1), (3, 3), (1, 5), (5, 1), (2, 4), (4, 2), (4, 4), (2, 6), (6, 2)]
_FG = np.array([0.85, 0.7, 0.55])
_BG = np.array([0.15, 0.3, 0.4])


def bar_code(num_rows: int, class_index: int) -> np.ndarray:
    """Binary row mask for ``class_index``: alternating on/off runs."""
    on, off = _BAR_RUNS[class_index]
    return (np.arange(num_rows) % (on + off)) < on


def domain_style(domain_index: int) -> tuple[tuple[int, ...], float, float]:
    """(channel permutation, brightness offset, noise std) for a domain."""
    perms = list(itertools.permutations(range(3)))
    perm = perms[domain_index % len(perms)]
    offset = -0.12 + 0.08 * (domain_index % 4)
    noise = 0.08 + 0.04 * (domain_index % 3)
    return perm, offset, noise


def generate_synthetic(
    num_domains: int, num_classes: int, per_class: int, seed: int, shape: tuple[int, int] = (32, 32)
) -> list[DomainDataset]:
    """Stripe-coded classes rendered in domain-specific styles.

    Class identity lives in the row bar code; domains differ by channel
    permutation, brightness offset and pixel-noise level.
    """
    if num_domains < 3:
        raise DatasetError("need at least 3 domains")
    if not 4 <= num_classes <= len(_BAR_RUNS):
        raise DatasetError(f"num_classes must lie in [4, {len(_BAR_RUNS)}]")
    if per_class < 1:
        raise DatasetError("per_class must be positive")
    h, w = shape
    if h < 1 or w < 1:
        raise DatasetError(f"invalid shape {shape}")
    class_names = tuple(f"class_{k:02d}" for k in range(num_classes))
    out = []
    for d in range(num_domains):
        name = f"domain_{d}"
        perm, offset, noise = domain_style(d)
        fg, bg = _FG[list(perm)], _BG[list(perm)]
        rng = stream(seed, f"data/{name}")
        ids, images, labels = [], [], []
        for k in range(num_classes):
            rows = bar_code(h, k)[:, None, None]
            base = np.where(rows, fg, bg) * np.ones((h, w, 1)) + offset
            for i in range(per_class):
                img = base + rng.normal(0.0, noise, size=(h, w, 3))
                images.append(np.clip(img, 0.0, 1.0))
                labels.append(k)
                ids.append(f"{name}-c{k:02d}-{i:04d}")
        out.append(DomainDataset(name, tuple(ids), np.stack(images), np.array(labels), class_names))
    return out


# ----------------------------------------------------------------------
# PPM I/O

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary (P6) 8-bit PPM into an (H, W, 3) array in [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise PPMError(f"{path}: malformed PPM header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P5"):
        raise PPMError(f"{path}: unsupported PPM variant {magic.decode()}")
    if magic != b"P6":
        raise PPMError(f"{path}: malformed PPM header (magic {magic!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PPMError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise PPMError(f"{path}: unsupported PPM variant (maxval {maxval}, need 255)")
    if width <= 0 or height <= 0 or pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError(f"{path}: malformed PPM header")
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise PPMError(f"{path}: truncated pixel data")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PPMError(f"{path}: image must be (H, W, 3), got {img.shape}")
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def write_ppm_tree(datasets: Sequence[DomainDataset], root: str | Path) -> Path:
    """Write ``root/<domain>/<class>/<id>.ppm`` plus ``root/manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    class_names = datasets[0].class_names
    for ds in datasets:
        for k, name in enumerate(class_names):
            (root / ds.name / name).mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(ds.ids):
            write_ppm(root / ds.name / class_names[ds.labels[i]] / f"{sid}.ppm", ds.images[i])
    manifest = {
        "domains": [ds.name for ds in datasets],
        "classes": list(class_names),
        "image_shape": list(datasets[0].image_shape),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def load_manifest(root: str | Path) -> dict | None:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return None
    manifest = json.loads(path.read_text())
    missing = {"domains", "classes", "image_shape"} - manifest.keys()
    if missing:
        raise DatasetError(f"{path}: missing fields {sorted(missing)}")
    return manifest


def load_ppm_tree(root: str | Path) -> list[DomainDataset]:
    """Load ``root/<domain>/<class_name>/*.ppm``.

    Class indices follow ascending lexicographic order of class directory
    names across all domains; sample ids are file stems.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DatasetError(f"{root}: no domain directories")
    class_names = sorted({c.name for d in domain_dirs for c in d.iterdir() if c.is_dir()})
    manifest = load_manifest(root)
    if manifest is not None:
        if list(manifest["classes"]) != class_names:
            raise DatasetError(f"{root}/manifest.json: classes do not match the sorted class directories")
        if sorted(manifest["domains"]) != [d.name for d in domain_dirs]:
            raise DatasetError(f"{root}/manifest.json: domains do not match the domain directories")
    index = {name: k for k, name in enumerate(class_names)}
    shape = None
    out = []
    for ddir in domain_dirs:
        ids, images, labels = [], [], []
        for cdir in sorted(p for p in ddir.iterdir() if p.is_dir()):
            files = sorted(cdir.glob("*.ppm"))
            if not files:
                raise DatasetError(f"{cdir}: empty class directory")
            for f in files:
                img = read_ppm(f)
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    raise DatasetError(f"{f}: image shape {img.shape} differs from {shape}")
                ids.append(f.stem)
                images.append(img)
                labels.append(index[cdir.name])
        if not ids:
            raise DatasetError(f"{ddir}: domain has no images")
        out.append(DomainDataset(ddir.name, tuple(ids), np.stack(images), np.array(labels), tuple(class_names)))
    if manifest is not None and tuple(manifest["image_shape"]) != tuple(shape):
        raise DatasetError(f"{root}/manifest.json: image_shape {manifest['image_shape']} != {list(shape)}")
    return out


# ----------------------------------------------------------------------
# splits


def make_split(datasets: Sequence[DomainDataset], test_domain: str, num_unknown: int) -> SplitSpec:
    """Hold out ``test_domain``; the last ``num_unknown`` classes become unknown."""
    names = [ds.name for ds in datasets]
    if test_domain not in names:
        raise DatasetError(f"unknown domain {test_domain!r}; available: {names}")
    num_classes = len(datasets[0].class_names)
    if not 1 <= num_unknown < num_classes:
        raise DatasetError(f"num_unknown must lie in [1, {num_classes - 1}], got {num_unknown}")
    cut = num_classes - num_unknown
    return SplitSpec(test_domain, tuple(range(cut)), tuple(range(cut, num_classes)))


def source_datasets(datasets: Sequence[DomainDataset], split: SplitSpec) -> list[DomainDataset]:
    """Training view: source domains only, known classes only."""
    known = np.array(split.known_classes)
    out = [ds.subset(np.isin(ds.labels, known)) for ds in datasets if ds.name != split.test_domain]
    assert_training_pool(out, split)
    return out


def test_dataset(datasets: Sequence[DomainDataset], split: SplitSpec) -> DomainDataset:
    for ds in datasets:
        if ds.name == split.test_domain:
            return ds
    raise DatasetError(f"unknown domain {split.test_domain!r}")


def assert_training_pool(pool: Sequence[DomainDataset], split: SplitSpec) -> None:
    unknown = np.array(split.unknown_classes)
    for ds in pool:
        if ds.name == split.test_domain:
            raise DatasetError(f"test domain {ds.name} leaked into the training pool")
        if np.isin(ds.labels, unknown).any():
            raise DatasetError(f"unknown-class samples leaked into training domain {ds.name}")


# ----------------------------------------------------------------------
# batch sampling


def sample_batch(pool_size: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices into a pool: without replacement when possible, else with."""
    if pool_size <= 0:
        raise DatasetError("cannot sample from an empty pool")
    return rng.choice(pool_size, size=size, replace=size > pool_size)


def sample_batch_different_classes(
    pool_labels: np.ndarray, reference_labels: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """For each reference label, the index of a uniformly drawn pool element
    carrying a different label."""
    pool_labels = np.asarray(pool_labels)
    out = np.empty(len(reference_labels), dtype=np.int64)
    for i, y in enumerate(np.asarray(reference_labels)):
        candidates = np.flatnonzero(pool_labels != y)
        if candidates.size == 0:
            raise DatasetError(f"pool holds no sample with a class other than {int(y)}")
        out[i] = candidates[rng.integers(candidates.size)]
    return out
