"""Episodic meta-training over source domains with prototype-driven label
cleaning and prompt augmentation.

One iteration: pick an ordered domain pair (s_i, s_j), refresh the cached
partition when due, take an inner SGD step on a clone using the meta-train
loss of s_i, evaluate the meta-test loss of the adapted clone on clean data,
then update the original parameters with the sum of both gradients
(first-order).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hypm import augment
from hypm.augment import AugmentConfig
from hypm.datasets import DomainDataset, SplitSpec, assert_training_pool, sample_batch, sample_batch_different_classes, stream
from hypm.geometry import BallConfig
from hypm.model import (
    ALPHA_KEYS,
    BETA_KEYS,
    PROMPT_KEY,
    ModelConfig,
    ModelState,
    NonFiniteGradientError,
    SgdConfig,
    cross_entropy,
    forward,
    init_state,
    loss_and_grads,
    save_checkpoint,
    sgd_step,
)
from hypm.partition import SPACES, ModeConfig, PartitionResult, compute_partition

log = logging.getLogger(__name__)

NETWORK_KEYS = ALPHA_KEYS + BETA_KEYS
LOG_COLUMNS = ("step", "loss_meta_train", "loss_meta_test", "domain_i", "domain_j", "clean_count", "noisy_count", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_epoch_refresh: int = 500
    use_hyb_meta: bool = True
    use_nca_prompt: bool = True
    use_label_correction: bool = True
    cross_domain_meta_test: bool = True
    prototype_space: str = "hyperbolic"
    inner_lr: float | None = None  # None: follow the scheduled outer lr
    committed_inner_step: bool = False
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    channels: tuple[int, int] = (8, 16)
    embed_dim: int = 64
    sgd: SgdConfig = field(default_factory=SgdConfig)
    ball: BallConfig = field(default_factory=BallConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)

    def __post_init__(self):
        if self.n_epoch_refresh < 1:
            raise ValueError("n_epoch_refresh must be positive")
        if self.sgd.max_steps > 0 and self.n_epoch_refresh > self.sgd.max_steps:
            raise ValueError("n_epoch_refresh must not exceed max_steps")
        if self.prototype_space not in SPACES:
            raise ValueError(f"unknown prototype space {self.prototype_space!r}")
        if self.inner_lr is not None and self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        object.__setattr__(self, "channels", tuple(self.channels))

    def model_config(self, image_shape: tuple[int, int], num_known: int) -> ModelConfig:
        return ModelConfig(tuple(image_shape), self.channels, self.embed_dim, num_known, self.seed)

    @property
    def is_erm(self) -> bool:
        return not self.use_hyb_meta and not self.use_nca_prompt


@dataclass(frozen=True)
class StepReport:
    step: int
    loss_meta_train: float
    loss_meta_test: float
    domains: tuple[str, str]
    clean_count: int
    noisy_count: int
    lr: float

    def row(self) -> list:
        return [
            self.step,
            repr(self.loss_meta_train),
            repr(self.loss_meta_test),
            self.domains[0],
            self.domains[1],
            self.clean_count,
            self.noisy_count,
            repr(self.lr),
        ]


@dataclass
class Pool:
    """Flattened source data; row order matches :func:`compute_partition`."""

    datasets: list[DomainDataset]
    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    @classmethod
    def of(cls, datasets: Sequence[DomainDataset]) -> "Pool":
        datasets = list(datasets)
        return cls(
            datasets,
            np.concatenate([ds.images for ds in datasets]),
            np.concatenate([ds.labels for ds in datasets]),
            np.array([ds.name for ds in datasets for _ in ds.ids]),
        )

    @property
    def names(self) -> list[str]:
        return [ds.name for ds in self.datasets]


# ----------------------------------------------------------------------
# building blocks


def select_domain_pair(domains: Sequence[str], rng: np.random.Generator) -> tuple[str, str]:
    if len(domains) < 2:
        raise TrainingError(f"need at least 2 source domains, got {len(domains)}")
    i, j = rng.choice(len(domains), size=2, replace=False)
    return domains[int(i)], domains[int(j)]


class PartitionCache:
    """Holds the latest partition; recomputes at step 0 and every N steps."""

    def __init__(self, pool: Pool, cfg: TrainConfig, classes: Sequence[int] | None = None):
        self.pool = pool
        self.cfg = cfg
        self.classes = classes
        self.result: PartitionResult | None = None
        self.refreshes = 0

    def due(self, step: int) -> bool:
        return self.result is None or step % self.cfg.n_epoch_refresh == 0

    def get(self, step: int, state: ModelState) -> PartitionResult:
        if step < 0:
            raise ValueError("step must be non-negative")
        if self.due(step):
            self.result = compute_partition(
                state, self.pool.datasets, self.cfg.ball, self.cfg.prototype_space, self.cfg.mode, step, self.classes
            )
            self.refreshes += 1
            log.info(
                "step %d: partition refresh, %d clean / %d noisy",
                step,
                int(self.result.is_clean.sum()),
                int((~self.result.is_clean).sum()),
            )
        return self.result


def refresh_partition_if_due(step: int, state: ModelState, cache: PartitionCache) -> PartitionResult:
    return cache.get(step, state)


def training_labels(result: PartitionResult, cfg: TrainConfig) -> np.ndarray:
    """Labels used for noisy samples in the meta-train loss."""
    return result.labels if cfg.use_label_correction else result.given_labels


def _clean_indices(pool: Pool, result: PartitionResult, domain: str) -> np.ndarray:
    idx = np.flatnonzero((pool.domains == domain) & result.is_clean)
    if idx.size == 0:
        raise TrainingError(
            f"clean set of domain {domain!r} is empty; use a larger warmup or a different seed"
        )
    return idx


def _ce(state: ModelState, params, images, labels):
    return cross_entropy(forward(state, images, params), labels)


@dataclass
class Streams:
    pair: np.random.Generator
    batch: np.random.Generator
    crop: np.random.Generator

    @classmethod
    def of(cls, seed: int) -> "Streams":
        return cls(stream(seed, "pair-selection"), stream(seed, "batch"), stream(seed, "crop"))


def _augmented(pool: Pool, base_idx: np.ndarray, partner_pool: np.ndarray, state: ModelState, params, cfg, rngs):
    partners = partner_pool[sample_batch_different_classes(pool.labels[partner_pool], pool.labels[base_idx], rngs.batch)]
    batch, labels, _ = augment.build_augmented_batch(
        pool.images[base_idx], pool.images[partners], params[PROMPT_KEY], cfg.augment, rngs.crop, state.config.num_classes
    )
    return _ce(state, params, batch, labels)


def meta_train_step(
    state: ModelState,
    pair: tuple[str, str],
    result: PartitionResult,
    pool: Pool,
    cfg: TrainConfig,
    rngs: Streams,
) -> tuple[ModelState, float, dict[str, np.ndarray]]:
    """Meta-train loss on s_i and an SGD step on a clone.

    Returns (adapted clone, loss, gradient w.r.t. the original parameters).
    """
    s_i = pair[0]
    bs = cfg.sgd.batch_size
    clean = _clean_indices(pool, result, s_i)
    noisy = np.flatnonzero((pool.domains == s_i) & ~result.is_clean)
    labels = training_labels(result, cfg)

    b_clean = clean[sample_batch(clean.size, bs, rngs.batch)]
    b_noisy = noisy[sample_batch(noisy.size, bs, rngs.batch)] if noisy.size else None
    if cfg.augment.mix_cross_domain:
        partner_pool = np.flatnonzero((pool.domains != s_i) & result.is_clean)
    else:
        partner_pool = clean

    def loss_fn(params):
        loss = _ce(state, params, pool.images[b_clean], pool.labels[b_clean])
        if cfg.use_nca_prompt:
            loss = loss + _augmented(pool, b_clean, partner_pool, state, params, cfg, rngs)
        if b_noisy is not None:
            loss = loss + _ce(state, params, pool.images[b_noisy], labels[b_noisy])
        return loss

    loss, grads = loss_and_grads(state, loss_fn)
    grads = _prompt_policy(grads, state.step, cfg)
    lr = cfg.sgd.lr_at(state.step) if cfg.inner_lr is None else cfg.inner_lr
    adapted = sgd_step(state.clone(), grads, cfg.sgd, lr=lr)
    return adapted, loss, grads


def meta_test_step(
    adapted: ModelState,
    pair: tuple[str, str],
    result: PartitionResult,
    pool: Pool,
    cfg: TrainConfig,
    rngs: Streams,
) -> tuple[float, dict[str, np.ndarray]]:
    """Clean-only loss of the adapted parameters on s_i and s_j (or s_i twice)."""
    s_i, s_j = pair
    second = s_j if cfg.cross_domain_meta_test else s_i
    bs = cfg.sgd.batch_size
    a = _clean_indices(pool, result, s_i)
    b = _clean_indices(pool, result, second)
    b_a = a[sample_batch(a.size, bs, rngs.batch)]
    b_b = b[sample_batch(b.size, bs, rngs.batch)]

    def loss_fn(params):
        return _ce(adapted, params, pool.images[b_a], pool.labels[b_a]) + _ce(
            adapted, params, pool.images[b_b], pool.labels[b_b]
        )

    return loss_and_grads(adapted, loss_fn, NETWORK_KEYS)


def outer_update(
    state: ModelState,
    train_grads: dict[str, np.ndarray],
    test_grads: dict[str, np.ndarray],
    cfg: TrainConfig,
    adapted: ModelState | None = None,
) -> ModelState:
    """One SGD step with the summed gradients at the scheduled lr.

    With ``committed_inner_step`` the step is applied to the adapted clone
    instead of the original, so both updates persist.
    """
    grads = {k: g.copy() for k, g in train_grads.items()}
    for k, g in test_grads.items():
        grads[k] = grads[k] + g if k in grads else g
    base = state
    if cfg.committed_inner_step:
        if adapted is None:
            raise ValueError("committed_inner_step requires the adapted state")
        base = replace(adapted, step=state.step)
    return sgd_step(base, grads, cfg.sgd, lr=cfg.sgd.lr_at(state.step))


def _prompt_policy(grads: dict[str, np.ndarray], step: int, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Apply the augmentation-mode rule for how the prompt and network move."""
    mode = cfg.augment.mode
    if not cfg.use_nca_prompt:
        return {k: g for k, g in grads.items() if k != PROMPT_KEY}
    if mode == "adversarial":
        grads = dict(grads)
        grads[PROMPT_KEY] = -grads[PROMPT_KEY]
    elif mode == "asynchronous":
        # even steps move the network, odd steps move the prompt
        if step % 2 == 0:
            grads = {k: g for k, g in grads.items() if k != PROMPT_KEY}
        else:
            grads = {PROMPT_KEY: grads[PROMPT_KEY]}
    return grads


def erm_step(state: ModelState, pool: Pool, cfg: TrainConfig, rngs: Streams) -> tuple[ModelState, float]:
    """Whole-pool CE on given labels, plus the augmented term when enabled."""
    bs = cfg.sgd.batch_size
    idx = sample_batch(len(pool.labels), bs, rngs.batch)

    def loss_fn(params):
        loss = _ce(state, params, pool.images[idx], pool.labels[idx])
        if cfg.use_nca_prompt:
            loss = loss + _augmented(pool, idx, np.arange(len(pool.labels)), state, params, cfg, rngs)
        return loss

    loss, grads = loss_and_grads(state, loss_fn)
    grads = _prompt_policy(grads, state.step, cfg)
    return sgd_step(state, grads, cfg.sgd), loss


# ----------------------------------------------------------------------
# loop


def _check_finite(report: StepReport) -> None:
    if not (math.isfinite(report.loss_meta_train) and math.isfinite(report.loss_meta_test)):
        raise TrainingError(f"non-finite loss at step {report.step}: {report}")


def run_training(
    datasets: Sequence[DomainDataset],
    split: SplitSpec,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    on_step: Callable[[StepReport], None] | None = None,
) -> tuple[ModelState, list[StepReport]]:
    """Train from scratch on the (label-noisy) source domains.

    ``datasets`` must hold known-class source data only; it carries the
    training labels and nothing else, so clean labels are unreachable here.
    """
    datasets = list(datasets)
    assert_training_pool(datasets, split)
    if len(datasets) < 2:
        raise TrainingError("need at least 2 source domains")
    pool = Pool.of(datasets)
    state = init_state(cfg.model_config(datasets[0].images.shape[1:3], split.num_known))
    rngs = Streams.of(cfg.seed)
    cache = PartitionCache(pool, cfg, list(range(split.num_known)))
    reports: list[StepReport] = []
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    names = pool.names

    for step in range(cfg.sgd.max_steps):
        lr = cfg.sgd.lr_at(step)
        try:
            if cfg.use_hyb_meta:
                pair = select_domain_pair(names, rngs.pair)
                result = refresh_partition_if_due(step, state, cache)
                adapted, l_train, g_train = meta_train_step(state, pair, result, pool, cfg, rngs)
                l_test, g_test = meta_test_step(adapted, pair, result, pool, cfg, rngs)
                report = StepReport(
                    step, l_train, l_test, pair, int(result.is_clean.sum()), int((~result.is_clean).sum()), lr
                )
                _check_finite(report)
                state = outer_update(state, g_train, g_test, cfg, adapted)
            else:
                state, l_train = erm_step(state, pool, cfg, rngs)
                report = StepReport(step, l_train, 0.0, ("*", "*"), len(pool.labels), 0, lr)
                _check_finite(report)
        except NonFiniteGradientError as exc:
            raise TrainingError(f"step {step} aborted: {exc}") from exc
        reports.append(report)
        if on_step is not None:
            on_step(report)
        if ckpt is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            ckpt.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, ckpt / f"step_{step + 1:06d}.ckpt")
    return state, reports


def write_training_log(reports: Sequence[StepReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in reports:
            w.writerow(r.row())
