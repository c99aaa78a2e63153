"""Mixed-category prompt augmentation.

Two clean images of different classes are averaged, a window of the mixed
image is overwritten by the same window of the learnable prompt, and the
result is labelled as the extra class (index C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hypm import autodiff as ad
from hypm.autodiff import Tensor

MODES = ("synchronous", "asynchronous", "adversarial", "fixed_crop")


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class CropMask:
    top: int
    left: int
    height: int
    width: int

    def check(self, h: int, w: int) -> None:
        if self.height < 1 or self.width < 1:
            raise AugmentError(f"empty crop window {self}")
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise AugmentError(f"crop window {self} exceeds image bounds {h}x{w}")

    def boolean(self, h: int, w: int) -> np.ndarray:
        """(H, W, 1) indicator of the window."""
        self.check(h, w)
        m = np.zeros((h, w, 1), dtype=bool)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return m


@dataclass(frozen=True)
class AugmentConfig:
    crop_fraction: float = 0.5
    mode: str = "synchronous"
    mix_cross_domain: bool = False

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise AugmentError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        if self.mode not in MODES:
            raise AugmentError(f"unknown augmentation mode {self.mode!r}")

    def window(self, h: int, w: int) -> tuple[int, int]:
        side = lambda n: max(1, min(n, int(math.floor(self.crop_fraction * n + 0.5))))  # noqa: E731
        return side(h), side(w)


def mix_pair(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AugmentError(f"cannot mix shapes {a.shape} and {b.shape}")
    return (a + b) / 2.0


def random_crop_mask(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator) -> CropMask:
    ch, cw = cfg.window(h, w)
    if cfg.mode == "fixed_crop":
        return CropMask(0, 0, ch, cw)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return CropMask(top, left, ch, cw)


def apply_prompt(mixed, prompt, mask: CropMask):
    """Overwrite the masked window of ``mixed`` (H, W, 3) or (B, H, W, 3) with
    the prompt's values at the same coordinates.

    A tensor prompt yields a tensor whose gradient w.r.t. the prompt is the
    window indicator.
    """
    h, w = np.shape(mixed)[-3:-1]
    if tuple(np.shape(prompt)) != (h, w, 3):
        raise AugmentError(f"prompt shape {np.shape(prompt)} does not match image {(h, w, 3)}")
    m = mask.boolean(h, w)
    if isinstance(prompt, Tensor):
        return ad.where(m, prompt, mixed)
    return np.where(m, prompt, mixed)


def build_augmented_batch(
    clean: np.ndarray,
    partners: np.ndarray,
    prompt,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    num_known: int,
):
    """Mix aligned batches, paste one shared prompt window, label everything C."""
    mixed = mix_pair(clean, partners)
    h, w = mixed.shape[1:3]
    mask = random_crop_mask(h, w, cfg, rng)
    batch = apply_prompt(mixed, prompt, mask)
    return batch, np.full(len(mixed), num_known, dtype=np.int64), mask
