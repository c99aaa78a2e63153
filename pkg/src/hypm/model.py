"""Desk-scale backbone, classifier head, SGD and checkpoint I/O.

Parameters live in plain float64 arrays inside :class:`ModelState`. A forward
pass that needs gradients wraps them as leaf tensors via :func:`leaves`;
inference passes wrap them as constants.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from hypm import autodiff as ad
from hypm.autodiff import Tensor

ALPHA_KEYS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b")
BETA_KEYS = ("head.w", "head.b")
PROMPT_KEY = "prompt"
CHECKPOINT_MAGIC = b"HYPM1"


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int] = (32, 32)
    channels: tuple[int, int] = (8, 16)
    embed_dim: int = 64
    num_classes: int = 6  # known classes C; the head emits C + 1 logits
    init_seed: int = 0

    def __post_init__(self):
        h, w = self.image_shape
        if h % 4 or w % 4 or h <= 0 or w <= 0:
            raise ValueError(f"image dims must be positive multiples of 4, got {self.image_shape}")
        if self.num_classes < 1 or self.embed_dim < 1:
            raise ValueError("num_classes and embed_dim must be positive")
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1e-3
    decay_factor: float = 0.1
    decay_at_step: int = 8000
    max_steps: int = 10000
    batch_size: int = 16

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_steps > 0 and not self.decay_at_step < self.max_steps:
            raise ValueError("decay_at_step must be smaller than max_steps")

    def lr_at(self, step: int) -> float:
        return self.lr * (self.decay_factor if step >= self.decay_at_step else 1.0)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.0  # last applied learning rate

    @property
    def alpha(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in ALPHA_KEYS}

    @property
    def beta(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in BETA_KEYS}

    @property
    def prompt(self) -> np.ndarray:
        return self.params[PROMPT_KEY]

    def clone(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.step, self.lr)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def init_state(cfg: ModelConfig) -> ModelState:
    """Fan-in uniform weights (bound sqrt(6/fan_in)), zero biases, mid-gray prompt."""
    rng = np.random.default_rng(cfg.init_seed)
    c1, c2 = cfg.channels
    h, w = cfg.image_shape

    def uniform(shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "conv1.w": uniform((3, 3, 3, c1), 27),
        "conv1.b": np.zeros(c1),
        "conv2.w": uniform((3, 3, c1, c2), c1 * 9),
        "conv2.b": np.zeros(c2),
        "fc.w": uniform((c2, cfg.embed_dim), c2),
        "fc.b": np.zeros(cfg.embed_dim),
        "head.w": uniform((cfg.embed_dim, cfg.num_classes + 1), cfg.embed_dim),
        "head.b": np.zeros(cfg.num_classes + 1),
        PROMPT_KEY: np.full((h, w, 3), 0.5),
    }
    return ModelState(cfg, params)


def leaves(state: ModelState, keys=None) -> dict[str, Tensor]:
    """Gradient-recording leaf tensors for ``keys`` (default: every parameter)."""
    keys = state.params.keys() if keys is None else keys
    return {k: Tensor(state.params[k], requires_grad=True, name=k) for k in keys}


def _param(state: ModelState, params: Mapping[str, Tensor] | None, key: str):
    if params is not None and key in params:
        return params[key]
    return Tensor(state.params[key])


def backbone_forward(state: ModelState, batch, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Embeddings (B, embed_dim) for a (B, H, W, 3) batch."""
    h, w = state.config.image_shape
    shape = batch.shape
    if len(shape) != 4 or tuple(shape[1:]) != (h, w, 3):
        raise ValueError(f"batch shape {tuple(shape)} does not match (B, {h}, {w}, 3)")
    p = lambda k: _param(state, params, k)  # noqa: E731
    x = ad.transpose(batch, (3, 0, 1, 2))
    x = ad.max_pool2d(ad.relu(ad.conv2d(x, p("conv1.w"), p("conv1.b"))))
    x = ad.max_pool2d(ad.relu(ad.conv2d(x, p("conv2.w"), p("conv2.b"))))
    x = ad.transpose(ad.mean(x, axis=(2, 3)), (1, 0))
    return x @ p("fc.w") + p("fc.b")


def head_forward(state: ModelState, z, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Logits over C known classes plus the augmentation class (index C)."""
    if z.shape[-1] != state.config.embed_dim:
        raise ValueError(f"embedding dim {z.shape[-1]} != head input {state.config.embed_dim}")
    return z @ _param(state, params, "head.w") + _param(state, params, "head.b")


def forward(state: ModelState, batch, params: Mapping[str, Tensor] | None = None) -> Tensor:
    return head_forward(state, backbone_forward(state, batch, params), params)


def embed(state: ModelState, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    with ad.no_grad():
        parts = [backbone_forward(state, images[i : i + chunk]).data for i in range(0, len(images), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, state.config.embed_dim))


def predict_logits(state: ModelState, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    with ad.no_grad():
        parts = [forward(state, images[i : i + chunk]).data for i in range(0, len(images), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, state.config.num_classes + 1))


def cross_entropy(logits, labels) -> Tensor:
    return ad.cross_entropy(logits, labels)


def loss_and_grads(
    state: ModelState, loss_fn: Callable[[Mapping[str, Tensor]], Tensor], keys=None
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn(leaves)`` and return (loss, gradient per parameter).

    Parameters the loss does not touch get zero gradients.
    """
    lv = leaves(state, keys)
    loss = loss_fn(lv)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in lv.items()}
    return float(loss.data), grads


def sgd_step(state: ModelState, grads: Mapping[str, np.ndarray], cfg: SgdConfig, lr: float | None = None) -> ModelState:
    """Return a new state with ``θ - lr_t * g`` applied; the prompt is clamped to [0, 1].

    ``lr`` overrides the scheduled rate (used for the inner meta-train step).
    """
    for k, g in grads.items():
        if k not in state.params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != state.params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {state.params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k} at step {state.step}")
    lr_t = cfg.lr_at(state.step) if lr is None else lr
    params = dict(state.params)
    for k, g in grads.items():
        params[k] = state.params[k] - lr_t * g
    if PROMPT_KEY in grads:
        params[PROMPT_KEY] = np.clip(params[PROMPT_KEY], 0.0, 1.0)
    return ModelState(state.config, params, state.step + 1, lr_t)


def grad_check(
    state: ModelState,
    batch: np.ndarray,
    labels: np.ndarray,
    h: float = 1e-5,
    keys=None,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` set, a seeded subset of entries per parameter is probed.
    """
    if keys is None:
        keys = [k for k in state.params if k != PROMPT_KEY]
    batch = np.asarray(batch, dtype=np.float64)

    def loss_of(s: ModelState) -> float:
        with ad.no_grad():
            return float(cross_entropy(forward(s, batch), labels).data)

    _, grads = loss_and_grads(state, lambda p: cross_entropy(forward(state, batch, p), labels), keys)
    rng = np.random.default_rng(seed)
    worst = 0.0
    probe = state.clone()
    for k in keys:
        flat = probe.params[k].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_of(probe)
            flat[i] = orig - h
            down = loss_of(probe)
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = grads[k].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Binary layout: magic, u32 header length, JSON header, then for each
    parameter in declaration order: u32 name length, name, u32 ndim,
    u64 dims, float64 little-endian values."""
    header = json.dumps(
        {"config": asdict(state.config), "step": state.step, "lr": state.lr.hex()},
        sort_keys=True,
    ).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(state.params))]
    for key in (*ALPHA_KEYS, *BETA_KEYS, PROMPT_KEY):
        arr = state.params[key]
        name = key.encode()
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> ModelState:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a HYPM1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = take("<I")
    header = json.loads(buf[pos : pos + hlen])
    pos += hlen
    (count,) = take("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    cfg = header["config"]
    config = ModelConfig(**{**cfg, "image_shape": tuple(cfg["image_shape"]), "channels": tuple(cfg["channels"])})
    return ModelState(config, params, header["step"], float.fromhex(header["lr"]))


def states_equal(a: ModelState, b: ModelState) -> bool:
    return (
        a.config == b.config
        and a.params.keys() == b.params.keys()
        and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    )

