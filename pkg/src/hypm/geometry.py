"""Poincaré-ball operations.

Every function works row-wise along the last axis and broadcasts over the
leading axes, so ``hyperbolic_distance(x[:, None], protos[None])`` yields the
full sample-by-prototype distance matrix. Inputs may be numpy arrays or
:class:`hypm.autodiff.Tensor` objects; the formulas are shared and the
tensor path is differentiable.

Computation is always float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hypm.autodiff import Tensor


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BallConfig:
    """Curvature magnitude ``gamma`` (= 1/r**2) plus numerical knobs.

    ``eps`` defaults to ``1e-5 * radius``. ``exp_map_variant`` selects the
    factor inside tanh: ``"paper"`` uses 1/sqrt(gamma), ``"standard"`` uses
    sqrt(gamma).
    """

    gamma: float = 2e-5
    lambda_scale: float = 2.0
    eps: float | None = None
    exp_map_variant: str = "paper"
    radius: float = field(init=False)

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise GeometryError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "radius", self.gamma ** -0.5)
        if self.eps is None:
            object.__setattr__(self, "eps", 1e-5 * self.radius)
        if not 0 < self.eps < self.radius:
            raise GeometryError(f"eps must lie in (0, radius={self.radius}), got {self.eps}")
        if not self.lambda_scale > 0:
            raise GeometryError(f"lambda_scale must be positive, got {self.lambda_scale}")
        if self.exp_map_variant not in ("paper", "standard"):
            raise GeometryError(f"unknown exp_map_variant {self.exp_map_variant!r}")


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _coerce(x):
    return x if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_finite(*xs) -> None:
    for x in xs:
        if not np.all(np.isfinite(_raw(x))):
            raise GeometryError("non-finite input")


def _check_dims(a, b) -> None:
    if _raw(a).shape[-1:] != _raw(b).shape[-1:]:
        raise GeometryError(f"dimension mismatch: {_raw(a).shape} vs {_raw(b).shape}")


def _sqnorm(x):
    return (x * x).sum(axis=-1, keepdims=True)


def project_to_ball(v, cfg: BallConfig):
    """Rescale rows whose norm exceeds ``radius - eps`` onto that sphere.

    The rescale factor is treated as a constant by the tensor path; gradients
    are exact everywhere the projection is inactive.
    """
    v = _coerce(v)
    limit = cfg.radius - cfg.eps
    norm = np.sqrt((_raw(v) ** 2).sum(axis=-1, keepdims=True))
    over = norm > limit
    if not over.any():
        return v
    scale = np.where(over, limit / np.where(over, norm, 1.0), 1.0)
    return v * scale


def mobius_add(a, b, cfg: BallConfig):
    """Möbius addition a ⊕ b on the ball of curvature -gamma."""
    a, b = _coerce(a), _coerce(b)
    _check_dims(a, b)
    _check_finite(a, b)
    g = cfg.gamma
    ab = (a * b).sum(axis=-1, keepdims=True)
    a2 = _sqnorm(a)
    b2 = _sqnorm(b)
    num = (1.0 + 2.0 * g * ab + g * b2) * a + (1.0 - g * a2) * b
    den = 1.0 + 2.0 * g * ab + g * g * a2 * b2
    out = num / den
    # only a result rounded onto or past the boundary is pulled back; results
    # inside the eps margin are kept so distances near the shell stay distinct
    if np.any((_raw(out) ** 2).sum(axis=-1) >= cfg.radius**2):
        return project_to_ball(out, cfg)
    return out


def hyperbolic_distance(a, b, cfg: BallConfig):
    """Geodesic distance ``2r * atanh(|(-a) ⊕ b| / r)``; reduces the last axis."""
    a, b = _coerce(a), _coerce(b)
    for x in (a, b):
        if np.any((_raw(x) ** 2).sum(axis=-1) >= cfg.radius**2):
            raise GeometryError("point on or outside the ball boundary")
    diff = mobius_add(-a, b, cfg)
    ratio = np.sqrt(_sqnorm(diff)) / cfg.radius
    if np.any(_raw(ratio) >= 1.0):
        raise GeometryError("atanh argument reached 1: point on or outside the ball boundary")
    d = 2.0 * cfg.radius * np.arctanh(ratio)
    return d[..., 0]


def exp_map(v, cfg: BallConfig):
    """Map a Euclidean embedding into the ball at base point 0.

    ``tanh(k * lambda * |v| / 2) * v / (sqrt(gamma) * |v|)`` with
    ``k = 1/sqrt(gamma)`` (paper variant) or ``k = sqrt(gamma)`` (standard);
    zero rows map to the origin.
    """
    v = _coerce(v)
    _check_finite(v)
    sg = math.sqrt(cfg.gamma)
    k = 1.0 / sg if cfg.exp_map_variant == "paper" else sg
    raw_norm = np.sqrt((_raw(v) ** 2).sum(axis=-1, keepdims=True))
    zero = raw_norm == 0.0
    # guard the removable singularity; zero rows end up exactly 0 since v is 0 there
    safe = np.where(zero, 1.0, raw_norm)
    norm = np.sqrt(_sqnorm(v)) if isinstance(v, Tensor) and not zero.any() else safe
    scale = np.tanh(k * cfg.lambda_scale * norm / 2.0) / (sg * norm)
    mapped = scale * v
    origin = np.zeros(_raw(v).shape[-1])
    return project_to_ball(mobius_add(origin, mapped, cfg), cfg)


def hyperbolic_mean(points: Sequence | np.ndarray, cfg: BallConfig) -> np.ndarray:
    """Coordinate-wise mean of ball points, projected back inside the ball."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[0] == 0:
        raise GeometryError("hyperbolic_mean of an empty point set")
    _check_finite(pts)
    return project_to_ball(pts.mean(axis=0), cfg)
