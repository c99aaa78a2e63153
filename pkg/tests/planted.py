"""Planted embeddings for partition tests: uniform-in-ball clusters placed
directly in the Poincare ball, bypassing the backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hypm.geometry import BallConfig, hyperbolic_distance


@dataclass
class Plant:
    ids: list[str]
    points: np.ndarray
    domains: np.ndarray
    true: np.ndarray
    given: np.ndarray
    flipped: np.ndarray  # indices with given != true


def make_plant(
    seed: int,
    separation: float,
    dim: int = 64,
    num_classes: int = 5,
    per_class: int = 50,
    domains=("a", "b"),
    radius: float = 1.0,
    noise: float = 0.2,
) -> Plant:
    """Centers sit on random directions at Euclidean norm separation*radius/sqrt(2),
    so centers in a domain are about separation*radius apart."""
    rng = np.random.default_rng(seed)
    pts, dom, true = [], [], []
    for s in domains:
        dirs = rng.normal(size=(num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = dirs * separation * radius / np.sqrt(2)
        for k in range(num_classes):
            v = rng.normal(size=(per_class, dim))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            r = radius * rng.uniform(size=(per_class, 1)) ** (1.0 / dim)
            pts.append(centers[k] + v * r)
            dom += [s] * per_class
            true += [k] * per_class
    points = np.concatenate(pts)
    true = np.array(true)
    n = len(true)
    flipped = np.sort(rng.choice(n, int(round(noise * n)), replace=False))
    given = true.copy()
    given[flipped] = (true[flipped] + rng.integers(1, num_classes, size=flipped.size)) % num_classes
    return Plant([f"p{i:04d}" for i in range(n)], points, np.array(dom), true, given, flipped)


def min_separation_ratio(plant: Plant, ball: BallConfig, radius: float = 1.0) -> float:
    """Smallest hyperbolic distance between true class means within a domain,
    over the largest hyperbolic distance of a point from its own mean."""
    gaps, spread = [], 0.0
    for s in np.unique(plant.domains):
        means = []
        for k in np.unique(plant.true):
            grp = plant.points[(plant.domains == s) & (plant.true == k)]
            mu = grp.mean(axis=0)
            means.append(mu)
            spread = max(spread, float(hyperbolic_distance(grp, mu, ball).max()))
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                gaps.append(float(hyperbolic_distance(means[i], means[j], ball)))
    return min(gaps) / spread


def noisy_f1(predicted_noisy: np.ndarray, plant: Plant) -> float:
    truth = plant.given != plant.true
    tp = int((predicted_noisy & truth).sum())
    return 2 * tp / (int(predicted_noisy.sum()) + int(truth.sum()))
