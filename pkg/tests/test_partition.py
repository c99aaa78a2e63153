from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypm.geometry import BallConfig
from hypm.model import ModelConfig, init_state
from hypm.datasets import generate_synthetic
from hypm.partition import (
    ModeConfig,
    PartitionError,
    PrototypeTable,
    build_table,
    compute_partition,
    compute_prototypes,
    correct_labels,
    embed_images,
    mode_threshold,
    partition_points,
    split_clean_noisy,
    write_partition_csv,
)
from planted import make_plant, min_separation_ratio, noisy_f1

UNIT = BallConfig(gamma=1.0)

# 1-D distances in the unit ball (mpmath): 2 atanh(|b - a| / (1 - ab))
H_01_00 = 0.20067069546215116127
H_01_09 = 2.7437682837042892987
H_08_00 = 2.1972245773362193828
H_08_09 = 0.74721440183022107722


# ----------------------------------------------------------------------
# mode threshold


def test_mode_threshold_examples():
    assert mode_threshold([1, 1, 1, 5]) == 1.125
    assert mode_threshold([0, 0, 0, 0.9, 1.0], ModeConfig(num_bins=2)) == 0.5
    assert mode_threshold([0.7, 0.7, 0.7]) == 1.7
    with pytest.raises(PartitionError):
        mode_threshold([])
    with pytest.raises(PartitionError):
        ModeConfig(num_bins=1)


def test_mode_tie_goes_to_lowest_bin():
    # bins over [0, 1] with 4 bins: two values in bin 0, two in bin 3
    assert mode_threshold([0.0, 0.1, 0.9, 1.0], ModeConfig(num_bins=4)) == 0.25


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=50), st.integers(2, 40))
def test_mode_threshold_in_range(d, bins):
    t = mode_threshold(d, ModeConfig(num_bins=bins))
    if min(d) == max(d):
        assert t == max(d) + 1
    else:
        assert min(d) < t <= max(d) + 1e-12


# ----------------------------------------------------------------------
# split and correction


def test_split_is_strict():
    p = split_clean_noisy(["a", "b", "c", "d"], np.array([0.4, 0.5, 0.6, np.nan]), np.array([0.5] * 4))
    assert p.clean == {"a"} and p.noisy == {"b", "c", "d"}


def test_single_sample_groups_are_clean():
    pts = np.array([[0.1, 0.0], [0.0, 0.2], [-0.3, 0.1]])
    res = partition_points(["x", "y", "z"], pts, ["s"] * 3, np.array([0, 1, 2]), UNIT)
    assert res.is_clean.all() and not res.partition.noisy
    for k in range(3):
        assert np.array_equal(res.table.centers[("s", k)], pts[k])
    assert np.all(res.distances == 0.0)


def table_1d(protos, space="hyperbolic"):
    return PrototypeTable(
        {("s", k): np.array([v]) for k, v in protos.items()}, {("s", k): 0.0 for k in protos}, 0, space
    )


def test_correct_labels_examples():
    t = table_1d({0: 0.0, 1: -0.5, 3: 0.4})
    assert correct_labels(np.array([[0.4]]), t, "s", UNIT).tolist() == [3]
    tie = table_1d({1: -0.3, 4: 0.3})
    assert correct_labels(np.array([[0.0]]), tie, "s", UNIT).tolist() == [1]
    with pytest.raises(PartitionError):
        correct_labels(np.array([[0.0]]), t, "other", UNIT)


def test_hyperbolic_and_euclidean_nearest_prototype():
    from hypm.partition import distance

    a, b = np.array([0.1]), np.array([0.8])
    p0, p1 = np.array([0.0]), np.array([0.9])
    assert distance(a, p0, UNIT, "hyperbolic") == pytest.approx(H_01_00, abs=1e-14)
    assert distance(a, p1, UNIT, "hyperbolic") == pytest.approx(H_01_09, abs=1e-13)
    assert distance(b, p0, UNIT, "hyperbolic") == pytest.approx(H_08_00, abs=1e-14)
    assert distance(b, p1, UNIT, "hyperbolic") == pytest.approx(H_08_09, abs=1e-13)
    assert distance(b, p0, UNIT, "euclidean") == pytest.approx(0.8, abs=1e-15)
    for space in ("hyperbolic", "euclidean"):
        t = table_1d({0: 0.0, 1: 0.9}, space)
        assert correct_labels(np.array([[0.1], [0.8]]), t, "s", UNIT).tolist() == [0, 1]


def test_missing_prototype_warns_and_marks_noisy(caplog):
    pts = np.array([[0.1, 0.0], [0.12, 0.0], [0.5, 0.0], [0.0, 0.3]])
    domains = ["a", "a", "a", "b"]
    labels = np.array([0, 0, 1, 1])
    with caplog.at_level(logging.WARNING):
        table = build_table(pts, domains, labels, UNIT, classes=[0, 1])
    assert ("b", 0) not in table.centers and ("b", 1) in table.centers
    assert "no samples labelled [0]" in caplog.text


def test_partition_invariants():
    plant = make_plant(0, 50)
    res = partition_points(plant.ids, plant.points, plant.domains, plant.given, BallConfig())
    p = res.partition
    assert not (p.clean & p.noisy) and (p.clean | p.noisy) == set(plant.ids)
    assert set(p.corrected_labels) == p.noisy
    assert all(t >= 0 for t in res.table.thresholds.values())


# ----------------------------------------------------------------------
# planted oracle


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_split_and_correction(seed):
    ball = BallConfig()
    plant = make_plant(seed, separation=50.0)
    assert min_separation_ratio(plant, ball) >= 10.0
    res = partition_points(plant.ids, plant.points, plant.domains, plant.given, ball)
    assert noisy_f1(~res.is_clean, plant) >= 0.9
    assert np.array_equal(res.labels[plant.flipped], plant.true[plant.flipped])
    again = partition_points(plant.ids, plant.points, plant.domains, plant.given, ball)
    assert np.array_equal(again.labels, res.labels) and again.partition == res.partition


def test_planted_euclidean_variant_also_recovers():
    plant = make_plant(3, separation=50.0)
    res = partition_points(plant.ids, plant.points, plant.domains, plant.given, BallConfig(), space="euclidean")
    assert noisy_f1(~res.is_clean, plant) >= 0.9
    assert np.array_equal(res.labels[plant.flipped], plant.true[plant.flipped])


# ----------------------------------------------------------------------
# model-driven entry points


def test_embedding_independent_of_thread_count(monkeypatch):
    data = generate_synthetic(num_domains=3, num_classes=4, per_class=3, seed=0, shape=(16, 16))
    state = init_state(ModelConfig(image_shape=(16, 16), num_classes=3))
    images = np.concatenate([d.images for d in data])
    monkeypatch.setenv("HYPM_THREADS", "1")
    one = embed_images(state, images, chunk=5)
    monkeypatch.setenv("HYPM_THREADS", "3")
    assert np.array_equal(embed_images(state, images, chunk=5), one)


def test_compute_partition_on_model(tmp_path):
    data = generate_synthetic(num_domains=3, num_classes=4, per_class=3, seed=0, shape=(16, 16))
    state = init_state(ModelConfig(image_shape=(16, 16), num_classes=3))
    ball = BallConfig()
    r1 = compute_partition(state, data, ball)
    r2 = compute_partition(state, data, ball)
    assert np.array_equal(r1.distances, r2.distances) and r1.partition == r2.partition
    table = compute_prototypes(state, data, ball)
    assert set(table.centers) == set(r1.table.centers)
    write_partition_csv(r1, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == 1 + sum(len(d.ids) for d in data)
