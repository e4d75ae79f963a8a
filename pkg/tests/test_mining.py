import numpy as np
import pytest
from hypothesis import given, strategies as st

from diva.mining import (
    D_MAX,
    D_MIN,
    BatchSpec,
    BatchSpecError,
    MiningError,
    Triplet,
    build_batch,
    mine_triplets,
    q_density,
    sample_negative,
    sampling_weight,
    triplet_is_valid,
)


def sphere(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_build_batch_shape(rng):
    labels = np.repeat(np.arange(10), 6)
    idx = build_batch(labels, np.arange(60), BatchSpec(8, 4), rng)
    assert len(idx) == 32 and len(set(idx)) == 32
    _, counts = np.unique(labels[idx], return_counts=True)
    assert len(counts) == 8 and set(counts) == {4}


def test_build_batch_boundary_and_errors(rng):
    labels = np.repeat([0, 1], 3)
    idx = build_batch(labels, np.arange(6), BatchSpec(2, 3), rng)
    assert sorted(idx) == list(range(6))
    with pytest.raises(BatchSpecError):
        build_batch(labels, np.arange(6), BatchSpec(3, 2), rng)
    with pytest.raises(BatchSpecError):
        build_batch(labels, np.arange(6), BatchSpec(2, 4), rng)


def test_build_batch_respects_candidates(rng):
    labels = np.repeat(np.arange(6), 4)
    cand = np.flatnonzero(labels < 3)
    for _ in range(20):
        assert set(labels[build_batch(labels, cand, BatchSpec(3, 2), rng)]) <= {0, 1, 2}


def test_batch_spec_validation():
    BatchSpec(8, 4).validate(["disc", "shared", "intra", "dance"])
    with pytest.raises(BatchSpecError):
        BatchSpec(8, 2).validate(["disc", "intra"])
    with pytest.raises(BatchSpecError):
        BatchSpec(2, 4).validate(["disc", "shared"])
    with pytest.raises(BatchSpecError):
        BatchSpec(1, 4).validate(["disc"])
    BatchSpec(2, 2).validate(["disc", "dance"])


def test_q_density_examples():
    assert q_density(1.0, 3) == 1.0
    assert q_density(np.sqrt(2), 4) == pytest.approx(2 * np.sqrt(0.5), rel=1e-12)
    assert q_density(np.sqrt(2), 4) == pytest.approx(1.41421, abs=1e-5)
    for D in (3, 5, 128):
        assert q_density(0.0, D) == 0.0
    with pytest.raises(ValueError):
        q_density(2.5, 3)
    with pytest.raises(ValueError):
        q_density(-0.1, 3)


def test_sampling_weight_examples():
    assert sampling_weight(1.0, 3, 10.0) == pytest.approx(1.0)
    # 1/q(0.6) = 1/0.6 > 1 = lambda
    assert sampling_weight(0.6, 3, 1.0) == 1.0
    assert sampling_weight(0.1, 3, 10.0) == sampling_weight(D_MIN, 3, 10.0)
    assert sampling_weight(2.0, 8, 1e9) == sampling_weight(D_MAX, 8, 1e9)


@given(st.floats(0, 2), st.integers(2, 256), st.floats(1e-3, 1e3))
def test_sampling_weight_range(d, D, lam):
    w = sampling_weight(d, D, lam)
    assert 0 < w <= lam * (1 + 1e-12)


def test_sample_negative_single_and_empty(rng):
    cand = sphere(rng, 3, 4)
    for _ in range(10):
        assert sample_negative(cand[0], cand, [False, True, False], 4, 1.0, rng) == 1
    with pytest.raises(MiningError):
        sample_negative(cand[0], cand, [False, False, False], 4, 1.0, rng)


def test_sample_negative_symmetry(rng):
    anchor = np.array([1.0, 0.0, 0.0])
    cand = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    picks = [sample_negative(anchor, cand, [True, True], 3, 1.0, rng) for _ in range(10_000)]
    assert abs(np.mean(picks) - 0.5) < 0.02


def test_sample_negative_two_to_one(rng):
    # D=3: w = min(lam, 1/d).  lam=1: d=1 -> 1.0, d=2 clamps to D_MAX -> ~0.5
    anchor = np.array([1.0, 0.0, 0.0])
    cand = np.array([[0.5, np.sqrt(3) / 2, 0.0], [-1.0, 0.0, 0.0]])
    d = np.linalg.norm(cand - anchor, axis=1)
    w = np.array([sampling_weight(x, 3, 1.0) for x in d])
    assert w[0] == 1.0 and w[1] == pytest.approx(0.5, rel=1e-3)
    picks = np.array([sample_negative(anchor, cand, [True, True], 3, 1.0, rng) for _ in range(10_000)])
    ratio = np.sum(picks == 0) / np.sum(picks == 1)
    assert abs(ratio / (w[0] / w[1]) - 1) < 0.05


def test_sample_negative_chi_square():
    rng = np.random.default_rng(5)
    anchor = np.array([0.0, 0.0, 1.0])
    ang = np.array([0.3, 0.9, 1.5, 2.2, 2.9])
    cand = np.stack([np.sin(ang), np.zeros(5), np.cos(ang)], axis=1)
    w = np.array([sampling_weight(x, 3, 3.0) for x in np.linalg.norm(cand - anchor, axis=1)])
    p = w / w.sum()
    n = 10_000
    counts = np.bincount([sample_negative(anchor, cand, np.ones(5, bool), 3, 3.0, rng) for _ in range(n)], minlength=5)
    chi2 = np.sum((counts - n * p) ** 2 / (n * p))
    assert chi2 < 13.28  # chi-square 0.99 quantile, 4 dof


def test_mine_examples(rng):
    labels = np.array([0, 0, 1, 1, 2, 2])
    emb = sphere(rng, 6, 4)
    for _ in range(20):
        disc = mine_triplets("disc", emb, labels, 1.0, rng)
        assert len(disc) == 6
        t0 = next(t for t in disc if t.a == 0)
        assert t0.p == 1 and t0.n in {2, 3, 4, 5}
        shared = mine_triplets("shared", emb, labels, 1.0, rng)
        s0 = next(t for t in shared if t.a == 0)
        assert labels[s0.p] in {1, 2} and labels[s0.n] in {1, 2} and labels[s0.p] != labels[s0.n]
    assert mine_triplets("intra", emb, labels, 1.0, rng) == []


def test_mine_unknown_kind(rng):
    with pytest.raises(ValueError):
        mine_triplets("dance", sphere(rng, 4, 3), [0, 0, 1, 1], 1.0, rng)


@given(
    st.lists(st.integers(0, 4), min_size=3, max_size=24),
    st.sampled_from(["disc", "shared", "intra"]),
    st.integers(0, 2**31),
    st.floats(0.1, 100),
)
def test_mined_triplets_always_valid(labels, kind, seed, lam):
    rng = np.random.default_rng(seed)
    labels = np.array(labels)
    emb = sphere(rng, len(labels), 5)
    trips = mine_triplets(kind, emb, labels, lam, rng)
    assert all(triplet_is_valid(t, labels) and t.kind == kind for t in trips)
    assert len({t.a for t in trips}) == len(trips)


def test_triplet_validity_rules():
    labels = [0, 0, 0, 1, 2]
    assert triplet_is_valid(Triplet(0, 1, 3, "disc"), labels)
    assert not triplet_is_valid(Triplet(0, 3, 1, "disc"), labels)
    assert triplet_is_valid(Triplet(0, 3, 4, "shared"), labels)
    assert not triplet_is_valid(Triplet(0, 3, 1, "shared"), labels)
    assert triplet_is_valid(Triplet(0, 1, 2, "intra"), labels)
    assert not triplet_is_valid(Triplet(0, 0, 2, "intra"), labels)


def test_sphere_distance_histogram_matches_q():
    rng = np.random.default_rng(0)
    n = 100_000
    a, b = sphere(rng, n, 3), sphere(rng, n, 3)
    d = np.linalg.norm(a - b, axis=1)
    hist, edges = np.histogram(d, bins=20, range=(0, 2), density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    expect = np.array([q_density(c, 3) for c in centers]) / 2
    # density d/2 integrates to 1 on [0, 2]; errors as probability mass per bin
    assert np.max(np.abs(hist - expect) * 0.1) < 0.02
