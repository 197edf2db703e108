"""Path ensembles: RNG correctness, reproducibility, branching, knots."""

import numpy as np
import pytest

from shjb import _kernels_py
from shjb._backend import available_backends
from shjb.paths import (
    TimeGrid,
    branch_at,
    check_normals,
    check_uniforms,
    derive_seed,
    knot_env,
    sample_bundle,
)

# ---------------------------------------------------------------------------
# counter-based generator


def _philox_reference(ctr, key):
    """Scalar philox4x32-10, straight from the round definition."""
    M0, M1 = 0xD2511F53, 0xCD9E8D57
    B0, B1 = 0x9E3779B9, 0xBB67AE85
    x, k = list(ctr), list(key)
    for _ in range(10):
        p0, p1 = M0 * x[0], M1 * x[2]
        x = [
            (p1 >> 32) ^ x[1] ^ k[0],
            p1 & 0xFFFFFFFF,
            (p0 >> 32) ^ x[3] ^ k[1],
            p0 & 0xFFFFFFFF,
        ]
        k = [(k[0] + B0) & 0xFFFFFFFF, (k[1] + B1) & 0xFFFFFFFF]
    return x


def test_philox_zero_vector():
    words = _kernels_py.philox_u64_block(0, 0, 0, 1, 1, 1)
    assert int(words[0, 0, 0]) == 0x6627E8D5E169C58D


@pytest.mark.parametrize(
    "seed, stream, idx0",
    [(0, 0, 0), (1, 0, 0), (0, 7, 3), (0xDEADBEEFCAFEF00D, 0x12345678, 1000)],
)
def test_philox_matches_scalar_reference(seed, stream, idx0):
    words = _kernels_py.philox_u64_block(seed, stream, idx0, 2, 3, 2)
    key = (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF)
    for i in range(2):
        for j in range(3):
            for c in range(2):
                ref = _philox_reference((idx0 + i, j, c, stream), key)
                assert int(words[i, j, c]) == (ref[0] << 32) | ref[1]


@pytest.mark.skipif("cython" not in available_backends(), reason="compiled kernels not built")
def test_backends_agree_on_words():
    cy = available_backends()["cython"]
    a = _kernels_py.philox_u64_block(42, 3, 5, 4, 6, 3)
    b = cy.philox_u64_block(42, 3, 5, 4, 6, 3)
    assert np.array_equal(a, b)


def test_derive_seed_separates_tags():
    seeds = {derive_seed(1, "a"), derive_seed(1, "b"), derive_seed(2, "a"), derive_seed(1, "a", 0)}
    assert len(seeds) == 4
    assert derive_seed(1, "a", 7) == derive_seed(1, "a", 7)


def test_check_draw_statistics():
    z = check_normals(0, "unit", (200_000,))
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 4 * np.sqrt(2.0 / z.size)
    u = check_uniforms(0, "unit", (200_000,))
    assert 0.0 < u.min() and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 4 / np.sqrt(12 * u.size)
    # the two labels draw from disjoint streams
    assert not np.array_equal(check_normals(0, "unit", (8,)), check_normals(0, "other", (8,)))


# ---------------------------------------------------------------------------
# time grid


def test_grid_regular_places_knots_on_grid():
    grid = TimeGrid.regular(2.0, 4, steps_per_interval=8)
    assert grid.n_steps == 32
    assert grid.knot_indices == (8, 16, 24, 32)
    assert np.allclose(grid.knot_times, [0.5, 1.0, 1.5, 2.0])
    assert grid.dt == pytest.approx(2.0 / 32)


def test_grid_for_knots_requires_alignment():
    grid = TimeGrid.for_knots(1.0, [0.5, 1.0], 10)
    assert grid.knot_indices == (5, 10)
    with pytest.raises(ValueError):
        TimeGrid.for_knots(1.0, [0.33, 1.0], 10)


def test_grid_lookup_edges():
    grid = TimeGrid.regular(1.0, 2, steps_per_interval=4)
    assert grid.step_of(0.0) == 0
    assert grid.step_of(1.0) == 8
    with pytest.raises(ValueError):
        grid.step_of(0.3)  # off grid
    # interval i covers [t_i, t_{i+1}); the horizon folds into the last one
    assert grid.interval_of(0.0) == 0
    assert grid.interval_of(0.25) == 0
    assert grid.interval_of(0.5) == 1
    assert grid.interval_of(1.0) == 1


# ---------------------------------------------------------------------------
# bundles


def test_bundle_reproducible_and_thread_invariant(grid):
    a = sample_bundle(grid, 1, 1, 500, seed=7)
    b = sample_bundle(grid, 1, 1, 500, seed=7)
    c = sample_bundle(grid, 1, 1, 500, seed=7, threads=4)
    assert np.array_equal(a.increments, b.increments)
    assert np.array_equal(a.increments, c.increments)
    assert not np.array_equal(a.increments, sample_bundle(grid, 1, 1, 500, seed=8).increments)


def test_bundle_statistics(grid):
    bundle = sample_bundle(grid, 1, 1, 20_000, seed=3)
    wt = bundle.cumulative()[:, -1, :]
    T = grid.horizon
    assert np.all(np.abs(wt.mean(axis=0)) < 4 * np.sqrt(T / bundle.count))
    assert np.all(np.abs(wt.var(axis=0) - T) < 4 * T * np.sqrt(2.0 / bundle.count))


def test_cumulative_starts_at_zero(grid):
    bundle = sample_bundle(grid, 1, 1, 10, seed=0)
    cum = bundle.cumulative()
    assert np.all(cum[:, 0, :] == 0.0)
    assert cum.shape == (10, grid.n_steps + 1, 2)


def test_wiener_at_interpolates_nothing(grid):
    bundle = sample_bundle(grid, 1, 1, 10, seed=0)
    t = grid.times[5]
    assert np.array_equal(bundle.wiener_at(t), bundle.cumulative()[:, 5, :])


# ---------------------------------------------------------------------------
# branching


def test_branch_prefix_is_exact(grid):
    parent = sample_bundle(grid, 1, 1, 20, seed=5)
    t = 0.5
    k = grid.step_of(t)
    child = branch_at(parent, 3, t, 50, seed=99)
    assert child.count == 50
    assert np.array_equal(child.increments[:, :k, :], np.broadcast_to(parent.increments[3, :k, :], (50, k, 2)))
    # fresh tails differ across branches
    assert not np.array_equal(child.increments[0, k:, :], child.increments[1, k:, :])


def test_branch_at_horizon_copies_parent(grid):
    parent = sample_bundle(grid, 1, 1, 4, seed=5)
    child = branch_at(parent, 2, grid.horizon, 3, seed=1)
    assert np.array_equal(child.increments, np.broadcast_to(parent.increments[2], (3,) + parent.increments.shape[1:]))


def test_branch_martingale_property(grid):
    parent = sample_bundle(grid, 1, 1, 4, seed=5)
    t = 0.5
    child = branch_at(parent, 0, t, 40_000, seed=31)
    w_t = parent.cumulative()[0, grid.step_of(t), 0]
    w_T = child.cumulative()[:, -1, 0]
    horizon_var = grid.horizon - t
    assert abs(w_T.mean() - w_t) < 4 * np.sqrt(horizon_var / child.count)


def test_branch_tower_property(grid):
    # E[ E[W_T^2 | F_s] ] should equal T, estimated by nested branching
    parent = sample_bundle(grid, 1, 1, 1, seed=17)
    s = 0.5
    mids = branch_at(parent, 0, 0.0, 200, seed=23)
    inner_means = []
    for j in range(mids.count):
        leaves = branch_at(mids, j, s, 200, seed=101 + j)
        inner_means.append(float(np.mean(leaves.cumulative()[:, -1, 0] ** 2)))
    estimate = float(np.mean(inner_means))
    # W_T^2 has variance 2T^2; the nested estimate keeps roughly the outer budget
    assert abs(estimate - 1.0) < 5 * np.sqrt(2.0 / 200)


def test_branch_lineage_records_parent(grid):
    parent = sample_bundle(grid, 1, 1, 4, seed=5)
    child = branch_at(parent, 1, 0.5, 8, seed=2)
    assert child.lineage


# ---------------------------------------------------------------------------
# knot environments


def test_knot_env_at_zero_is_all_zero(grid):
    bundle = sample_bundle(grid, 1, 1, 6, seed=9)
    env = knot_env(bundle, 0.0)
    assert set(env) == {"w1", "k1", "k2"}
    for key in env:
        assert np.all(env[key] == 0.0)


def test_knot_env_freezes_passed_knots(grid):
    bundle = sample_bundle(grid, 1, 1, 6, seed=9)
    cum = bundle.cumulative()
    t1 = grid.knot_times[0]
    env = knot_env(bundle, grid.horizon)
    assert np.array_equal(env["k1"], cum[:, grid.step_of(t1), 0])
    assert np.array_equal(env["k2"], cum[:, -1, 0])
    assert np.array_equal(env["w1"], cum[:, -1, 0])


def test_knot_env_before_first_knot_stops_at_now(grid):
    bundle = sample_bundle(grid, 1, 1, 6, seed=9)
    t = grid.times[3]  # strictly inside the first interval
    env = knot_env(bundle, t)
    live = bundle.cumulative()[:, 3, 0]
    assert np.array_equal(env["k1"], live)
    assert np.array_equal(env["k2"], live)
    assert np.array_equal(env["w1"], live)


def test_knot_env_multidimensional_observed_block():
    grid = TimeGrid.regular(1.0, 2, steps_per_interval=4)
    bundle = sample_bundle(grid, 2, 1, 3, seed=4)
    env = knot_env(bundle, grid.horizon)
    assert set(env) == {"w1", "w2", "k1", "k2", "k3", "k4"}
    cum = bundle.cumulative()
    k = grid.step_of(grid.knot_times[0])
    assert np.array_equal(env["k1"], cum[:, k, 0])
    assert np.array_equal(env["k2"], cum[:, k, 1])
    assert np.array_equal(env["k3"], cum[:, -1, 0])
    assert np.array_equal(env["k4"], cum[:, -1, 1])
