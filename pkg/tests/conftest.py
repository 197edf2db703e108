"""Shared fixtures: small problem definitions reused across the suite."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shjb.model import CoefficientSet, ControlLattice, ProblemDims
from shjb.paths import TimeGrid, sample_bundle

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def make_problem(
    name="test",
    d=1,
    n_controls=1,
    m0=1,
    m1=1,
    n_knots=2,
    horizon=1.0,
    beta=("0",),
    sigma_tilde=None,
    sigma_bar=None,
    running_cost="0",
    terminal_cost="0",
    bound=2.0,
    lambda_min=0.5,
    x_box=((-2.0, 2.0),),
) -> CoefficientSet:
    dims = ProblemDims(d, n_controls, m0, m1, n_knots)
    if sigma_tilde is None:
        sigma_tilde = [["0"] * m0 for _ in range(d)] if m0 else [[]] * d
    if sigma_bar is None:
        sigma_bar = [["1" if i == j else "0" for j in range(m1)] for i in range(d)] if m1 else [[]] * d
    knots = [horizon * (i + 1) / n_knots for i in range(n_knots)]
    return CoefficientSet.from_strings(
        name=name,
        dims=dims,
        horizon=horizon,
        knot_times=knots,
        beta=beta,
        sigma_tilde=sigma_tilde,
        sigma_bar=sigma_bar,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        bound=bound,
        lambda_min=lambda_min,
        x_box=x_box,
    )


@pytest.fixture
def constant_cost() -> CoefficientSet:
    """f = 1, G = 0: the value is T - t regardless of the control."""
    return make_problem(name="constant-cost", running_cost="1")


@pytest.fixture
def linear_terminal() -> CoefficientSet:
    """G = x + 2, f = 0, dX = v dt + dW: value is x + 2 - (T - t)."""
    return make_problem(
        name="linear-terminal",
        m0=0,
        beta=("v1",),
        terminal_cost="x1 + 2",
        bound=5.0,
    )


@pytest.fixture
def lq_markov() -> CoefficientSet:
    """dX = v dt + dW, f = v^2 + x^2, G = 0 on U = [-2, 2]."""
    return make_problem(
        name="lq-markov",
        m0=0,
        beta=("v1",),
        running_cost="v1^2 + x1^2",
        bound=14.0,
        x_box=((-3.0, 3.0),),
    )


@pytest.fixture
def unit_lattice() -> ControlLattice:
    """{-1, 0, 1} in one control coordinate."""
    return ControlLattice(((-1.0, 1.0),), 1)


@pytest.fixture
def lq_lattice() -> ControlLattice:
    return ControlLattice(((-2.0, 2.0),), 4)


@pytest.fixture
def grid() -> TimeGrid:
    return TimeGrid.regular(1.0, 2, steps_per_interval=16)


@pytest.fixture
def bundle(grid) -> "np.ndarray":
    return sample_bundle(grid, 1, 1, 4000, seed=11)


@pytest.fixture
def bundle_m1(grid):
    """Noise for problems with no observed block (m0 = 0)."""
    return sample_bundle(grid, 0, 1, 4000, seed=11)
