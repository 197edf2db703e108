"""Controlled Euler simulation and sampled checks of the state flow.

Policies are lattice-valued: at every step they return indices into a
control lattice.  Simulation is vectorised over paths and deterministic
given the bundle, so restarting from an intermediate state on the same
bundle reproduces the original states bit for bit (which is exactly what
:func:`check_flow` asserts).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from .expr import ExprDomainError
from .model import Clause, CoefficientSet, ControlLattice, ValidationReport
from .paths import PathBundle, knot_env

__all__ = [
    "ControlPolicy",
    "ConstantPolicy",
    "OpenLoopPolicy",
    "CallablePolicy",
    "StatePaths",
    "simulate",
    "running_cost_increments",
    "terminal_values",
    "check_moments",
    "check_flow",
    "exit_time_check",
]


class ControlPolicy(Protocol):
    """Anything that picks lattice controls per step and path."""

    lattice: ControlLattice

    def indices_at(self, step: int, t: float, x: np.ndarray, noise_env: Mapping[str, np.ndarray]) -> np.ndarray:
        """Lattice indices, shape (npaths,), for states ``x`` (npaths, d)."""
        ...


@dataclass
class ConstantPolicy:
    lattice: ControlLattice
    index: int

    def indices_at(self, step, t, x, noise_env):
        return np.full(x.shape[0], self.index, dtype=np.int64)


@dataclass
class OpenLoopPolicy:
    """One lattice index per global step, shared by all paths."""

    lattice: ControlLattice
    index_seq: np.ndarray

    def indices_at(self, step, t, x, noise_env):
        return np.full(x.shape[0], int(self.index_seq[step]), dtype=np.int64)


@dataclass
class CallablePolicy:
    lattice: ControlLattice
    fn: Callable[[int, float, np.ndarray, Mapping[str, np.ndarray]], np.ndarray]

    def indices_at(self, step, t, x, noise_env):
        return np.asarray(self.fn(step, t, x, noise_env), dtype=np.int64)


@dataclass
class StatePaths:
    """Simulated states plus the controls and running costs that made them.

    ``values`` covers grid steps ``start_step..n_steps`` (inclusive), shape
    ``(npaths, n_steps - start_step + 1, d)``.  ``cost_increments`` holds
    ``f(t_k, X_k, v_k) dt`` per executed step.  Paths that left the finite
    range are flagged in ``aborted`` and hold NaN from the first bad step.
    """

    coeffs: CoefficientSet
    lattice: ControlLattice
    bundle: PathBundle
    start_step: int
    values: np.ndarray
    control_indices: np.ndarray
    cost_increments: np.ndarray
    aborted: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return self.values.shape[0]

    def states_at(self, t: float) -> np.ndarray:
        k = self.bundle.grid.step_of(t)
        if k < self.start_step:
            raise ValueError("time precedes the simulation start")
        return self.values[:, k - self.start_step, :]

    @property
    def final_states(self) -> np.ndarray:
        return self.values[:, -1, :]

    def total_cost(self) -> np.ndarray:
        """Accumulated running cost plus terminal cost, per path."""
        return self.cost_increments.sum(axis=1) + terminal_values(self.coeffs, self)


def _state_env(coeffs: CoefficientSet, t: float, x: np.ndarray, noise_env) -> dict:
    env = {"t": t, **noise_env}
    for i in range(coeffs.dims.d):
        env[f"x{i + 1}"] = x[:, i]
    return env


def _first_bad_path(coeffs: CoefficientSet, env: dict, npaths: int) -> int:
    """Replay coefficient evaluation path by path to locate a domain error."""
    for p in range(npaths):
        sub = {k: (v[p] if isinstance(v, np.ndarray) else v) for k, v in env.items()}
        try:
            for _, e in coeffs.coefficient_items():
                e(sub)
        except ExprDomainError:
            return p
    return -1


def simulate(
    coeffs: CoefficientSet,
    policy: ControlPolicy,
    t0: float,
    x0,
    bundle: PathBundle,
) -> StatePaths:
    """Euler scheme for the controlled state on a path bundle.

    ``x0`` is one point (d,) shared by all paths or per-path states
    (npaths, d).  Controls are read from ``policy`` at the left endpoint of
    every step; so is the running cost.  A path that turns non-finite is
    frozen at NaN and flagged, the rest continue.
    """
    grid = bundle.grid
    if bundle.m0 != coeffs.dims.m0 or bundle.m1 != coeffs.dims.m1:
        raise ValueError("bundle noise split disagrees with the problem")
    k0 = grid.step_of(t0)
    npaths = bundle.count
    d = coeffs.dims.d
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (npaths, d))
    if x0.shape != (npaths, d):
        raise ValueError("x0 must be (d,) or (npaths, d)")

    nrec = grid.n_steps - k0
    values = np.full((npaths, nrec + 1, d), np.nan)
    trace = np.zeros((npaths, nrec), dtype=np.int32)
    cost = np.zeros((npaths, nrec))
    aborted = np.zeros(npaths, dtype=bool)

    x = np.array(x0, dtype=float)
    values[:, 0, :] = x
    times = grid.times
    alive = ~aborted
    for k in range(k0, grid.n_steps):
        t = float(times[k])
        noise_env = knot_env(bundle, t)
        idx = policy.indices_at(k, t, x, noise_env)
        env = _state_env(coeffs, t, x, noise_env)
        env = policy.lattice.control_env(env, idx)
        try:
            beta = coeffs.eval_beta(env, (npaths,))
            sigma = coeffs.eval_sigma(env, (npaths,))
            f = np.broadcast_to(np.asarray(coeffs.running_cost(env), dtype=float), (npaths,))
        except ExprDomainError as err:
            bad_path = _first_bad_path(coeffs, env, npaths)
            raise ExprDomainError(f"path {bad_path}, step {k} (t={t:.6g}): {err}", err.pos) from err
        dw = bundle.increments[:, k, :]
        x = x + beta.T * grid.dt + np.einsum("icp,pc->pi", sigma, dw)

        bad = alive & ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            aborted |= bad
            alive = ~aborted
            x[bad] = np.nan
        rec = k - k0
        trace[alive, rec] = idx[alive]
        cost[alive, rec] = f[alive] * grid.dt
        values[alive, rec + 1, :] = x[alive]
    return StatePaths(coeffs, policy.lattice, bundle, k0, values, trace, cost, aborted)


def running_cost_increments(paths: StatePaths) -> np.ndarray:
    return paths.cost_increments


def terminal_values(coeffs: CoefficientSet, paths: StatePaths) -> np.ndarray:
    """Terminal cost at the simulated endpoints, per path."""
    grid = paths.bundle.grid
    noise_env = knot_env(paths.bundle, grid.horizon)
    env = _state_env(coeffs, grid.horizon, paths.final_states, noise_env)
    return np.broadcast_to(np.asarray(coeffs.terminal_cost(env), dtype=float), (paths.count,)).copy()


# ---------------------------------------------------------------------------
# sampled checks


def check_moments(
    coeffs: CoefficientSet,
    policy: ControlPolicy,
    t0: float,
    x0,
    bundle: PathBundle,
    p: int = 4,
) -> ValidationReport:
    """Fit the moment constant of the state flow and test its stability.

    Measures the two classical moment ratios (running sup of ``|X|^p``
    against ``1+|x0|^p``, and increment moments against ``(t-s)^{p/2}``),
    fits ``K_hat`` as their maximum, and passes iff the fit moves by less
    than 20% when the path count is halved.  ``K_hat`` lands in the report
    notes and feeds the exit-time bound.
    """
    paths = simulate(coeffs, policy, t0, x0, bundle)
    if paths.aborted.any():
        return ValidationReport(
            f"{coeffs.name}: moment bounds",
            [Clause("all paths finite", False, float(paths.aborted.sum()), 0.0)],
        )
    x0v = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0v.ndim > 1:
        x0v = x0v[0]
    denom = 1.0 + float(np.linalg.norm(x0v)) ** p

    norms = np.linalg.norm(paths.values, axis=2)
    times = bundle.grid.times[paths.start_step :]

    def ratios(sel) -> float:
        r = float(np.mean(np.max(norms[sel], axis=1) ** p)) / denom
        nrec = norms.shape[1]
        anchors = np.unique(np.linspace(0, nrec - 1, 9).astype(int))
        for i in anchors:
            lags = np.unique(np.geomspace(1, max(1, nrec - 1 - i), 6).astype(int)) if i < nrec - 1 else []
            for lag in lags:
                j = i + lag
                incr = np.linalg.norm(paths.values[sel, j, :] - paths.values[sel, i, :], axis=1)
                dt_pow = (times[j] - times[i]) ** (p / 2)
                r = max(r, float(np.mean(incr**p)) / (denom * dt_pow))
        return r

    k_full = ratios(slice(None))
    k_half = ratios(slice(0, max(2, paths.count // 2)))
    drift = abs(k_full - k_half) / max(k_full, 1e-300)
    clauses = [
        Clause("all paths finite", True, 0.0, 0.0),
        Clause("moment fit stable under halving paths", drift <= 0.20, drift, 0.20),
    ]
    report = ValidationReport(f"{coeffs.name}: moment bounds (p={p})", clauses)
    report.notes["K_hat"] = round(1.05 * k_full, 6)
    report.notes["p"] = p
    return report


def check_flow(
    coeffs: CoefficientSet,
    policy: ControlPolicy,
    t0: float,
    x0,
    t1: float,
    bundle: PathBundle,
) -> ValidationReport:
    """Restart consistency: simulate through ``t1`` vs stop-and-restart.

    On a common bundle the Euler iteration is a deterministic map of the
    increments, so the two runs must agree exactly; the clause checks for
    bitwise equality of all states from ``t1`` on.
    """
    full = simulate(coeffs, policy, t0, x0, bundle)
    head = simulate(coeffs, policy, t0, x0, bundle)
    mid = head.states_at(t1)
    tail = simulate(coeffs, policy, t1, mid, bundle)
    k1 = bundle.grid.step_of(t1)
    expect = full.values[:, k1 - full.start_step :, :]
    exact = np.array_equal(expect, tail.values, equal_nan=True)
    with np.errstate(invalid="ignore"):
        gap = float(np.nanmax(np.abs(expect - tail.values))) if expect.size else 0.0
    return ValidationReport(
        f"{coeffs.name}: flow restart consistency",
        [Clause("restarted states identical", exact, gap, 0.0)],
    )


def exit_time_check(
    coeffs: CoefficientSet,
    policy: ControlPolicy,
    t0: float,
    x0,
    radius: float,
    h: float,
    bundle: PathBundle,
) -> ValidationReport:
    """Short-horizon escape probability against the quartic moment bound.

    Estimates ``P(sup_{[t0, t0+h]} |X - x0| > radius/2)`` by simulation and
    compares with ``16 K_hat (1+|x0|^4) h^2 / radius^4`` where ``K_hat`` is
    fitted by :func:`check_moments` with p=4 on the same ensemble; the pass
    margin allows three binomial standard errors.
    """
    grid = bundle.grid
    k0, kh = grid.step_of(t0), grid.step_of(t0 + h)
    if kh <= k0:
        raise ValueError("h must span at least one grid step")
    paths = simulate(coeffs, policy, t0, x0, bundle)
    window = paths.values[:, : kh - k0 + 1, :]
    x0v = np.atleast_1d(np.asarray(x0, dtype=float))
    dev = np.linalg.norm(window - x0v[None, None, :], axis=2)
    hits = np.max(dev, axis=1) > radius / 2.0
    p_hat = float(np.mean(hits))
    stderr = float(np.sqrt(max(p_hat * (1 - p_hat), 1.0 / paths.count) / paths.count))

    moments = check_moments(coeffs, policy, t0, x0, bundle, p=4)
    k_hat = float(moments.notes.get("K_hat", np.inf))
    bound = 16.0 * k_hat * (1.0 + float(np.linalg.norm(x0v)) ** 4) * h * h / radius**4
    report = ValidationReport(
        f"{coeffs.name}: exit-time bound",
        [
            *moments.clauses,
            Clause("escape probability within bound", p_hat <= bound + 3 * stderr, p_hat, bound),
        ],
    )
    report.notes.update({"K_hat": k_hat, "p_hat": p_hat, "stderr": round(stderr, 6)})
    return report
