"""Monte Carlo value estimation and a quadrature backward-induction oracle.

Two independent routes to the value function live here.  The Monte Carlo
route (:func:`cost_functional`, :func:`brute_search`) prices explicit
control policies on a shared path bundle, so comparisons between controls
use common random numbers.  The quadrature route
(:func:`backward_induction_oracle`) runs exhaustive dynamic programming on
a tensor mesh over state, live observed noise, and frozen knot values,
with Gauss-Hermite transitions.  The remaining probes (dynamic-programming
residual, control pasting, value-plus-cost monotonicity, Lipschitz and
boundedness checks) consume both routes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .model import Clause, CoefficientSet, ControlLattice, ValidationReport, sample_wenvs
from .paths import PathBundle, branch_at, check_uniforms, derive_seed, knot_env
from .sde import OpenLoopPolicy, simulate

__all__ = [
    "MCEstimate",
    "OracleMeshes",
    "OracleValueField",
    "backward_induction_oracle",
    "bound_check",
    "brute_search",
    "brute_value",
    "cost_functional",
    "dpp_residual",
    "feedback_policy",
    "gauss_hermite_rule",
    "lipschitz_probe",
    "paste_controls",
    "supermartingale_check",
]

_SNAP = 1e-9


def gauss_hermite_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the standard normal density.

    ``sum(w * g(z)) == E[g(Z)]`` exactly for polynomials up to degree
    ``2n - 1``.
    """
    u, w = np.polynomial.hermite.hermgauss(n)
    return u * math.sqrt(2.0), w / math.sqrt(math.pi)


def _tensor_rule(n: int, dims: int) -> tuple[np.ndarray, np.ndarray]:
    """Product Gauss-Hermite rule over ``dims`` independent coordinates."""
    if dims == 0:
        return np.zeros((1, 0)), np.ones(1)
    z1, w1 = gauss_hermite_rule(n)
    zs = np.stack([g.ravel() for g in np.meshgrid(*([z1] * dims), indexing="ij")], axis=-1)
    ws = np.stack([g.ravel() for g in np.meshgrid(*([w1] * dims), indexing="ij")], axis=-1)
    return zs, ws.prod(axis=1)


# ---------------------------------------------------------------------------
# Monte Carlo estimates


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error."""

    mean: float
    stderr: float
    count: int


def _estimate(samples: np.ndarray) -> MCEstimate:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    stderr = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MCEstimate(float(samples.mean()), stderr, n)


def cost_functional(
    coeffs: CoefficientSet,
    policy,
    t: float,
    x,
    bundle: PathBundle,
) -> MCEstimate:
    """Expected accumulated cost of one policy, left-endpoint quadrature."""
    paths = simulate(coeffs, policy, t, x, bundle)
    if paths.aborted.any():
        raise ValueError(f"{int(paths.aborted.sum())} paths left the finite range")
    return _estimate(paths.total_cost())


# ---------------------------------------------------------------------------
# interpolation kernels for the mesh fields


def _lagrange4(u: np.ndarray) -> list[np.ndarray]:
    """Cubic Lagrange weights on the window offsets 0..3."""
    a, b, c = u - 1.0, u - 2.0, u - 3.0
    return [
        -a * b * c / 6.0,
        u * b * c / 2.0,
        -u * a * c / 2.0,
        u * a * b / 6.0,
    ]


def _window_1d(p, n: int, order: int, clamp: bool) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index/weight pairs for 1-D interpolation at positions ``p`` (in node units).

    ``order`` 0 gives exact integer pass-through, 1 multilinear (which
    extrapolates linearly outside the nodes unless ``clamp``), 3 cubic
    Lagrange inside the mesh with linear extrapolation outside.  Positions
    within 1e-9 of a node snap to it exactly.
    """
    p = np.asarray(p, dtype=float)
    if n == 1:
        z = np.zeros(p.shape, dtype=np.intp)
        return [(z, np.ones(p.shape))]
    if clamp:
        p = np.clip(p, 0.0, n - 1.0)
    r = np.round(p)
    p = np.where(np.abs(p - r) < _SNAP, r, p)
    if order == 0:
        return [(p.astype(np.intp), np.ones(p.shape))]
    base_l = np.clip(np.floor(p), 0, n - 2).astype(np.intp)
    u_l = p - base_l
    if order < 3 or n < 4:
        return [(base_l, 1.0 - u_l), (base_l + 1, u_l)]
    inside = (p >= 0.0) & (p <= n - 1.0)
    base_c = np.clip(np.floor(p) - 1, 0, n - 4).astype(np.intp)
    weights = _lagrange4(p - base_c)
    out = []
    for k in range(4):
        idx = np.where(inside, base_c + k, base_l + min(k, 1))
        lin = (1.0 - u_l) if k == 0 else (u_l if k == 1 else np.zeros(p.shape))
        out.append((idx.astype(np.intp), np.where(inside, weights[k], lin)))
    return out


def _shift_axis(values: np.ndarray, axis: int, delta: float, order: int) -> np.ndarray:
    """Resample ``values`` along one axis at node positions shifted by ``delta``."""
    n = values.shape[axis]
    windows = _window_1d(np.arange(n) + delta, n, order, clamp=False)
    shape = [1] * values.ndim
    shape[axis] = n
    out = None
    for idx, wgt in windows:
        term = np.take(values, idx, axis=axis) * wgt.reshape(shape)
        out = term if out is None else out + term
    return out


def _gather_interp(values: np.ndarray, windows: list) -> np.ndarray:
    """Joint interpolation given per-axis window lists (from ``_window_1d``)."""
    out = None
    for combo in itertools.product(*windows):
        idx = tuple(c[0] for c in combo)
        wgt = combo[0][1]
        for c in combo[1:]:
            wgt = wgt * c[1]
        term = values[idx] * wgt
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# the dynamic-programming oracle


@dataclass(frozen=True)
class OracleMeshes:
    """Mesh sizes for the backward-induction oracle.

    The live observed coordinate and every frozen knot coordinate share one
    axis of ``w_nodes`` points spanning ``w_halfwidth`` standard deviations
    of the terminal noise, so freezing a knot is an exact node operation.
    """

    x_nodes: int = 33
    w_nodes: int = 17
    w_halfwidth: float = 4.0
    steps_per_interval: int = 32
    quad_nodes: int = 9
    node_budget: int = 50_000_000


@dataclass
class OracleValueField:
    """Value and argmin tables from exhaustive backward induction.

    Interval ``i`` (between knots ``t_i`` and ``t_{i+1}``) stores slices
    over axes ``(x_1..x_d, live w, frozen k_1..k_i)``; the horizon slice
    equals the mesh-evaluated terminal cost exactly.  ``eval`` interpolates
    multilinearly (clamped at the mesh edges) and reproduces stored nodes
    exactly; ``argmin_index`` returns the minimising lattice point at the
    nearest node.
    """

    coeffs: CoefficientSet
    lattice: ControlLattice
    meshes: OracleMeshes
    x_axes: list
    w_axis: np.ndarray | None
    starts: np.ndarray
    taus: list
    values: list
    argmins: list

    @property
    def step_bias(self) -> float:
        """One-step discretisation allowance: max time step plus mesh h^2."""
        dtau = max(ts[1] - ts[0] for ts in self.taus)
        h2 = max((ax[1] - ax[0]) ** 2 for ax in self.x_axes)
        return dtau + h2

    def _locate(self, t: float) -> tuple[int, float]:
        if t < -1e-12 or t > self.coeffs.horizon + 1e-12:
            raise ValueError(f"time {t} outside [0, {self.coeffs.horizon}]")
        i = int(np.searchsorted(self.starts, t, side="right")) - 1
        i = min(max(i, 0), len(self.taus) - 1)
        ts = self.taus[i]
        return i, (t - ts[0]) / (ts[1] - ts[0])

    def slice_values(self, t: float) -> np.ndarray:
        """Stored value slice at an exact mesh time."""
        i, pos = self._locate(t)
        j = round(pos)
        if abs(pos - j) > 1e-6:
            raise ValueError(f"time {t} is not a stored slice time")
        return self.values[i][int(j)].copy()

    def _point_queries(self, i: int, x, w_env) -> tuple[list, list, bool]:
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 1
        pts = x.reshape(1, -1) if scalar else x
        queries, sizes = [], []
        for a, axis in enumerate(self.x_axes):
            queries.append((pts[:, a] - axis[0]) / (axis[1] - axis[0]))
            sizes.append(axis.size)
        if self.w_axis is not None:
            w0, hw = self.w_axis[0], self.w_axis[1] - self.w_axis[0]
            names = ["w1"] + [f"k{j + 1}" for j in range(i)]
            for name in names:
                val = np.asarray(w_env[name], dtype=float)
                queries.append((np.broadcast_to(val, pts.shape[:1]) - w0) / hw)
                sizes.append(self.w_axis.size)
        return queries, sizes, scalar

    def eval(self, t: float, x, w_env: dict | None = None) -> float | np.ndarray:
        """Multilinear interpolation of the value at ``(t, x, noise env)``."""
        i, pos = self._locate(t)
        nt = len(self.taus[i]) - 1
        pos = min(max(pos, 0.0), float(nt))
        j = int(min(math.floor(pos), nt - 1))
        u = pos - j
        if abs(u - round(u)) < _SNAP:
            u = round(u)
        queries, sizes, scalar = self._point_queries(i, x, w_env or {})
        windows = [_window_1d(q, n, 1, clamp=True) for q, n in zip(queries, sizes)]
        out = _gather_interp(self.values[i][j], windows)
        if u > 0.0:
            out = (1.0 - u) * out + u * _gather_interp(self.values[i][j + 1], windows)
        return float(out[0]) if scalar else out

    def argmin_index(self, t: float, x, w_env: dict | None = None):
        """Lattice index minimising the one-step value at the nearest node."""
        i, pos = self._locate(t)
        nt = len(self.taus[i]) - 1
        j = int(min(max(round(pos), 0), nt - 1))
        queries, sizes, scalar = self._point_queries(i, x, w_env or {})
        idx = tuple(
            np.clip(np.round(q), 0, n - 1).astype(np.intp) for q, n in zip(queries, sizes)
        )
        out = self.argmins[i][j][idx]
        return int(out[0]) if scalar else out.astype(np.int64)


@dataclass
class OracleFeedbackPolicy:
    """Plays the oracle's stored argmin at the nearest mesh node."""

    field: OracleValueField

    @property
    def lattice(self) -> ControlLattice:
        return self.field.lattice

    def indices_at(self, step, t, x, noise_env):
        out = self.field.argmin_index(t, x, noise_env)
        return np.broadcast_to(np.asarray(out, dtype=np.int64), (x.shape[0],)).copy()


def feedback_policy(field: OracleValueField) -> OracleFeedbackPolicy:
    return OracleFeedbackPolicy(field)


def _mesh_env(field_axes: dict, t: float, n_frozen: int, n_knots: int) -> dict:
    """Open-grid expression bindings for one time slice.

    Frozen knots bind to their own axes; knots still in the future clamp to
    the live coordinate, matching the path-side convention.
    """
    env = {"t": t}
    x_axes = field_axes["x"]
    d = len(x_axes)
    total = d + field_axes["n_noise_axes"]
    for a, axis in enumerate(x_axes):
        shape = [1] * total
        shape[a] = axis.size
        env[f"x{a + 1}"] = axis.reshape(shape)
    w_axis = field_axes["w"]
    if w_axis is not None:
        shape = [1] * total
        shape[d] = w_axis.size
        live = w_axis.reshape(shape)
        env["w1"] = live
        for j in range(n_knots):
            if j < n_frozen:
                shape = [1] * total
                shape[d + 1 + j] = w_axis.size
                env[f"k{j + 1}"] = w_axis.reshape(shape)
            else:
                env[f"k{j + 1}"] = live
    return env


def _mesh_constant(exprs, extra_forbidden=()) -> bool:
    """True when no expression reads mesh coordinates (x, w, k)."""
    banned = ("x", "w", "k") + tuple(extra_forbidden)
    return all(not any(v.startswith(banned) for v in e.free) for e in exprs)


def backward_induction_oracle(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    meshes: OracleMeshes,
) -> OracleValueField:
    """Exhaustive dynamic programming on a state/noise tensor mesh.

    One Euler step per mesh time, expectations by Gauss-Hermite quadrature,
    minimum over every lattice point with first-point tie-breaking.  The
    live observed coordinate is carried as a mesh axis; at each knot time
    (marching backward) it is frozen into a new knot axis by an exact
    diagonal restriction, so knot-dependent coefficients are respected
    without any sampling.
    """
    dims = coeffs.dims
    if dims.d > 2:
        raise ValueError("oracle supports at most two state coordinates")
    if dims.m0 > 1:
        raise ValueError("oracle supports at most one observed noise coordinate")
    if dims.m1 > 2:
        raise ValueError("oracle supports at most two unobserved noise coordinates")
    if dims.n_knots > 3:
        raise ValueError("oracle supports at most three knots")

    d, m0, m1, n_knots = dims.d, dims.m0, dims.m1, dims.n_knots
    x_axes = [np.linspace(lo, hi, meshes.x_nodes) for lo, hi in coeffs.x_box]
    w_axis = None
    if m0:
        half = meshes.w_halfwidth * math.sqrt(coeffs.horizon)
        n_w = meshes.w_nodes + (meshes.w_nodes % 2 == 0)  # odd, so 0 is a node
        w_axis = np.linspace(-half, half, n_w)
    starts = np.array([0.0, *coeffs.knot_times[:-1]])
    ends = np.array([*coeffs.knot_times])
    nt = meshes.steps_per_interval

    shape_of = lambda i: tuple(ax.size for ax in x_axes) + ((w_axis.size,) * (1 + i) if m0 else ())
    worst = max(
        int(np.prod(shape_of(i), dtype=np.int64)) for i in range(n_knots)
    ) * lattice.n_points * meshes.quad_nodes ** (m0 + m1)
    if worst > meshes.node_budget:
        raise ValueError(f"oracle mesh budget exceeded: {worst} > {meshes.node_budget}")

    z_out, w_out = _tensor_rule(meshes.quad_nodes, m1)  # unobserved block
    z_live, w_live = gauss_hermite_rule(meshes.quad_nodes) if m0 else (None, None)
    z_full, w_full = _tensor_rule(meshes.quad_nodes, m0 + m1)

    hx = [float(ax[1] - ax[0]) for ax in x_axes]
    hw = float(w_axis[1] - w_axis[0]) if m0 else None

    beta_const = _mesh_constant(coeffs.beta)
    st_exprs = [e for row in coeffs.sigma_tilde for e in row]
    sb_exprs = [e for row in coeffs.sigma_bar for e in row]
    st_const = _mesh_constant(st_exprs)
    sb_const = _mesh_constant(sb_exprs)
    sb_ctrl_free = sb_const and _mesh_constant(sb_exprs, extra_forbidden=("v",))
    fast = beta_const and st_const and sb_const

    field_axes = {"x": x_axes, "w": w_axis, "n_noise_axes": 0}

    def frozen_windows(i: int, lead: int, shape: tuple) -> list:
        """Identity windows for the trailing knot axes of interval ``i``."""
        out = []
        for j in range(i):
            idx = np.arange(shape[lead + j], dtype=np.intp)
            sh = [1] * (len(shape) - lead)
            sh[j] = idx.size
            out.append([(idx.reshape(sh), 1.0)])
        return out

    def march_interval(i: int, terminal: np.ndarray):
        """Backward slices and argmins for interval ``i`` (knot ``i`` frozen last)."""
        field_axes["n_noise_axes"] = (1 + i) if m0 else 0
        shape = shape_of(i)
        lead = d + m0  # interpolated axes; the rest stay on nodes
        ts = np.linspace(starts[i], ends[i], nt + 1)
        dtau = ts[1] - ts[0]
        vals = np.empty((nt + 1,) + shape)
        amin = np.zeros((nt + 1,) + shape, dtype=np.int16)
        vals[nt] = terminal
        sqdt = math.sqrt(dtau)

        for j in range(nt - 1, -1, -1):
            v_next = vals[j + 1]
            t = float(ts[j])
            env0 = _mesh_env(field_axes, t, i, n_knots)
            inner = None
            if fast and sb_ctrl_free and m1:
                sb = np.array([[float(e(env0)) for e in row] for row in coeffs.sigma_bar])
                inner = np.zeros_like(v_next)
                for z, wq in zip(z_out, w_out):
                    dx = sb @ (z * sqdt)
                    shifted = v_next
                    for a in range(d):
                        if dx[a] != 0.0:
                            shifted = _shift_axis(shifted, a, dx[a] / hx[a], 3)
                    inner += wq * shifted
            elif fast and m1 == 0:
                inner = v_next

            best = None
            best_idx = None
            for ci in range(lattice.n_points):
                env = dict(env0)
                for c in range(lattice.n_controls):
                    env[f"v{c + 1}"] = float(lattice.points[ci, c])
                fval = np.broadcast_to(np.asarray(coeffs.running_cost(env), dtype=float), shape)
                if fast:
                    base = inner
                    if base is None:  # sigma_bar reads the control
                        sb = np.array([[float(e(env)) for e in row] for row in coeffs.sigma_bar])
                        base = np.zeros_like(v_next)
                        for z, wq in zip(z_out, w_out):
                            dx = sb @ (z * sqdt)
                            shifted = v_next
                            for a in range(d):
                                if dx[a] != 0.0:
                                    shifted = _shift_axis(shifted, a, dx[a] / hx[a], 3)
                            base += wq * shifted
                    bvec = [float(e(env)) for e in coeffs.beta]
                    stm = np.array([[float(e(env)) for e in row] for row in coeffs.sigma_tilde]) if m0 else None
                    if m0:
                        expv = np.zeros_like(base)
                        for z, wq in zip(z_live, w_live):
                            shifted = base
                            for a in range(d):
                                delta = bvec[a] * dtau + stm[a, 0] * z * sqdt
                                if delta != 0.0:
                                    shifted = _shift_axis(shifted, a, delta / hx[a], 3)
                            shifted = _shift_axis(shifted, d, z * sqdt / hw, 3)
                            expv += wq * shifted
                    else:
                        expv = base
                        for a in range(d):
                            if bvec[a] != 0.0:
                                expv = _shift_axis(expv, a, bvec[a] * dtau / hx[a], 3)
                else:
                    beta = np.empty((d,) + shape)
                    for a, e in enumerate(coeffs.beta):
                        beta[a] = np.asarray(e(env), dtype=float)
                    sigma = np.empty((d, m0 + m1) + shape)
                    for a, row in enumerate(coeffs.sigma_rows()):
                        for c, e in enumerate(row):
                            sigma[a, c] = np.asarray(e(env), dtype=float)
                    tails = frozen_windows(i, lead, shape)
                    expv = np.zeros(shape)
                    for z, wq in zip(z_full, w_full):
                        dw = z * sqdt
                        windows = []
                        for a in range(d):
                            drift = env0[f"x{a + 1}"] + beta[a] * dtau
                            diff = np.einsum("c...,c->...", sigma[a], dw)
                            q = (np.broadcast_to(drift + diff, shape) - x_axes[a][0]) / hx[a]
                            windows.append(_window_1d(q, x_axes[a].size, 3, clamp=False))
                        if m0:
                            q = (env0["w1"] + dw[0] - w_axis[0]) / hw
                            windows.append(
                                _window_1d(np.broadcast_to(q, shape), w_axis.size, 3, clamp=False)
                            )
                        expv += wq * _gather_interp(v_next, windows + tails)
                val = fval * dtau + expv
                if best is None:
                    best, best_idx = val, np.zeros(shape, dtype=np.int16)
                else:
                    mask = val < best
                    best = np.where(mask, val, best)
                    best_idx = np.where(mask, np.int16(ci), best_idx)
            vals[j] = best
            amin[j] = best_idx
        return ts, vals, amin

    # terminal slice: the last knot coincides with the live coordinate
    field_axes["n_noise_axes"] = n_knots if m0 else 0
    env_T = _mesh_env(field_axes, coeffs.horizon, n_knots - 1, n_knots)
    if m0:
        env_T[f"k{n_knots}"] = env_T["w1"]
    terminal = np.broadcast_to(
        np.asarray(coeffs.terminal_cost(env_T), dtype=float), shape_of(n_knots - 1)
    ).copy()

    taus, values, argmins = [None] * n_knots, [None] * n_knots, [None] * n_knots
    for i in range(n_knots - 1, -1, -1):
        ts, vals, amin = march_interval(i, terminal)
        taus[i], values[i], argmins[i] = ts, vals, amin
        if i > 0:
            if m0:
                diag = np.diagonal(vals[0], axis1=d, axis2=d + i)
                terminal = np.moveaxis(diag, -1, d).copy()
            else:
                terminal = vals[0].copy()

    return OracleValueField(
        coeffs, lattice, meshes, x_axes, w_axis, starts, taus, values, argmins
    )


# ---------------------------------------------------------------------------
# brute-force search over piecewise-constant controls


def brute_search(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    t: float,
    x,
    bundle: PathBundle,
    pieces: int,
    budget: int = 4096,
) -> tuple[MCEstimate, np.ndarray]:
    """Best piecewise-constant open-loop control by full enumeration.

    All candidates are priced on the same bundle (common random numbers),
    so the minimum over a nested candidate class can never increase.  Ties
    keep the first (lexicographically smallest) candidate.
    """
    if pieces < 1:
        raise ValueError("need at least one control segment")
    n_cand = lattice.n_points**pieces
    if n_cand > budget:
        raise ValueError(
            f"enumeration of {n_cand} piecewise controls exceeds the budget {budget}"
        )
    grid = bundle.grid
    k0 = grid.step_of(t)
    bounds = np.rint(np.linspace(k0, grid.n_steps, pieces + 1)).astype(int)
    seg = np.clip(np.searchsorted(bounds, np.arange(grid.n_steps), side="right") - 1, 0, pieces - 1)
    best: MCEstimate | None = None
    best_combo = None
    for combo in itertools.product(range(lattice.n_points), repeat=pieces):
        seq = np.asarray(combo, dtype=np.int64)[seg]
        paths = simulate(coeffs, OpenLoopPolicy(lattice, seq), t, x, bundle)
        est = _estimate(paths.total_cost())
        if best is None or est.mean < best.mean:
            best, best_combo = est, combo
    return best, np.asarray(best_combo, dtype=np.int64)


def brute_value(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    t: float,
    x,
    bundle: PathBundle,
    pieces: int,
    budget: int = 4096,
) -> MCEstimate:
    return brute_search(coeffs, lattice, t, x, bundle, pieces, budget)[0]


# ---------------------------------------------------------------------------
# dynamic-programming residual


def _scalar_env(env: dict, index: int = 0) -> dict:
    return {k: float(np.asarray(v).reshape(-1)[index]) for k, v in env.items()}


def dpp_residual(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    t: float,
    t_hat: float,
    x,
    bundle: PathBundle,
    pieces: int,
    *,
    field: OracleValueField | None = None,
    seed: int = 0,
) -> float:
    """Gap in the two-stage optimality recursion at ``(t, t_hat)``.

    The right-hand side minimises, over enumerated piecewise-constant
    controls plus the oracle feedback, the simulated cost on ``[t, t_hat]``
    continued by the interpolated value at ``t_hat``.  When ``t_hat`` is
    the horizon, the continuation is the terminal cost itself, so both
    sides reduce to the same brute-force estimate and the residual vanishes
    identically.
    """
    grid = bundle.grid
    k0, k1 = grid.step_of(t), grid.step_of(t_hat)
    if not k0 < k1 <= grid.n_steps:
        raise ValueError("need t < t_hat <= horizon, both on the grid")
    x = np.asarray(x, dtype=float)

    if k1 == grid.n_steps:
        brute_search(coeffs, lattice, t, x, bundle, pieces)
        return 0.0

    if field is None:
        field = backward_induction_oracle(coeffs, lattice, OracleMeshes())
    cond = bundle if k0 == 0 else branch_at(
        bundle, 0, t, bundle.count, derive_seed(seed, "dpp-branch", k0)
    )
    lhs = field.eval(t, x, _scalar_env(knot_env(cond, t)))

    n_cand = lattice.n_points**pieces
    if n_cand > 4096:
        raise ValueError(f"enumeration of {n_cand} piecewise controls exceeds the budget 4096")
    bounds = np.rint(np.linspace(k0, k1, pieces + 1)).astype(int)
    seg = np.clip(np.searchsorted(bounds, np.arange(grid.n_steps), side="right") - 1, 0, pieces - 1)
    policies = [
        OpenLoopPolicy(lattice, np.asarray(combo, dtype=np.int64)[seg])
        for combo in itertools.product(range(lattice.n_points), repeat=pieces)
    ]
    policies.append(feedback_policy(field))

    env_hat = knot_env(cond, t_hat)
    best = math.inf
    for pol in policies:
        paths = simulate(coeffs, pol, t, x, cond)
        run_cost = paths.cost_increments[:, : k1 - k0].sum(axis=1)
        tail = field.eval(t_hat, paths.states_at(t_hat), env_hat)
        best = min(best, float(np.mean(run_cost + tail)))
    return abs(lhs - best)


# ---------------------------------------------------------------------------
# control pasting


@dataclass
class PastedPolicy:
    """Plays ``base`` before the switch, then a per-box open-loop tail.

    At the first step at or past the switch time each path is routed to the
    box containing its state (first match wins; states outside every box go
    to the nearest one) and keeps that box's control sequence afterwards.
    """

    base: object
    box_lo: np.ndarray
    box_hi: np.ndarray
    sequences: np.ndarray
    switch_time: float
    _routes: np.ndarray | None = dataclass_field(default=None, repr=False)

    @property
    def lattice(self) -> ControlLattice:
        return self.base.lattice

    def _assign(self, x: np.ndarray) -> np.ndarray:
        inside = np.all(
            (x[:, None, :] >= self.box_lo[None]) & (x[:, None, :] <= self.box_hi[None]), axis=2
        )
        routes = np.argmax(inside, axis=1)
        stray = ~inside.any(axis=1)
        if stray.any():
            gap = np.maximum(self.box_lo[None] - x[stray, None, :], 0.0) + np.maximum(
                x[stray, None, :] - self.box_hi[None], 0.0
            )
            routes[stray] = np.argmin(np.linalg.norm(gap, axis=2), axis=1)
        return routes

    def indices_at(self, step, t, x, noise_env):
        if t < self.switch_time - 1e-12:
            self._routes = None
            return self.base.indices_at(step, t, x, noise_env)
        if self._routes is None or self._routes.shape[0] != x.shape[0]:
            self._routes = self._assign(x)
        return self.sequences[self._routes, step]


def paste_controls(base_policy, boxes, per_box_controls, switch_time: float) -> PastedPolicy:
    """Glue box-dependent open-loop tails onto a base policy at one time."""
    lo = np.asarray([b[0] for b in boxes], dtype=float)
    hi = np.asarray([b[1] for b in boxes], dtype=float)
    seqs = np.asarray(per_box_controls, dtype=np.int64)
    if seqs.shape[0] != lo.shape[0]:
        raise ValueError("need exactly one control sequence per box")
    return PastedPolicy(base_policy, lo, hi, seqs, switch_time)


# ---------------------------------------------------------------------------
# value-plus-cost monotonicity


def supermartingale_check(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    policy,
    x,
    times,
    bundle: PathBundle,
    field: OracleValueField,
) -> ValidationReport:
    """Along any policy, expected value plus accrued cost must not decrease.

    Each consecutive time pair contributes one clause with the paired-sample
    gap ``E[V(b, X_b) + cost(a, b) - V(a, X_a)]``; the gap may not drop
    below minus three standard errors minus a mesh-bias allowance.  Along
    an optimal policy the gap sits at zero within the same bands; for a bad
    policy it is strictly positive.
    """
    paths = simulate(coeffs, policy, times[0], np.asarray(x, dtype=float), bundle)
    clauses = []
    if paths.aborted.any():
        clauses.append(
            Clause("all paths finite", False, float(paths.aborted.sum()), 0.0)
        )
        return ValidationReport("supermartingale-check", clauses)
    grid = bundle.grid
    k_start = grid.step_of(times[0])
    csum = np.concatenate(
        [np.zeros((paths.count, 1)), np.cumsum(paths.cost_increments, axis=1)], axis=1
    )
    vals = {}
    for tau in times:
        k = grid.step_of(tau)
        vals[tau] = np.asarray(
            field.eval(tau, paths.values[:, k - k_start, :], knot_env(bundle, tau))
        )
    gaps, stderrs = [], []
    n = paths.count
    for a, b in zip(times[:-1], times[1:]):
        ka, kb = grid.step_of(a), grid.step_of(b)
        diff = vals[b] + (csum[:, kb - k_start] - csum[:, ka - k_start]) - vals[a]
        gap = float(diff.mean())
        se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        slack = 0.75 * field.step_bias * (1.0 + abs(float(vals[a].mean())))
        gaps.append(gap)
        stderrs.append(se)
        clauses.append(
            Clause(
                f"value-plus-cost drift on [{a:g}, {b:g}]",
                gap >= -(3.0 * se + slack),
                gap,
                -(3.0 * se + slack),
            )
        )
    return ValidationReport(
        "supermartingale-check", clauses, {"gaps": gaps, "stderrs": stderrs}
    )


# ---------------------------------------------------------------------------
# Lipschitz and boundedness probes


def lipschitz_probe(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    t: float,
    pair_count: int,
    bundle: PathBundle,
    *,
    seed: int = 0,
) -> float:
    """Largest sampled difference quotient of the brute one-piece value.

    Both endpoints of every pair are priced on the same bundle, so the
    Monte Carlo noise largely cancels inside the quotient.
    """
    d = coeffs.dims.d
    box = np.asarray(coeffs.x_box, dtype=float)
    u = check_uniforms(seed, "lipschitz-pairs", (pair_count, 2, d))
    pts = box[:, 0] + u * (box[:, 1] - box[:, 0])
    diam = float(np.linalg.norm(box[:, 1] - box[:, 0]))

    def value(p: np.ndarray) -> float:
        best = math.inf
        for ci in range(lattice.n_points):
            paths = simulate(coeffs, _Constant(lattice, ci), t, p, bundle)
            best = min(best, float(paths.total_cost().mean()))
        return best

    worst = 0.0
    for a, b in pts:
        dist = float(np.linalg.norm(a - b))
        if dist < 1e-9 * max(1.0, diam):
            continue
        worst = max(worst, abs(value(a) - value(b)) / dist)
    return worst


@dataclass
class _Constant:
    lattice: ControlLattice
    index: int

    def indices_at(self, step, t, x, noise_env):
        return np.full(x.shape[0], self.index, dtype=np.int64)


def bound_check(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    samples: int,
    *,
    field: OracleValueField,
    bundle: PathBundle,
    seed: int = 0,
) -> ValidationReport:
    """Sampled sup of |value| against L (horizon + 1), plus a time modulus.

    The modulus note reports the largest one-step move of the value along
    simulated feedback paths; it is informational, not a pass/fail clause.
    """
    d = coeffs.dims.d
    ts, env = sample_wenvs(coeffs, samples, seed, "bound-samples")
    u = check_uniforms(seed, "bound-x", (samples, d))
    box = np.asarray(coeffs.x_box, dtype=float)
    xs = box[:, 0] + u * (box[:, 1] - box[:, 0])
    vals = np.array(
        [
            field.eval(float(ts[s]), xs[s], _scalar_env(env, s) if env else {})
            for s in range(samples)
        ]
    )
    sup = float(np.max(np.abs(vals)))
    threshold = coeffs.bound * (coeffs.horizon + 1.0)
    clauses = [
        Clause("all sampled values finite", bool(np.isfinite(vals).all()), float(np.isfinite(vals).sum()), samples),
        Clause("sup |value| over sampled points", sup <= threshold * (1 + 1e-9), sup, threshold),
    ]

    center = box.mean(axis=1)
    paths = simulate(coeffs, feedback_policy(field), 0.0, center, bundle)
    grid = bundle.grid
    sq_sum, n_moves, worst_move = 0.0, 0, 0.0
    prev = None
    for k in range(grid.n_steps + 1):
        tk = float(grid.times[k])
        cur = np.asarray(field.eval(tk, paths.values[:, k, :], knot_env(bundle, tk)))
        if prev is not None:
            move = np.abs(cur - prev)
            sq_sum += float(np.sum(move**2))
            n_moves += move.size
            worst_move = max(worst_move, float(move.max()))
        prev = cur
    modulus = math.sqrt(sq_sum / n_moves) if n_moves else 0.0
    return ValidationReport(
        "bound-check",
        clauses,
        {"time_modulus": modulus, "time_modulus_max": worst_move, "sup_value": sup},
    )
