"""Problem definition: coefficients, control lattice, structural validators.

A control problem is described by drift ``beta``, a diffusion matrix split
into an observed block ``sigma_tilde`` (columns driven by the Wiener
coordinates the coefficients may read) and an unobserved block ``sigma_bar``,
a running cost ``f`` and a terminal cost ``G``, all written in the
expression language of :mod:`shjb.expr`.

Two sampled validators gate the numerical machinery:

* :func:`validate_bounds` checks the declared uniform bound and x-Lipschitz
  constant ``L`` on a problem-specific sampling box (the structural
  assumptions are global; sampling a box is the honest testable surrogate).
* :func:`validate_superparabolic` checks the split-noise shape: the diffusion
  formulas must be deterministic (no noise variables at all), the unobserved
  block must be uniformly elliptic, and costs must be non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex
from .paths import check_normals, check_uniforms

__all__ = [
    "ProblemDims",
    "CoefficientExpr",
    "CoefficientSet",
    "ControlLattice",
    "Clause",
    "ValidationReport",
    "parse_coefficient",
    "hamiltonian",
    "PhiBlocks",
    "controlled_generator",
    "validate_bounds",
    "validate_superparabolic",
    "sample_wenvs",
]

BOUND_SLACK = 0.01  # sampled sups may exceed the declared constant by 1%


@dataclass(frozen=True)
class ProblemDims:
    """Dimensions: state d, controls n, observed/unobserved noise m0/m1, knots N."""

    d: int
    n_controls: int
    m0: int
    m1: int
    n_knots: int

    def __post_init__(self):
        if min(self.d, self.n_controls, self.n_knots) < 1 or min(self.m0, self.m1) < 0:
            raise ValueError("dimensions must be positive (noise blocks may be zero)")
        if self.m0 + self.m1 < 1:
            raise ValueError("need at least one Wiener coordinate")

    @property
    def m(self) -> int:
        return self.m0 + self.m1

    def var_names(self) -> set[str]:
        names = {"t"}
        names.update(f"x{i + 1}" for i in range(self.d))
        names.update(f"v{i + 1}" for i in range(self.n_controls))
        names.update(f"w{i + 1}" for i in range(self.m0))
        names.update(f"k{i + 1}" for i in range(self.m0 * self.n_knots))
        return names


@dataclass(frozen=True)
class CoefficientExpr:
    """A parsed coefficient formula with its free variables."""

    source: str
    tree: ex.Expr
    free: frozenset[str]

    def __call__(self, env: Mapping[str, object], checked: bool = False):
        return ex.evaluate(self.tree, env, checked=checked)

    @property
    def reads_live_noise(self) -> bool:
        return any(v.startswith("w") for v in self.free)

    @property
    def reads_any_noise(self) -> bool:
        return any(v.startswith(("w", "k")) for v in self.free)

    @property
    def time_dependent(self) -> bool:
        return "t" in self.free


def parse_coefficient(source: str, dims: ProblemDims) -> CoefficientExpr:
    """Parse one coefficient formula, rejecting variables the dims do not have."""
    tree = ex.parse(source, allowed_vars=dims.var_names())
    return CoefficientExpr(source, tree, ex.free_vars(tree))


def _as_grid(values, shape, name) -> list:
    values = list(values)
    if shape[1] == 0:
        # a zero-width block may be written as [] or as d empty rows
        if any(len(row) for row in values):
            raise ValueError(f"{name} must be empty for a zero-width block")
        return []
    if len(values) != shape[0] or any(len(row) != shape[1] for row in values):
        raise ValueError(f"{name} must be a {shape[0]}x{shape[1]} grid of formulas")
    return values


@dataclass(frozen=True)
class CoefficientSet:
    """All coefficients of one control problem, plus declared constants.

    ``bound`` is the uniform bound / Lipschitz constant the problem claims,
    ``lambda_min`` the claimed ellipticity of the unobserved noise block,
    ``x_box`` the sampling box used by validators and probes.
    """

    name: str
    dims: ProblemDims
    horizon: float
    knot_times: tuple[float, ...]
    beta: tuple[CoefficientExpr, ...]
    sigma_tilde: tuple[tuple[CoefficientExpr, ...], ...]
    sigma_bar: tuple[tuple[CoefficientExpr, ...], ...]
    running_cost: CoefficientExpr
    terminal_cost: CoefficientExpr
    bound: float
    lambda_min: float
    x_box: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.beta) != self.dims.d:
            raise ValueError("beta needs one formula per state coordinate")
        if len(self.x_box) != self.dims.d:
            raise ValueError("x_box needs one (lo, hi) pair per state coordinate")
        if len(self.knot_times) != self.dims.n_knots:
            raise ValueError("knot count disagrees with dims")
        if abs(self.knot_times[-1] - self.horizon) > 1e-12:
            raise ValueError("last knot must equal the horizon")
        if any(b <= a for a, b in zip((0.0,) + self.knot_times, self.knot_times)):
            raise ValueError("knots must be strictly increasing and positive")

    @classmethod
    def from_strings(
        cls,
        name: str,
        dims: ProblemDims,
        horizon: float,
        knot_times: Sequence[float],
        beta: Sequence[str],
        sigma_tilde: Sequence[Sequence[str]],
        sigma_bar: Sequence[Sequence[str]],
        running_cost: str,
        terminal_cost: str,
        bound: float,
        lambda_min: float,
        x_box: Sequence[tuple[float, float]],
    ) -> "CoefficientSet":
        st = _as_grid(sigma_tilde, (dims.d, dims.m0), "sigma_tilde")
        sb = _as_grid(sigma_bar, (dims.d, dims.m1), "sigma_bar")
        return cls(
            name=name,
            dims=dims,
            horizon=float(horizon),
            knot_times=tuple(float(t) for t in knot_times),
            beta=tuple(parse_coefficient(s, dims) for s in beta),
            sigma_tilde=tuple(tuple(parse_coefficient(s, dims) for s in row) for row in st),
            sigma_bar=tuple(tuple(parse_coefficient(s, dims) for s in row) for row in sb),
            running_cost=parse_coefficient(running_cost, dims),
            terminal_cost=parse_coefficient(terminal_cost, dims),
            bound=float(bound),
            lambda_min=float(lambda_min),
            x_box=tuple((float(a), float(b)) for a, b in x_box),
        )

    # -- evaluation helpers -------------------------------------------------

    def sigma_rows(self) -> tuple[tuple[CoefficientExpr, ...], ...]:
        """Full diffusion rows: observed columns first, then unobserved."""
        if self.dims.m0 == 0:
            return self.sigma_bar
        if self.dims.m1 == 0:
            return self.sigma_tilde
        return tuple(st + sb for st, sb in zip(self.sigma_tilde, self.sigma_bar))

    def eval_beta(self, env: Mapping[str, object], shape) -> np.ndarray:
        out = np.empty((self.dims.d,) + tuple(shape))
        for i, e in enumerate(self.beta):
            out[i] = np.asarray(e(env), dtype=float)
        return out

    def eval_sigma(self, env: Mapping[str, object], shape) -> np.ndarray:
        rows = self.sigma_rows()
        out = np.empty((self.dims.d, self.dims.m) + tuple(shape))
        for i, row in enumerate(rows):
            for j, e in enumerate(row):
                out[i, j] = np.asarray(e(env), dtype=float)
        return out

    @property
    def has_exact_lift(self) -> bool:
        """True when no dynamic coefficient reads the live observed noise.

        The terminal cost does not count: at the horizon the live value and
        the final knot coincide, so a ``w`` reference there is exact anyway.
        """
        dyn = list(self.beta) + [e for row in self.sigma_rows() for e in row] + [self.running_cost]
        return not any(e.reads_live_noise for e in dyn)

    def coefficient_items(self) -> list[tuple[str, CoefficientExpr]]:
        items = [(f"beta[{i + 1}]", e) for i, e in enumerate(self.beta)]
        items += [
            (f"sigma_tilde[{i + 1},{j + 1}]", e)
            for i, row in enumerate(self.sigma_tilde)
            for j, e in enumerate(row)
        ]
        items += [
            (f"sigma_bar[{i + 1},{j + 1}]", e) for i, row in enumerate(self.sigma_bar) for j, e in enumerate(row)
        ]
        items += [("f", self.running_cost), ("G", self.terminal_cost)]
        return items


@dataclass(frozen=True)
class ControlLattice:
    """Dyadic lattice of admissible controls inside a box.

    Refinement level ``level`` places ``2**level + 1`` points per control
    coordinate (endpoints included, a zero-extent coordinate contributes a
    single point); level ``l+1`` contains level ``l``.  Points are ordered
    lexicographically and ties in any minimisation are broken toward the
    first (lexicographically smallest) point.
    """

    box: tuple[tuple[float, float], ...]
    level: int
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("level must be non-negative")
        if not self.box or any(hi < lo for lo, hi in self.box):
            raise ValueError("control box coordinates must satisfy lo <= hi")
        # a zero-extent coordinate pins that control to a single value
        axes = [
            np.linspace(lo, hi, 2**self.level + 1) if hi > lo else np.array([lo])
            for lo, hi in self.box
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        object.__setattr__(self, "points", pts)

    @property
    def n_controls(self) -> int:
        return len(self.box)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def refine(self) -> "ControlLattice":
        return ControlLattice(self.box, self.level + 1)

    def control_env(self, base: dict, indices=None) -> dict:
        """Extend an expression env with control coordinates.

        With ``indices=None`` the env carries the full lattice as arrays (for
        a vectorised min); otherwise ``indices`` selects per-sample points.
        """
        pts = self.points if indices is None else self.points[np.asarray(indices)]
        env = dict(base)
        for j in range(self.n_controls):
            env[f"v{j + 1}"] = pts[..., j]
        return env


# ---------------------------------------------------------------------------
# Hamiltonian and generator


def hamiltonian(
    coeffs: CoefficientSet,
    lattice: ControlLattice,
    t: float,
    x: np.ndarray,
    w_env: Mapping[str, float],
    p: np.ndarray,
    A: np.ndarray,
    B: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Lattice minimum of the control Hamiltonian at one point.

    Computes ``min_v [ tr(0.5 sigma sigma' A + sigma B) + beta . p + f ]``
    over the lattice and returns ``(value, argmin point)``; ties go to the
    lexicographically first point.  ``p`` has shape (d,), ``A`` (d, d) and
    ``B`` (m, d).
    """
    d, m = coeffs.dims.d, coeffs.dims.m
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if x.shape != (d,) or p.shape != (d,) or A.shape != (d, d) or B.shape != (m, d):
        raise ValueError("shape mismatch against problem dimensions")
    base = {"t": t, **{f"x{i + 1}": x[i] for i in range(d)}, **w_env}
    env = lattice.control_env(base)
    nv = lattice.n_points
    beta = coeffs.eval_beta(env, (nv,))
    sigma = coeffs.eval_sigma(env, (nv,))
    f = np.broadcast_to(np.asarray(coeffs.running_cost(env), dtype=float), (nv,))
    # tr(0.5 sigma sigma' A): 0.5 * sum_{i,j,c} sigma[i,c] sigma[j,c] A[i,j]
    quad = 0.5 * np.einsum("icv,jcv,ij->v", sigma, sigma, A)
    mixed = np.einsum("icv,ci->v", sigma, B)
    drift = np.einsum("iv,i->v", beta, p)
    total = quad + mixed + drift + f
    idx = int(np.argmin(total))  # first occurrence wins
    return float(total[idx]), lattice.points[idx].copy()


@dataclass(frozen=True)
class PhiBlocks:
    """Derivative blocks of a smooth test field at one point.

    ``time_drift`` is the drift part of the field's time expansion,
    ``noise_gradient`` the x-gradient of its noise loading (shape (m, d)).
    """

    time_drift: float
    gradient: np.ndarray
    hessian: np.ndarray
    noise_gradient: np.ndarray


def controlled_generator(
    coeffs: CoefficientSet,
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    w_env: Mapping[str, float],
    blocks: PhiBlocks,
) -> float:
    """Generator of a smooth field along the controlled state, at one point.

    ``time_drift + tr(0.5 sigma sigma' hessian + sigma noise_gradient)
    + gradient . beta`` with all coefficients evaluated at ``(t, x, v)`` and
    the supplied noise bindings.  The running cost is not included.
    """
    d, m = coeffs.dims.d, coeffs.dims.m
    x = np.asarray(x, dtype=float)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    grad = np.asarray(blocks.gradient, dtype=float)
    hess = np.asarray(blocks.hessian, dtype=float)
    ngrad = np.asarray(blocks.noise_gradient, dtype=float)
    if grad.shape != (d,) or hess.shape != (d, d) or ngrad.shape != (m, d):
        raise ValueError("derivative block shapes disagree with problem dimensions")
    env = {"t": t, **{f"x{i + 1}": x[i] for i in range(d)}, **w_env}
    for j in range(coeffs.dims.n_controls):
        env[f"v{j + 1}"] = v[j]
    beta = coeffs.eval_beta(env, ())
    sigma = coeffs.eval_sigma(env, ())
    quad = 0.5 * float(np.einsum("ic,jc,ij->", sigma, sigma, hess))
    mixed = float(np.einsum("ic,ci->", sigma, ngrad))
    return float(blocks.time_drift) + quad + mixed + float(beta @ grad)


# ---------------------------------------------------------------------------
# sampled validators


@dataclass(frozen=True)
class Clause:
    label: str
    passed: bool
    observed: float
    threshold: float
    detail: str = ""

    def __str__(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        line = f"[{tag}] {self.label}: observed {self.observed:.6g} vs bound {self.threshold:.6g}"
        return line + (f" ({self.detail})" if self.detail else "")


@dataclass
class ValidationReport:
    name: str
    clauses: list[Clause]
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def __str__(self) -> str:
        head = f"{self.name}: {'PASS' if self.passed else 'FAIL'}"
        body = "\n".join(f"  {c}" for c in self.clauses)
        note = "\n".join(f"  note {k} = {v}" for k, v in self.notes.items())
        return "\n".join(s for s in (head, body, note) if s)


def sample_wenvs(coeffs: CoefficientSet, count: int, seed: int, label: str) -> tuple[np.ndarray, dict]:
    """Random times plus consistent noise bindings for sampled checks.

    Each sample carries a time ``t`` uniform on the horizon and a Brownian
    skeleton of the observed block: knot values with the correct joint law,
    the live value diffused from the most recent knot, and future knots
    clamped to the live value.
    """
    t = check_uniforms(seed, label + ":t", (count,)) * coeffs.horizon
    m0 = coeffs.dims.m0
    env: dict[str, np.ndarray] = {}
    if m0 == 0:
        return t, env
    knots = np.array([0.0, *coeffs.knot_times])
    z = check_normals(seed, label + ":w", (count, len(knots), m0))
    skel = np.zeros((count, len(knots), m0))
    for i in range(1, len(knots)):
        skel[:, i] = skel[:, i - 1] + np.sqrt(knots[i] - knots[i - 1]) * z[:, i]
    iv = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(knots) - 2)
    last = np.take_along_axis(skel, iv[:, None, None], axis=1)[:, 0, :]
    tau = knots[iv]
    live = last + np.sqrt(np.maximum(t - tau, 0.0))[:, None] * z[:, 0, :]
    for c in range(m0):
        env[f"w{c + 1}"] = live[:, c]
    for i in range(1, len(knots)):
        frozen = np.where((knots[i] <= tau)[:, None], skel[:, i, :], live)
        for c in range(m0):
            env[f"k{(i - 1) * m0 + c + 1}"] = frozen[:, c]
    return t, env


def _sample_x(coeffs: CoefficientSet, count: int, seed: int, label: str) -> np.ndarray:
    u = check_uniforms(seed, label + ":x", (count, coeffs.dims.d))
    lo = np.array([a for a, _ in coeffs.x_box])
    hi = np.array([b for _, b in coeffs.x_box])
    return lo + u * (hi - lo)


def _sample_v(lattice: ControlLattice, count: int, seed: int, label: str) -> np.ndarray:
    u = check_uniforms(seed, label + ":v", (count, lattice.n_controls))
    lo = np.array([a for a, _ in lattice.box])
    hi = np.array([b for _, b in lattice.box])
    return lo + u * (hi - lo)


def _full_env(coeffs, t, x, v, wenv) -> dict:
    env = {"t": t, **wenv}
    for i in range(coeffs.dims.d):
        env[f"x{i + 1}"] = x[:, i]
    for j in range(coeffs.dims.n_controls):
        env[f"v{j + 1}"] = v[:, j]
    return env


def validate_bounds(
    coeffs: CoefficientSet, lattice: ControlLattice, seed: int = 0, samples: int = 4096
) -> ValidationReport:
    """Sampled check of the declared bound/Lipschitz constant.

    Sups and x-Lipschitz quotients of every coefficient are sampled on the
    problem's x-box, the control box, and noise skeletons with the correct
    law; each must stay within the declared constant (1% slack).  A sampled
    square-root time modulus is attached as a note (reported, not gated).
    """
    t, wenv = sample_wenvs(coeffs, samples, seed, "bounds")
    x = _sample_x(coeffs, samples, seed, "bounds")
    v = _sample_v(lattice, samples, seed, "bounds")
    env = _full_env(coeffs, t, x, v, wenv)

    # paired points for Lipschitz quotients: half global, half local
    x2 = _sample_x(coeffs, samples, seed, "bounds:pair")
    half = samples // 2
    x2[:half] = x[:half] + 1e-3 * check_normals(seed, "bounds:loc", (half, coeffs.dims.d))
    env2 = _full_env(coeffs, t, x2, v, wenv)
    gap = np.linalg.norm(x - x2, axis=1)
    ok = gap > 1e-12

    clauses = []
    L = coeffs.bound
    worst_lip = 0.0
    for label, e in coeffs.coefficient_items():
        vals = np.broadcast_to(np.asarray(e(env), dtype=float), (samples,))
        sup = float(np.max(np.abs(vals)))
        clauses.append(Clause(f"sup |{label}|", sup <= L * (1 + BOUND_SLACK), sup, L))
        vals2 = np.broadcast_to(np.asarray(e(env2), dtype=float), (samples,))
        quot = np.abs(vals - vals2)[ok] / gap[ok]
        lip = float(np.max(quot)) if quot.size else 0.0
        worst_lip = max(worst_lip, lip)
        clauses.append(Clause(f"x-Lipschitz |{label}|", lip <= L * (1 + BOUND_SLACK), lip, L))

    report = ValidationReport(f"{coeffs.name}: bounds/Lipschitz", clauses)
    # square-root time modulus, reported for information
    t2 = np.minimum(coeffs.horizon, t + 10 ** (-3 * check_uniforms(seed, "bounds:dt", (samples,))))
    envt = _full_env(coeffs, t2, x, v, wenv)
    dts = np.abs(t2 - t)
    okt = dts > 1e-12
    mod = 0.0
    for _, e in coeffs.coefficient_items():
        a = np.broadcast_to(np.asarray(e(env), dtype=float), (samples,))
        b = np.broadcast_to(np.asarray(e(envt), dtype=float), (samples,))
        if okt.any():
            mod = max(mod, float(np.max(np.abs(a - b)[okt] / np.sqrt(dts[okt]))))
    report.notes["sqrt_time_modulus"] = round(mod, 6)
    report.notes["worst_x_lipschitz"] = round(worst_lip, 6)
    return report


def validate_superparabolic(
    coeffs: CoefficientSet, lattice: ControlLattice, seed: int = 0, samples: int = 4096
) -> ValidationReport:
    """Sampled check of the split-noise structure.

    Three clauses: the diffusion formulas must be deterministic (no noise
    variables, live or knot), the unobserved block must satisfy
    ``sigma_bar sigma_bar' >= lambda_min I`` at every sample, and both costs
    must be non-negative.
    """
    clauses = []
    sigma_reads = [
        label
        for label, e in coeffs.coefficient_items()
        if label.startswith("sigma") and e.reads_any_noise
    ]
    clauses.append(
        Clause(
            "diffusion free of noise variables",
            not sigma_reads,
            float(len(sigma_reads)),
            0.0,
            detail=", ".join(sigma_reads),
        )
    )
    clauses.append(
        Clause("unobserved noise block present", coeffs.dims.m1 >= 1, float(coeffs.dims.m1), 1.0)
    )

    t, wenv = sample_wenvs(coeffs, samples, seed, "superparabolic")
    x = _sample_x(coeffs, samples, seed, "superparabolic")
    v = _sample_v(lattice, samples, seed, "superparabolic")
    env = _full_env(coeffs, t, x, v, wenv)

    if coeffs.dims.m1 >= 1:
        d, m1 = coeffs.dims.d, coeffs.dims.m1
        sb = np.empty((samples, d, m1))
        for i, row in enumerate(coeffs.sigma_bar):
            for j, e in enumerate(row):
                sb[:, i, j] = np.broadcast_to(np.asarray(e(env), dtype=float), (samples,))
        eigs = np.linalg.eigvalsh(sb @ np.swapaxes(sb, 1, 2))
        min_eig = float(np.min(eigs[:, 0]))
        clauses.append(
            Clause("min eig sigma_bar sigma_bar'", min_eig >= coeffs.lambda_min, min_eig, coeffs.lambda_min)
        )

    fmin = float(np.min(np.broadcast_to(np.asarray(coeffs.running_cost(env), dtype=float), (samples,))))
    clauses.append(Clause("running cost non-negative", fmin >= -1e-12, fmin, 0.0))
    gmin = float(np.min(np.broadcast_to(np.asarray(coeffs.terminal_cost(env), dtype=float), (samples,))))
    clauses.append(Clause("terminal cost non-negative", gmin >= -1e-12, gmin, 0.0))
    return ValidationReport(f"{coeffs.name}: split-noise shape", clauses)
