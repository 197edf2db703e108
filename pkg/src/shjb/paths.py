"""Brownian path bundles on a shared time grid, with exact branching.

All randomness in the package flows through one counter-based generator: a
draw is addressed by ``(seed, stream, first-index, second-index, coordinate)``
and always returns the same value.  Sampling is therefore reproducible
byte-for-byte regardless of chunking or thread count, and a branched child
bundle shares its parent's increments up to the branch time exactly.

The Wiener process has ``m0 + m1`` coordinates: the first ``m0`` form the
observed block (the one coefficient formulas may read, live as ``w*``
variables and frozen at knot times as ``k*`` variables) and the remaining
``m1`` only drive the state.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from ._backend import kernels

__all__ = [
    "TimeGrid",
    "PathBundle",
    "sample_bundle",
    "branch_at",
    "knot_env",
    "derive_seed",
    "check_normals",
    "check_uniforms",
]

_INCREMENT_STREAM = 0


def derive_seed(seed: int, *tags) -> int:
    """Deterministically derive an independent 64-bit seed from labels.

    Tags may be ints or strings; the same inputs give the same child seed on
    any platform.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))
    for tag in tags:
        if isinstance(tag, str):
            h.update(b"s" + tag.encode())
        else:
            h.update(b"i" + struct.pack("<q", int(tag)))
    return int.from_bytes(h.digest(), "little")


def _stream_tag(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=4).digest(), "little") | 1


def _words_to_normals(words: np.ndarray) -> np.ndarray:
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def check_normals(seed: int, label: str, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals for a named check, independent of path increments."""
    n = int(np.prod(shape)) if shape else 1
    words = kernels.philox_u64_block(seed, _stream_tag(label), 0, n, 1, 1)
    return _words_to_normals(words).reshape(shape)


def check_uniforms(seed: int, label: str, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform (0,1) draws for a named check."""
    n = int(np.prod(shape)) if shape else 1
    words = kernels.philox_u64_block(seed, _stream_tag(label) ^ 0x80000000, 0, n, 1, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5).reshape(shape) * 2.0**-53


@dataclass
class TimeGrid:
    """Uniform step grid on ``[0, horizon]`` with marked knot times.

    ``knot_indices`` are the step indices of the knots ``t_1 < ... < t_N``;
    the last knot is always the horizon itself.  The implicit ``t_0 = 0`` is
    not stored.
    """

    horizon: float
    n_steps: int
    knot_indices: tuple[int, ...]

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one step")
        ki = tuple(int(i) for i in self.knot_indices)
        if not ki or ki[-1] != self.n_steps:
            raise ValueError("last knot must sit at the horizon")
        if any(b <= a for a, b in zip(ki, ki[1:])) or ki[0] <= 0:
            raise ValueError("knot indices must be strictly increasing and positive")
        self.knot_indices = ki

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_knots(self) -> int:
        return len(self.knot_indices)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def knot_times(self) -> np.ndarray:
        return self.times[list(self.knot_indices)]

    def step_of(self, t: float) -> int:
        """Grid index of ``t``; raises if ``t`` is off-grid."""
        k = round(t / self.dt)
        if not (0 <= k <= self.n_steps) or abs(k * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"time {t} is not a grid time (dt={self.dt})")
        return int(k)

    def interval_of(self, t: float) -> int:
        """Index ``i`` with ``t`` in ``[t_i, t_{i+1})``; the horizon maps to N-1."""
        if t < -1e-12 or t > self.horizon + 1e-12:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        kt = self.knot_times
        i = int(np.searchsorted(kt, t, side="right"))
        return min(i, self.n_knots - 1)

    @classmethod
    def regular(cls, horizon: float, n_knots: int, steps_per_interval: int = 64) -> "TimeGrid":
        """Equally spaced knots, ``steps_per_interval`` steps between them."""
        idx = tuple(steps_per_interval * (i + 1) for i in range(n_knots))
        return cls(horizon, steps_per_interval * n_knots, idx)

    @classmethod
    def for_knots(cls, horizon: float, knot_times, n_steps: int) -> "TimeGrid":
        """Grid with ``n_steps`` steps hitting every requested knot exactly."""
        dt = horizon / n_steps
        idx = []
        for t in knot_times:
            k = round(t / dt)
            if abs(k * dt - t) > 1e-9 * max(1.0, horizon):
                raise ValueError(f"knot {t} does not lie on a grid of {n_steps} steps")
            idx.append(int(k))
        if not idx or idx[-1] != n_steps:
            idx = idx + [n_steps]
        return cls(horizon, n_steps, tuple(idx))


@dataclass
class PathBundle:
    """A batch of Wiener increments on a common grid.

    ``increments`` has shape ``(count, n_steps, m0+m1)`` and holds actual
    increments (already scaled by sqrt(dt)).  ``lineage`` records branch
    provenance as ``(parent_seed, parent_path, branch_step)`` triples.
    """

    grid: TimeGrid
    m0: int
    m1: int
    increments: np.ndarray
    seed: int
    lineage: tuple = ()
    _cum: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def count(self) -> int:
        return self.increments.shape[0]

    @property
    def m(self) -> int:
        return self.m0 + self.m1

    def cumulative(self) -> np.ndarray:
        """Wiener values at grid times, shape (count, n_steps+1, m)."""
        if self._cum is None:
            cum = np.zeros((self.count, self.grid.n_steps + 1, self.m))
            np.cumsum(self.increments, axis=1, out=cum[:, 1:, :])
            self._cum = cum
        return self._cum

    def wiener_at(self, t: float, path_indices=None) -> np.ndarray:
        """Full Wiener vector at a grid time, shape (npaths, m)."""
        k = self.grid.step_of(t)
        cum = self.cumulative()
        if path_indices is None:
            return cum[:, k, :]
        return cum[np.asarray(path_indices), k, :]


def _fill_increments(out: np.ndarray, seed: int, path0: int, dt: float) -> None:
    n_paths, n_steps, m = out.shape
    words = kernels.philox_u64_block(seed, _INCREMENT_STREAM, path0, n_paths, n_steps, m)
    out[:] = _words_to_normals(words) * math.sqrt(dt)


def sample_bundle(grid: TimeGrid, m0: int, m1: int, count: int, seed: int, threads: int = 1) -> PathBundle:
    """Draw ``count`` independent Wiener paths.

    ``threads`` splits the fill across a thread pool; chunk boundaries do not
    influence the values because every increment is addressed individually.
    """
    if m0 < 0 or m1 < 0 or m0 + m1 < 1:
        raise ValueError("need at least one Wiener coordinate")
    if count < 1:
        raise ValueError("count must be positive")
    inc = np.empty((count, grid.n_steps, m0 + m1))
    if threads <= 1 or count < 2 * threads:
        _fill_increments(inc, seed, 0, grid.dt)
    else:
        chunk = (count + threads - 1) // threads
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = []
            for lo in range(0, count, chunk):
                hi = min(count, lo + chunk)
                futures.append(pool.submit(_fill_increments, inc[lo:hi], seed, lo, grid.dt))
            for fut in futures:
                fut.result()
    return PathBundle(grid, m0, m1, inc, seed)


def branch_at(bundle: PathBundle, path_index: int, t: float, branch_count: int, seed: int) -> PathBundle:
    """Conditional ensemble: copy one path up to ``t``, fresh noise after.

    The children agree with the parent path exactly on ``[0, t]`` (same
    bytes) and are mutually independent afterwards.  Use a fresh ``seed``
    (for example from :func:`derive_seed`) for each branching.
    """
    k = bundle.grid.step_of(t)
    inc = np.empty((branch_count, bundle.grid.n_steps, bundle.m))
    inc[:, :k, :] = bundle.increments[path_index, :k, :]
    if k < bundle.grid.n_steps:
        tail = np.empty((branch_count, bundle.grid.n_steps - k, bundle.m))
        _fill_increments(tail, seed, 0, bundle.grid.dt)
        inc[:, k:, :] = tail
    lineage = bundle.lineage + ((bundle.seed, path_index, k),)
    return PathBundle(bundle.grid, bundle.m0, bundle.m1, inc, seed, lineage)


def knot_env(bundle: PathBundle, t: float, path_indices=None) -> dict[str, np.ndarray]:
    """Expression bindings for the observed Wiener block at time ``t``.

    Returns arrays over paths for ``w1..w{m0}`` (live values) and
    ``k1..k{m0*N}``; knot ``i`` is evaluated at ``min(t_i, t)``, so knots
    that lie in the future are bound to the live value.
    """
    if bundle.m0 == 0:
        return {}
    cum = bundle.cumulative()
    if path_indices is None:
        sel = slice(None)
    else:
        sel = np.asarray(path_indices)
    k_now = bundle.grid.step_of(t)
    env: dict[str, np.ndarray] = {}
    for c in range(bundle.m0):
        env[f"w{c + 1}"] = cum[sel, k_now, c]
    for i, ki in enumerate(bundle.grid.knot_indices):
        kk = min(ki, k_now)
        for c in range(bundle.m0):
            env[f"k{i * bundle.m0 + c + 1}"] = cum[sel, kk, c]
    return env
