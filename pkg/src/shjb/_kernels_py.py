"""NumPy reference implementation of the hot kernels.

Two kernel families live here:

* ``philox_u64_block``: a counter-based pseudo-random generator (the classic
  4x32 ten-round bijection).  Draws are addressed, not streamed: word
  ``(seed, stream, i, j, c)`` has one fixed value, which is what makes path
  branching, thread counts, and re-runs bit-stable.
* ``hjb_step_*``: one explicit backward time step of the monotone
  finite-difference scheme, minimised over the control lattice.

The compiled twin in ``_kernels.pyx`` must agree with these functions bit
for bit.  To keep that property, every floating-point accumulation below is
written in one canonical order (second differences by axis, cross terms by
lexicographic pair, upwind drifts by axis, then the running cost), and the
compiled module is built with FMA contraction disabled.  Do not "simplify"
the arithmetic here without mirroring the change there.
"""

from __future__ import annotations

import numpy as np

IMPL = "numpy"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_KEY_BUMP_0 = 0x9E3779B9
_KEY_BUMP_1 = 0xBB67AE85
_ROUNDS = 10
_CHUNK = 1 << 21  # elements per generation chunk, keeps temporaries ~100MB max


def _key_schedule(seed: int) -> list[tuple[np.uint32, np.uint32]]:
    k0 = seed & 0xFFFFFFFF
    k1 = (seed >> 32) & 0xFFFFFFFF
    keys = []
    for _ in range(_ROUNDS):
        keys.append((np.uint32(k0), np.uint32(k1)))
        k0 = (k0 + _KEY_BUMP_0) & 0xFFFFFFFF
        k1 = (k1 + _KEY_BUMP_1) & 0xFFFFFFFF
    return keys


def _philox_rounds(x0, x1, x2, x3, keys):
    for k0, k1 in keys:
        p0 = _M0 * x0.astype(np.uint64)
        p1 = _M1 * x2.astype(np.uint64)
        hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
        lo0 = p0.astype(np.uint32)
        hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
        lo1 = p1.astype(np.uint32)
        x0 = hi1 ^ x1 ^ k0
        x1 = lo1
        x2 = hi0 ^ x3 ^ k1
        x3 = lo0
    return x0, x1


def philox_u64_block(seed: int, stream: int, idx0: int, n0: int, n1: int, n2: int) -> np.ndarray:
    """64-bit random words for the index block ``[idx0, idx0+n0) x n1 x n2``.

    The counter words are ``(idx0+i, j, c, stream)`` and the key is the
    64-bit ``seed``.  Returns shape ``(n0, n1, n2)`` of dtype uint64.
    """
    if idx0 < 0 or idx0 + n0 > 0xFFFFFFFF:
        raise ValueError("first-index range must fit in 32 bits")
    if not (0 <= stream <= 0xFFFFFFFF and 0 <= n1 <= 0xFFFFFFFF and 0 <= n2 <= 0xFFFFFFFF):
        raise ValueError("indices must fit in 32 bits")
    keys = _key_schedule(int(seed) & 0xFFFFFFFFFFFFFFFF)
    out = np.empty((n0, n1, n2), dtype=np.uint64)
    tag = np.uint32(stream)
    rows = max(1, _CHUNK // max(1, n1 * n2))
    for r0 in range(0, n0, rows):
        r1 = min(n0, r0 + rows)
        c0 = np.arange(idx0 + r0, idx0 + r1, dtype=np.uint32)[:, None, None]
        c1 = np.arange(n1, dtype=np.uint32)[None, :, None]
        c2 = np.arange(n2, dtype=np.uint32)[None, None, :]
        shape = (r1 - r0, n1, n2)
        w0, w1 = _philox_rounds(
            np.broadcast_to(c0, shape),
            np.broadcast_to(c1, shape),
            np.broadcast_to(c2, shape),
            np.broadcast_to(tag, shape),
            keys,
        )
        out[r0:r1] = (w0.astype(np.uint64) << np.uint64(32)) | w1.astype(np.uint64)
    return out


# ---------------------------------------------------------------------------
# finite-difference step kernels
#
# Boundary rules (identical in every implementation): second differences and
# cross terms vanish on the boundary ring, which is what the
# zero-second-derivative ghost extrapolation reduces to; upwind drifts that
# point out of the box fall back to a zero slope so the stencil weights stay
# non-negative everywhere.


def hjb_step_1(u, a, b, f, h, dt, unew, amin):
    """One backward step on a 1-axis mesh.

    ``u``: value slice, shape (n,).  ``a, b, f``: per-control diffusion,
    drift and running cost, shape (nv, n).  Writes the minimised next slice
    into ``unew`` and the first-minimiser index into ``amin``.
    """
    inv_h = 1.0 / h
    inv_h2 = inv_h * inv_h
    d2 = np.zeros_like(u)
    d2[1:-1] = (u[:-2] - 2.0 * u[1:-1] + u[2:]) * inv_h2
    fwd = np.zeros_like(u)
    fwd[:-1] = (u[1:] - u[:-1]) * inv_h
    bwd = np.zeros_like(u)
    bwd[1:] = (u[1:] - u[:-1]) * inv_h
    for v in range(a.shape[0]):
        acc = 0.5 * a[v] * d2
        acc += np.maximum(b[v], 0.0) * fwd
        acc += np.minimum(b[v], 0.0) * bwd
        acc += f[v]
        cand = u + dt * acc
        if v == 0:
            unew[:] = cand
            amin[:] = 0
        else:
            better = cand < unew
            unew[better] = cand[better]
            amin[better] = v


def hjb_step_2(u, a1, a2, c12, b1, b2, f, h1, h2, dt, unew, amin):
    """One backward step on a 2-axis mesh with a mixed second derivative.

    ``u``: (n1, n2).  Coefficients: (nv, n1, n2); ``c12`` multiplies the
    cross derivative and is resolved with the sign-split seven-point
    stencil.  Writes ``unew`` and ``amin`` in place.
    """
    inv_h1 = 1.0 / h1
    inv_h2 = 1.0 / h2
    inv_h1sq = inv_h1 * inv_h1
    inv_h2sq = inv_h2 * inv_h2
    inv_cross = 1.0 / (2.0 * h1 * h2)

    d2x = np.zeros_like(u)
    d2x[1:-1, :] = (u[:-2, :] - 2.0 * u[1:-1, :] + u[2:, :]) * inv_h1sq
    d2y = np.zeros_like(u)
    d2y[:, 1:-1] = (u[:, :-2] - 2.0 * u[:, 1:-1] + u[:, 2:]) * inv_h2sq
    fwdx = np.zeros_like(u)
    fwdx[:-1, :] = (u[1:, :] - u[:-1, :]) * inv_h1
    bwdx = np.zeros_like(u)
    bwdx[1:, :] = (u[1:, :] - u[:-1, :]) * inv_h1
    fwdy = np.zeros_like(u)
    fwdy[:, :-1] = (u[:, 1:] - u[:, :-1]) * inv_h2
    bwdy = np.zeros_like(u)
    bwdy[:, 1:] = (u[:, 1:] - u[:, :-1]) * inv_h2

    # cross stencils, interior nodes only
    s_pos = np.zeros_like(u)
    s_pos[1:-1, 1:-1] = (
        2.0 * u[1:-1, 1:-1] + u[2:, 2:] + u[:-2, :-2] - u[2:, 1:-1] - u[:-2, 1:-1] - u[1:-1, 2:] - u[1:-1, :-2]
    ) * inv_cross
    s_neg = np.zeros_like(u)
    s_neg[1:-1, 1:-1] = (
        2.0 * u[1:-1, 1:-1] + u[2:, :-2] + u[:-2, 2:] - u[2:, 1:-1] - u[:-2, 1:-1] - u[1:-1, 2:] - u[1:-1, :-2]
    ) * inv_cross

    for v in range(a1.shape[0]):
        acc = 0.5 * a1[v] * d2x
        acc += 0.5 * a2[v] * d2y
        acc += np.maximum(c12[v], 0.0) * s_pos
        acc += np.maximum(-c12[v], 0.0) * s_neg
        acc += np.maximum(b1[v], 0.0) * fwdx
        acc += np.minimum(b1[v], 0.0) * bwdx
        acc += np.maximum(b2[v], 0.0) * fwdy
        acc += np.minimum(b2[v], 0.0) * bwdy
        acc += f[v]
        cand = u + dt * acc
        if v == 0:
            unew[:] = cand
            amin[:] = 0
        else:
            better = cand < unew
            unew[better] = cand[better]
            amin[better] = v


def hjb_step_nd(u, diag, cross, drift, f, hs, dt, unew, amin):
    """General n-axis backward step; the reference semantics for any axis count.

    Parameters
    ----------
    u : ndarray, shape ``mesh``
    diag : ndarray, shape (nv, nax) + mesh
        Coefficients of the pure second derivatives.
    cross : ndarray, shape (nv, npairs) + mesh
        Coefficients of the mixed derivatives, pairs in lexicographic order
        ``(0,1), (0,2), ..., (1,2), ...``.
    drift : ndarray, shape (nv, nax) + mesh
    f : ndarray, shape (nv,) + mesh
    hs : sequence of mesh spacings, length nax.
    """
    nax = len(hs)
    pairs = [(i, j) for i in range(nax) for j in range(i + 1, nax)]

    def shifted(axis, offset):
        index = [slice(1, -1) if k == axis else slice(None) for k in range(nax)]
        index[axis] = slice(2, None) if offset == 1 else slice(None, -2) if offset == -1 else slice(1, -1)
        return tuple(index)

    d2 = []
    fwd = []
    bwd = []
    for ax in range(nax):
        inv_h = 1.0 / hs[ax]
        arr = np.zeros_like(u)
        arr[shifted(ax, 0)] = (u[shifted(ax, -1)] - 2.0 * u[shifted(ax, 0)] + u[shifted(ax, 1)]) * (inv_h * inv_h)
        d2.append(arr)
        lo = [slice(None)] * nax
        hi = [slice(None)] * nax
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        diff = (u[tuple(hi)] - u[tuple(lo)]) * inv_h
        arr_f = np.zeros_like(u)
        arr_f[tuple(lo)] = diff
        fwd.append(arr_f)
        arr_b = np.zeros_like(u)
        arr_b[tuple(hi)] = diff
        bwd.append(arr_b)

    def pair_index(base, da, db, ax_a, ax_b):
        index = list(base)
        index[ax_a] = {1: slice(2, None), 0: slice(1, -1), -1: slice(None, -2)}[da]
        index[ax_b] = {1: slice(2, None), 0: slice(1, -1), -1: slice(None, -2)}[db]
        return tuple(index)

    s_pos = []
    s_neg = []
    for ax_a, ax_b in pairs:
        inv_c = 1.0 / (2.0 * hs[ax_a] * hs[ax_b])
        base = [slice(1, -1) if k in (ax_a, ax_b) else slice(None) for k in range(nax)]
        c = pair_index(base, 0, 0, ax_a, ax_b)
        pp = pair_index(base, 1, 1, ax_a, ax_b)
        mm = pair_index(base, -1, -1, ax_a, ax_b)
        pm = pair_index(base, 1, -1, ax_a, ax_b)
        mp = pair_index(base, -1, 1, ax_a, ax_b)
        p0 = pair_index(base, 1, 0, ax_a, ax_b)
        m0 = pair_index(base, -1, 0, ax_a, ax_b)
        zp = pair_index(base, 0, 1, ax_a, ax_b)
        zm = pair_index(base, 0, -1, ax_a, ax_b)
        arr = np.zeros_like(u)
        arr[c] = (2.0 * u[c] + u[pp] + u[mm] - u[p0] - u[m0] - u[zp] - u[zm]) * inv_c
        s_pos.append(arr)
        arr = np.zeros_like(u)
        arr[c] = (2.0 * u[c] + u[pm] + u[mp] - u[p0] - u[m0] - u[zp] - u[zm]) * inv_c
        s_neg.append(arr)

    for v in range(f.shape[0]):
        acc = 0.5 * diag[v, 0] * d2[0]
        for ax in range(1, nax):
            acc += 0.5 * diag[v, ax] * d2[ax]
        for p in range(len(pairs)):
            acc += np.maximum(cross[v, p], 0.0) * s_pos[p]
            acc += np.maximum(-cross[v, p], 0.0) * s_neg[p]
        for ax in range(nax):
            acc += np.maximum(drift[v, ax], 0.0) * fwd[ax]
            acc += np.minimum(drift[v, ax], 0.0) * bwd[ax]
        acc += f[v]
        cand = u + dt * acc
        if v == 0:
            unew[:] = cand
            amin[:] = 0
        else:
            better = cand < unew
            unew[better] = cand[better]
            amin[better] = v
