"""Minimal five-point essential-matrix solver.

The nullspace of the 5x9 epipolar design matrix is spanned by four basis
matrices ``X, Y, Z, W``; with ``E = xX + yY + zZ + W`` the rank and trace
constraints give ten cubics in ``(x, y, z)``. Gauss-Jordan elimination on those
ten equations followed by a 3x3 polynomial determinant yields a degree-10
polynomial in ``z`` whose real roots are the solutions.
"""
from __future__ import annotations

from itertools import product

import numpy as np

from .errors import DegenerateSample, InvalidPolynomial
from .geometry import _LEVI, canonical_essential, essential_constraint_residuals

MAX_SOLUTIONS = 10
REAL_TOL = 1e-8
RANK_TOL = 1e-10

# Cubic monomials over (x, y, z, 1); variables are indexed 0..3.
# Column order matters: the first ten are eliminated, the rest are
# [xz^2, xz, x, yz^2, yz, y, z^3, z^2, z, 1].
_MONOMIALS = [
    (0, 0, 0), (1, 1, 1), (0, 0, 1), (0, 1, 1), (0, 0, 2), (0, 0, 3), (1, 1, 2), (1, 1, 3), (0, 1, 2), (0, 1, 3),
    (0, 2, 2), (0, 2, 3), (0, 3, 3), (1, 2, 2), (1, 2, 3), (1, 3, 3), (2, 2, 2), (2, 2, 3), (2, 3, 3), (3, 3, 3),
]
_REDUCE = np.zeros((64, 20))
for _flat, _abc in enumerate(product(range(4), repeat=3)):
    _REDUCE[_flat, _MONOMIALS.index(tuple(sorted(_abc)))] = 1.0


def _companion_roots(c):
    """Real roots of monic-normalizable polynomials, ascending rows ``c (B, n+1)``.

    Returns per-row arrays of sorted, Newton-polished real roots.
    """
    B, n1 = c.shape
    n = n1 - 1
    comp = np.zeros((B, n, n))
    comp[:, np.arange(1, n), np.arange(n - 1)] = 1.0
    comp[:, :, -1] = -c[:, :-1] / c[:, -1:]
    ev = np.linalg.eigvals(comp)
    keep = np.abs(ev.imag) <= REAL_TOL * (1.0 + np.abs(ev.real))
    out = []
    dc = c[:, 1:] * np.arange(1, n1)
    for b in range(B):
        r = np.sort(ev[b].real[keep[b]])
        if r.size:
            p = np.polynomial.polynomial.polyval(r, c[b])
            dp = np.polynomial.polynomial.polyval(r, dc[b])
            step = np.divide(p, dp, out=np.zeros_like(r), where=dp != 0)
            cand = r - step
            # skip a Newton step that makes things worse (near-multiple roots)
            better = np.abs(np.polynomial.polynomial.polyval(cand, c[b])) <= np.abs(p)
            r = np.where(better, cand, r)
        out.append(r)
    return out


def real_roots(coeffs) -> np.ndarray:
    """Real roots of the polynomial with ascending coefficients ``coeffs``.

    Roots are eigenvalues of the companion matrix, kept when
    ``|imag| <= 1e-8 (1 + |real|)`` and refined by one Newton step.
    """
    c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if c.size == 0:
        raise InvalidPolynomial("zero polynomial")
    if c.size == 1:
        raise InvalidPolynomial("polynomial must have degree >= 1")
    return _companion_roots(c[None])[0]


def _monomials(v):
    """Cubic monomials ``(R, 20)`` and their gradients ``(R, 20, 3)`` at ``v = (x, y, z)``."""
    R = v.shape[0]
    full = np.concatenate([v, np.ones((R, 1))], axis=1)
    mono = np.empty((R, 20))
    grad = np.zeros((R, 20, 3))
    for k, idx in enumerate(_MONOMIALS):
        f = [full[:, i] for i in idx]
        mono[:, k] = f[0] * f[1] * f[2]
        for pos, var in enumerate(idx):
            if var < 3:
                others = [f[q] for q in range(3) if q != pos]
                grad[:, k, var] += others[0] * others[1]
    return mono, grad


def _refine(A, v, iters=3):
    """Gauss-Newton on the ten cubic constraints, per root; never increases the residual."""
    for _ in range(iters):
        m, dm = _monomials(v)
        r = np.einsum("bem,bm->be", A, m)
        J = np.einsum("bem,bmd->bed", A, dm)
        JtJ = np.einsum("bed,bef->bdf", J, J)
        g = np.einsum("bed,be->bd", J, r)
        ok = np.abs(np.linalg.det(JtJ)) > 0
        step = np.zeros_like(v)
        if ok.any():
            step[ok] = np.linalg.solve(JtJ[ok], -g[ok][..., None])[..., 0]
        cand = v + step
        rc = np.einsum("bem,bm->be", A, _monomials(cand)[0])
        better = np.linalg.norm(rc, axis=1) < np.linalg.norm(r, axis=1)
        v = np.where(better[:, None], cand, v)
    return v


def _polymul(a, b):
    """Row-wise product of descending-coefficient polynomials ``(B, n) x (B, m)``."""
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[1]):
        out[:, i:i + b.shape[1]] += a[:, i:i + 1] * b
    return out


def _pad(a, n):
    return np.concatenate([np.zeros((a.shape[0], n - a.shape[1])), a], axis=1)


def _design(x1, x2):
    # row i: coefficients of vec(E) (row-major) in x2_i^T E x1_i
    return np.einsum("bni,bnj->bnij", x2, x1).reshape(x1.shape[0], x1.shape[1], 9)


def _constraint_matrix(N):
    """Ten cubic constraints ``(B, 10, 20)`` for nullspace bases ``N (B, 4, 3, 3)``."""
    B = N.shape[0]
    P = np.einsum("baij,bckj->bacik", N, N)  # N_a N_c^T
    tr = np.einsum("bacii->bac", P)
    T = np.einsum("bacij,bdjk->bacdik", P, N)
    C = 2.0 * T - tr[:, :, :, None, None, None] * N[:, None, None]
    D = np.einsum("ijk,bai,bcj,bdk->bacd", _LEVI, N[:, :, 0, :], N[:, :, 1, :], N[:, :, 2, :])
    eqs = np.concatenate([D.reshape(B, 64, 1), C.reshape(B, 64, 9)], axis=2)  # (B, 64, 10)
    return np.einsum("bfe,fm->bem", eqs, _REDUCE)


def _degree10(G):
    """Reduced rows ``G (B, 10, 10)`` -> 3x3 polynomial matrix and its determinant."""
    def parts(r):
        row = G[:, r]
        return row[:, 0:3], row[:, 3:6], row[:, 6:10]

    def minus_z(r_hi, r_lo):
        xh, yh, ch = parts(r_hi)
        xl, yl, cl = parts(r_lo)
        z = np.zeros((G.shape[0], 1))
        return (_pad(xh, 4) - np.concatenate([xl, z], 1),
                _pad(yh, 4) - np.concatenate([yl, z], 1),
                _pad(ch, 5) - np.concatenate([cl, z], 1))

    # rows: 4 x^2 z, 5 x^2, 6 y^2 z, 7 y^2, 8 xyz, 9 xy
    M = [minus_z(4, 5), minus_z(6, 7), minus_z(8, 9)]
    m = lambda i, j: M[i][j]  # noqa: E731

    def cof(i1, j1, i2, j2):
        a = _polymul(m(i1, j1), m(i2, j2))
        b = _polymul(m(i1, j2), m(i2, j1))
        n = max(a.shape[1], b.shape[1])
        return _pad(a, n) - _pad(b, n)

    terms = [_polymul(m(0, 0), cof(1, 1, 2, 2)),
             -_polymul(m(0, 1), cof(1, 0, 2, 2)),
             _polymul(m(0, 2), cof(1, 0, 2, 1))]
    det = sum(_pad(t, 11) for t in terms)
    return M, det


def solve_five_point_batch(x1, x2):
    """Solve many minimal problems at once.

    ``x1, x2`` have shape ``(B, 5, 3)``. Returns a list of ``B`` entries, each
    either a list of canonical essential matrices or ``None`` when the sample
    is degenerate.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    B = x1.shape[0]
    out = [None] * B
    _, S, Vt = np.linalg.svd(_design(x1, x2), full_matrices=True)
    good = np.flatnonzero(S[:, 4] > RANK_TOL * S[:, 0])
    if good.size == 0:
        return out
    N = Vt[good, 5:, :].reshape(-1, 4, 3, 3)
    A = _constraint_matrix(N)
    solvable = np.linalg.cond(A[:, :, :10]) < 1e14
    for b in good[~solvable]:
        out[b] = []
    good, N, A = good[solvable], N[solvable], A[solvable]
    if good.size == 0:
        return out
    G = np.linalg.solve(A[:, :, :10], A[:, :, 10:])
    M, det = _degree10(G)

    lead = np.abs(det[:, 0])
    regular = lead > 1e-12 * np.abs(det).max(axis=1)
    roots = [None] * len(good)
    if regular.any():
        for gi, r in zip(np.flatnonzero(regular), _companion_roots(det[regular, ::-1])):
            roots[gi] = r
    for gi in np.flatnonzero(~regular):
        try:
            roots[gi] = real_roots(det[gi, ::-1])
        except InvalidPolynomial:
            roots[gi] = np.zeros(0)

    owner = np.concatenate([np.full(len(r), gi) for gi, r in enumerate(roots)]).astype(int)
    z = np.concatenate(roots)
    for gi in range(len(good)):
        out[good[gi]] = []
    if z.size == 0:
        return out

    # 3x3 polynomial matrix evaluated at every root; (x, y, 1) spans its nullspace
    Mpad = np.stack([np.stack([_pad(M[i][j], 5) for j in range(3)], axis=1) for i in range(3)], axis=1)
    powers = z[:, None] ** np.arange(4, -1, -1)
    Bz = np.einsum("rijk,rk->rij", Mpad[owner], powers)
    crosses = np.stack([np.cross(Bz[:, 0], Bz[:, 1]), np.cross(Bz[:, 0], Bz[:, 2]),
                        np.cross(Bz[:, 1], Bz[:, 2])], axis=1)
    best = np.argmax(np.einsum("rci,rci->rc", crosses, crosses), axis=1)
    v = crosses[np.arange(len(z)), best]
    finite = np.abs(v[:, 2]) > 1e-300
    owner, z, v = owner[finite], z[finite], v[finite]
    xyz = np.column_stack([v[:, 0] / v[:, 2], v[:, 1] / v[:, 2], z])
    xyz = _refine(A[owner], xyz)

    Nown = N[owner]
    E = (xyz[:, 0, None, None] * Nown[:, 0] + xyz[:, 1, None, None] * Nown[:, 1]
         + xyz[:, 2, None, None] * Nown[:, 2] + Nown[:, 3])
    for gi, Ei in zip(owner, E):
        sols = out[good[gi]]
        if len(sols) >= MAX_SOLUTIONS or not np.all(np.isfinite(Ei)) or not np.any(Ei):
            continue
        Ei = canonical_essential(Ei)
        d, c = essential_constraint_residuals(Ei)
        if d <= 1e-8 and c <= 1e-8:
            sols.append(Ei)
    return out


def solve_five_point(x1, x2) -> list[np.ndarray]:
    """All real essential matrices consistent with five correspondences.

    Parameters
    ----------
    x1, x2 : array_like, shape (5, 3)
        Normalized points in the first and second view.

    Returns
    -------
    list of (3, 3) arrays, canonically normalized, at most ten.

    Raises
    ------
    DegenerateSample
        If the 5x9 design matrix is rank deficient.
    """
    x1 = np.asarray(x1, dtype=float).reshape(1, 5, 3)
    x2 = np.asarray(x2, dtype=float).reshape(1, 5, 3)
    res = solve_five_point_batch(x1, x2)[0]
    if res is None:
        raise DegenerateSample("five-point design matrix is rank deficient")
    return res
