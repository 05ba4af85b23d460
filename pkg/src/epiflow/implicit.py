"""Derivatives of the lower-level argmin with respect to the flow.

At a stationary point ``theta*`` of ``l(V, theta)`` the implicit function
theorem gives ``dtheta*/dV = -H^{-1} M`` with ``H = d2l/dtheta2`` and
``M = d2l/dV dtheta``. The truncated penalty is treated with its inlier set
frozen: only inliers contribute, each with the smooth ``z^2 / 2`` term.

Flow entries are ordered ``(u_0, v_0, u_1, v_1, ...)`` over the
correspondences, so column ``2 i + c`` belongs to component ``c`` of pair ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateGeometry, InputError
from .geometry import EssentialParams, NormalizedCorrespondenceSet, essential_derivatives, residual_derivatives

COND_LIMIT = 1e12


@dataclass(frozen=True)
class ImplicitGradient:
    matrix: np.ndarray  # (5, 2N)
    inlier_mask: np.ndarray
    condition: float

    def column(self, i: int, component: int) -> np.ndarray:
        return self.matrix[:, 2 * i + component]


def _mask(corr, params, delta, inlier_mask):
    if inlier_mask is not None:
        m = np.asarray(inlier_mask, dtype=bool)
        if m.shape != (len(corr),):
            raise InputError("inlier mask does not match the correspondence count")
        return m
    z, _ = residual_derivatives(corr, params)
    return np.abs(z) < delta


def hessian_theta(corr: NormalizedCorrespondenceSet, params: EssentialParams, delta: float = 1e-3,
                  inlier_mask=None) -> np.ndarray:
    """``d2l/dtheta2`` over the (frozen) inlier set."""
    m = _mask(corr, params, delta, inlier_mask)
    z, dz, d2z = residual_derivatives(corr.subset(m), params, second=True)
    H = dz.T @ dz + np.einsum("n,njk->jk", z, d2z)
    H = 0.5 * (H + H.T)
    _check(H)
    return H


def _check(H):
    if not np.all(np.isfinite(H)):
        raise DegenerateGeometry("Hessian is not finite")
    cond = float(np.linalg.cond(H))
    if not cond < COND_LIMIT:
        raise DegenerateGeometry(f"Hessian condition number {cond:.3g} exceeds {COND_LIMIT:g}")
    return cond


def mixed_hessian(corr: NormalizedCorrespondenceSet, params: EssentialParams, delta: float = 1e-3,
                  inlier_mask=None) -> np.ndarray:
    """``d2l/dV dtheta`` as a ``(5, 2N)`` matrix; non-inlier columns are zero."""
    m = _mask(corr, params, delta, inlier_mask)
    E, dE, _ = essential_derivatives(params)
    J = corr.flow_jacobian  # (3, 2)
    x1 = corr.x1[m]
    z, dz = residual_derivatives(corr.subset(m), params)
    dz_dv = (x1 @ E.T) @ J  # (n, 2)
    dzt_dv = np.einsum("kij,nj,ic->nkc", dE, x1, J)  # (n, 5, 2)
    blocks = dz[:, :, None] * dz_dv[:, None, :] + z[:, None, None] * dzt_dv
    out = np.zeros((5, len(corr), 2))
    out[:, m, :] = blocks.transpose(1, 0, 2)
    return out.reshape(5, 2 * len(corr))


def implicit_derivative(f_yy, f_xy) -> np.ndarray:
    """``dy*/dx = -f_yy^{-1} f_xy`` for a generic stationary point.

    ``f_yy`` is ``(m, m)`` (or scalar), ``f_xy`` is ``(m, n)`` (or scalar) with
    rows indexed by ``y``. Uses a symmetric indefinite factorization.
    """
    A = np.atleast_2d(np.asarray(f_yy, dtype=float))
    B = np.asarray(f_xy, dtype=float)
    scalar = B.ndim == 0 and A.shape == (1, 1)
    B = B.reshape(A.shape[0], -1)
    _check(A)
    X = scipy.linalg.solve(A, -B, assume_a="sym")
    return float(X[0, 0]) if scalar else X


def dtheta_dflow(corr: NormalizedCorrespondenceSet, params: EssentialParams, delta: float = 1e-3,
                 inlier_mask=None) -> ImplicitGradient:
    """Sensitivity of the stationary point to every flow entry."""
    m = _mask(corr, params, delta, inlier_mask)
    H = hessian_theta(corr, params, delta, m)
    M = mixed_hessian(corr, params, delta, m)
    cond = _check(H)
    X = np.zeros_like(M)
    cols = np.repeat(m, 2)
    if cols.any():
        X[:, cols] = scipy.linalg.solve(H, -M[:, cols], assume_a="sym")
    return ImplicitGradient(X, m, cond)


def total_gradient(dL_dV, dL_dtheta, g: ImplicitGradient) -> np.ndarray:
    """``dL/dV + (dL/dtheta)^T dtheta*/dV``."""
    dL_dV = np.asarray(dL_dV, dtype=float).ravel()
    dL_dtheta = np.asarray(dL_dtheta, dtype=float).ravel()
    if dL_dtheta.shape != (5,) or dL_dV.shape != (g.matrix.shape[1],):
        raise InputError(f"shape mismatch: dL/dV {dL_dV.shape}, dL/dtheta {dL_dtheta.shape}, "
                         f"gradient {g.matrix.shape}")
    return dL_dV + dL_dtheta @ g.matrix
