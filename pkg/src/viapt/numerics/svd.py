"""Singular value decomposition by one-sided (Hestenes) Jacobi rotations.

Suited to the small matrices this package works with (prompt blocks of a few
hundred entries). Each sweep visits every column pair once via a round-robin
schedule whose rounds contain only disjoint pairs, so a whole round rotates
in one vectorized step. Rotations are applied only where a pair is not yet
orthogonal, which keeps each batch element's result bitwise independent of
its batch neighbours.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError

SWEEP_CAP_FACTOR = 100  # cap = 100 * min(p, d) sweeps


def _round_robin(c: int):
    """Rounds of disjoint column pairs covering every pair exactly once."""
    cols = list(range(c))
    if c % 2:
        cols.append(-1)
    n = len(cols)
    rounds = []
    for _ in range(max(n - 1, 0)):
        js, ks = [], []
        for i in range(n // 2):
            a, b = cols[i], cols[n - 1 - i]
            if a != -1 and b != -1:
                js.append(min(a, b))
                ks.append(max(a, b))
        rounds.append((np.array(js), np.array(ks)))
        cols = [cols[0], cols[-1]] + cols[1:-1]
    return rounds


def _jacobi_orthogonalize(A: np.ndarray, tol: float, sweep_cap: int):
    """Rotate column pairs of A (B, n, c) until mutually orthogonal.

    Returns (A_rotated, V) with V (B, c, c) accumulating the rotations:
    A_in @ V == A_rotated.
    """
    B, _, c = A.shape
    V = np.broadcast_to(np.eye(c, dtype=A.dtype), (B, c, c)).copy()
    if c < 2:
        return A, V
    rounds = _round_robin(c)
    for _ in range(sweep_cap):
        rotated_any = False
        for J, K in rounds:
            aj = A[:, :, J]
            ak = A[:, :, K]
            alpha = (aj * aj).sum(axis=1)
            beta = (ak * ak).sum(axis=1)
            gamma = (aj * ak).sum(axis=1)
            need = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not need.any():
                continue
            rotated_any = True
            g = np.where(need, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)  # 45-degree rotation when norms tie
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            cs = np.where(need, cs, 1.0).astype(A.dtype)[:, None, :]
            sn = np.where(need, sn, 0.0).astype(A.dtype)[:, None, :]
            A[:, :, J] = cs * aj - sn * ak
            A[:, :, K] = sn * aj + cs * ak
            vj = V[:, :, J]
            vk = V[:, :, K]
            V[:, :, J] = cs * vj - sn * vk
            V[:, :, K] = sn * vj + cs * vk
        if not rotated_any:
            return A, V
    raise NumericError(
        f"one-sided Jacobi failed to converge within {sweep_cap} sweeps",
        iterations=sweep_cap,
    )


def _finalize(A: np.ndarray, V: np.ndarray):
    """Column norms -> singular values; sort descending; normalize columns."""
    S = np.linalg.norm(A, axis=1)
    order = np.argsort(-S, axis=-1, kind="stable")
    S = np.take_along_axis(S, order, axis=-1)
    A = np.take_along_axis(A, order[:, None, :], axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    safe = np.where(S > 0.0, S, 1.0)
    U = A / safe[:, None, :]
    U[np.broadcast_to((S == 0.0)[:, None, :], U.shape)] = 0.0
    return U, S, V


def _apply_sign_convention(U: np.ndarray, V: np.ndarray):
    """Flip paired (U, V) columns so the largest-magnitude V entry is positive."""
    idx = np.argmax(np.abs(V), axis=1)
    signs = np.sign(np.take_along_axis(V, idx[:, None, :], axis=1))[:, 0, :]
    signs = np.where(signs == 0.0, 1.0, signs)
    return U * signs[:, None, :], V * signs[:, None, :]


def jacobi_svd_batch(M: np.ndarray):
    """Thin SVD of a stack of matrices M (B, p, d).

    Returns (U (B,p,c), S (B,c), V (B,d,c)) with c = min(p, d), singular
    values sorted descending, signs fixed so each V column's
    largest-magnitude entry is positive. Exactly-zero singular values leave
    zero columns in the normalized factor (callers that need a full
    orthonormal frame extend them; see svd_topk).
    """
    _, p, d = M.shape
    tol = 30.0 * np.finfo(M.dtype).eps
    sweep_cap = SWEEP_CAP_FACTOR * max(min(p, d), 1)
    if d <= p:
        A, V = _jacobi_orthogonalize(M.astype(M.dtype, copy=True), tol, sweep_cap)
        U, S, V = _finalize(A, V)
    else:
        # fewer rows than columns: factor the transpose, then swap roles
        A, R = _jacobi_orthogonalize(np.ascontiguousarray(np.swapaxes(M, -1, -2)), tol, sweep_cap)
        V, S, U = _finalize(A, R)  # M^T = V S U^T  =>  M = U S V^T
    U, V = _apply_sign_convention(U, V)
    return U, S, V


def complete_orthonormal_columns(V: np.ndarray, m: int) -> np.ndarray:
    """Extend V (d, r) with deterministic orthonormal columns up to m.

    Candidates are standard basis vectors, Gram-Schmidt-projected off the
    accepted columns; only well-conditioned candidates (residual norm > 0.5)
    are kept, so the result is orthonormal to working precision.
    """
    d, r = V.shape
    if m <= r:
        return V[:, :m]
    cols = [V[:, i] for i in range(r)]
    for i in range(d):
        if len(cols) == m:
            break
        v = np.zeros(d, dtype=V.dtype)
        v[i] = 1.0
        for c in cols:
            v = v - (c @ v) * c
        nrm = np.linalg.norm(v)
        if nrm > 0.5:
            v = v / nrm
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            cols.append(v)
    if len(cols) != m:
        raise NumericError("orthonormal completion failed to find enough directions")
    return np.stack(cols, axis=1)


def svd_topk(M: np.ndarray, m: int):
    """Top-m singular triplet of a single matrix M (p, d).

    Returns (U (p,m), S (m,), V (d,m)) with V orthonormal (zero-singular-value
    directions are completed deterministically) and S non-negative descending.
    Requires 0 <= m <= min(p, d) and finite entries; raises NumericError
    (carrying the sweep count) if the rotation sweeps do not converge.
    """
    M = np.asarray(M)
    if M.ndim != 2:
        raise DimensionError(f"svd_topk expects a matrix, got shape {M.shape}")
    p, d = M.shape
    if not 0 <= m <= min(p, d):
        raise DimensionError(f"svd_topk: m={m} outside [0, min{p, d}]")
    if not np.isfinite(M).all():
        raise NumericError("svd_topk: input contains non-finite values")
    U, S, V = jacobi_svd_batch(M[None])
    U, S, V = U[0, :, :m].copy(), S[0, :m].copy(), V[0, :, :m].copy()
    dead = int((np.linalg.norm(V, axis=0) < 0.5).sum())
    if dead:
        V = complete_orthonormal_columns(V[:, : m - dead], m)
    return U, S, V
