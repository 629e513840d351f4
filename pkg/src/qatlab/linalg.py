"""Singular value decomposition by one-sided Jacobi rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

JACOBI_TOL = 1e-12
MAX_SWEEPS = 80


@dataclass
class SvdResult:
    left: np.ndarray  # n x d, orthonormal columns
    singulars: np.ndarray  # d, nonincreasing
    right: np.ndarray  # d x m, orthonormal rows

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = len(self.singulars) if k is None else k
        return (self.left[:, :k] * self.singulars[:k]) @ self.right[:k]


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings that cover every (p, q) once per sweep, n/2 disjoint pairs per round."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns flagged bad with unit vectors orthogonal to the rest.

    Each new vector is the coordinate axis with the largest component outside
    the current span, re-orthogonalized twice.
    """
    n = U.shape[0]
    basis = U[:, good]
    out = U.copy()
    for j in np.flatnonzero(~good):
        resid = np.eye(n) - basis @ (basis.T @ np.eye(n))
        v = resid[:, int(np.argmax(np.einsum("ij,ij->j", resid, resid)))]
        for _ in range(2):
            v = v - basis @ (basis.T @ v)
            v = v / np.linalg.norm(v)
        basis = np.column_stack([basis, v])
        out[:, j] = v
    return out


def _jacobi_tall(A: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a matrix with rows >= cols. Returns (U, sigma, V) unsorted."""
    rows, cols = A.shape
    W = A.copy()
    V = np.eye(cols)
    rounds = _round_robin(cols)
    # columns below this squared norm cannot move the others beyond rounding; leave them be
    floor = (np.finfo(float).eps * np.sqrt(np.sum(A * A))) ** 2
    for _ in range(MAX_SWEEPS):
        worst = 0.0
        for p, q in rounds:
            a, b = W[:, p], W[:, q]
            alpha = np.einsum("ij,ij->j", a, a)
            beta = np.einsum("ij,ij->j", b, b)
            gamma = np.einsum("ij,ij->j", a, b)
            scale = np.sqrt(alpha * beta)
            live = (alpha > floor) & (beta > floor)
            ratio = np.zeros_like(gamma)
            ratio[live] = np.abs(gamma[live]) / scale[live]
            rot = ratio > tol
            if not rot.any():
                continue
            worst = max(worst, float(ratio.max()))
            p, q, a, b = p[rot], q[rot], a[:, rot], b[:, rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            big = np.abs(zeta) > 1e150
            z = np.where(big, 1.0, zeta)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(z) + np.sqrt(1.0 + z * z))
            t = np.where(big, 0.5 / np.where(big, zeta, 1.0), t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            W[:, p] = c * a - s * b
            W[:, q] = s * a + c * b
            va, vb = V[:, p], V[:, q]
            V[:, p] = c * va - s * vb
            V[:, q] = s * va + c * vb
        if worst <= tol:
            break
    else:
        raise np.linalg.LinAlgError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")
    sigma = np.sqrt(np.einsum("ij,ij->j", W, W))
    return W, sigma, V


def svd(M, tol: float = JACOBI_TOL) -> SvdResult:
    """Thin SVD ``M = U diag(s) Vt`` with ``d = min(n, m)`` components.

    Singular values come out nonincreasing (stable order on ties). Each left
    vector is sign-fixed so its largest-magnitude entry is nonnegative.
    """
    A = np.array(M.data if isinstance(M, Tensor) else M, dtype=np.float64)
    if A.ndim != 2 or min(A.shape) < 1:
        raise ValueError(f"svd expects a non-empty matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("svd: matrix has non-finite entries")

    transposed = A.shape[0] < A.shape[1]
    work = A.T if transposed else A
    W, sigma, V = _jacobi_tall(work, tol)

    order = np.argsort(-sigma, kind="stable")
    W, sigma, V = W[:, order], sigma[order], V[:, order]

    smax = sigma[0] if sigma.size else 0.0
    good = sigma > max(work.shape) * np.finfo(float).eps * smax
    if smax == 0.0:
        good[:] = False
    U = np.zeros_like(W)
    U[:, good] = W[:, good] / sigma[good]
    if not good.all():
        U = _complete_basis(U, good)

    if transposed:
        left, right = V, U.T
    else:
        left, right = U, V.T

    idx = np.argmax(np.abs(left), axis=0)
    flip = left[idx, np.arange(left.shape[1])] < 0
    left[:, flip] *= -1.0
    right[flip] *= -1.0
    return SvdResult(left=np.ascontiguousarray(left), singulars=sigma, right=np.ascontiguousarray(right))


def svd_of_product(L: np.ndarray, R: np.ndarray, tol: float = JACOBI_TOL) -> SvdResult:
    """SVD of ``L @ R`` (n x r times r x m) through QR of both thin factors.

    Only the r x r core goes through Jacobi, so the cost is independent of n, m.
    """
    L = np.asarray(L, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    r = L.shape[1]
    if r == 0 or r > min(L.shape[0], R.shape[1]):
        return svd(L @ R, tol)
    Ql, Rl = np.linalg.qr(L)
    Qr, Rr = np.linalg.qr(R.T)
    core = svd(Rl @ Rr.T, tol)
    left = Ql @ core.left
    right = core.right @ Qr.T
    idx = np.argmax(np.abs(left), axis=0)
    flip = left[idx, np.arange(left.shape[1])] < 0
    left[:, flip] *= -1.0
    right[flip] *= -1.0
    return SvdResult(left=left, singulars=core.singulars, right=right)


def frobenius(x: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(x))))
