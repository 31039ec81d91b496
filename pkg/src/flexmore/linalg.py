"""Dense matrix helpers and a one-sided Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is written out by
hand (Hestenes one-sided Jacobi) so results are deterministic and do not
depend on which LAPACK build numpy links against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60


def as_matrix(a, *, name: str = "matrix") -> np.ndarray:
    """Coerce *a* to a finite 2-D float64 array (copying only when needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with ``k = min(rows, cols)``."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def k(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _complete_basis(u: np.ndarray, good: np.ndarray) -> None:
    """Replace columns of *u* not flagged in *good* by an orthonormal completion.

    Candidates are the standard basis vectors in index order, so the result
    is deterministic.
    """
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    candidate = 0
    for j in range(u.shape[1]):
        if good[j]:
            continue
        while candidate < m:
            e = np.zeros(m)
            e[candidate] = 1.0
            candidate += 1
            # two passes of modified Gram-Schmidt
            for _ in range(2):
                for q in basis:
                    e -= (q @ e) * q
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                e /= norm
                u[:, j] = e
                basis.append(e)
                break
        else:  # pragma: no cover - m >= k always leaves room
            raise NumericalError("could not complete orthonormal basis")


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on the columns of a tall (rows >= cols) matrix."""
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    fro2 = float(np.sum(a * a))
    # columns whose squared norm is below this are treated as numerically zero
    negligible = fro2 * 1e-32
    residual = 0.0
    for _ in range(MAX_SWEEPS):
        residual = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp = w[:, p]
                wq = w[:, q]
                alpha = float(wp @ wp)
                beta = float(wq @ wq)
                gamma = float(wp @ wq)
                if alpha <= negligible or beta <= negligible:
                    continue
                off = abs(gamma) / np.sqrt(alpha * beta)
                if off > residual:
                    residual = off
                if off < JACOBI_TOL:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * wp - s * wq
                new_q = s * wp + c * wq
                w[:, p] = new_p
                w[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if residual < JACOBI_TOL:
            break
    else:
        raise NumericalError(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )

    sigma = np.sqrt(np.sum(w * w, axis=0))
    smax = float(sigma.max()) if n else 0.0
    good = sigma > smax * 1e-13 * max(m, n)
    u = np.zeros((m, n))
    u[:, good] = w[:, good] / sigma[good]
    if not np.all(good):
        _complete_basis(u, good)
    return u, sigma, v


def svd(a) -> SvdResult:
    """Thin SVD with descending singular values and a fixed sign convention.

    Each column of ``u`` is flipped so its largest-magnitude entry is
    non-negative; the matching row of ``vt`` is flipped with it.
    """
    a = as_matrix(a)
    rows, cols = a.shape
    if rows >= cols:
        u, sigma, v = _jacobi_tall(a)
    else:
        v, sigma, u = _jacobi_tall(a.T)

    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    vt = v[:, order].T.copy()

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    u = u * signs
    vt = vt * signs[:, None]
    return SvdResult(u=u, sigma=sigma, vt=vt)


def truncate_svd(s: SvdResult, r: int) -> SvdResult:
    """Keep the leading *r* singular triplets."""
    if not isinstance(r, (int, np.integer)) or isinstance(r, bool):
        raise ShapeError(f"rank must be an integer, got {r!r}")
    if r < 1 or r > s.k:
        raise ShapeError(f"rank {r} outside [1, {s.k}]")
    return SvdResult(u=s.u[:, :r].copy(), sigma=s.sigma[:r].copy(), vt=s.vt[:r, :].copy())


def tail_energy(s: SvdResult, r: int) -> float:
    """Frobenius error of the best rank-*r* approximation, from the spectrum."""
    return float(np.sqrt(np.sum(s.sigma[r:] ** 2)))
