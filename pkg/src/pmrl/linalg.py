"""Small dense linear algebra: Gram matrices, Jacobi eigensolver, thin SVD and its backward pass.

Every routine accepts a single matrix or a stack of matrices along a leading
batch axis, so per-instance decompositions in a training batch run vectorised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFinite, NotConverged, NotSymmetric, ZeroColumn

EPS_NULL = 1e-10
EPS_DEG = 1e-8
ZERO_COLUMN_NORM = 1e-12
SIGN_TOL = 1e-12
MAX_SWEEPS = 100
MAX_EIG_DIM = 16
_JACOBI_TOL = 1e-15
# Gram eigenvalues below this fraction of the largest are round-off, not signal
# (|error| ~ eps * lambda_1), and are reported as exact zeros.
GRAM_FLOOR = 16.0 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors with ``z == u @ diag(sigma) @ v.T``.

    Shapes are ``u: (..., d, k)``, ``sigma: (..., k)``, ``v: (..., k, k)``.
    Columns are ordered by descending singular value and sign-canonicalised.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def __getitem__(self, idx) -> "SvdResult":
        return SvdResult(self.u[idx], self.sigma[idx], self.v[idx])

    @property
    def u1(self) -> np.ndarray:
        return self.u[..., :, 0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma[..., None, :]) @ np.swapaxes(self.v, -1, -2)


def as_matrix(m, *, batched: bool = False) -> np.ndarray:
    """Validate ``m`` as a finite float64 matrix (or stack of matrices)."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim < 2 or (not batched and arr.ndim != 2):
        raise DimensionMismatch(f"expected a matrix, got array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("matrix contains NaN or Inf")
    return arr


def normalize_columns(m) -> np.ndarray:
    """Scale every column to unit Euclidean norm."""
    arr = as_matrix(m, batched=True)
    norms = np.linalg.norm(arr, axis=-2, keepdims=True)
    if np.any(norms < ZERO_COLUMN_NORM):
        raise ZeroColumn("cannot normalise a column with norm below 1e-12")
    return arr / norms


def gram(z) -> np.ndarray:
    """Gram matrix ``z.T @ z`` of pairwise column inner products, exactly symmetric."""
    arr = as_matrix(z, batched=True)
    if arr.shape[-1] < 2:
        raise DimensionMismatch("gram needs at least two columns")
    g = np.swapaxes(arr, -1, -2) @ arr
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def _jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi on a stack of symmetric matrices; ``a`` is overwritten."""
    k = a.shape[-1]
    q = np.broadcast_to(np.eye(k), a.shape).copy()
    scale2 = np.sum(a * a, axis=(-2, -1))
    off_mask = ~np.eye(k, dtype=bool)
    for sweep in range(MAX_SWEEPS + 1):
        off2 = np.sum(a[:, off_mask] ** 2, axis=-1)
        if np.all(off2 <= _JACOBI_TOL**2 * scale2):
            return np.diagonal(a, axis1=-2, axis2=-1).copy(), q
        if sweep == MAX_SWEEPS:
            raise NotConverged(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")
        for p in range(k - 1):
            for r in range(p + 1, k):
                apq = a[:, p, r]
                active = apq != 0.0
                if not active.any():
                    continue
                with np.errstate(all="ignore"):
                    theta = (a[:, r, r] - a[:, p, p]) / (2.0 * apq)
                    sgn = np.where(theta >= 0.0, 1.0, -1.0)
                    t = sgn / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(active & np.isfinite(t), t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cc, ss = c[:, None], s[:, None]
                col_p, col_r = a[:, :, p].copy(), a[:, :, r].copy()
                a[:, :, p] = cc * col_p - ss * col_r
                a[:, :, r] = ss * col_p + cc * col_r
                row_p, row_r = a[:, p, :].copy(), a[:, r, :].copy()
                a[:, p, :] = cc * row_p - ss * row_r
                a[:, r, :] = ss * row_p + cc * row_r
                a[:, p, r] = np.where(active, 0.0, a[:, p, r])
                a[:, r, p] = a[:, p, r]
                qp, qr = q[:, :, p].copy(), q[:, :, r].copy()
                q[:, :, p] = cc * qp - ss * qr
                q[:, :, r] = ss * qp + cc * qr
    raise AssertionError("unreachable")


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix (or stack) by cyclic Jacobi.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    arr = as_matrix(s, batched=True)
    k = arr.shape[-1]
    if arr.shape[-2] != k:
        raise DimensionMismatch(f"expected square matrix, got {arr.shape[-2:]}")
    if k > MAX_EIG_DIM:
        raise DimensionMismatch(f"sym_eig supports k <= {MAX_EIG_DIM}, got {k}")
    if np.max(np.abs(arr - np.swapaxes(arr, -1, -2)), initial=0.0) > 1e-10:
        raise NotSymmetric("matrix is not symmetric within 1e-10")
    batch_shape = arr.shape[:-2]
    a = (0.5 * (arr + np.swapaxes(arr, -1, -2))).reshape(-1, k, k).copy()
    lam, q = _jacobi(a)
    order = np.argsort(-lam, axis=-1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=-1)
    q = np.take_along_axis(q, order[:, None, :], axis=-1)
    return lam.reshape(batch_shape + (k,)), q.reshape(batch_shape + (k, k))


def _complete_basis(u: np.ndarray, j: int) -> np.ndarray:
    """Unit vector orthogonal to ``u[:, :j]`` taken from the basis cycle e_j, e_{j+1}, ..."""
    d = u.shape[0]
    prev = u[:, :j]
    for t in range(d):
        cand = np.zeros(d)
        cand[(j + t) % d] = 1.0
        for _ in range(2):
            cand = cand - prev @ (prev.T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-3:
            return cand / norm
    raise AssertionError("no basis vector left to complete U")


def _canonical_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    col_sum = v.sum(axis=-2)
    big = np.abs(u) > SIGN_TOL
    first = np.argmax(big, axis=-2)
    lead = np.take_along_axis(u, first[..., None, :], axis=-2)[..., 0, :]
    flip = np.where(np.abs(col_sum) >= SIGN_TOL, col_sum < 0.0, lead < 0.0)
    sign = np.where(flip, -1.0, 1.0)
    return u * sign[..., None, :], v * sign[..., None, :]


def svd_thin(z) -> SvdResult:
    """Thin SVD of a tall matrix (or stack) through the Jacobi eigensolver of its Gram matrix."""
    arr = as_matrix(z, batched=True)
    d, k = arr.shape[-2:]
    if k < 2 or d < k:
        raise DimensionMismatch(f"svd_thin needs d >= k >= 2, got d={d}, k={k}")
    batch_shape = arr.shape[:-2]
    zb = arr.reshape(-1, d, k)
    lam, v = sym_eig(gram(zb))
    sigma = np.sqrt(np.where(lam > GRAM_FLOOR * lam[:, :1], lam, 0.0))

    live = sigma >= EPS_NULL
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (zb @ v) / np.where(live, sigma, 1.0)[:, None, :]
    u = np.where(live[:, None, :], u, 0.0)
    # Re-orthogonalise: Z v_j / sigma_j loses orthogonality as sigma_j shrinks.
    for j in range(k):
        if not live[:, j].any():
            continue
        col = u[:, :, j]
        for _ in range(2):
            if j:
                col = col - np.einsum("bdl,bl->bd", u[:, :, :j], np.einsum("bdl,bd->bl", u[:, :, :j], col))
        norms = np.linalg.norm(col, axis=-1, keepdims=True)
        col = col / np.where(norms > 0.0, norms, 1.0)
        u[:, :, j] = np.where(live[:, j, None], col, u[:, :, j])
    for b, j in zip(*np.nonzero(~live)):
        u[b, :, j] = _complete_basis(u[b], j)

    u, v = _canonical_signs(u, v)
    return SvdResult(
        u.reshape(batch_shape + (d, k)),
        sigma.reshape(batch_shape + (k,)),
        v.reshape(batch_shape + (k, k)),
    )


def _f_matrix(sigma: np.ndarray) -> np.ndarray:
    k = sigma.shape[-1]
    s2 = sigma * sigma
    diff = s2[..., None, :] - s2[..., :, None]  # [i, j] = s_j^2 - s_i^2
    i_gt_j = np.tril(np.ones((k, k), dtype=bool), -1)
    sign = np.where(diff > 0.0, 1.0, np.where(diff < 0.0, -1.0, np.where(i_gt_j, 1.0, -1.0)))
    denom = np.where(np.abs(diff) < EPS_DEG, sign * EPS_DEG, diff)
    f = 1.0 / denom
    f[..., np.arange(k), np.arange(k)] = 0.0
    return f


def svd_backward(svd: SvdResult, grad_u=None, grad_sigma=None, grad_v=None) -> np.ndarray:
    """Pull upstream gradients on ``(U, sigma, V)`` back to ``Z``.

    Any of the upstream gradients may be ``None`` (treated as zero). Near
    crossings the spectral-gap denominators are clamped at 1e-8 with their
    sign kept, and singular values below 1e-10 are dropped from the
    pseudo-inverse.
    """
    u, sigma, v = svd.u, svd.sigma, svd.v
    ut = np.swapaxes(u, -1, -2)
    vt = np.swapaxes(v, -1, -2)
    f = _f_matrix(sigma)
    inner = np.zeros(sigma.shape + (sigma.shape[-1],))
    out = np.zeros(u.shape)
    if grad_sigma is not None:
        gs = np.asarray(grad_sigma, dtype=np.float64)
        inner = inner + gs[..., :, None] * np.eye(sigma.shape[-1])
    if grad_v is not None:
        gv = np.asarray(grad_v, dtype=np.float64)
        vtg = vt @ gv
        inner = inner + sigma[..., :, None] * (f * (vtg - np.swapaxes(vtg, -1, -2)))
    if grad_u is not None:
        gu = np.asarray(grad_u, dtype=np.float64)
        utg = ut @ gu
        inner = inner + (f * (utg - np.swapaxes(utg, -1, -2))) * sigma[..., None, :]
        sigma_pinv = np.where(sigma >= EPS_NULL, 1.0 / np.where(sigma >= EPS_NULL, sigma, 1.0), 0.0)
        resid = gu - u @ utg
        out = out + (resid * sigma_pinv[..., None, :]) @ vt
    out = out + u @ inner @ vt
    if not np.all(np.isfinite(out)):
        raise NonFinite("svd_backward produced a non-finite gradient")
    return out


def effective_rank(sigma, threshold: float = 0.01):
    """Number of singular values above ``threshold * sigma[0]``; 0 for a zero spectrum."""
    s = np.asarray(sigma, dtype=np.float64)
    top = s[..., :1]
    count = np.sum(s > threshold * top, axis=-1)
    count = np.where(top[..., 0] > 0.0, count, 0)
    return int(count) if np.ndim(count) == 0 else count
