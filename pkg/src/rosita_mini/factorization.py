"""SVD of the token-embedding matrix and rank truncation into two factors.

The decomposition is a one-sided Jacobi iteration: orthogonalize column
pairs of a working copy of W until the implicit Gram matrix is diagonal,
then read singular values off the column norms. Accurate and simple at
vocabulary sizes in the thousands; speed is not a goal here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

_MAX_SWEEPS = 60
_CONVERGENCE = 1e-12


class ConvergenceError(RuntimeError):
    """Jacobi sweeps exhausted before the off-diagonal mass target."""


@dataclass
class SVDResult:
    """Thin SVD W = U @ diag(sigma) @ V with sigma sorted nonincreasing."""

    U: np.ndarray      # (m, k), orthonormal columns
    sigma: np.ndarray  # (k,), nonincreasing, nonnegative
    V: np.ndarray      # (k, n), orthonormal rows

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall (m >= n) matrix; returns (U, sigma, Vt)."""
    m, n = a.shape
    work = a.copy()
    vt = np.eye(n)
    gram_norm = np.linalg.norm(work.T @ work)
    if gram_norm == 0.0:  # zero matrix: any orthonormal basis works
        u = np.eye(m)[:, :n]
        return u, np.zeros(n), vt

    for _ in range(_MAX_SWEEPS):
        off_mass = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                gamma = work[:, i] @ work[:, j]
                off_mass += 2.0 * gamma * gamma
                if gamma == 0.0:
                    continue
                alpha = work[:, i] @ work[:, i]
                beta = work[:, j] @ work[:, j]
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if t == 0.0:  # zeta overflowed the rotation; columns orthogonal enough
                    continue
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ci, cj = work[:, i].copy(), work[:, j].copy()
                work[:, i] = c * ci - s * cj
                work[:, j] = s * ci + c * cj
                ri, rj = vt[i, :].copy(), vt[j, :].copy()
                vt[i, :] = c * ri - s * rj
                vt[j, :] = s * ri + c * rj
        if np.sqrt(off_mass) <= _CONVERGENCE * gram_norm:
            break
    else:
        raise ConvergenceError(
            f"one-sided Jacobi did not converge in {_MAX_SWEEPS} sweeps; "
            f"relative off-diagonal mass {np.sqrt(off_mass) / gram_norm:.3e}"
        )

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    vt = vt[order, :]

    u = np.zeros((m, n))
    tiny = np.finfo(float).eps * max(m, n) * (sigma[0] if sigma.size else 0.0)
    rank = int((sigma > tiny).sum())
    u[:, :rank] = work[:, :rank] / sigma[:rank]
    sigma[rank:] = 0.0
    # complete zero-sigma columns to an orthonormal basis (Gram-Schmidt
    # against the standard basis); needed for rank-deficient inputs
    col = rank
    basis_idx = 0
    while col < n and basis_idx < m:
        cand = np.zeros(m)
        cand[basis_idx] = 1.0
        cand -= u[:, :col] @ (u[:, :col].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            u[:, col] = cand / norm
            col += 1
        basis_idx += 1
    return u, sigma, vt


def svd(w: np.ndarray) -> SVDResult:
    """Full thin SVD of a real matrix via one-sided Jacobi rotations.

    Sign convention: the first entry of each U column with magnitude above
    machine-level noise is made nonnegative, so factors are reproducible.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"svd: expected a matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("svd: input has non-finite entries")
    m, n = w.shape
    if m >= n:
        u, sigma, vt = _jacobi_tall(w)
    else:
        ut, sigma, vtt = _jacobi_tall(w.T)
        u, vt = vtt.T, ut.T

    # make the first significantly-nonzero entry of each U column nonnegative
    scale = np.abs(u).max(axis=0, initial=0.0)
    for c in range(u.shape[1]):
        nz = np.nonzero(np.abs(u[:, c]) > 1e-12 * max(scale[c], 1.0))[0]
        if nz.size and u[nz[0], c] < 0:
            u[:, c] = -u[:, c]
            vt[c, :] = -vt[c, :]
    return SVDResult(U=u, sigma=sigma, V=vt)


def truncate(result: SVDResult, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the r largest components; sqrt(sigma) absorbed into both factors.

    Returns (E_U, E_V) with E_U = U_r sqrt(S_r) and E_V = sqrt(S_r) V_r, so
    both factors sit on a comparable scale for later scoring and training.
    """
    k = result.sigma.shape[0]
    if not 1 <= r <= k:
        raise ValueError(f"truncate: rank {r} outside [1, {k}]")
    root = np.sqrt(result.sigma[:r])
    e_u = result.U[:, :r] * root
    e_v = root[:, None] * result.V[:r, :]
    return e_u, e_v


def reconstruction_error(w: np.ndarray, e_u: np.ndarray, e_v: np.ndarray) -> float:
    """Frobenius norm of W - E_U @ E_V."""
    w = np.asarray(w, dtype=np.float64)
    if e_u.shape[0] != w.shape[0] or e_v.shape[1] != w.shape[1] \
            or e_u.shape[1] != e_v.shape[0]:
        raise ShapeError(
            f"reconstruction_error: W {w.shape} vs factors {e_u.shape} x {e_v.shape}"
        )
    return float(np.linalg.norm(w - e_u @ e_v))


def factorize_model_embedding(model, rank: int) -> None:
    """Swap a model's dense token embedding for rank-truncated SVD factors.

    The kept singular values are stashed on the model so rank importance
    can use them until training invalidates the ordering.
    """
    from dataclasses import replace

    from .model import param_shapes
    from .tensor import Tensor

    if model.config.factorized:
        raise RuntimeError("embedding is already factorized")
    k = min(model.config.vocab_size, model.config.d_X)
    if not 1 <= rank <= k:
        raise ValueError(f"factorization rank {rank} outside [1, {k}]")
    dense = model.params["emb.W"]
    result = svd(dense.data)
    e_u, e_v = truncate(result, rank)

    new_config = replace(model.config, r=rank)
    params = dict(model.params)
    del params["emb.W"]
    params["emb.E_U"] = Tensor(e_u, requires_grad=dense.requires_grad)
    params["emb.E_V"] = Tensor(e_v, requires_grad=dense.requires_grad)
    model.config = new_config
    model.params = {name: params[name] for name in param_shapes(new_config)}
    model.sigma = result.sigma[:rank].copy()
    model.assert_shapes()
