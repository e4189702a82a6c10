"""Deterministic dense linear algebra shared by the checkpoint converters.

All matrices are plain float64 numpy arrays in row-major layout. The three
entry points are a canonicalized symmetric eigendecomposition, an uncentered
second-moment accumulator, and the covariance-weighted low-rank factorization
both converters are built on. Everything here is a pure function: inputs are
never mutated and identical inputs give byte-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class EigenResult:
    """Eigenpairs of a symmetric matrix, eigenvalues sorted descending.

    Column i of ``eigenvectors`` pairs with ``eigenvalues[i]``. The basis is
    canonicalized: ties keep their pre-sort order and each column's
    largest-magnitude entry is positive, so repeated runs agree bitwise.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(m, *, symmetry_rtol: float = 1e-10) -> EigenResult:
    """Eigendecompose a symmetric matrix with deterministic ordering and signs.

    Raises ShapeError for non-square or asymmetric input and NumericError if
    the underlying solver fails to converge.
    """
    m = _as_matrix(m, "m")
    n, k = m.shape
    if n != k:
        raise ShapeError(f"expected a square matrix, got {n}x{k}")
    scale = np.abs(m).max()
    if scale > 0 and np.abs(m - m.T).max() > symmetry_rtol * scale:
        raise ShapeError("matrix is not symmetric within tolerance")
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from exc
    # eigh returns ascending order; flip with a stable sort so exact ties keep
    # their original index order.
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    # Fix each column's sign: largest-magnitude component positive (first such
    # index wins on magnitude ties).
    lead = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[lead, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    v = v * signs
    return EigenResult(eigenvalues=w, eigenvectors=np.ascontiguousarray(v))


@dataclass(frozen=True)
class CovarianceAccumulator:
    """Uncentered second-moment accumulator over fixed-dimension samples.

    ``second_moment`` is the running sum of x·x^T (no mean subtraction);
    divide by ``sample_count`` for the covariance estimate. Instances are
    immutable; ``accumulate`` returns a new value.
    """

    dim: int
    second_moment: np.ndarray
    sample_count: int

    @staticmethod
    def empty(dim: int) -> "CovarianceAccumulator":
        if dim < 1:
            raise ParameterError(f"dim must be >= 1, got {dim}")
        return CovarianceAccumulator(dim, np.zeros((dim, dim)), 0)

    def normalized(self) -> np.ndarray:
        """Second moment divided by the sample count (zero-safe)."""
        return self.second_moment / max(self.sample_count, 1)


def accumulate(acc: CovarianceAccumulator, batch) -> CovarianceAccumulator:
    """Fold a (samples x dim) batch into the accumulator."""
    batch = _as_matrix(batch, "batch")
    if batch.shape[1] != acc.dim:
        raise ShapeError(f"batch has {batch.shape[1]} columns, accumulator dim is {acc.dim}")
    update = batch.T @ batch
    update = (update + update.T) / 2.0  # keep the stored moment exactly symmetric
    return CovarianceAccumulator(
        dim=acc.dim,
        second_moment=acc.second_moment + update,
        sample_count=acc.sample_count + batch.shape[0],
    )


def pca_factor(w, sigma: CovarianceAccumulator, rank: int):
    """Factor w (D_out x r_in) as u·v with u the top-``rank`` eigenbasis of sigma.

    sigma weights the output rows of w: u holds the leading eigenvectors of the
    normalized second moment (D_out x rank, column-orthonormal) and v = u^T·w.
    Among all rank-``rank`` orthonormal bases this choice minimizes the
    sigma-weighted reconstruction error trace((w - u·v)^T Σ (w - u·v)) in
    expectation over the activations sigma was accumulated from.
    """
    w = _as_matrix(w, "w")
    d_out = w.shape[0]
    if sigma.dim != d_out:
        raise ShapeError(f"sigma dim {sigma.dim} does not match w rows {d_out}")
    if not 1 <= rank <= d_out:
        raise ParameterError(f"rank must be in [1, {d_out}], got {rank}")
    eig = sym_eig(sigma.normalized())
    u = eig.eigenvectors[:, :rank]
    v = u.T @ w
    return u, v


def weighted_error(w, u, v, sigma: CovarianceAccumulator) -> float:
    """Sigma-weighted squared reconstruction error trace((w-u·v)^T Σ (w-u·v))."""
    r = np.asarray(w) - np.asarray(u) @ np.asarray(v)
    return float(np.trace(r.T @ sigma.normalized() @ r))
