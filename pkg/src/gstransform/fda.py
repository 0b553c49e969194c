"""Fisher discriminant projection, the supervised linear baseline.

Route: ridge-regularized within-class scatter, whitening by its inverse
Cholesky factor, then a cyclic Jacobi eigendecomposition of the whitened
between-class scatter.
"""
import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigError, ContractError, DegenerateInput
from .transform import TransformModel


def jacobi_eigh(A, tol=1e-12, max_sweeps=100):
    """Eigenvalues (descending) and eigenvectors (columns) of a symmetric matrix."""
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("jacobi_eigh needs a square matrix")
    n = len(A)
    A = (A + A.T) / 2.0
    V = np.eye(n)
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def scatter_matrices(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    mean = X.mean(axis=0)
    d = X.shape[1]
    S_w, S_b = np.zeros((d, d)), np.zeros((d, d))
    for c in np.unique(y):
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        D = Xc - mc
        S_w += D.T @ D
        diff = (mc - mean)[:, None]
        S_b += len(Xc) * (diff @ diff.T)
    return S_w, S_b, mean


def fda_fit(X, y, d_out=None, eigen_solver="jacobi"):
    """Return ``(projection, mean, eigenvalues)``; projection has shape ``(d_out, d_in)``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ContractError("FDA needs at least two classes")
    d = X.shape[1]
    limit = min(d, len(classes) - 1)
    d_out = limit if d_out is None else d_out
    if not 1 <= d_out <= limit:
        raise ContractError(f"d_out={d_out} must be in [1, {limit}] for {len(classes)} classes in {d} dims")
    S_w, S_b, mean = scatter_matrices(X, y)
    lam = 1e-6 * np.trace(S_w) / d
    if lam <= 0:
        raise DegenerateInput("within-class scatter is zero; FDA is undefined")
    try:
        L = np.linalg.cholesky(S_w + lam * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise DegenerateInput(f"within-class scatter is singular beyond regularization: {exc}") from exc
    Linv_Sb = solve_triangular(L, S_b, lower=True)
    M = solve_triangular(L, Linv_Sb.T, lower=True)
    M = (M + M.T) / 2.0
    if eigen_solver == "jacobi":
        w, U = jacobi_eigh(M)
    elif eigen_solver == "lapack":
        w, U = np.linalg.eigh(M)
        w, U = w[::-1], U[:, ::-1]
    else:
        raise ConfigError(f"unknown eigen_solver {eigen_solver!r}")
    A = solve_triangular(L.T, U[:, :d_out], lower=False)
    return A.T, mean, w


def fda_transform(samples, d_out=None, eigen_solver="jacobi"):
    """Projection matrix for a list of annotated samples."""
    from .taxonomy import samples_to_arrays

    X, y = samples_to_arrays(samples)
    return fda_fit(X, y, d_out, eigen_solver)[0]


def fda_model(X, y, d_out=None, eigen_solver="jacobi", taxonomy_hash=""):
    """Wrap an FDA projection as a :class:`TransformModel` (centering folded into the bias)."""
    P, mean, w = fda_fit(X, y, d_out, eigen_solver)
    return TransformModel(
        P, -P @ mean, np.linalg.pinv(P), mean,
        metadata={"method": "fda", "taxonomy_hash": taxonomy_hash, "eigenvalues": [float(v) for v in w[:len(P)]],
                  "n_train": int(len(X))},
    )


class FisherDiscriminantTransformer(TransformerMixin, BaseEstimator):
    def __init__(self, n_components=None, eigen_solver="jacobi"):
        self.n_components = n_components
        self.eigen_solver = eigen_solver

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        P, self.mean_, self.eigenvalues_ = fda_fit(X, y, self.n_components, self.eigen_solver)
        self.scalings_ = P.T
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "scalings_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.scalings_
