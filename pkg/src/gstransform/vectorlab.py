"""Dense vector helpers shared across the package.

Vectors are stored as float32 but every reduction accumulates in float64.
Nothing here normalizes implicitly.
"""
import numpy as np

from .errors import ContractError, DimensionMismatch, ZeroVectorError


def as_vector(values, name="vector"):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractError(f"{name} must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{name} contains non-finite values")
    return v


def as_matrix(values, name="matrix"):
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ContractError(f"{name} must be a non-empty 2-d array")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{name} contains non-finite values")
    return m


def _pair(a, b):
    a, b = as_vector(a, "a"), as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.size} vs {b.size}")
    return a, b


def euclidean_distance(a, b):
    a, b = _pair(a, b)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def cosine_similarity(a, b):
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_distance(a, b):
    return 1.0 - cosine_similarity(a, b)


def mat_vec(M, v):
    M, v = as_matrix(M, "M"), as_vector(v, "v")
    if M.shape[1] != v.size:
        raise DimensionMismatch(f"matrix has {M.shape[1]} columns, vector has {v.size}")
    return M @ v


def mean_vector(vs):
    if len(vs) == 0:
        raise ContractError("mean of an empty list")
    X = as_matrix(np.asarray(vs, dtype=np.float64).reshape(len(vs), -1), "vectors")
    return X.mean(axis=0)


def row_norms(X):
    return np.sqrt(np.einsum("ij,ij->i", X, X))


def pairwise_sq_distances(A, B=None):
    """Squared Euclidean distances between rows, clipped at zero."""
    B = A if B is None else B
    d = row_norms(A)[:, None] ** 2 + row_norms(B)[None, :] ** 2 - 2.0 * A @ B.T
    np.maximum(d, 0.0, out=d)
    return d


def cosine_distance_rows(A, B):
    """Row-wise cosine distance between two equally shaped matrices."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na, nb = row_norms(A), row_norms(B)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroVectorError("cosine distance undefined for a zero vector")
    sim = np.einsum("ij,ij->i", A, B) / (na * nb)
    return 1.0 - np.clip(sim, -1.0, 1.0)
