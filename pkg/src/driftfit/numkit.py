"""Dense linear-algebra primitives, keyed RNG streams, and analytic oracles.

Everything here is deterministic given explicit inputs; the RNG is a
counter-based Philox generator keyed by (seed, stream_id) so independent
streams can be drawn in any order with identical results.
"""

import numpy as np

__all__ = [
    "NotSquare",
    "NotPSD",
    "Unstable",
    "Singular",
    "DimensionMismatch",
    "NonFinite",
    "RngStream",
    "cholesky",
    "solve_lyapunov",
    "gaussian_score",
    "draw_standard_normal",
]


class NotSquare(ValueError):
    pass


class NotPSD(ValueError):
    pass


class Unstable(ValueError):
    pass


class Singular(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class RngStream:
    """Reproducible random stream keyed by (seed, stream_id).

    Distinct stream_ids give statistically independent sequences; the same
    key always replays the same draws. A stream is single-owner: do not
    share one instance across threads.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        bg = np.random.Philox(key=(np.uint64(self.seed), np.uint64(self.stream_id)))
        self.gen = np.random.Generator(bg)

    def child(self, offset):
        """Derive an independent stream; offsets must be unique per parent."""
        mix = (self.stream_id * 0x9E3779B97F4A7C15 + int(offset) + 1) & 0xFFFFFFFFFFFFFFFF
        return RngStream(self.seed, mix)

    def standard_normal(self, shape):
        return self.gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def rademacher(self, shape):
        return self.gen.integers(0, 2, shape).astype(float) * 2.0 - 1.0


def draw_standard_normal(rng, n):
    """Draw n iid standard normal values from the stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal(n)


def _check_square(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {m.shape}")
    return m


def cholesky(m, sym_tol=1e-10, pivot_tol=1e-8):
    """Lower Cholesky factor of a symmetric PSD matrix.

    Pivots in [-pivot_tol, 0] are clamped to zero so that matrices sitting
    on the PSD boundary (e.g. G @ G.T round-trips) factor cleanly; a pivot
    below -pivot_tol raises NotPSD.
    """
    m = _check_square(m)
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol * scale:
        raise NotPSD("matrix is not symmetric")
    d = m.shape[0]
    lower = np.zeros((d, d))
    for j in range(d):
        pivot = m[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot < -pivot_tol:
            raise NotPSD(f"negative pivot {pivot:g} at index {j}")
        pivot = max(pivot, 0.0)
        lower[j, j] = np.sqrt(pivot)
        if lower[j, j] > 0.0:
            lower[j + 1 :, j] = (m[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def solve_lyapunov(omega, d_mat):
    """Solve Omega @ S + S @ Omega.T = 2 * D for the stationary covariance S.

    Uses the dense Kronecker vectorization, which is plenty for the d <= 10
    systems this library targets. Raises Unstable unless every eigenvalue of
    omega has positive real part (otherwise no stationary covariance exists).
    """
    omega = _check_square(omega)
    d_mat = _check_square(d_mat)
    if omega.shape != d_mat.shape:
        raise DimensionMismatch("omega and d_mat must share shape")
    eigs = np.linalg.eigvals(omega)
    if np.min(eigs.real) <= 0.0:
        raise Unstable(f"omega has eigenvalue with real part {np.min(eigs.real):g}")
    d = omega.shape[0]
    eye = np.eye(d)
    # row-major vec: vec(A X B) = (A kron B.T) vec(X)
    system = np.kron(omega, eye) + np.kron(eye, omega)
    sigma = np.linalg.solve(system, 2.0 * d_mat.reshape(-1)).reshape(d, d)
    return 0.5 * (sigma + sigma.T)


def gaussian_score(x, mean, sigma):
    """Score of a Gaussian: -Sigma^{-1} (x - mean)."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    sigma = _check_square(sigma)
    if x.shape[-1] != mean.shape[-1] or x.shape[-1] != sigma.shape[0]:
        raise DimensionMismatch("x, mean, sigma dimensions disagree")
    try:
        sol = np.linalg.solve(sigma, (x - mean).T)
    except np.linalg.LinAlgError as exc:
        raise Singular(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise Singular("sigma is numerically singular")
    return -sol.T
