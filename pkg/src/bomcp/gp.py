"""Gaussian process regression with exact and k-nearest-neighbor inference.

The surrogate used for action branching is a GP over belief-action feature
vectors with a squared-exponential kernel, a constant prior mean, and
additive noise on training observations. Exact inference is O(n^3) in the
number of observations; :func:`knn_posterior` conditions each query only on
its k nearest observations, replacing the n-by-n solve with k-by-k solves.

Conventions:
  - training observations carry additive noise ``cfg.noise``; reported query
    variances are for the latent function (no query-side noise term),
  - with an empty observation set the prior ``(prior_mean, variance + noise)``
    is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree

# Diagonal jitter (relative to kernel variance) added when a Cholesky
# factorization fails; duplicate belief-action vectors are common in trees.
JITTER_SCALE = 1e-8

# The neighbor index is rebuilt in bulk every REBUILD_EVERY insertions; the
# un-indexed tail is scanned linearly.
REBUILD_EVERY = 64


@dataclass
class KernelParams:
    """Squared-exponential kernel parameters.

    ``length_scale`` may be a scalar (isotropic, the default behavior) or a
    per-dimension array.
    """

    variance: float = 1.0
    length_scale: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError(f"kernel variance must be > 0, got {self.variance}")
        ls = np.asarray(self.length_scale, dtype=float)
        if np.any(ls <= 0):
            raise ValueError("length scales must be > 0 elementwise")


@dataclass
class GPConfig:
    kernel: KernelParams = field(default_factory=KernelParams)
    prior_mean: float = 0.0
    noise: float = 0.0
    k_neighbors: int = 10

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError(f"noise variance must be >= 0, got {self.noise}")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")


def se_kernel(x1: np.ndarray, x2: np.ndarray, params: KernelParams) -> float:
    """variance * exp(-||x1 - x2||^2 / (2 length_scale^2)) for a single pair."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x1.shape} vs {x2.shape}")
    d = (x1 - x2) / params.length_scale
    return float(params.variance * np.exp(-0.5 * np.dot(d, d)))


def se_kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Kernel cross-covariance between row sets ``a`` (m,d) and ``b`` (n,d)."""
    a = np.atleast_2d(np.asarray(a, dtype=float)) / params.length_scale
    b = np.atleast_2d(np.asarray(b, dtype=float)) / params.length_scale
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return params.variance * np.exp(-0.5 * sq)


class ObservationSet:
    """Growable set of (feature vector, value) pairs with an exact k-NN index.

    The spatial index is a kd-tree over all but the most recent insertions;
    points added since the last rebuild are kept in a tail that is scanned
    linearly on each query, so neighbor queries are always exact. Single
    writer; concurrent reads of a frozen snapshot are fine.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._x: list[np.ndarray] = []
        self._y: list[float] = []
        self._tree: cKDTree | None = None
        self._tree_size = 0

    @classmethod
    def from_arrays(cls, x: np.ndarray, y: np.ndarray) -> "ObservationSet":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"|X| = {x.shape[0]} but |y| = {y.shape[0]}")
        obs = cls(x.shape[1] if x.size else 0)
        obs._x = [row for row in x]
        obs._y = list(map(float, y))
        obs._rebuild()
        return obs

    def __len__(self) -> int:
        return len(self._x)

    @property
    def x(self) -> np.ndarray:
        if not self._x:
            return np.empty((0, self.dim))
        return np.asarray(self._x)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self._y, dtype=float)

    def add(self, x: np.ndarray, y: float) -> None:
        x = np.asarray(x, dtype=float).ravel()
        if len(self._x) == 0 and self.dim == 0:
            self.dim = x.shape[0]
        if x.shape[0] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {x.shape[0]}")
        self._x.append(x)
        self._y.append(float(y))
        if len(self._x) - self._tree_size >= REBUILD_EVERY:
            self._rebuild()

    def _rebuild(self) -> None:
        if self._x:
            self._tree = cKDTree(np.asarray(self._x))
            self._tree_size = len(self._x)
        else:
            self._tree = None
            self._tree_size = 0

    def neighbors(self, query: np.ndarray, k: int) -> np.ndarray:
        """Indices of the min(k, n) Euclidean-nearest observations to ``query``.

        Ties are broken by insertion index so results are deterministic.
        """
        return self.neighbors_batch(np.atleast_2d(query), k)[0]

    def neighbors_batch(self, queries: np.ndarray, k: int) -> np.ndarray:
        """Exact nearest neighbors for each row of ``queries``; (m, min(k, n))."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        m = queries.shape[0]
        n = len(self._x)
        k = min(k, n)
        if k == 0:
            return np.empty((m, 0), dtype=int)
        blocks_d = []
        blocks_i = []
        if self._tree is not None:
            kk = min(k, self._tree_size)
            d, idx = self._tree.query(queries, k=kk)
            blocks_d.append(d.reshape(m, kk))
            blocks_i.append(idx.reshape(m, kk))
        if self._tree_size < n:
            tail = np.asarray(self._x[self._tree_size :])
            d = np.sqrt(
                np.maximum(
                    np.sum(queries * queries, axis=1)[:, None]
                    + np.sum(tail * tail, axis=1)[None, :]
                    - 2.0 * (queries @ tail.T),
                    0.0,
                )
            )
            blocks_d.append(d)
            blocks_i.append(np.broadcast_to(np.arange(self._tree_size, n), d.shape))
        cand_d = np.concatenate(blocks_d, axis=1)
        cand_i = np.concatenate(blocks_i, axis=1)
        out = np.empty((m, k), dtype=int)
        for row in range(m):
            order = np.lexsort((cand_i[row], cand_d[row]))[:k]
            out[row] = cand_i[row][order]
        return out


def add_observation(obs: ObservationSet, x: np.ndarray, y: float) -> ObservationSet:
    """Append one observation in place and return the set."""
    obs.add(x, y)
    return obs


def _solve_chol(kmat: np.ndarray, variance: float) -> np.ndarray:
    """Cholesky factor of ``kmat``, retrying once with diagonal jitter."""
    if not np.all(np.isfinite(kmat)):
        raise np.linalg.LinAlgError("covariance contains non-finite entries")
    try:
        return np.linalg.cholesky(kmat)
    except np.linalg.LinAlgError:
        jitter = JITTER_SCALE * variance
        return np.linalg.cholesky(kmat + jitter * np.eye(kmat.shape[0]))


def exact_posterior(
    obs: ObservationSet, queries: np.ndarray, cfg: GPConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and marginal variances at ``queries`` (m,d).

    Conditions on every observation. Raises ``numpy.linalg.LinAlgError`` if
    the (jittered) training covariance cannot be factorized.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    m = queries.shape[0]
    if len(obs) == 0:
        prior_var = cfg.kernel.variance + cfg.noise
        return (
            np.full(m, cfg.prior_mean),
            np.full(m, prior_var),
        )
    x, y = obs.x, obs.y
    kxx = se_kernel_matrix(x, x, cfg.kernel) + cfg.noise * np.eye(len(obs))
    chol = _solve_chol(kxx, cfg.kernel.variance)
    kqx = se_kernel_matrix(queries, x, cfg.kernel)
    alpha = solve_triangular(
        chol.T, solve_triangular(chol, y - cfg.prior_mean, lower=True), lower=False
    )
    means = cfg.prior_mean + kqx @ alpha
    v = solve_triangular(chol, kqx.T, lower=True)
    variances = cfg.kernel.variance - np.sum(v * v, axis=0)
    np.maximum(variances, 0.0, out=variances)
    return means, variances


def knn_posterior(
    obs: ObservationSet, query: np.ndarray, cfg: GPConfig
) -> tuple[float, float]:
    """Posterior (mean, variance) at one query from its k nearest observations.

    With ``k_neighbors >= len(obs)`` this equals :func:`exact_posterior`.
    """
    means, variances = knn_posterior_batch(obs, np.atleast_2d(query), cfg)
    return float(means[0]), float(variances[0])


def knn_posterior_batch(
    obs: ObservationSet, queries: np.ndarray, cfg: GPConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized k-NN posterior over ``queries`` (m,d).

    Each query is conditioned on its own neighbor set; the per-query k-by-k
    factorizations are batched. Neighbor indices are sorted so that k = n
    reproduces the exact posterior's arithmetic.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    m = queries.shape[0]
    n = len(obs)
    if n == 0:
        prior_var = cfg.kernel.variance + cfg.noise
        return np.full(m, cfg.prior_mean), np.full(m, prior_var)
    k = min(cfg.k_neighbors, n)
    if k == n:
        # Every query conditions on the full set; share one factorization.
        return exact_posterior(obs, queries, cfg)

    idx = np.sort(obs.neighbors_batch(queries, k), axis=1)
    x, y = obs.x, obs.y

    xs = x[idx]  # (m, k, d)
    ys = y[idx]  # (m, k)
    diff = xs[:, :, None, :] - xs[:, None, :, :]
    ls = np.asarray(cfg.kernel.length_scale, dtype=float)
    diff = diff / ls
    kxx = cfg.kernel.variance * np.exp(-0.5 * np.sum(diff * diff, axis=-1))
    kxx += cfg.noise * np.eye(k)
    try:
        chol = np.linalg.cholesky(kxx)
    except np.linalg.LinAlgError:
        kxx += JITTER_SCALE * cfg.kernel.variance * np.eye(k)
        chol = np.linalg.cholesky(kxx)

    dq = (xs - queries[:, None, :]) / ls
    kqx = cfg.kernel.variance * np.exp(-0.5 * np.sum(dq * dq, axis=-1))  # (m, k)

    resid = ys - cfg.prior_mean
    alpha = np.linalg.solve(
        np.transpose(chol, (0, 2, 1)), np.linalg.solve(chol, resid[:, :, None])
    )
    means = cfg.prior_mean + np.sum(kqx * alpha[:, :, 0], axis=1)
    v = np.linalg.solve(chol, kqx[:, :, None])
    variances = cfg.kernel.variance - np.sum(v[:, :, 0] ** 2, axis=1)
    np.maximum(variances, 0.0, out=variances)
    return means, variances
