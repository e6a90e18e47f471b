"""Gaussian-process regression over multi-hot concept-set encodings."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .catalog import Catalog, UnknownConceptError

JITTER_START = 1e-10
JITTER_MAX = 1e-4
NOISE_GRID = (0.01, 0.05, 0.1)


class GPFitError(np.linalg.LinAlgError):
    """The kernel matrix could not be factorized even with maximal jitter."""


class KernelFamily(str, enum.Enum):
    DOT = "dot"  # DotProduct + White
    RBF = "rbf"  # RBF + White


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily = KernelFamily.DOT
    noise_variance: float = 0.05
    lengthscale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", KernelFamily(self.family))
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Noise-free covariance between the rows of A and B."""
        if self.family is KernelFamily.DOT:
            return A @ B.T
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
        return np.exp(-0.5 * np.maximum(sq, 0.0) / self.lengthscale**2)


def encode(concepts: Iterable[str], catalog: Catalog) -> np.ndarray:
    """0/1 vector over the catalog's canonical id order."""
    index = {cid: i for i, cid in enumerate(catalog.ids)}
    x = np.zeros(len(index))
    for cid in set(concepts):
        if cid not in index:
            raise UnknownConceptError(cid)
        x[index[cid]] = 1.0
    return x


def encode_many(sets: Sequence[Iterable[str]], catalog: Catalog) -> np.ndarray:
    if not sets:
        return np.zeros((0, len(catalog)))
    return np.vstack([encode(s, catalog) for s in sets])


def jitter_cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of K, adding jitter 1e-10, 1e-9, ... 1e-4 on failure."""
    n = K.shape[0]
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GPFitError(f"factorization failed with jitter up to {JITTER_MAX:g}")


@dataclass(frozen=True)
class GPModel:
    X: np.ndarray
    y: np.ndarray
    kernel: KernelSpec
    L: np.ndarray  # lower factor of K(X, X) + noise * I (+ jitter)
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            return 0.0
        return float(
            -0.5 * self.y @ self.alpha - np.log(np.diag(self.L)).sum() - 0.5 * self.n * np.log(2 * np.pi)
        )

    def summary(self) -> dict:
        return {
            "n": self.n,
            "kernel": self.kernel.family.value,
            "noise_variance": self.kernel.noise_variance,
            "jitter": self.jitter,
        }


def _contradictory_duplicates(X: np.ndarray, y: np.ndarray) -> bool:
    seen: dict[bytes, float] = {}
    for row, target in zip(X, y):
        key = row.tobytes()
        if key in seen and seen[key] != target:
            return True
        seen.setdefault(key, target)
    return False


def fit(X: np.ndarray, y: np.ndarray, kernel: KernelSpec = KernelSpec(), noise_grid: Sequence[float] | None = None) -> GPModel:
    """Factorize K + noise*I once; optionally pick the noise level by marginal likelihood."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be n x d with one target per row")
    if noise_grid:
        fits = [fit(X, y, KernelSpec(kernel.family, s, kernel.lengthscale)) for s in noise_grid]
        return max(fits, key=lambda g: g.log_marginal_likelihood())
    if kernel.noise_variance == 0 and _contradictory_duplicates(X, y):
        raise GPFitError("singular kernel: duplicate inputs with different targets and zero noise")
    K = kernel(X, X) + kernel.noise_variance * np.eye(X.shape[0])
    L, jitter = jitter_cholesky(K)
    alpha = cho_solve((L, True), y) if X.shape[0] else np.zeros(0)
    return GPModel(X, y, kernel, L, alpha, jitter)


def posterior(model: GPModel, Xstar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the latent function at the rows of Xstar."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.X.shape[1]:
        raise ValueError(f"query dimension {Xstar.shape[1]} != model dimension {model.X.shape[1]}")
    Kss = model.kernel(Xstar, Xstar)
    if model.n == 0:
        return np.zeros(Xstar.shape[0]), Kss
    Ks = model.kernel(model.X, Xstar)
    mean = Ks.T @ model.alpha
    V = solve_triangular(model.L, Ks, lower=True)
    cov = Kss - V.T @ V
    cov = 0.5 * (cov + cov.T)
    idx = np.diag_indices_from(cov)
    cov[idx] = np.maximum(cov[idx], 0.0)
    return mean, cov


def sample_posterior(model: GPModel, Xstar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One joint posterior draw at the rows of Xstar."""
    mean, cov = posterior(model, Xstar)
    if not np.any(cov):
        return mean.copy()
    try:
        L, _ = jitter_cholesky(cov)
    except GPFitError:
        vals, vecs = np.linalg.eigh(cov)
        L = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return mean + L @ rng.standard_normal(mean.shape[0])
