"""Synthetic Gaussian-mixture targets with exact densities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import logsumexp

from .errors import ConfigError

DTYPE = torch.float64


@dataclass(frozen=True)
class GaussianMixture:
    means: np.ndarray  # (c, d)
    covs: np.ndarray  # (c, d, d)
    weights: np.ndarray  # (c,)

    @classmethod
    def build(cls, means, covs=None, weights=None, stds=None) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        c, d = means.shape
        if covs is None:
            stds = np.ones(c) if stds is None else np.broadcast_to(np.asarray(stds, float), (c,))
            covs = np.stack([np.eye(d) * s**2 for s in stds])
        covs = np.asarray(covs, dtype=float).reshape(c, d, d)
        weights = np.ones(c) if weights is None else np.asarray(weights, dtype=float)
        if weights.shape != (c,) or (weights <= 0).any():
            raise ConfigError("mixture weights must be positive, one per component")
        for cov in covs:
            if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
                raise ConfigError("mixture covariances must be symmetric positive definite")
        return cls(means, covs, weights / weights.sum())

    @classmethod
    def gaussian(cls, mean, std=1.0) -> "GaussianMixture":
        return cls.build([np.atleast_1d(mean)], stds=[std])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        comps = []
        for mu, cov, w in zip(self.means, self.covs, self.weights):
            prec = np.linalg.inv(cov)
            diff = x - mu
            maha = np.einsum("ni,ij,nj->n", diff, prec, diff)
            _, logdet = np.linalg.slogdet(cov)
            comps.append(np.log(w) - 0.5 * (maha + logdet + self.dim * np.log(2 * np.pi)))
        return logsumexp(np.stack(comps), axis=0)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def sample(self, n: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.multinomial(torch.as_tensor(self.weights), n, replacement=True, generator=gen)
        z = torch.randn(n, self.dim, generator=gen, dtype=DTYPE)
        chol = torch.as_tensor(np.linalg.cholesky(self.covs), dtype=DTYPE)
        mu = torch.as_tensor(self.means, dtype=DTYPE)
        return mu[idx] + torch.einsum("nij,nj->ni", chol[idx], z)

    __call__ = sample

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "covs": self.covs.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls.build(d["means"], covs=d.get("covs"), weights=d.get("weights"), stds=d.get("stds"))


def mixture_of(mixtures, alphas) -> GaussianMixture:
    """Alpha-weighted mixture of mixtures (the union target)."""
    alphas = np.asarray(alphas, float) / np.sum(alphas)
    means = np.concatenate([m.means for m in mixtures])
    covs = np.concatenate([m.covs for m in mixtures])
    weights = np.concatenate([a * m.weights for a, m in zip(alphas, mixtures)])
    return GaussianMixture.build(means, covs=covs, weights=weights)


def gaussian_product(mixtures, alphas) -> GaussianMixture:
    """Normalised prod_i p_i^(alpha_i / sum alpha) for single-Gaussian factors.

    For single Gaussians with shared covariance this is again Gaussian; for
    general Gaussian factors the precision-weighted formula applies.
    """
    alphas = np.asarray(alphas, float) / np.sum(alphas)
    if any(len(m.weights) != 1 for m in mixtures):
        raise ConfigError("closed-form Gaussian product needs single-component factors")
    prec = sum(a * np.linalg.inv(m.covs[0]) for a, m in zip(alphas, mixtures))
    cov = np.linalg.inv(prec)
    mean = cov @ sum(a * np.linalg.inv(m.covs[0]) @ m.means[0] for a, m in zip(alphas, mixtures))
    return GaussianMixture.build([mean], covs=[cov])


def fit_mixture_weights(samples, components, iters: int = 500, tol: float = 1e-12) -> np.ndarray:
    """Maximum-likelihood weights of a mixture whose components are known (EM on weights only)."""
    x = np.asarray(samples, dtype=float)
    logl = np.stack([c.logpdf(x) for c in components], axis=1)
    logl -= logl.max(axis=1, keepdims=True)
    lik = np.exp(logl)
    w = np.full(len(components), 1.0 / len(components))
    for _ in range(iters):
        resp = lik * w
        resp /= resp.sum(axis=1, keepdims=True)
        new = resp.mean(axis=0)
        if np.abs(new - w).max() < tol:
            return new
        w = new
    return w
