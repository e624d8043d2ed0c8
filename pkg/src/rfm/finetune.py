"""Adjoint Matching: the entropy-regularised reward fine-tuning oracle.

One call to :func:`solve` approximately maximises
``gamma * E[g(X_1)] - KL(p^fine || p^base)`` (plus running rewards when the
surrogate carries them), so the fine-tuned terminal law is close to
``p^base_1 * exp(gamma * g)`` up to normalisation.

Sign convention (fixed globally): surrogates carry *reward* gradients, the
lean adjoint is seeded with ``-gamma * grad g(X_1)`` and accumulates
``-h * gamma * lambda_t * grad f_t(X_t)``, and the matching target is
``u_fine = u_base - (sigma^2 / 2) * a``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn as rnn
from .errors import NumericError
from .flow import FlowModel, TrajectoryBatch, drift_ratio, memoryless_drift, memoryless_sigma, sample_sde_memoryless
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class FineTuneConfig:
    steps: int = 20  # N, inner gradient steps
    m: int = 128  # trajectories per step
    h: float = 0.01
    gamma: float = 1.0
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        from .errors import ConfigError
        if self.steps < 0 or self.m < 1 or not 0 < self.h <= 1 or not self.gamma > 0:
            raise ConfigError(
                "fine-tune config needs steps >= 0, m >= 1, 0 < h <= 1 and gamma > 0")


@dataclass
class AdjointState:
    """Lean adjoint on the trajectory grid; index 0 (t = 0) is left at zero."""

    values: torch.Tensor  # (m, steps + 1, d)
    times: np.ndarray

    @property
    def terminal(self) -> torch.Tensor:
        return self.values[:, -1]


def _interior(traj: TrajectoryBatch):
    """States and times at t in {h, ..., 1 - h}, flattened to (m * (n - 1), ...)."""
    m, n1, d = traj.states.shape
    x = traj.states[:, 1:-1].reshape(-1, d)
    t = torch.as_tensor(traj.times[1:-1], dtype=rnn.DTYPE).repeat(m)
    return x, t


def drift_jacobians(base: FlowModel, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Exact Jacobians d b_j / d x_k of the memoryless drift, shape (B, d, d).

    Points are independent, so one reverse pass per output coordinate yields
    row j of every Jacobian at once.
    """
    d = x.shape[1]
    with torch.enable_grad():
        xg = x.detach().clone().requires_grad_(True)
        b = memoryless_drift(base, xg, t)
        rows = []
        for j in range(d):
            (g,) = torch.autograd.grad(b[:, j].sum(), xg, retain_graph=j < d - 1)
            rows.append(g)
    return torch.stack(rows, dim=1).detach()


@torch.no_grad()
def lean_adjoint_backward(base: FlowModel, traj: TrajectoryBatch, surrogate, gamma: float) -> AdjointState:
    """Integrate the lean adjoint from t = 1 back to t = h.

    a_1 = -gamma * grad g(X_1);
    a_{t-h} = a_t + h * a_t^T grad_x b(X_{t-h}, t-h) - h * gamma * lambda_{t-h} * grad f(X_{t-h}, t-h)
    with b the frozen base drift.  Evaluating at the left endpoint makes this
    the exact adjoint of the Euler scheme used by the sampler.
    """
    m, n1, d = traj.states.shape
    h = traj.h
    a = torch.zeros(m, n1, d, dtype=rnn.DTYPE)
    a[:, -1] = -gamma * surrogate.terminal(traj.terminal)
    x, t = _interior(traj)
    jac = drift_jacobians(base, x, t).reshape(m, n1 - 2, d, d)
    run = None
    if surrogate.running is not None:
        run = surrogate.running(x, t).reshape(m, n1 - 2, d)
        lam = torch.as_tensor([surrogate.lam(float(s)) for s in traj.times[1:-1]], dtype=rnn.DTYPE)
    for i in range(n1 - 2, 0, -1):
        nxt = a[:, i + 1]
        cur = nxt + h * torch.einsum("bj,bjk->bk", nxt, jac[:, i - 1])
        if run is not None:
            cur = cur - h * gamma * lam[i - 1] * run[:, i - 1]
        if not torch.isfinite(cur).all():
            bad = int((~torch.isfinite(cur)).any(-1).nonzero()[0])
            raise NumericError(f"non-finite adjoint in trajectory {bad} at step {i} (t={traj.times[i]:.3f})")
        a[:, i] = cur
    return AdjointState(a, traj.times)


def adjoint_matching_loss(finetuned: FlowModel, base: FlowModel, traj: TrajectoryBatch,
                          adj: AdjointState) -> torch.Tensor:
    """sum_t || (2 / sigma_t)(u_fine - u_base) + sigma_t a_t ||^2, averaged over trajectories.

    Sums over t in {h, ..., 1 - h}; t = 0 is excluded because sigma(0) is
    infinite.  Gradients flow only through ``finetuned``.
    """
    m, n1, d = traj.states.shape
    x, t = _interior(traj)
    sig = memoryless_sigma(finetuned.schedule, t).reshape(-1, 1)
    with torch.no_grad():
        u_base = base.velocity(x, t)
    u_fine = finetuned.velocity(x, t)
    a = adj.values[:, 1:-1].reshape(-1, d)
    resid = (2.0 / sig) * (u_fine - u_base) + sig * a
    return (resid ** 2).sum() / m


def solve(base: FlowModel, surrogate, config: FineTuneConfig, trace: list | None = None,
          tag: dict | None = None, carry: dict | None = None) -> FlowModel:
    """Run N Adjoint Matching steps starting from ``base``; return the fine-tuned model.

    ``trace`` (if given) receives one dict per inner step with the loss and
    wall time.  ``carry`` is a dict that keeps the Adam state between calls:
    an optimizer stored under ``"adam"`` is continued, and the final one is
    stored back.
    """
    fine = base.copy()
    for p in fine.field.parameters():
        p.requires_grad_(True)
    if config.steps == 0:
        return fine
    frozen = base.frozen()
    if carry is not None and carry.get("adam") is not None:
        opt = carry["adam"].rebind(fine.field.parameters())
        opt.lr = config.lr
    else:
        opt = rnn.Adam(fine.field.parameters(), lr=config.lr)
    t0 = time.perf_counter()
    for n in range(config.steps):
        traj = sample_sde_memoryless(fine, config.m, config.h, seed=derive_seed(config.seed, "traj", n))
        adj = lean_adjoint_backward(frozen, traj, surrogate, config.gamma)
        loss = adjoint_matching_loss(fine, frozen, traj, adj)
        if not torch.isfinite(loss):
            raise NumericError(f"adjoint matching loss is non-finite at inner step {n}")
        rnn.backward(fine.field, loss)
        opt.step()
        if trace is not None:
            trace.append({**(tag or {}), "inner_step": n, "loss": float(loss.detach()),
                          "seconds": time.perf_counter() - t0})
    if carry is not None:
        carry["adam"] = opt
    return fine
