"""Variational critics for reverse KL (f-GAN form) and W1 (gradient-penalised potential).

Orientation used throughout the package:

* reverse-kl critics estimate ``KL(p || q)`` with ``p`` the prior (or prior
  mixture) and ``q`` the current iterate, so at the optimum
  ``exp(phi - 1) = p / q``;
* w1 critics maximise ``E_p phi - E_q phi`` with ``p`` the current iterate
  and ``q`` the prior, so ``phi`` is high where the iterate has excess mass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import torch

from . import nn as rnn
from .errors import ConfigError, NumericError, StateError
from .records import write_rows
from .seeding import derive_seed

log = logging.getLogger(__name__)

KINDS = ("reverse-kl", "w1")
PHI_CLAMP = 20.0
PENALTIES = ("one-sided", "two-sided")

Sampler = Callable[[int, torch.Generator], torch.Tensor]
Source = Union[Sampler, torch.Tensor]


@dataclass
class CriticTrainConfig:
    steps: int = 300
    batch: int = 256
    lr: float = 5e-5
    gp: float = 10.0  # gradient-penalty weight, w1 only
    penalty: str = "one-sided"  # or "two-sided"

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr < 0 or self.gp < 0:
            raise ConfigError("critic config needs steps >= 0, batch >= 1, lr >= 0, gp >= 0")
        if self.penalty not in PENALTIES:
            raise ConfigError(f"unknown gradient penalty {self.penalty!r}; expected one of {PENALTIES}")


@dataclass
class CriticNet:
    net: rnn.Mlp
    kind: str
    optimizer: rnn.Adam | None = None
    steps_trained: int = 0
    clamped: int = field(default=0, repr=False)  # batches in which phi hit the clamp

    @property
    def dim(self) -> int:
        return self.net.in_dim

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)

    def ensure_optimizer(self, lr: float) -> rnn.Adam:
        if self.optimizer is None:
            self.optimizer = rnn.Adam(self.net.parameters(), lr=lr)
        self.optimizer.lr = lr
        return self.optimizer

    def record(self) -> dict:
        return {"kind": self.kind, "steps_trained": self.steps_trained, "net": rnn.net_record(self.net)}

    def save(self, path) -> str:
        return rnn.save_record(path, self.record())

    @classmethod
    def load(cls, path) -> "CriticNet":
        rec = rnn.load_record(path)
        return cls(rnn.net_from_record(rec["net"]), rec["kind"], steps_trained=rec["steps_trained"])


def new_critic(dim: int, kind: str, seed: int, hidden=(128, 128, 128), activation="silu") -> CriticNet:
    if kind not in KINDS:
        raise ConfigError(f"unknown critic kind {kind!r}; expected one of {KINDS}")
    net = rnn.build_mlp(dim, 1, seed, hidden=hidden, time_embed_dim=0, activation=activation)
    return CriticNet(net, kind)


def _draw(src: Source, n: int, gen: torch.Generator) -> torch.Tensor:
    if torch.is_tensor(src):
        idx = torch.randint(0, src.shape[0], (n,), generator=gen)
        return src[idx]
    return src(n, gen)


def _check_pair(p: torch.Tensor, q: torch.Tensor) -> None:
    if p.numel() == 0 or q.numel() == 0:
        raise ConfigError("critic objective needs non-empty sample sets")
    if p.shape[1] != q.shape[1]:
        raise ConfigError("critic sample sets differ in dimension")


def fgan_reverse_kl_objective(critic: CriticNet, samples_p, samples_q) -> torch.Tensor:
    """mean_p phi - mean_q exp(phi - 1); its supremum over phi is KL(p || q).

    phi is clamped at 20 inside the exponential; the critic counts batches
    where the clamp was active.
    """
    _check_pair(samples_p, samples_q)
    phi_q = critic(samples_q)
    if (phi_q > PHI_CLAMP).any():
        critic.clamped += 1
        log.warning("critic output exceeded %.0f; clamping inside exp", PHI_CLAMP)
    out = critic(samples_p).mean() - torch.exp(torch.clamp(phi_q, max=PHI_CLAMP) - 1.0).mean()
    if not torch.isfinite(out):
        raise NumericError("non-finite f-GAN objective")
    return out


def gradient_penalty(critic: CriticNet, samples_p, samples_q, gen: torch.Generator,
                     penalty: str = "one-sided") -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient penalty on uniform interpolates of paired samples.

    ``two-sided`` is mean (||grad phi|| - 1)^2; ``one-sided`` only penalises
    norms above 1, which leaves a flat critic optimal when p = q.  Returns the
    penalty and the per-interpolate gradient norms.
    """
    n = min(samples_p.shape[0], samples_q.shape[0])
    u = torch.rand(n, 1, generator=gen, dtype=rnn.DTYPE)
    xh = (u * samples_p[:n] + (1 - u) * samples_q[:n]).detach().requires_grad_(True)
    (g,) = torch.autograd.grad(critic(xh).sum(), xh, create_graph=True)
    norms = g.norm(dim=-1)
    excess = norms - 1.0
    if penalty == "one-sided":
        excess = torch.clamp(excess, min=0.0)
    return (excess ** 2).mean(), norms


def w1_critic_objective(critic: CriticNet, samples_p, samples_q, gp: float = 10.0,
                        gen: torch.Generator | None = None, penalty: str = "one-sided") -> torch.Tensor:
    """mean_p phi - mean_q phi - gp * (gradient penalty on interpolates)."""
    _check_pair(samples_p, samples_q)
    out = critic(samples_p).mean() - critic(samples_q).mean()
    if gp > 0:
        pen, _ = gradient_penalty(critic, samples_p, samples_q, gen or torch.Generator().manual_seed(0),
                                  penalty)
        out = out - gp * pen
    return out


def _train(critic: CriticNet, src_p: Source, src_q: Source, config: CriticTrainConfig, seed: int,
           objective, trace: list | None, tag: dict | None) -> CriticNet:
    if config.steps == 0:
        return critic
    opt = critic.ensure_optimizer(config.lr)
    gen = torch.Generator().manual_seed(derive_seed(seed, "critic", critic.steps_trained))
    for s in range(config.steps):
        p = _draw(src_p, config.batch, gen)
        q = _draw(src_q, config.batch, gen)
        obj = objective(critic, p, q, gen)
        rnn.backward(critic.net, -obj)
        opt.step()
        critic.steps_trained += 1
        if trace is not None:
            trace.append({**(tag or {}), "kind": critic.kind, "step": critic.steps_trained,
                          "objective": float(obj.detach())})
    return critic


def train_reverse_kl_critic(critic: CriticNet, sampler_p: Source, sampler_q: Source,
                            config: CriticTrainConfig, seed: int = 0, trace: list | None = None,
                            tag: dict | None = None) -> CriticNet:
    """Ascend the f-GAN objective for ``config.steps`` steps, in place.

    Optimizer moments persist on the critic, so repeated calls continue
    training the same critic.
    """
    if critic.kind != "reverse-kl":
        raise ConfigError("train_reverse_kl_critic needs a reverse-kl critic")
    return _train(critic, sampler_p, sampler_q, config, seed,
                  lambda c, p, q, g: fgan_reverse_kl_objective(c, p, q), trace, tag)


def train_w1_critic(critic: CriticNet, sampler_p: Source, sampler_q: Source,
                    config: CriticTrainConfig, seed: int = 0, trace: list | None = None,
                    tag: dict | None = None) -> CriticNet:
    if critic.kind != "w1":
        raise ConfigError("train_w1_critic needs a w1 critic")
    return _train(critic, sampler_p, sampler_q, config, seed,
                  lambda c, p, q, g: w1_critic_objective(c, p, q, config.gp, g, config.penalty), trace, tag)


def train_critic(critic: CriticNet, sampler_p: Source, sampler_q: Source, config: CriticTrainConfig,
                 seed: int = 0, trace: list | None = None, tag: dict | None = None) -> CriticNet:
    fn = train_reverse_kl_critic if critic.kind == "reverse-kl" else train_w1_critic
    return fn(critic, sampler_p, sampler_q, config, seed, trace, tag)


@torch.no_grad()
def estimate_objective(critic: CriticNet, samples_p, samples_q) -> float:
    """Objective value without the gradient penalty (a divergence estimate)."""
    if critic.kind == "reverse-kl":
        return float(fgan_reverse_kl_objective(critic, samples_p, samples_q))
    return float(critic(samples_p).mean() - critic(samples_q).mean())


def critic_gradient_field(critic: CriticNet, x: torch.Tensor) -> torch.Tensor:
    """-grad exp(phi - 1) for reverse-kl critics, -grad phi for w1 critics."""
    with torch.enable_grad():
        xg = x.detach().clone().requires_grad_(True)
        phi = critic(xg)
        val = torch.exp(torch.clamp(phi, max=PHI_CLAMP) - 1.0) if critic.kind == "reverse-kl" else phi
        (g,) = torch.autograd.grad(val.sum(), xg)
    return -g.detach()


def write_trace(path: str | Path, rows: list[dict]) -> None:
    write_rows(path, rows, ["k", "kind", "critic", "step", "objective"])
