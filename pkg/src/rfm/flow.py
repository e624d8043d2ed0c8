"""Interpolant schedules, flow models, CFM pretraining and samplers."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import nn as rnn
from .errors import ConfigError, IntegrationError, SingularityError, TrainingError

log = logging.getLogger(__name__)

DTYPE = rnn.DTYPE
EPS_CLAMP = 1e-3

Sampler = Callable[[int, torch.Generator], torch.Tensor]


@dataclass(frozen=True)
class LinearSchedule:
    """kappa_t = 1 - t, omega_t = t."""

    name: str = "linear"

    def kappa(self, t):
        return 1.0 - t

    def omega(self, t):
        return t

    def dkappa(self, t):
        return -1.0 + 0.0 * t

    def domega(self, t):
        return 1.0 + 0.0 * t


@dataclass(frozen=True)
class CosineSchedule:
    """kappa_t = cos(pi t / 2), omega_t = sin(pi t / 2)."""

    name: str = "cosine"

    def kappa(self, t):
        return np.cos(0.5 * np.pi * t) if not torch.is_tensor(t) else torch.cos(0.5 * torch.pi * t)

    def omega(self, t):
        return np.sin(0.5 * np.pi * t) if not torch.is_tensor(t) else torch.sin(0.5 * torch.pi * t)

    def dkappa(self, t):
        if torch.is_tensor(t):
            return -0.5 * torch.pi * torch.sin(0.5 * torch.pi * t)
        return -0.5 * np.pi * np.sin(0.5 * np.pi * t)

    def domega(self, t):
        if torch.is_tensor(t):
            return 0.5 * torch.pi * torch.cos(0.5 * torch.pi * t)
        return 0.5 * np.pi * np.cos(0.5 * np.pi * t)


SCHEDULES = {"linear": LinearSchedule(), "cosine": CosineSchedule()}


def get_schedule(name: str):
    try:
        return SCHEDULES[name]
    except KeyError:
        raise ConfigError(f"unknown schedule {name!r}") from None


def drift_ratio(schedule, t):
    """omega_dot / omega."""
    return schedule.domega(t) / schedule.omega(t)


def memoryless_sigma(schedule, t):
    """Noise level that makes the fine-tuning SDE memoryless.

    sigma(t) = sqrt(2 kappa_t (omega_dot_t / omega_t * kappa_t - kappa_dot_t)).
    Singular at t = 0 for schedules with omega_0 = 0.
    """
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=DTYPE)
    if (tt <= 0).any() or (tt > 1).any():
        raise SingularityError(f"memoryless sigma needs t in (0, 1], got {t}")
    k = schedule.kappa(tt)
    var = 2.0 * k * (drift_ratio(schedule, tt) * k - schedule.dkappa(tt))
    out = torch.sqrt(torch.clamp(var, min=0.0))
    return float(out) if scalar else out


@dataclass
class FlowModel:
    """A velocity field ``u(x, t)`` on R^d plus its interpolant schedule.

    ``field`` is any module with signature ``field(x, t)``; in practice an
    :class:`rfm.nn.Mlp`.
    """

    dim: int
    field: nn.Module
    schedule: LinearSchedule = field(default_factory=LinearSchedule)

    def velocity(self, x: torch.Tensor, t) -> torch.Tensor:
        return self.field(x, t)

    __call__ = velocity

    def copy(self) -> "FlowModel":
        return FlowModel(self.dim, copy.deepcopy(self.field), self.schedule)

    def frozen(self) -> "FlowModel":
        out = self.copy()
        for p in out.field.parameters():
            p.requires_grad_(False)
        return out

    def digest(self) -> str:
        return rnn.params_digest(self.field)

    def record(self) -> dict:
        return {"kind": "flow", "dim": self.dim, "schedule": self.schedule.name,
                "net": rnn.net_record(self.field)}

    def save(self, path, **extra) -> str:
        return rnn.save_record(path, {**self.record(), **extra})

    @classmethod
    def from_record(cls, rec: dict) -> "FlowModel":
        if rec.get("kind") != "flow":
            raise ConfigError(f"record kind {rec.get('kind')!r} is not a flow model")
        net = rnn.net_from_record(rec["net"])
        if net.in_dim != rec["dim"] or net.out_dim != rec["dim"]:
            raise ConfigError("checkpoint dim inconsistent with its network widths")
        return cls(rec["dim"], net, get_schedule(rec["schedule"]))

    @classmethod
    def load(cls, path) -> "FlowModel":
        return cls.from_record(rnn.load_record(path))


def new_flow_model(dim: int, seed: int, hidden=(128, 128, 128), activation="silu",
                   schedule: str = "linear") -> FlowModel:
    net = rnn.build_mlp(dim, dim, seed, hidden=hidden, activation=activation)
    return FlowModel(dim, net, get_schedule(schedule))


def score_prefactor(schedule, t):
    k = schedule.kappa(t)
    return 1.0 / (k * (drift_ratio(schedule, t) * k - schedule.dkappa(t)))


def _check_score_time(t, eps_clamp):
    tt = torch.as_tensor(t, dtype=DTYPE)
    if (tt <= 0).any() or (tt > 1.0 - eps_clamp + 1e-12).any():
        raise SingularityError(
            f"score is singular outside (0, 1 - {eps_clamp}]; got t={t}")


def score_from_velocity(model: FlowModel, x: torch.Tensor, t, eps_clamp: float = EPS_CLAMP):
    """Marginal score of the flow's path at ``(x, t)`` from its velocity field."""
    _check_score_time(t, eps_clamp)
    sch = model.schedule
    u = model.velocity(x, t)
    tt = torch.as_tensor(t, dtype=DTYPE)
    if tt.ndim == 1:
        tt = tt.reshape(-1, 1)
    return score_prefactor(sch, tt) * (u - drift_ratio(sch, tt) * x)


# -- pretraining ---------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 256
    lr: float = 1e-3
    lr_final: float | None = None  # cosine decay target; None keeps lr constant
    log_every: int = 0
    late_fraction: float = 0.0  # share of each batch with t ~ Uniform(late_start, 1)
    late_start: float = 0.8


def standard_normal(dim: int) -> Sampler:
    def draw(n: int, gen: torch.Generator) -> torch.Tensor:
        return torch.randn(n, dim, generator=gen, dtype=DTYPE)
    return draw


def cfm_loss(model: FlowModel, x0, x1, t):
    sch = model.schedule
    tc = t.reshape(-1, 1)
    xt = sch.kappa(tc) * x0 + sch.omega(tc) * x1
    target = sch.dkappa(tc) * x0 + sch.domega(tc) * x1
    return ((model.velocity(xt, t) - target) ** 2).sum(-1).mean()


def pretrain_cfm(data_sampler: Sampler, dim: int, seed: int, train: TrainConfig | None = None,
                 schedule: str = "linear", hidden=(128, 128, 128), activation="silu",
                 model: FlowModel | None = None) -> FlowModel:
    """Conditional flow matching against ``data_sampler`` from N(0, I)."""
    train = train or TrainConfig()
    if train.steps < 0 or train.batch < 1:
        raise ConfigError("train steps must be >= 0 and batch >= 1")
    init_seed, data_seed, noise_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(3))
    gens = [torch.Generator().manual_seed(s) for s in (data_seed, noise_seed)]
    if model is None:
        model = new_flow_model(dim, init_seed, hidden, activation, schedule)
    opt = rnn.Adam(model.field.parameters(), lr=train.lr)
    for step in range(train.steps):
        if train.lr_final is not None:
            frac = step / max(train.steps - 1, 1)
            opt.lr = train.lr_final + 0.5 * (train.lr - train.lr_final) * (1 + np.cos(np.pi * frac))
        x1 = data_sampler(train.batch, gens[0])
        x0 = torch.randn(train.batch, dim, generator=gens[1], dtype=DTYPE)
        t = torch.rand(train.batch, generator=gens[1], dtype=DTYPE)
        n_late = int(round(train.late_fraction * train.batch))
        if n_late:
            t[:n_late] = train.late_start + (1.0 - train.late_start) * t[:n_late]
        loss = cfm_loss(model, x0, x1, t)
        if not torch.isfinite(loss):
            raise TrainingError(f"CFM loss diverged at step {step}")
        rnn.backward(model.field, loss)
        opt.step()
        if train.log_every and step % train.log_every == 0:
            log.info("cfm step %d loss %.5f", step, loss.item())
    return model


# -- samplers ------------------------------------------------------------------


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


@torch.no_grad()
def sample_ode(model: FlowModel, n: int, steps: int = 100, seed=0, x0=None) -> torch.Tensor:
    """Euler integration of dx = u(x, t) dt from X_0 ~ N(0, I) to t = 1."""
    if steps < 1:
        raise ConfigError("ODE sampler needs steps >= 1")
    x = x0.clone() if x0 is not None else torch.randn(n, model.dim, generator=_generator(seed), dtype=DTYPE)
    h = 1.0 / steps
    for i in range(steps):
        x = x + h * model.velocity(x, i * h)
        if not torch.isfinite(x).all():
            raise IntegrationError(f"non-finite ODE state at step {i} (t={i * h:.4f})")
    return x


def time_grid(h: float) -> np.ndarray:
    n = int(round(1.0 / h))
    if n < 2 or abs(n * h - 1.0) > 1e-9:
        raise ConfigError(f"step h={h} must divide 1 into at least two steps")
    return np.linspace(0.0, 1.0, n + 1)


@dataclass
class TrajectoryBatch:
    """States of ``m`` trajectories on the uniform grid ``times`` (0 to 1)."""

    h: float
    times: np.ndarray
    states: torch.Tensor  # (m, steps + 1, d)
    seed: int

    @property
    def m(self) -> int:
        return self.states.shape[0]

    @property
    def terminal(self) -> torch.Tensor:
        return self.states[:, -1]

    def to_csv(self, path) -> None:
        d = self.states.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj_id", "step", "t"] + [f"x_{j}" for j in range(d)])
            arr = self.states.numpy()
            for i in range(arr.shape[0]):
                for s, t in enumerate(self.times):
                    w.writerow([i, s, repr(float(t))] + [repr(float(v)) for v in arr[i, s]])


def memoryless_drift(model: FlowModel, x, t):
    """2 u(x, t) - (omega_dot / omega) x."""
    r = drift_ratio(model.schedule, torch.as_tensor(t, dtype=DTYPE))
    if r.ndim == 1:
        r = r.reshape(-1, 1)
    return 2.0 * model.velocity(x, t) - r * x


@torch.no_grad()
def sample_sde_memoryless(model: FlowModel, m: int, h: float = 0.01, seed=0,
                          noise: bool = True) -> TrajectoryBatch:
    """Euler-Maruyama under the memoryless noise schedule.

    The drift 2u - (omega_dot/omega) x and sigma(t) are singular at t = 0, so
    the first interval [0, h] is a deterministic Euler step with u; every
    later step evaluates the SDE at left endpoints t in {h, ..., 1 - h}, where
    both are finite.
    """
    times = time_grid(h)
    gen = _generator(seed)
    x = torch.randn(m, model.dim, generator=gen, dtype=DTYPE)
    states = torch.empty(m, len(times), model.dim, dtype=DTYPE)
    states[:, 0] = x
    x = x + h * model.velocity(x, 0.0)
    states[:, 1] = x
    for i in range(1, len(times) - 1):
        t = float(times[i])
        eps = torch.randn(m, model.dim, generator=gen, dtype=DTYPE)
        sig = memoryless_sigma(model.schedule, t) if noise else 0.0
        x = x + h * memoryless_drift(model, x, t) + (h ** 0.5) * sig * eps
        if not torch.isfinite(x).all():
            raise IntegrationError(f"non-finite SDE state at step {i} (t={t:.4f})")
        states[:, i + 1] = x
    seed_val = seed if isinstance(seed, int) else int(gen.initial_seed())
    return TrajectoryBatch(h, times, states, seed_val)


def load_trajectory_csv(path) -> TrajectoryBatch:
    rows = list(csv.DictReader(open(path)))
    m = 1 + max(int(r["traj_id"]) for r in rows)
    steps = 1 + max(int(r["step"]) for r in rows)
    d = len([k for k in rows[0] if k.startswith("x_")])
    states = torch.empty(m, steps, d, dtype=DTYPE)
    times = np.empty(steps)
    for r in rows:
        i, s = int(r["traj_id"]), int(r["step"])
        times[s] = float(r["t"])
        states[i, s] = torch.tensor([float(r[f"x_{j}"]) for j in range(d)])
    return TrajectoryBatch(float(times[1] - times[0]), times, states, -1)
