"""The outer mirror-descent loop over flow models (reward-guided flow merging)."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import grid as G
from .critics import CriticNet, CriticTrainConfig, estimate_objective as critic_estimate, new_critic, train_critic
from .errors import ConfigError, RfmError, UnsupportedModeError
from .finetune import FineTuneConfig, solve
from .flow import FlowModel, sample_ode
from .operators import MODES, OperatorSpec, assemble_surrogate, mixture_sampler, zero_surrogate
from .records import append_row, write_rows
from .seeding import derive_seed

log = logging.getLogger(__name__)

GAMMA_SCHEDULES = ("constant", "decay")


@dataclass
class RfmConfig:
    K: int = 10
    gamma: float | list = 1.0  # constant, or one value per outer iteration
    gamma_schedule: str = "constant"  # "decay" gives gamma / k
    mode: str = "terminal"
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    critic: CriticTrainConfig | None = None
    critic_warmup_steps: int = 0  # extra steps for a freshly initialised critic
    critic_pool: int = 4096  # samples per critic pool
    critic_hidden: tuple = (128, 128, 128)
    sample_steps: int = 100  # ODE steps for sample pools and estimates
    eval_samples: int = 16384
    eval_backend: str | None = "grid"  # "grid", "critic" or None
    seed: int = 0
    plateau_tol: float | None = None  # stop when |dG| < tol for 3 iterations
    carry_optimizer: bool = False  # continue the fine-tuning Adam state across outer iterations

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gamma_schedule not in GAMMA_SCHEDULES:
            raise ConfigError(f"gamma_schedule must be one of {GAMMA_SCHEDULES}")
        if isinstance(self.gamma, (list, tuple)):
            if len(self.gamma) != self.K:
                raise ConfigError(f"gamma list has {len(self.gamma)} entries for K={self.K}")
            vals = list(self.gamma)
        else:
            vals = [self.gamma]
        if any(not float(v) > 0 for v in vals):
            raise ConfigError("every gamma_k must be positive")
        if self.eval_backend not in ("grid", "critic", None):
            raise ConfigError("eval_backend must be 'grid', 'critic' or None")

    def gamma_at(self, k: int) -> float:
        if isinstance(self.gamma, (list, tuple)):
            return float(self.gamma[k - 1])
        return float(self.gamma) / (k if self.gamma_schedule == "decay" else 1)


TRACE_COLUMNS = ["k", "reward_term", "total_G", "seconds", "checkpoint"]


@dataclass
class ObjectiveTrace:
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # inner Adjoint Matching steps
    critic_steps: list = field(default_factory=list)
    path: Path | None = None  # incremental CSV, if any

    def columns(self, n: int) -> list[str]:
        return TRACE_COLUMNS[:2] + [f"div_term_{i + 1}" for i in range(n)] + TRACE_COLUMNS[2:] + ["approximate"]

    def add(self, rec: dict, n: int) -> None:
        self.records.append(rec)
        if self.path is not None:
            append_row(self.path, rec, self.columns(n))

    def to_csv(self, path, n: int | None = None) -> None:
        if n is None:
            n = sum(1 for k in (self.records[0] if self.records else {}) if k.startswith("div_term_"))
        write_rows(path, self.records, self.columns(n))

    def write_losses(self, path) -> None:
        write_rows(path, self.losses, ["k", "inner_step", "loss", "seconds"])

    def digest(self) -> str:
        """sha256 over every record except wall-clock and path columns."""
        skip = {"seconds", "checkpoint"}
        rows = [[{k: v for k, v in r.items() if k not in skip} for r in part]
                for part in (self.records, self.losses, self.critic_steps)]
        text = json.dumps(rows, sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def total(self) -> list[float]:
        return [r["total_G"] for r in self.records]

    @property
    def divergence_sum(self) -> list[float]:
        return [sum(v for k, v in r.items() if k.startswith("div_term_")) for r in self.records]


# -- objective estimation ------------------------------------------------------


def _grid_for(dim: int):
    return G.default_grid(dim)


def estimate_objective(model: FlowModel, spec: OperatorSpec, n_samples: int = 16384,
                       backend: str = "grid", seed: int = 0, prior_grids: Sequence | None = None,
                       prior_samples: Sequence | None = None, sample_steps: int = 100,
                       samples: torch.Tensor | None = None) -> dict:
    """Reward expectation and per-prior divergence estimates of G at ``model``.

    The grid backend (d <= 2) compares Gaussian-smoothed histograms on a
    common kernel bandwidth; priors use ``prior_grids`` when exact grids are
    supplied, else their own samples.  The critic backend trains fresh
    variational estimators and flags the result as approximate.
    """
    d = model.dim
    if backend == "grid" and d > 2:
        raise UnsupportedModeError(f"grid objective backend supports d <= 2, got d={d}")
    if samples is None:
        samples = sample_ode(model, n_samples, sample_steps, seed=derive_seed(seed, "eval", "model"))
    x = samples.numpy()
    out = {"reward_term": 0.0, "approximate": backend != "grid"}
    if spec.reward is not None:
        out["reward_term"] = float(np.mean(spec.reward.value(x)))
    if prior_samples is None:
        prior_samples = [None] * spec.n
    prior_samples = [ps if ps is not None else sample_ode(p, n_samples, sample_steps,
                                                          seed=derive_seed(seed, "eval", "prior", i))
                     for i, (p, ps) in enumerate(zip(spec.priors, prior_samples))]
    divs = []
    if backend == "grid":
        bounds, res = _grid_for(d)
        bw = G.scott_bandwidth(x)
        pm = G.density_from_samples(x, bounds, res, bw)
        for i, kind in enumerate(spec.divergences):
            if prior_grids is not None and prior_grids[i] is not None:
                q = G.smooth(prior_grids[i], bw)
            else:
                q = G.density_from_samples(prior_samples[i].numpy(), bounds, res, bw)
            if kind == "w1" and d > 1:
                divs.append(_critic_divergence(kind, samples, prior_samples[i], seed, i))
                out["approximate"] = True
            else:
                divs.append(G.divergence(kind, pm, q))
    else:
        for i, kind in enumerate(spec.divergences):
            divs.append(_critic_divergence(kind, samples, prior_samples[i], seed, i))
    for i, v in enumerate(divs):
        out[f"div_term_{i + 1}"] = float(v)
    out["total_G"] = out["reward_term"] - float(sum(a * v for a, v in zip(spec.alphas, divs)))
    return out


def _critic_divergence(kind: str, model_x: torch.Tensor, prior_x: torch.Tensor, seed: int, i: int,
                       steps: int = 1500) -> float:
    cfg = CriticTrainConfig(steps=steps, batch=512, lr=1e-3)
    if kind == "w1":
        c = train_critic(new_critic(model_x.shape[1], "w1", derive_seed(seed, "est", i)),
                         model_x, prior_x, cfg, seed=derive_seed(seed, "est-train", i))
        return critic_estimate(c, model_x, prior_x)
    # forward-kl: KL(model || prior); reverse-kl: KL(prior || model)
    p, q = (model_x, prior_x) if kind == "forward-kl" else (prior_x, model_x)
    c = train_critic(new_critic(model_x.shape[1], "reverse-kl", derive_seed(seed, "est", i)),
                     p, q, cfg, seed=derive_seed(seed, "est-train", i))
    return max(0.0, critic_estimate(c, p, q))


# -- main loop -----------------------------------------------------------------


def _refresh_critics(critics: dict, spec: OperatorSpec, current: FlowModel, config: RfmConfig,
                     prior_pools: dict, k: int, trace: ObjectiveTrace, tag: str) -> None:
    cfg = config.critic or CriticTrainConfig()
    pool = sample_ode(current, config.critic_pool, config.sample_steps,
                      seed=derive_seed(config.seed, "pool", tag, k))
    jobs = []
    rkl = spec.indices("reverse-kl")
    if rkl and spec.union_mode == "mixture":
        jobs.append(("mixture", "reverse-kl"))
    elif rkl:
        jobs += [(i, "reverse-kl") for i in rkl]
    jobs += [(i, "w1") for i in spec.indices("w1")]
    for key, kind in jobs:
        c = critics.get(key)
        fresh = c is None
        if fresh:
            c = critics[key] = new_critic(spec.dim, kind, derive_seed(config.seed, "critic-init", tag, str(key)),
                                          hidden=config.critic_hidden)
        steps = cfg.steps + (config.critic_warmup_steps if fresh else 0)
        run_cfg = replace(cfg, steps=steps)
        # reverse-kl critics estimate KL(prior || iterate); w1 critics put the iterate first
        p, q = (prior_pools[key], pool) if kind == "reverse-kl" else (pool, prior_pools[key])
        train_critic(c, p, q, run_cfg, seed=derive_seed(config.seed, "critic", tag, str(key), k),
                     trace=trace.critic_steps, tag={"k": k, "critic": key})


def _prior_pools(spec: OperatorSpec, config: RfmConfig, tag: str) -> dict:
    pools = {}
    n = config.critic_pool
    rkl = spec.indices("reverse-kl")
    if rkl and spec.union_mode == "mixture":
        draw = mixture_sampler([spec.priors[i] for i in rkl], [spec.alphas[i] for i in rkl], config.sample_steps)
        pools["mixture"] = draw(n, torch.Generator().manual_seed(derive_seed(config.seed, "mixpool", tag)))
    elif rkl:
        for i in rkl:
            pools[i] = sample_ode(spec.priors[i], n, config.sample_steps, seed=derive_seed(config.seed, "ppool", tag, i))
    for i in spec.indices("w1"):
        pools[i] = sample_ode(spec.priors[i], n, config.sample_steps, seed=derive_seed(config.seed, "ppool", tag, i))
    return pools


def run(spec: OperatorSpec, config: RfmConfig, tag: str = "", out_dir: str | Path | None = None,
        init: FlowModel | None = None, critics: dict | None = None, prior_grids=None,
        zero: bool = False) -> tuple[FlowModel, ObjectiveTrace]:
    """K outer iterations of critic refresh, surrogate assembly and one fine-tuning solve.

    ``init`` overrides ``spec.priors[spec.init_index]``; ``zero`` replaces the
    surrogate with the zero field (a null run).  With ``out_dir`` every
    iterate is checkpointed and the trace CSV is flushed after each iteration.
    """
    current = (init if init is not None else spec.priors[spec.init_index]).copy()
    trace = ObjectiveTrace()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace.path = out / "trace.csv"
        if trace.path.exists():
            trace.path.unlink()
    critics = {} if critics is None else critics
    needs = spec.needs_critics() and not zero
    pools = _prior_pools(spec, config, tag) if needs else {}
    prior_eval = None
    last_ckpt = None
    t_start = time.perf_counter()
    stalls = 0
    carry = {} if config.carry_optimizer else None
    for k in range(1, config.K + 1):
        try:
            if needs:
                _refresh_critics(critics, spec, current, config, pools, k, trace, tag)
            surrogate = zero_surrogate(k) if zero else assemble_surrogate(current, spec, critics, config.mode, k)
            ft = replace(config.finetune, gamma=config.gamma_at(k),
                         seed=derive_seed(config.seed, "finetune", tag, k))
            current = solve(current, surrogate, ft, trace=trace.losses, tag={"k": k}, carry=carry)
        except RfmError as exc:
            where = f" (last good checkpoint: {last_ckpt})" if last_ckpt else ""
            exc.args = (f"outer iteration {k}: {exc.args[0] if exc.args else exc}{where}",) + exc.args[1:]
            raise
        rec = {"k": k}
        if config.eval_backend is not None and spec.n:
            if prior_eval is None:
                prior_eval = [sample_ode(p, config.eval_samples, config.sample_steps,
                                         seed=derive_seed(config.seed, "eval", "prior", i))
                              for i, p in enumerate(spec.priors)]
            rec.update(estimate_objective(current, spec, config.eval_samples, config.eval_backend,
                                          derive_seed(config.seed, "eval", tag, k), prior_grids,
                                          prior_eval, config.sample_steps))
        elif config.eval_backend is not None and spec.reward is not None:
            x = sample_ode(current, config.eval_samples, config.sample_steps,
                           seed=derive_seed(config.seed, "eval", tag, k)).numpy()
            r = float(np.mean(spec.reward.value(x)))
            rec.update({"reward_term": r, "total_G": r, "approximate": False})
        rec["seconds"] = time.perf_counter() - t_start
        if out is not None:
            last_ckpt = str(out / f"model_k{k:03d}.json")
            current.save(last_ckpt, iteration=k)
            rec["checkpoint"] = last_ckpt
        trace.add(rec, spec.n)
        log.info("%s k=%d G=%s (%.1fs)", tag or "rfm", k, rec.get("total_G"), rec["seconds"])
        if config.plateau_tol is not None and len(trace.records) > 1 and "total_G" in rec:
            stalls = stalls + 1 if abs(rec["total_G"] - trace.records[-2]["total_G"]) < config.plateau_tol else 0
            if stalls >= 3:
                break
    if out is not None:
        trace.write_losses(out / "losses.csv")
        if trace.critic_steps:
            write_rows(out / "critic_trace.csv", trace.critic_steps, ["k", "kind", "critic", "step", "objective"])
        current.save(out / "model.json")
    return current, trace


# -- K/N study -----------------------------------------------------------------


@dataclass
class KnResult:
    K: int
    N: int
    final_G: float
    seconds: float
    trace: ObjectiveTrace


def kn_tradeoff_study(spec: OperatorSpec, budgets: Sequence[tuple[int, int]], config: RfmConfig,
                      eval_samples: int | None = None) -> list[KnResult]:
    """Run one merge per (K, N) budget with matched seeds and a shared K * N."""
    totals = {k * n for k, n in budgets}
    if len(totals) != 1:
        raise ConfigError(f"budgets must share K*N, got products {sorted(totals)}")
    results = []
    for K, N in budgets:
        cfg = replace(config, K=K, finetune=replace(config.finetune, steps=N), eval_backend=None,
                      gamma=config.gamma if not isinstance(config.gamma, (list, tuple)) else config.gamma[0])
        t0 = time.perf_counter()
        model, trace = run(spec, cfg, tag="kn")
        secs = time.perf_counter() - t0
        est = estimate_objective(model, spec, eval_samples or config.eval_samples,
                                 config.eval_backend or "grid", derive_seed(config.seed, "kn-eval"),
                                 sample_steps=config.sample_steps)
        results.append(KnResult(K, N, est["total_G"], secs, trace))
    return results
