"""Surrogate reward gradients for the merge operators and generative circuits.

Every field returned here is a *reward* gradient: the direction in which the
fine-tuning step should move samples to increase the merge objective
``G(p) = E_p f - sum_i alpha_i D_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import nn as rnn
from .critics import CriticNet, critic_gradient_field
from .errors import ConfigError, DimensionError, StateError, UnsupportedModeError
from .flow import FlowModel, sample_ode, score_from_velocity

DIVERGENCE_TAGS = {
    "and": "forward-kl", "forward-kl": "forward-kl", "kl": "forward-kl",
    "or": "reverse-kl", "reverse-kl": "reverse-kl",
    "w1": "w1",
}
MODES = ("terminal", "flow-process")
TERMINAL_EPS = 0.05


def canonical_divergence(tag: str) -> str:
    try:
        return DIVERGENCE_TAGS[str(tag).strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown divergence tag {tag!r}; expected one of {sorted(DIVERGENCE_TAGS)}") from None


# -- rewards -------------------------------------------------------------------


@dataclass(frozen=True)
class Reward:
    """Analytic reward with exact gradient; evaluated on torch or numpy points."""

    name: str
    params: dict

    def value(self, x):
        xp = np if isinstance(x, np.ndarray) else torch
        if self.name == "coordinate-linear":
            return self.params.get("scale", 1.0) * x[..., self.params.get("axis", 0)]
        c = xp.asarray(self.params.get("center", 0.0)) if xp is np else torch.as_tensor(
            self.params.get("center", 0.0), dtype=rnn.DTYPE)
        return -self.params.get("scale", 1.0) * ((x - c) ** 2).sum(-1)

    def grad(self, x: torch.Tensor) -> torch.Tensor:
        if self.name == "coordinate-linear":
            g = torch.zeros_like(x)
            g[..., self.params.get("axis", 0)] = self.params.get("scale", 1.0)
            return g
        c = torch.as_tensor(self.params.get("center", 0.0), dtype=rnn.DTYPE)
        return -2.0 * self.params.get("scale", 1.0) * (x - c)

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}


REWARDS = ("coordinate-linear", "negative-quadratic-well")


def make_reward(name: str, **params) -> Reward:
    """Build a reward from the registry.

    coordinate-linear: f(x) = scale * x[axis].
    negative-quadratic-well: f(x) = -scale * ||x - center||^2.
    """
    if name not in REWARDS:
        raise ConfigError(f"unknown reward {name!r}; expected one of {REWARDS}")
    allowed = {"coordinate-linear": {"axis", "scale"}, "negative-quadratic-well": {"center", "scale"}}[name]
    extra = set(params) - allowed
    if extra:
        raise ConfigError(f"reward {name!r} got unexpected parameters {sorted(extra)}")
    return Reward(name, dict(params))


# -- lambda schedules ----------------------------------------------------------


def paper_lambda(t: float) -> float:
    return 0.2 if t > 1.0 - 0.05 else 0.4


def constant_lambda(t: float) -> float:
    return 1.0


LAMBDAS = {"paper": paper_lambda, "constant": constant_lambda}


def get_lambda(name: str) -> Callable[[float], float]:
    try:
        return LAMBDAS[name]
    except KeyError:
        raise ConfigError(f"unknown lambda schedule {name!r}; expected one of {sorted(LAMBDAS)}") from None


# -- specs ---------------------------------------------------------------------


@dataclass
class OperatorSpec:
    priors: list
    divergences: list
    alphas: list
    reward: Reward | None = None
    lam: Callable[[float], float] | None = None
    init_index: int = 0  # 0-based
    union_mode: str = "mixture"  # or "per-prior"
    terminal_eps: float = TERMINAL_EPS
    field_clip: float | None = None  # per-sample norm cap on critic-based terms

    def __post_init__(self):
        n = len(self.priors)
        if n < 1 and self.reward is None:
            raise ConfigError("operator spec needs at least one prior or a reward")
        if not (len(self.divergences) == len(self.alphas) == n):
            raise ConfigError("priors, divergences and alphas must have equal length")
        self.divergences = [canonical_divergence(d) for d in self.divergences]
        self.alphas = [float(a) for a in self.alphas]
        if any(not a > 0 for a in self.alphas):
            raise ConfigError(f"alphas must be positive, got {self.alphas}")
        if n and not 0 <= self.init_index < n:
            raise ConfigError(f"init_index {self.init_index} out of range for {n} priors")
        if self.union_mode not in ("mixture", "per-prior"):
            raise ConfigError("union_mode must be 'mixture' or 'per-prior'")
        dims = {p.dim for p in self.priors}
        if len(dims) > 1:
            raise DimensionError(f"priors disagree in dimension: {sorted(dims)}")

    @property
    def n(self) -> int:
        return len(self.priors)

    @property
    def dim(self) -> int:
        return self.priors[0].dim

    def indices(self, kind: str) -> list[int]:
        return [i for i, d in enumerate(self.divergences) if d == kind]

    def needs_critics(self) -> bool:
        return any(d != "forward-kl" for d in self.divergences)


@dataclass
class SurrogateGradientField:
    """Reward gradients for one outer iteration.

    ``terminal`` already includes lambda_1 in flow-process mode; ``running``
    is unweighted and the adjoint applies ``lam(t)``.
    """

    terminal: Callable[[torch.Tensor], torch.Tensor]
    running: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None
    lam: Callable[[float], float] = constant_lambda
    k: int = 0


def zero_surrogate(k: int = 0) -> SurrogateGradientField:
    return SurrogateGradientField(terminal=torch.zeros_like, k=k)


# -- per-operator gradients ------------------------------------------------------


def intersection_gradient(current: FlowModel, spec: OperatorSpec, x: torch.Tensor, t,
                          indices: Sequence[int] | None = None) -> torch.Tensor:
    """-sum_i alpha_i s_current(x, t) + sum_i alpha_i s_prior_i(x, t), via the velocity-to-score map."""
    idx = spec.indices("forward-kl") if indices is None else list(indices)
    if not idx:
        return torch.zeros_like(x)
    with torch.no_grad():
        total = sum(spec.alphas[i] for i in idx)
        out = -total * score_from_velocity(current, x, t)
        for i in idx:
            out = out + spec.alphas[i] * score_from_velocity(spec.priors[i], x, t)
    return out


def _require_trained(c: CriticNet | None, what: str) -> CriticNet:
    if c is None or c.steps_trained == 0:
        raise StateError(f"{what} critic is untrained; refresh critics before assembling the surrogate")
    return c


def union_gradient(critics, spec: OperatorSpec, x: torch.Tensor) -> torch.Tensor:
    """sum_i alpha_i grad exp(phi_i - 1).

    ``critics`` is a dict: key ``"mixture"`` holds one critic trained against
    the alpha-mixture (scaled by sum alpha), integer keys hold per-prior
    critics.
    """
    idx = spec.indices("reverse-kl")
    if not idx:
        return torch.zeros_like(x)
    if spec.union_mode == "mixture":
        c = _require_trained(critics.get("mixture"), "mixture")
        return -sum(spec.alphas[i] for i in idx) * critic_gradient_field(c, x)
    out = torch.zeros_like(x)
    for i in idx:
        out = out - spec.alphas[i] * critic_gradient_field(_require_trained(critics.get(i), f"prior {i}"), x)
    return out


def interpolation_gradient(critics, spec: OperatorSpec, x: torch.Tensor) -> torch.Tensor:
    """-sum_i alpha_i grad phi_i, one W1 critic per prior."""
    out = torch.zeros_like(x)
    for i in spec.indices("w1"):
        out = out + spec.alphas[i] * critic_gradient_field(_require_trained(critics.get(i), f"prior {i}"), x)
    return out


def mixture_sampler(priors: Sequence[FlowModel], alphas, steps: int = 100):
    """Sampler for the alpha-mixture: pick prior i w.p. alpha_i / sum alpha, then sample it."""
    w = torch.as_tensor(np.asarray(alphas, float) / np.sum(alphas), dtype=rnn.DTYPE)

    def draw(n: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.multinomial(w, n, replacement=True, generator=gen)
        x0 = torch.randn(n, priors[0].dim, generator=gen, dtype=rnn.DTYPE)
        out = torch.empty_like(x0)
        for i, p in enumerate(priors):
            sel = idx == i
            if sel.any():
                out[sel] = sample_ode(p, int(sel.sum()), steps, x0=x0[sel])
        return out

    return draw


def clip_norm(v: torch.Tensor, cap: float | None) -> torch.Tensor:
    """Scale rows of ``v`` down to norm ``cap`` (no-op when ``cap`` is None)."""
    if cap is None:
        return v
    norm = v.norm(dim=-1, keepdim=True)
    return v * torch.clamp(cap / torch.clamp(norm, min=1e-300), max=1.0)


def assemble_surrogate(current: FlowModel, spec: OperatorSpec, critics=None, mode: str = "terminal",
                       k: int = 0) -> SurrogateGradientField:
    """Reward-gradient field of the linearised objective at ``current``.

    terminal mode: grad f + intersection terms at t = 1 - eps + critic terms.
    flow-process mode: running = intersection gradient at t, terminal =
    lambda_1 * (grad f + intersection at 1 - eps).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    critics = critics or {}
    t_term = 1.0 - spec.terminal_eps
    reward = spec.reward
    has_kl = bool(spec.indices("forward-kl"))
    has_rkl = bool(spec.indices("reverse-kl"))
    has_w1 = bool(spec.indices("w1"))

    if mode == "flow-process":
        if has_rkl or has_w1:
            raise UnsupportedModeError("flow-process mode is only defined for forward-kl (intersection) specs")
        lam = spec.lam or paper_lambda
        lam1 = lam(1.0)

        def terminal(x):
            g = intersection_gradient(current, spec, x, t_term) if has_kl else torch.zeros_like(x)
            if reward is not None:
                g = g + reward.grad(x)
            return lam1 * g

        running = (lambda x, t: intersection_gradient(current, spec, x, t.reshape(-1))) if has_kl else None
        return SurrogateGradientField(terminal, running, lam, k)

    def terminal(x):
        g = torch.zeros_like(x)
        if reward is not None:
            g = g + reward.grad(x)
        if has_kl:
            g = g + intersection_gradient(current, spec, x, t_term)
        if has_rkl or has_w1:
            c = torch.zeros_like(x)
            if has_rkl:
                c = c + union_gradient(critics, spec, x)
            if has_w1:
                c = c + interpolation_gradient(critics, spec, x)
            g = g + clip_norm(c, spec.field_clip)
        return g

    return SurrogateGradientField(terminal, None, constant_lambda, k)


# -- circuits --------------------------------------------------------------------


@dataclass
class CircuitNode:
    """Leaf (``model`` set) or internal node (``op`` settings over ``children``)."""

    name: str
    model: FlowModel | None = None
    children: list = field(default_factory=list)
    divergences: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    reward: Reward | None = None
    config: object = None  # RfmConfig override for this node
    init_index: int = 0
    options: dict = field(default_factory=dict)  # extra OperatorSpec fields (terminal_eps, field_clip, ...)

    @property
    def is_leaf(self) -> bool:
        return self.model is not None

    def __post_init__(self):
        if self.is_leaf == bool(self.children):
            raise ConfigError(f"circuit node {self.name!r} must be either a leaf or have children")


def evaluate_circuit(root: CircuitNode, config, run_fn=None, results: dict | None = None,
                     path: str = "") -> FlowModel:
    """Post-order evaluation; each internal node runs a full merge on its children's outputs.

    ``results`` (if given) collects ``{node path: (model, trace)}``.
    """
    if run_fn is None:
        from .driver import run as run_fn
    here = f"{path}/{root.name}" if path else root.name
    if root.is_leaf:
        if results is not None:
            results[here] = (root.model, None)
        return root.model
    seen = set()
    kids = []
    for child in root.children:
        if id(child) in seen:
            raise ConfigError(f"circuit node {here!r} lists the same child twice")
        seen.add(id(child))
        kids.append(evaluate_circuit(child, config, run_fn, results, here))
    cfg = root.config or config
    try:
        spec = OperatorSpec(kids, list(root.divergences), list(root.alphas), reward=root.reward,
                            init_index=root.init_index, **root.options)
        model, trace = run_fn(spec, cfg, tag=here)
    except Exception as exc:
        exc.args = (f"circuit node {here}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise
    if results is not None:
        results[here] = (model, trace)
    return model
