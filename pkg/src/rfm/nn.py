"""Float64 MLPs with sinusoidal time conditioning, Adam, and checkpoints.

Reverse-mode differentiation is delegated to torch autograd; this module only
fixes the network family, the optimizer, and the on-disk format.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionError, NumericError, StateError

torch.set_default_dtype(torch.float64)

DTYPE = torch.float64
FORMAT_VERSION = 1
TIME_EMBED_DIM = 32

_ACTIVATIONS = {
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
    "gelu": nn.GELU,
}


def sinusoidal_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    """Embed times in [0, 1] as ``width`` sin/cos features.

    Frequencies are geometric between 1 and 100 rad per unit time so the
    embedding stays smooth on [0, 1].
    """
    half = width // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(100.0), half, dtype=DTYPE))
    arg = t.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class Mlp(nn.Module):
    """Dense network ``(x, t) -> y``.

    With ``time_embed_dim == 0`` the time argument is ignored and the net is a
    plain ``R^d -> R^k`` map (used for critics).
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: Sequence[int] = (128, 128, 128),
        time_embed_dim: int = TIME_EMBED_DIM,
        activation: str = "silu",
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if in_dim < 1 or out_dim < 1 or any(h < 1 for h in hidden):
            raise ConfigError("layer widths must be positive")
        if time_embed_dim % 2:
            raise ConfigError("time embedding width must be even")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.time_embed_dim = time_embed_dim
        self.activation = activation
        widths = self.widths
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        self.act = _ACTIVATIONS[activation]()

    @property
    def widths(self) -> list[int]:
        return [self.in_dim + self.time_embed_dim, *self.hidden, self.out_dim]

    def forward(self, x: torch.Tensor, t: Any = None) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"expected input of shape (batch, {self.in_dim}), got {tuple(x.shape)}"
            )
        h = x
        if self.time_embed_dim:
            if t is None:
                raise DimensionError("time-conditioned network called without t")
            t = torch.as_tensor(t, dtype=DTYPE)
            if t.ndim == 0:
                t = t.expand(x.shape[0])
            h = torch.cat([x, sinusoidal_embedding(t, self.time_embed_dim)], dim=-1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h

    def config(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "time_embed_dim": self.time_embed_dim,
            "activation": self.activation,
        }


def build_mlp(in_dim: int, out_dim: int, seed: int, **kwargs) -> Mlp:
    """Construct an :class:`Mlp` with parameters drawn from a dedicated RNG."""
    gen = torch.Generator().manual_seed(int(seed))
    net = Mlp(in_dim, out_dim, **kwargs)
    with torch.no_grad():
        for layer in net.layers:
            bound = 1.0 / math.sqrt(layer.in_features)
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.uniform_(-bound, bound, generator=gen)
    return net


def forward(params: nn.Module, x: torch.Tensor, t: Any = None) -> torch.Tensor:
    return params(x, t)


def backward(params: nn.Module, loss: torch.Tensor) -> list[torch.Tensor]:
    """Populate and return ``.grad`` for every parameter of ``params``."""
    if loss.numel() != 1:
        raise DimensionError("backward needs a scalar loss")
    plist = list(params.parameters())
    for p in plist:
        p.grad = None
    if loss.grad_fn is None:
        if loss.requires_grad:
            raise StateError("loss is a leaf; no forward pass was recorded")
        # constant loss: no dependence on the parameters
        for p in plist:
            p.grad = torch.zeros_like(p)
        return [p.grad for p in plist]
    loss.backward()
    for p in plist:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return [p.grad for p in plist]


class Adam:
    """Adam with explicit, inspectable state (moments, step count)."""

    def __init__(
        self,
        params: Iterable[torch.Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor] | None = None) -> None:
        if grads is None:
            grads = [
                p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params
            ]
        if len(grads) != len(self.params):
            raise DimensionError("one gradient per parameter required")
        for g in grads:
            if not torch.isfinite(g).all():
                raise NumericError("non-finite gradient passed to Adam")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))

    def rebind(self, params: Iterable[torch.Tensor]) -> "Adam":
        """A copy of this optimizer (moments and step count) driving ``params``."""
        params = list(params)
        if [p.shape for p in params] != [p.shape for p in self.params]:
            raise StateError("cannot rebind optimizer state to parameters of a different shape")
        out = Adam(params, self.lr, (self.beta1, self.beta2), self.eps)
        out.step_count = self.step_count
        out.m = [m.clone() for m in self.m]
        out.v = [v.clone() for v in self.v]
        return out

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "step_count": self.step_count,
        }


def adam_step(state: Adam, params: nn.Module, grads: Sequence[torch.Tensor]) -> Adam:
    if [id(p) for p in state.params] != [id(p) for p in params.parameters()]:
        raise StateError("optimizer state belongs to a different parameter set")
    state.step(grads)
    return state


# -- checkpoints ---------------------------------------------------------------


def _encode(arr: torch.Tensor) -> dict:
    a = arr.detach().cpu().numpy().astype("<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(rec: dict) -> torch.Tensor:
    a = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8").reshape(rec["shape"])
    return torch.tensor(a.copy(), dtype=DTYPE)


def net_record(net: Mlp) -> dict:
    return {
        "config": net.config(),
        "widths": net.widths,
        "params": {k: _encode(v) for k, v in net.state_dict().items()},
    }


def net_from_record(rec: dict) -> Mlp:
    net = Mlp(**rec["config"])
    state = {k: _decode(v) for k, v in rec["params"].items()}
    net.load_state_dict(state)
    return net


def save_record(path: str | Path, record: dict) -> str:
    """Write a checkpoint record as canonical JSON; return its sha256 digest."""
    record = {"format_version": FORMAT_VERSION, **record}
    text = json.dumps(record, sort_keys=True, separators=(",", ":"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_record(path: str | Path) -> dict:
    record = json.loads(Path(path).read_text())
    version = record.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format_version {version!r}")
    return record


def params_digest(net: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in net.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()
