"""Experiment configs: YAML files (or bundled presets) turned into library objects.

A config is a nested mapping with the sections ``priors``, ``pretrain``,
either ``operator`` or ``circuit``, ``rfm``, ``critic``, ``oracle``, ``kn``
and ``output``.  See ``src/rfm/presets/*.yaml`` for complete examples.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .critics import CriticTrainConfig
from .data import GaussianMixture
from .driver import RfmConfig
from .errors import ConfigError, DimensionError
from .finetune import FineTuneConfig
from .flow import FlowModel, TrainConfig
from .operators import CircuitNode, OperatorSpec, canonical_divergence, get_lambda, make_reward

SECTIONS = ("name", "description", "dim", "seed", "priors", "pretrain", "operator", "circuit", "rfm",
            "critic", "oracle", "kn", "output")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "pretrain": {"steps": 6000, "batch": 256, "lr": 1e-3, "lr_final": 1e-5, "late_fraction": 0.5,
                 "late_start": 0.8, "hidden": [128, 128, 128], "activation": "silu"},
    "rfm": {"K": 10, "gamma": 0.5, "gamma_schedule": "constant", "N": 40, "m": 64, "h": 0.01, "lr": 1e-3,
            "sample_steps": 100, "eval_samples": 16384, "eval_backend": "grid", "plateau_tol": None,
            "carry_optimizer": False},
    "critic": {"steps": 300, "batch": 256, "lr": 1e-3, "gp": 10.0, "penalty": "one-sided",
               "warmup_steps": 1000, "pool": 4096, "hidden": [128, 128, 128]},
    "oracle": {"gamma": 0.5, "steps": 500, "max_log_step": None, "line_search": False},
    "kn": {"budgets": [[10, 30], [15, 20], [30, 10]]},
    "output": {"dir": None, "samples": True, "n_samples": 4096, "grids": True, "trajectories": False},
}

OPERATOR_KEYS = {"divergences", "alphas", "reward", "lambda", "init", "union_mode", "terminal_eps",
                 "field_clip", "mode"}
NODE_KEYS = OPERATOR_KEYS | {"name", "children", "rfm"}


# -- loading ---------------------------------------------------------------------


def preset_names() -> list[str]:
    root = resources.files("rfm") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_path(name: str) -> Path:
    path = Path(str(resources.files("rfm") / "presets" / f"{name}.yaml"))
    if not path.exists():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source: str | Path, overrides: list[str] | None = None, seed: int | None = None) -> dict:
    """Read a YAML config (a path, or the name of a bundled preset), fill defaults and validate.

    ``overrides`` are ``section.key=value`` strings whose values are parsed as
    YAML, e.g. ``rfm.K=4`` or ``operator.alphas=[0.2,0.8]``.
    """
    path = Path(source)
    if not path.exists() and not str(source).endswith((".yaml", ".yml")):
        path = preset_path(str(source))
    if not path.exists():
        raise ConfigError(f"config file {source} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw.setdefault("name", path.stem)
    raw["_base_dir"] = str(path.parent.resolve())
    for item in overrides or []:
        apply_override(raw, item)
    if seed is not None:
        raw["seed"] = int(seed)
    return validate(raw)


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(value)


def validate(raw: dict) -> dict:
    unknown = set(raw) - set(SECTIONS) - {"_base_dir"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    if "dim" not in cfg:
        raise ConfigError("config needs 'dim'")
    cfg["dim"] = int(cfg["dim"])
    if cfg["dim"] < 1:
        raise ConfigError("dim must be >= 1")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an explicit integer")
    priors = cfg.get("priors") or []
    if not priors:
        raise ConfigError("config needs at least one entry under 'priors'")
    names = [p.get("name") for p in priors]
    if None in names or len(set(names)) != len(names):
        raise ConfigError("every prior needs a unique 'name'")
    for p in priors:
        prior_mixture(p, cfg["dim"])
    if ("operator" in cfg) == ("circuit" in cfg):
        raise ConfigError("config needs exactly one of 'operator' or 'circuit'")
    if "operator" in cfg:
        _check_node(cfg["operator"], names, top=True)
    else:
        _check_node(cfg["circuit"], names, top=False)
    rfm_config(cfg)  # raises on bad values
    if cfg["kn"].get("budgets"):
        products = {int(k) * int(n) for k, n in cfg["kn"]["budgets"]}
        if len(products) != 1:
            raise ConfigError(f"kn.budgets must share K*N, got products {sorted(products)}")
    return cfg


def _check_node(node: dict, names: list[str], top: bool) -> None:
    if not isinstance(node, dict):
        raise ConfigError("operator/circuit nodes must be mappings")
    allowed = OPERATOR_KEYS | ({"priors"} if top else NODE_KEYS)
    unknown = set(node) - allowed
    if unknown:
        raise ConfigError(f"unknown operator keys {sorted(unknown)}")
    kids = node.get("priors", names) if top else node.get("children")
    if not kids:
        raise ConfigError("circuit nodes need 'children'")
    for c in kids:
        if isinstance(c, dict):
            _check_node(c, names, top=False)
        elif c not in names:
            raise ConfigError(f"operator refers to unknown prior {c!r}; declared: {names}")
    n = len(kids)
    divs = node.get("divergences")
    alphas = node.get("alphas")
    if divs is None or alphas is None:
        raise ConfigError("operator nodes need 'divergences' and 'alphas'")
    if len(divs) != n or len(alphas) != n:
        raise ConfigError(f"operator has {n} inputs but {len(divs)} divergences and {len(alphas)} alphas")
    for d in divs:
        canonical_divergence(d)
    if any(not float(a) > 0 for a in alphas):
        raise ConfigError(f"alphas must be positive, got {alphas}")
    mode = node.get("mode", "terminal")
    if mode == "flow-process" and any(canonical_divergence(d) != "forward-kl" for d in divs):
        raise ConfigError("flow-process mode supports forward-kl ('and') divergences only")
    if node.get("reward") is not None:
        _reward(node["reward"])
    if node.get("lambda") is not None:
        get_lambda(node["lambda"])


# -- priors ----------------------------------------------------------------------


@dataclass
class PriorDecl:
    name: str
    mixture: GaussianMixture | None
    checkpoint: Path | None  # explicit checkpoint, else the pretrain output


def prior_mixture(p: dict, dim: int) -> GaussianMixture | None:
    if "means" not in p:
        if "checkpoint" not in p:
            raise ConfigError(f"prior {p['name']!r} needs mixture parameters ('means') or a 'checkpoint'")
        return None
    try:
        gm = GaussianMixture.build(p["means"], covs=p.get("covs"), weights=p.get("weights"), stds=p.get("stds"))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"prior {p['name']!r}: {exc}") from None
    if gm.dim != dim:
        raise DimensionError(f"prior {p['name']!r} has dimension {gm.dim}, config dim is {dim}")
    return gm


def prior_decls(cfg: dict) -> list[PriorDecl]:
    out = []
    for p in cfg["priors"]:
        ck = p.get("checkpoint")
        if ck is not None:
            ck = Path(ck)
            if not ck.is_absolute():
                ck = Path(cfg["_base_dir"]) / ck
        out.append(PriorDecl(p["name"], prior_mixture(p, cfg["dim"]), ck))
    return out


def pretrain_config(cfg: dict) -> TrainConfig:
    pc = cfg["pretrain"]
    return TrainConfig(steps=int(pc["steps"]), batch=int(pc["batch"]), lr=float(pc["lr"]),
                       lr_final=None if pc.get("lr_final") is None else float(pc["lr_final"]),
                       late_fraction=float(pc["late_fraction"]), late_start=float(pc["late_start"]))


# -- rfm / critics -----------------------------------------------------------------


def critic_config(cfg: dict) -> CriticTrainConfig:
    c = cfg["critic"]
    return CriticTrainConfig(steps=int(c["steps"]), batch=int(c["batch"]), lr=float(c["lr"]), gp=float(c["gp"]),
                             penalty=c["penalty"])


def rfm_config(cfg: dict, override: dict | None = None, mode: str = "terminal") -> RfmConfig:
    r = _merge(cfg["rfm"], override or {})
    c = cfg["critic"]
    try:
        ft = FineTuneConfig(steps=int(r["N"]), m=int(r["m"]), h=float(r["h"]), lr=float(r["lr"]))
        gamma = r["gamma"]
        gamma = [float(g) for g in gamma] if isinstance(gamma, list) else float(gamma)
        return RfmConfig(K=int(r["K"]), gamma=gamma, gamma_schedule=r["gamma_schedule"], mode=mode,
                         finetune=ft, critic=critic_config(cfg), critic_warmup_steps=int(c["warmup_steps"]),
                         critic_pool=int(c["pool"]), critic_hidden=tuple(c["hidden"]),
                         sample_steps=int(r["sample_steps"]), eval_samples=int(r["eval_samples"]),
                         eval_backend=r["eval_backend"], seed=int(cfg["seed"]),
                         plateau_tol=r.get("plateau_tol"), carry_optimizer=bool(r["carry_optimizer"]))
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad rfm section: {exc}") from None


def _reward(r):
    if r is None:
        return None
    if isinstance(r, str):
        return make_reward(r)
    params = {k: v for k, v in r.items() if k != "name"}
    return make_reward(r["name"], **params)


def _spec_options(node: dict) -> dict:
    opts = {}
    if node.get("lambda") is not None:
        opts["lam"] = get_lambda(node["lambda"])
    for key in ("union_mode", "terminal_eps", "field_clip"):
        if node.get(key) is not None:
            opts[key] = node[key]
    return opts


def build_spec(cfg: dict, models: dict[str, FlowModel]) -> OperatorSpec:
    op = cfg["operator"]
    names = op.get("priors") or [p["name"] for p in cfg["priors"]]
    return OperatorSpec([models[n] for n in names], list(op["divergences"]), list(op["alphas"]),
                        reward=_reward(op.get("reward")), init_index=int(op.get("init", 0)),
                        **_spec_options(op))


def build_circuit(cfg: dict, models: dict[str, FlowModel], node: dict | None = None,
                  name: str = "root") -> CircuitNode:
    node = cfg["circuit"] if node is None else node
    kids = []
    for i, c in enumerate(node["children"]):
        if isinstance(c, dict):
            kids.append(build_circuit(cfg, models, c, c.get("name", f"node{i}")))
        else:
            kids.append(CircuitNode(c, model=models[c]))
    return CircuitNode(node.get("name", name), children=kids, divergences=list(node["divergences"]),
                       alphas=list(node["alphas"]), reward=_reward(node.get("reward")),
                       config=rfm_config(cfg, node.get("rfm"), node.get("mode", "terminal")),
                       init_index=int(node.get("init", 0)), options=_spec_options(node))


def operator_mode(cfg: dict) -> str:
    return (cfg.get("operator") or cfg.get("circuit")).get("mode", "terminal")


# -- digests -----------------------------------------------------------------------


def public(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def config_digest(cfg: dict) -> str:
    text = json.dumps(public(cfg), sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")
