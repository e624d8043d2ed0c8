"""Command-line entry point: ``rfm {pretrain,merge,oracle,kn-study,inspect}``.

Every command writes its artifacts plus a ``manifest.json`` under the run
directory; failures exit nonzero and leave an ``error.json`` record.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from . import config as C
from . import grid as G
from .data import fit_mixture_weights
from .driver import estimate_objective, kn_tradeoff_study, run
from .errors import ConfigError, DimensionError, NumericError, RfmError, UnsupportedModeError
from .flow import FlowModel, pretrain_cfm, sample_ode
from .nn import load_record
from .operators import canonical_divergence, evaluate_circuit
from .records import write_rows
from .seeding import derive_seed

log = logging.getLogger("rfm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_UNSUPPORTED, EXIT_OTHER = 0, 2, 3, 4, 1


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DimensionError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, UnsupportedModeError):
        return EXIT_UNSUPPORTED
    return EXIT_OTHER


# -- manifests -------------------------------------------------------------------


def versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}
    try:
        out["rfm"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        out["rfm"] = "unknown"
    return out


class Manifest:
    def __init__(self, command: str, cfg: dict, out: Path):
        self.out = out
        self.t0 = time.perf_counter()
        self.data = {"command": command, "name": cfg["name"], "config_digest": C.config_digest(cfg),
                     "seed": cfg["seed"], "config": C.public(cfg), "versions": versions(),
                     "artifacts": {}, "digests": {}, "seeds": {}, "wall_clock": {}}

    def artifact(self, label: str, path: Path) -> Path:
        self.data["artifacts"][label] = str(path)
        return path

    def write(self, **extra) -> Path:
        missing = [p for p in self.data["artifacts"].values() if not Path(p).exists()]
        if missing:
            raise RfmError(f"manifest lists missing artifacts: {missing}")
        self.data["wall_clock"]["seconds"] = time.perf_counter() - self.t0
        self.data.update(extra)
        path = self.out / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str))
        return path


def write_samples(path: Path, x: np.ndarray) -> Path:
    rows = [{f"x_{j}": float(v) for j, v in enumerate(r)} for r in x]
    write_rows(path, rows, [f"x_{j}" for j in range(x.shape[1])])
    return path


# -- pretrain --------------------------------------------------------------------


def prior_checkpoint(cfg: dict, out: Path, decl: C.PriorDecl) -> Path:
    return decl.checkpoint if decl.checkpoint is not None else out / "priors" / f"{decl.name}.json"


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    man = Manifest("pretrain", cfg, out / "priors")
    train = C.pretrain_config(cfg)
    pc = cfg["pretrain"]
    rows = []
    for decl in C.prior_decls(cfg):
        if decl.mixture is None:
            log.info("prior %s uses checkpoint %s; nothing to train", decl.name, decl.checkpoint)
            continue
        seed = derive_seed(cfg["seed"], "pretrain", decl.name)
        man.data["seeds"][f"pretrain/{decl.name}"] = seed
        t0 = time.perf_counter()
        model = pretrain_cfm(decl.mixture.sample, cfg["dim"], seed, train, hidden=tuple(pc["hidden"]),
                             activation=pc["activation"])
        secs = time.perf_counter() - t0
        path = man.artifact(f"checkpoint/{decl.name}", out / "priors" / f"{decl.name}.json")
        digest = model.save(path, prior=decl.name, mixture=decl.mixture.to_dict(), train_steps=train.steps,
                            seed=seed)
        man.data["digests"][str(path)] = model.digest()
        x = sample_ode(model, cfg["rfm"]["eval_samples"], cfg["rfm"]["sample_steps"],
                       seed=derive_seed(cfg["seed"], "pretrain-eval", decl.name)).numpy()
        row = {"prior": decl.name, "steps": train.steps, "seconds": secs, "file_sha256": digest,
               "untrained": train.steps == 0, "sample_mean": json.dumps(x.mean(0).tolist())}
        if cfg["dim"] <= 2:
            row["grid_kl"] = G.sample_kl(x, G.analytic_grid(decl.mixture.logpdf, dim=cfg["dim"]))
        if cfg["output"]["samples"]:
            n = cfg["output"]["n_samples"]
            write_samples(man.artifact(f"samples/{decl.name}", out / "priors" / f"{decl.name}_samples.csv"), x[:n])
        rows.append(row)
        log.info("pretrained %s in %.1fs (grid-KL %s)", decl.name, secs, row.get("grid_kl"))
    write_rows(man.artifact("diagnostics", out / "priors" / "diagnostics.csv"), rows,
               ["prior", "steps", "seconds", "grid_kl", "untrained", "sample_mean", "file_sha256"])
    man.write(diagnostics=rows)
    return {"diagnostics": rows}


# -- closed-form targets -----------------------------------------------------------


def prior_grids(cfg: dict) -> dict:
    """Analytic grids of the declared priors (d <= 2); checkpoint-only priors map to None."""
    return {d.name: (G.analytic_grid(d.mixture.logpdf, dim=cfg["dim"]) if d.mixture is not None else None)
            for d in C.prior_decls(cfg)}


def _reward_grid(node: dict, g: G.GridDensity):
    r = C._reward(node.get("reward"))
    return None if r is None else np.asarray(r.value(g.points())).reshape(g.resolution)


def composed_target(cfg: dict, grids: dict, node: dict | None = None) -> G.GridDensity:
    """Closed-form optimum of an operator, or of a circuit composed node by node."""
    if node is None:
        node = cfg.get("operator") or cfg["circuit"]
        kids = (node.get("priors") or [p["name"] for p in cfg["priors"]]) if "operator" in cfg else node["children"]
    else:
        kids = node["children"]
    child = []
    for c in kids:
        g = composed_target(cfg, grids, c) if isinstance(c, dict) else grids[c]
        if g is None:
            raise UnsupportedModeError(f"prior {c!r} has no analytic density")
        child.append(g)
    divs = [canonical_divergence(d) for d in node["divergences"]]
    return G.closed_form_target(divs, child, node["alphas"], _reward_grid(node, child[0]))


# -- merge -----------------------------------------------------------------------


def load_priors(cfg: dict, out: Path) -> dict[str, FlowModel]:
    models = {}
    for decl in C.prior_decls(cfg):
        path = prior_checkpoint(cfg, out, decl)
        if not path.exists():
            raise ConfigError(f"missing checkpoint for prior {decl.name!r} at {path}; "
                              f"run 'rfm pretrain' with the same config and --out first")
        model = FlowModel.load(path)
        if model.dim != cfg["dim"]:
            raise DimensionError(f"checkpoint {path} has dim {model.dim}, config dim is {cfg['dim']}")
        models[decl.name] = model
    return models


def compare(cfg: dict, model: FlowModel, node: dict | None, man: Manifest, out: Path, tag: str) -> dict:
    """Sample the merged model and compare against the closed-form target when one exists."""
    rc = cfg["rfm"]
    x = sample_ode(model, rc["eval_samples"], rc["sample_steps"],
                   seed=derive_seed(cfg["seed"], "final-samples", tag)).numpy()
    res = {"n": int(x.shape[0]), "sample_mean": x.mean(0).tolist(), "sample_std": x.std(0).tolist()}
    if cfg["output"]["samples"]:
        write_samples(man.artifact(f"samples{tag}", out / "samples.csv"), x[:cfg["output"]["n_samples"]])
    if cfg["dim"] <= 2:
        try:
            target = composed_target(cfg, prior_grids(cfg), node)
        except (UnsupportedModeError, RfmError) as exc:
            res["target"] = f"unavailable: {exc}"
        else:
            res["grid_kl_to_target"] = G.sample_kl(x, target)
            res["target_mean"] = target.mean().tolist()
            if cfg["output"]["grids"]:
                target.to_csv(man.artifact(f"target_grid{tag}", out / "target_grid.csv"))
                bw = G.scott_bandwidth(x)
                G.density_from_samples(x, target.bounds, target.resolution, bw).to_csv(
                    man.artifact(f"sample_grid{tag}", out / "sample_grid.csv"))
    spec_node = node or cfg.get("operator")
    if spec_node is not None and node is None:
        divs = {canonical_divergence(d) for d in spec_node["divergences"]}
        decls = {d.name: d for d in C.prior_decls(cfg)}
        names = spec_node.get("priors") or list(decls)
        if divs == {"reverse-kl"} and all(decls[n].mixture is not None for n in names):
            w = fit_mixture_weights(x, [decls[n].mixture for n in names])
            res["mixture_weights"] = w.tolist()
    return res


def cmd_merge(cfg: dict, out: Path) -> dict:
    mdir = out / "merge"
    man = Manifest("merge", cfg, mdir)
    models = load_priors(cfg, out)
    man.data["seeds"]["rfm"] = cfg["seed"]
    if "operator" in cfg:
        spec = C.build_spec(cfg, models)
        rcfg = C.rfm_config(cfg, mode=C.operator_mode(cfg))
        grids = None
        if cfg["dim"] <= 2 and rcfg.eval_backend == "grid":
            pg = prior_grids(cfg)
            names = cfg["operator"].get("priors") or [p["name"] for p in cfg["priors"]]
            grids = [pg[n] for n in names]
        model, trace = run(spec, rcfg, tag="", out_dir=mdir, prior_grids=grids)
        _trace_artifacts(man, mdir, trace, "")
        comparison = compare(cfg, model, None, man, mdir, "")
        (mdir / "comparison.json").write_text(json.dumps(comparison, indent=2))
        man.artifact("comparison", mdir / "comparison.json")
        man.write(trace_digest=trace.digest(), final_digest=model.digest(), comparison=comparison)
        return {"comparison": comparison, "trace_digest": trace.digest(), "final_digest": model.digest(),
                "trace": trace}
    root = C.build_circuit(cfg, models)
    nodes = {}

    def run_fn(spec, rcfg, tag=""):
        ndir = mdir / tag
        nman = Manifest("merge-node", cfg, ndir)
        model, trace = run(spec, rcfg, tag=tag, out_dir=ndir)
        _trace_artifacts(nman, ndir, trace, "")
        nman.write(node=tag, trace_digest=trace.digest(), final_digest=model.digest())
        nodes[tag] = {"manifest": str(ndir / "manifest.json"), "trace_digest": trace.digest(),
                      "final_digest": model.digest()}
        return model, trace

    results = {}
    model = evaluate_circuit(root, None, run_fn=run_fn, results=results)
    man.data["nodes"] = nodes
    for tag, info in nodes.items():
        man.artifact(f"node/{tag}", Path(info["manifest"]))
    model.save(man.artifact("checkpoint", mdir / "model.json"))
    comparison = compare(cfg, model, None if "operator" in cfg else cfg["circuit"], man, mdir, "")
    (mdir / "comparison.json").write_text(json.dumps(comparison, indent=2))
    man.artifact("comparison", mdir / "comparison.json")
    digest = _combined([n["trace_digest"] for n in nodes.values()])
    man.write(trace_digest=digest, final_digest=model.digest(), comparison=comparison)
    return {"comparison": comparison, "trace_digest": digest, "final_digest": model.digest(), "nodes": nodes}


def _trace_artifacts(man: Manifest, d: Path, trace, prefix: str) -> None:
    man.artifact(prefix + "checkpoint", d / "model.json")
    man.artifact(prefix + "trace", d / "trace.csv")
    man.artifact(prefix + "losses", d / "losses.csv")
    if trace.critic_steps:
        man.artifact(prefix + "critic_trace", d / "critic_trace.csv")
    for r in trace.records:
        if r.get("checkpoint"):
            man.data["digests"][r["checkpoint"]] = FlowModel.load(r["checkpoint"]).digest()


def _combined(parts) -> str:
    return hashlib.sha256("".join(parts).encode()).hexdigest()


# -- oracle ----------------------------------------------------------------------


def _oracle_node(node: dict, kids: list, grids: dict, oc: dict, rows: list, reports: list, tag: str):
    """Mirror descent for one node on its children's final grids (post-order)."""
    child = []
    for i, c in enumerate(kids):
        if isinstance(c, dict):
            child.append(_oracle_node(c, c["children"], grids, oc, rows, reports, f"{tag}/{c.get('name', i)}"))
        else:
            if grids[c] is None:
                raise UnsupportedModeError(f"prior {c!r} has no analytic density for the grid oracle")
            child.append(grids[c])
    divs = [canonical_divergence(d) for d in node["divergences"]]
    reward = _reward_grid(node, child[0])
    res = G.exact_mirror_descent(child, divs, node["alphas"], float(oc["gamma"]), int(oc["steps"]),
                                 reward=reward, init=int(node.get("init", 0)),
                                 max_log_step=oc.get("max_log_step"), line_search=bool(oc.get("line_search")))
    try:
        target = G.closed_form_target(divs, child, node["alphas"], reward)
    except UnsupportedModeError:
        target = None
    for k, it in enumerate(res.iterates):
        row = {"node": tag, "step": k, "objective": res.objective[k], "divergence_sum": res.divergence_sum[k],
               "reward_term": res.reward_term[k]}
        if target is not None:
            row["sup_to_target"] = G.sup_norm(it, target)
            row["kl_to_target"] = G.grid_kl(it, target)
        rows.append(row)
    info = {"node": tag, "steps": int(oc["steps"]), "gamma": float(oc["gamma"]),
            "stationary": all(np.array_equal(it.density, res.iterates[0].density) for it in res.iterates),
            "monotone": bool(all(b <= a + 1e-12 for a, b in zip(res.divergence_sum, res.divergence_sum[1:])))
            if reward is None else bool(all(b >= a - 1e-12 for a, b in zip(res.objective, res.objective[1:]))),
            "final_sup_to_target": None if target is None else G.sup_norm(res.final, target)}
    if reward is not None:
        info["tilt_check_error"] = tilt_check(child[int(node.get("init", 0))], reward, float(oc["gamma"]))
    reports.append(info)
    return res.final


def tilt_check(p0: G.GridDensity, reward: np.ndarray, gamma: float) -> float:
    """Max cell-wise gap between one reward-only mirror step and p0 exp(gamma f) / Z."""
    step = G.exact_mirror_descent([], [], [], gamma, 1, reward=reward, init=p0)
    hand = p0.masses * np.exp(gamma * (reward - reward.max()))
    hand = hand / hand.sum()
    return float(np.abs(step.final.masses - hand).max())


def cmd_oracle(cfg: dict, out: Path) -> dict:
    if cfg["dim"] > 2:
        raise UnsupportedModeError(f"the grid oracle supports d <= 2, got d={cfg['dim']}")
    odir = out / "oracle"
    man = Manifest("oracle", cfg, odir)
    grids = prior_grids(cfg)
    oc = cfg["oracle"]
    rows: list = []
    reports: list = []
    if "operator" in cfg:
        node = cfg["operator"]
        kids = node.get("priors") or [p["name"] for p in cfg["priors"]]
        final = _oracle_node(node, kids, grids, oc, rows, reports, "root")
    else:
        node = cfg["circuit"]
        final = _oracle_node(node, node["children"], grids, oc, rows, reports, node.get("name", "root"))
    write_rows(man.artifact("convergence", odir / "convergence.csv"), rows,
               ["node", "step", "objective", "divergence_sum", "reward_term", "sup_to_target", "kl_to_target"])
    final.to_csv(man.artifact("final_grid", odir / "final_grid.csv"))
    report = {"nodes": reports, "final_mean": final.mean().tolist()}
    try:
        target = composed_target(cfg, grids)
        report["final_sup_to_composed_target"] = G.sup_norm(final, target)
        target.to_csv(man.artifact("target_grid", odir / "target_grid.csv"))
    except UnsupportedModeError as exc:
        report["composed_target"] = f"unavailable: {exc}"
    report["stationary"] = all(n["stationary"] for n in report["nodes"])
    (odir / "report.json").write_text(json.dumps(report, indent=2))
    man.artifact("report", odir / "report.json")
    man.write(report=report)
    return report


# -- kn-study --------------------------------------------------------------------


def cmd_kn_study(cfg: dict, out: Path) -> dict:
    if "operator" not in cfg:
        raise ConfigError("kn-study needs an 'operator' section")
    kdir = out / "kn"
    man = Manifest("kn-study", cfg, kdir)
    budgets = [(int(k), int(n)) for k, n in cfg["kn"]["budgets"]]
    models = load_priors(cfg, out)
    spec = C.build_spec(cfg, models)
    rcfg = C.rfm_config(cfg, mode=C.operator_mode(cfg))
    results = kn_tradeoff_study(spec, budgets, rcfg)
    finals = [r.final_G for r in results]
    secs = [r.seconds for r in results]
    ref = float(np.max(np.abs(finals))) or 1.0
    rows = [{"K": r.K, "N": r.N, "final_G": r.final_G, "seconds": r.seconds,
             "trace_digest": r.trace.digest()} for r in results]
    write_rows(man.artifact("report_csv", kdir / "kn_report.csv"), rows, ["K", "N", "final_G", "seconds"])
    report = {"budgets": budgets, "final_G": finals, "seconds": secs,
              "max_relative_gap": float((max(finals) - min(finals)) / ref),
              "time_ratio": float(max(secs) / min(secs)) if min(secs) > 0 else None}
    (kdir / "report.json").write_text(json.dumps(report, indent=2))
    man.artifact("report", kdir / "report.json")
    man.write(report=report)
    return report


# -- inspect ---------------------------------------------------------------------


def cmd_inspect(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    rec = load_record(path)
    info = {k: v for k, v in rec.items() if k != "net"}
    if "net" in rec:
        info["net"] = {"config": rec["net"]["config"], "widths": rec["net"]["widths"],
                       "n_params": int(sum(np.prod(p["shape"]) for p in rec["net"]["params"].values()))}
        if rec.get("kind") == "flow":
            info["params_digest"] = FlowModel.from_record(rec).digest()
    return info


# -- plumbing --------------------------------------------------------------------

COMMANDS = {"pretrain": cmd_pretrain, "merge": cmd_merge, "oracle": cmd_oracle, "kn-study": cmd_kn_study}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", required=True,
                        help="YAML config path or bundled preset name; repeat to run several")
    common.add_argument("--seed", type=int, nargs="+", help="master seed(s); overrides the config")
    common.add_argument("--out", type=Path, help="run directory (default: output.dir or runs/<name>)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. rfm.K=4")
    common.add_argument("--log-level", default="INFO")
    p = argparse.ArgumentParser(prog="rfm", description="Reward-guided flow merging")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the declared priors")
    m = sub.add_parser("merge", parents=[common], help="run an operator or circuit merge")
    m.add_argument("--pretrain-missing", action="store_true", help="train priors whose checkpoints are missing")
    sub.add_parser("oracle", parents=[common], help="exact grid mirror descent (d <= 2)")
    sub.add_parser("kn-study", parents=[common], help="K/N trade-off at fixed K*N")
    ins = sub.add_parser("inspect", help="print checkpoint metadata")
    ins.add_argument("path", type=Path)
    sub.add_parser("presets", help="list bundled presets")
    return p


def _out_dir(cfg: dict, base: Path | None, multi: bool) -> Path:
    root = base or Path(cfg["output"].get("dir") or Path("runs") / cfg["name"])
    if multi:
        root = root / cfg["name"] / f"seed{cfg['seed']}"
    return root


def run_job(command: str, source: str, seed: int | None, overrides: list, base: str | None, multi: bool,
            pretrain_missing: bool = False, log_level: str = "INFO") -> tuple[int, dict]:
    """Execute one (config, seed) job; returns (exit code, result or error record)."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = None
    try:
        cfg = C.load_config(source, overrides, seed)
        out = _out_dir(cfg, Path(base) if base else None, multi)
        out.mkdir(parents=True, exist_ok=True)
        if command == "merge" and pretrain_missing:
            decls = C.prior_decls(cfg)
            if any(not prior_checkpoint(cfg, out, d).exists() for d in decls):
                cmd_pretrain(cfg, out)
        res = COMMANDS[command](cfg, out)
        res = {k: v for k, v in res.items() if k != "trace"}
        return EXIT_OK, {"status": "ok", "out": str(out), **res}
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = exit_code(exc)
        record = {"status": "error", "command": command, "config": str(source), "seed": seed,
                  "error_type": type(exc).__name__, "message": str(exc), "exit_code": code}
        if code == EXIT_OTHER:
            record["traceback"] = traceback.format_exc()
        if out is not None:
            (out / "error.json").write_text(json.dumps(record, indent=2))
        return code, record


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(C.preset_names()))
        return EXIT_OK
    if args.command == "inspect":
        try:
            print(json.dumps(cmd_inspect(args.path), indent=2, default=str))
            return EXIT_OK
        except Exception as exc:  # noqa: BLE001
            code = exit_code(exc)
            print(json.dumps({"status": "error", "error_type": type(exc).__name__, "message": str(exc),
                              "exit_code": code}), file=sys.stderr)
            return code
    seeds = args.seed or [None]
    jobs = [(args.command, src, s, args.overrides, str(args.out) if args.out else None,
             len(args.config) * len(seeds) > 1, getattr(args, "pretrain_missing", False), args.log_level)
            for src in args.config for s in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs, mp_context=get_context("spawn")) as pool:
            outcomes = list(pool.map(run_job, *zip(*jobs)))
    else:
        outcomes = [run_job(*j) for j in jobs]
    code = EXIT_OK
    for c, rec in outcomes:
        stream = sys.stdout if c == EXIT_OK else sys.stderr
        print(json.dumps(rec, default=str), file=stream)
        code = max(code, c)
    return code


if __name__ == "__main__":
    sys.exit(main())
