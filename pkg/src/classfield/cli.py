"""classfield command line: gen, rollout, train, eval, bench, ablate, verify, plot.

Every command accepts ``--config run.json``; explicit flags override fields of
that document, and the merged RunConfig is written next to the outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import metric
from .generators import (AffineGenerator, ConstantGenerator, IfsGenerator, NeuralCfgHyper,
                         _atomic_write, ifs_family, load_generator, neural_cfg_lipschitz,
                         sample_neural_cfg)
from .hierarchy import export_level_csv, load_hierarchy, rollout, save_hierarchy, voronoi_cells
from .learn import METHODS, TrainConfig, save_training_curve, train_method
from .plot import plot_csv
from .sampling import make_rng

SEED_ENV = "CLASSFIELD_SEED"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int
    jobs: int = 1
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _merge(args: argparse.Namespace, defaults: dict) -> RunConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError("config must be a JSON object")
        if base.get("command", args.command) != args.command:
            raise UsageError(f"config is for command {base['command']!r}, not {args.command!r}")
    params = dict(defaults)
    params.update(base.get("params", {}))
    unknown = set(params) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config fields: {sorted(unknown)}")
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    seed = args.seed if args.seed is not None else base.get("seed", _default_seed())
    jobs = args.jobs if args.jobs is not None else base.get("jobs", 1)
    return RunConfig(args.command, int(seed), int(jobs), params)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _save_config(cfg: RunConfig, directory: Path) -> None:
    _atomic_write(directory / "run_config.json", cfg.to_json())


def _train_config(p: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(lr=p["lr"], epochs=p["epochs"], seed=seed, hidden=p["hidden"],
                           depth=p["layers"], activation=p["activation"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --- commands -------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> dict:
    p = cfg.params
    kind = p["kind"]
    if kind == "neural-cfg":
        g = sample_neural_cfg(p["d"], p["K"], NeuralCfgHyper(packing_eps=p["packing_eps"]), p["trial"])
    elif kind == "ifs":
        g = IfsGenerator(ifs_family(p["family"], trial=p["trial"]))
    elif kind == "constant":
        if p["matrix"] is None:
            raise UsageError("constant generator needs --matrix (JSON d x K)")
        g = ConstantGenerator(np.array(json.loads(p["matrix"]), dtype=float))
    elif kind == "affine":
        if p["matrix"] is None or p["bias"] is None:
            raise UsageError("affine generator needs --matrix (K x d x d) and --bias (d x K)")
        g = AffineGenerator(np.array(json.loads(p["matrix"])), np.array(json.loads(p["bias"])))
    else:
        raise UsageError(f"unknown generator kind {kind!r}")
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    g.save(out)
    _save_config(cfg, out.parent)
    return {"generator": str(out), "kind": g.kind, "d": g.d, "K": g.K}


def cmd_rollout(cfg: RunConfig) -> dict:
    p = cfg.params
    if p["generator"] is None:
        raise UsageError("rollout needs --generator")
    g = load_generator(p["generator"])
    root = np.array(json.loads(p["root"]), dtype=float) if p["root"] else None
    if root is None:
        root = getattr(getattr(g, "family", None), "root", None)
        root = np.zeros(g.d) if root is None else root
    s = p["s"] if p["s"] is not None else (g.natural_scale or 0.5)
    h = rollout(g, root, s=s, L=p["depth"], allow_large=p["allow_large"])
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_hierarchy(h, out)
    if p["csv_level"] is not None:
        export_level_csv(h, p["csv_level"], out.with_suffix(f".level{p['csv_level']}.csv"))
    _save_config(cfg, out.parent)
    return {"hierarchy": str(out), "depth": h.depth, "nodes": int(sum(len(l) for l in h.levels))}


def cmd_train(cfg: RunConfig) -> dict:
    p = cfg.params
    if p["hierarchy"] is None:
        raise UsageError("train needs --hierarchy")
    h = load_hierarchy(p["hierarchy"])
    if p["method"] not in METHODS:
        raise UsageError(f"unknown method {p['method']!r}")
    if not 1 <= p["L_train"] <= h.depth:
        raise UsageError(f"L_train must lie in 1..{h.depth}")
    tcfg = _train_config(p, cfg.seed)
    g = train_method(p["method"], h.truncate(p["L_train"]), p["L_train"], tcfg)
    out = _out_dir(p["out"])
    g.save(out / "model.json")
    hist = getattr(g, "history", [])
    if hist:
        save_training_curve(hist, out / "training_curve.csv")
    _save_config(cfg, out)
    return {"model": str(out / "model.json"), "final_loss": hist[-1] if hist else None}


def cmd_eval(cfg: RunConfig) -> dict:
    p = cfg.params
    out = _out_dir(p["out"])
    tcfg = _train_config(p, cfg.seed)
    if p["hierarchy"] is None:
        mcfg = ev.MatchedConfig(trials=p["trials"], L_train=p["L_train"], L_total=p["L_eval"],
                                train=tcfg, jobs=cfg.jobs, dpt=not p["no_dpt"])
        res = ev.run_matched_cfg_experiment(mcfg)
        ev.atomic_write_text(out / "metrics.csv", res.csv())
        ev.atomic_write_text(out / "aggregate.csv", res.aggregate())
        _save_config(cfg, out)
        return {"metrics": str(out / "metrics.csv"), "resampled": len(res.resampled)}
    true = load_hierarchy(p["hierarchy"])
    L_eval = min(p["L_eval"], true.depth)
    if p["L_train"] >= L_eval:
        raise UsageError("L_train must be below the evaluated depth")
    rows = []
    if p["model"]:
        g = load_generator(p["model"])
        pred = rollout(g, true.root, s=true.s, L=L_eval, lambda_check=None)
        lv = ev.evaluate_levels(pred, true, range(p["L_train"] + 1, L_eval + 1), not p["no_dpt"])
        rows.append(("", ev.TrialResult(g.kind, 0, cfg.seed, lv)))
    else:
        res = ev.fit_and_evaluate(true, p["L_train"], L_eval, METHODS, tcfg, 0, dpt=not p["no_dpt"])
        rows += [("", r) for r in res]
    ev.atomic_write_text(out / "metrics.csv", ev.results_csv(rows))
    _save_config(cfg, out)
    return {"metrics": str(out / "metrics.csv")}


def cmd_bench(cfg: RunConfig) -> dict:
    p = cfg.params
    if p["suite"] not in ("nonlinear", "affine"):
        raise UsageError(f"unknown suite {p['suite']!r}")
    icfg = ev.IfsConfig(suite=p["suite"], seeds=p["seeds"], train=_train_config(p, cfg.seed), jobs=cfg.jobs)
    res = ev.run_ifs_benchmark(icfg)
    out = _out_dir(p["out"])
    ev.atomic_write_text(out / "metrics.csv", res.csv())
    ev.atomic_write_text(out / "aggregate.csv", res.aggregate())
    ev.atomic_write_text(out / "report.txt", res.report())
    _save_config(cfg, out)
    return {"aggregate": str(out / "aggregate.csv"), "rows": len(res.table())}


def cmd_ablate(cfg: RunConfig) -> dict:
    p = cfg.params
    if p["which"] not in ("depth", "scale", "ordering"):
        raise UsageError(f"unknown ablation {p['which']!r}")
    base = ev.MatchedConfig(trials=p["trials"], methods=("cfp", "avg"), dpt=False,
                            train=_train_config(p, cfg.seed), jobs=cfg.jobs)
    table = ev.run_ablations(p["which"], base)
    out = _out_dir(p["out"])
    ev.atomic_write_text(out / f"ablation_{p['which']}.csv", table.csv())
    _save_config(cfg, out)
    return {"table": str(out / f"ablation_{p['which']}.csv")}


def cmd_verify(cfg: RunConfig) -> dict:
    p = cfg.params
    s, lam, L, K = p["s"], p["lambda_max"], p["L"], p["K"]
    if not 0 < s < 1:
        raise UsageError("verify needs 0 < s < 1")
    bound = 2 * lam**2 * s**L / (1 - s)
    report: dict = {"truncation_bound": bound, "tree_diameter": metric.tree_diameter(s, L)}
    try:
        report["planner"] = json.loads(metric.plan_truncation(p["eps"], s, lam, K).to_json())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    checks = {}
    if p["hierarchy"] or p["trial"] is not None:
        if p["hierarchy"]:
            h = load_hierarchy(p["hierarchy"])
            if h.depth < L + 1:
                raise UsageError(f"hierarchy depth {h.depth} too shallow for L={L}")
            g = None
        else:
            g = sample_neural_cfg(2, K, NeuralCfgHyper(), p["trial"])
            lam = min(lam, g.lambda_max)
            h = rollout(g, np.zeros(2), s=s, L=L + p["ref_extra"])
        part = voronoi_cells(h, 2, p["samples"], lam, make_rng(cfg.seed), depth=h.depth)
        gap = metric.truncation_gap(h, L, lambda_max=lam, partition=part)
        checks["truncation"] = {"gap": gap.gap, "bound": gap.bound, "slack": gap.slack, "pass": gap.ok}
        dia = metric.diameter_bounds_check(h, min(L, 5), s, lam, partition=part, generator=g)
        checks["diameters"] = {**asdict(dia), "pass": dia.ok}
        dom = metric.domination_check(h, min(L, 4), s, lam, partition=part, generator=g)
        checks["domination"] = {**asdict(dom), "pass": dom.ok}
        if g is not None:
            lip = neural_cfg_lipschitz(g, 20_000, make_rng(cfg.seed))
            report["lipschitz"] = asdict(lip)
            report["planner"] = json.loads(metric.plan_truncation(
                p["eps"], s, lam, K, lipschitz=lip.L_r, sep=g.sigma_min * g.packing.epsilon).to_json())
    report["checks"] = checks
    report["pass"] = all(c["pass"] for c in checks.values())
    out = _out_dir(p["out"])
    _atomic_write(out / "verify.json", json.dumps(report, indent=2, default=float))
    _save_config(cfg, out)
    return {"report": str(out / "verify.json"), "truncation_bound": bound, "pass": report["pass"]}


def cmd_plot(cfg: RunConfig) -> dict:
    p = cfg.params
    if p["csv"] is None:
        raise UsageError("plot needs --csv")
    try:
        text = Path(p["csv"]).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {p['csv']}: {exc}") from None
    try:
        svg = plot_csv(text, p["metric"], p["title"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out, svg)
    _save_config(cfg, out.parent)
    return {"svg": str(out)}


_TRAIN_DEFAULTS = {"lr": 1e-3, "epochs": 3000, "hidden": 64, "layers": 4, "activation": "relu"}

COMMANDS = {
    "gen": (cmd_gen, {"kind": "neural-cfg", "d": 2, "K": 3, "trial": 0, "family": "nl-sierpinski",
                      "packing_eps": None, "matrix": None, "bias": None, "out": "generator.json"}),
    "rollout": (cmd_rollout, {"generator": None, "depth": 6, "s": None, "root": None,
                              "allow_large": False, "csv_level": None, "out": "hierarchy.json"}),
    "train": (cmd_train, {"hierarchy": None, "method": "cfp", "L_train": 2, "out": "model",
                          **_TRAIN_DEFAULTS}),
    "eval": (cmd_eval, {"hierarchy": None, "model": None, "L_train": 2, "L_eval": 11, "trials": 9,
                        "no_dpt": False, "out": "eval", **_TRAIN_DEFAULTS}),
    "bench": (cmd_bench, {"suite": "nonlinear", "seeds": 5, "out": "bench", **_TRAIN_DEFAULTS}),
    "ablate": (cmd_ablate, {"which": "depth", "trials": 9, "out": "ablate", **_TRAIN_DEFAULTS}),
    "verify": (cmd_verify, {"s": 0.5, "lambda_max": 1.0, "L": 4, "K": 3, "eps": 0.1,
                            "hierarchy": None, "trial": None, "ref_extra": 4, "samples": 200_000,
                            "out": "verify"}),
    "plot": (cmd_plot, {"csv": None, "metric": "mse", "title": "", "out": "plot.svg"}),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="classfield", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON RunConfig; flags override its fields")
        sp.add_argument("--seed", type=int, help=f"global seed (fallback: ${SEED_ENV}, then 0)")
        sp.add_argument("--jobs", type=int, help="parallel trials")
        sp.add_argument("--out")

    def train_flags(sp):
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--hidden", type=int)
        sp.add_argument("--layers", type=int, help="number of affine layers")
        sp.add_argument("--activation", choices=("relu", "gelu"))

    sp = sub.add_parser("gen", help="sample or define a generator")
    common(sp)
    sp.add_argument("--kind", choices=("neural-cfg", "ifs", "constant", "affine"))
    sp.add_argument("--d", type=int)
    sp.add_argument("--K", type=int)
    sp.add_argument("--trial", type=int)
    sp.add_argument("--family")
    sp.add_argument("--packing-eps", dest="packing_eps", type=float)
    sp.add_argument("--matrix")
    sp.add_argument("--bias")

    sp = sub.add_parser("rollout", help="recursive rollout of a saved generator")
    common(sp)
    sp.add_argument("--generator")
    sp.add_argument("--depth", type=int)
    sp.add_argument("--s", type=float)
    sp.add_argument("--root", help="JSON vector")
    sp.add_argument("--allow-large", dest="allow_large", action="store_true", default=None)
    sp.add_argument("--csv-level", dest="csv_level", type=int)

    sp = sub.add_parser("train", help="fit a predictor on a hierarchy prefix")
    common(sp)
    train_flags(sp)
    sp.add_argument("--hierarchy")
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--L-train", dest="L_train", type=int)

    sp = sub.add_parser("eval", help="held-out level metrics (matched CFG experiment without --hierarchy)")
    common(sp)
    train_flags(sp)
    sp.add_argument("--hierarchy")
    sp.add_argument("--model")
    sp.add_argument("--L-train", dest="L_train", type=int)
    sp.add_argument("--L-eval", dest="L_eval", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--no-dpt", dest="no_dpt", action="store_true", default=None)

    sp = sub.add_parser("bench", help="IFS benchmark suite")
    common(sp)
    train_flags(sp)
    sp.add_argument("suite", nargs="?", choices=("nonlinear", "affine"))
    sp.add_argument("--seeds", type=int)

    sp = sub.add_parser("ablate", help="depth, scale or ordering ablation")
    common(sp)
    train_flags(sp)
    sp.add_argument("which", nargs="?", choices=("depth", "scale", "ordering"))
    sp.add_argument("--trials", type=int)

    sp = sub.add_parser("verify", help="truncation, diameter and domination bounds")
    common(sp)
    sp.add_argument("--s", type=float)
    sp.add_argument("--lambda-max", dest="lambda_max", type=float)
    sp.add_argument("--L", type=int)
    sp.add_argument("--K", type=int)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--hierarchy")
    sp.add_argument("--trial", type=int, help="sample a matched neural CFG for empirical checks")
    sp.add_argument("--ref-extra", dest="ref_extra", type=int)
    sp.add_argument("--samples", type=int)

    sp = sub.add_parser("plot", help="SVG of level-wise log10 error curves")
    common(sp)
    sp.add_argument("--csv")
    sp.add_argument("--metric", choices=ev.METRICS)
    sp.add_argument("--title")
    return ap


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    fn, defaults = COMMANDS[args.command]
    try:
        cfg = _merge(args, defaults)
        result = fn(cfg)
    except UsageError as exc:
        return _fail(2, "usage", str(exc))
    except Exception as exc:  # runtime failure: machine-readable report, exit 1
        if os.environ.get("CLASSFIELD_DEBUG"):
            traceback.print_exc()
        return _fail(1, type(exc).__name__, str(exc))
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
