"""Command line entry point: ``pipecomp <subcommand> ...``.

Exit codes: 0 ok, 1 runtime failure, 2 bad flags / missing or invalid config,
3 when at least one training run diverged.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness as hn
from . import pipeline as pl
from . import quadratic as qd

EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


def _out_dir(args, fallback: str | None = None) -> Path:
    d = args.out or fallback or os.environ.get(hn.OUT_ENV) or "runs"
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _search_spec(args) -> qd.SearchSpec:
    return qd.SearchSpec(n_eta=args.n_eta, n_lambda=args.n_lambda, n_m=args.n_m)


def _coef_params(args) -> dict:
    return {k: getattr(args, k) for k in ("a", "b", "T") if getattr(args, k) is not None}


def _write_sidecar(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


# -- quadratic analysis ------------------------------------------------------

def cmd_quad_heatmap(args) -> int:
    m_grid = np.linspace(0.0, args.m_max, args.n_m)
    el_grid = np.linspace(args.el_max / args.n_el, args.el_max, args.n_el)
    params = _coef_params(args)
    hm = qd.stability_heatmap(args.method, args.delay, m_grid, el_grid, **params)
    out = _out_dir(args)
    stem = out / f"heatmap_{args.method}_D{args.delay}"
    hn.write_rows(stem.with_suffix(".csv"), list(hm.rows()), ("m", "eta_lambda", "r_max", "stable"))
    _write_sidecar(stem.with_suffix(".json"), {
        "command": "quad-heatmap", "method": args.method, "D": args.delay, "params": params,
        "search_spec": {"m_grid": m_grid.tolist(), "eta_lambda_grid": el_grid.tolist()}})
    print(f"quad-heatmap {args.method} D={args.delay}: {int((~hm.unstable).sum())}/{hm.r_max.size} stable cells "
          f"-> {stem.with_suffix('.csv')}")
    return 0


def cmd_quad_halflife(args) -> int:
    spec = _search_spec(args)
    params = _coef_params(args)
    rows = []
    for method in args.method.split(","):
        for D in _ints(args.delays):
            res = qd.optimal_halflife(method, args.kappa, D, params, spec)
            rows.append({"method": method, "D": D, "kappa": args.kappa, "m": res.m_star,
                         "eta_lambda": res.eta_star, "half_life": res.half_life, "r_star": res.r_star,
                         "stable": res.feasible})
    out = _out_dir(args)
    stem = out / f"halflife_k{args.kappa:g}"
    hn.write_rows(stem.with_suffix(".csv"), rows,
                  ("method", "D", "kappa", "m", "eta_lambda", "half_life", "r_star", "stable"))
    _write_sidecar(stem.with_suffix(".json"), {"command": "quad-halflife", "params": params,
                                               "search_spec": spec.to_dict()})
    best = ", ".join(f"{r['method']}@D{r['D']}={r['half_life']:.4g}" for r in rows)
    print(f"quad-halflife kappa={args.kappa:g}: {best}")
    return 0


def cmd_quad_sweep(args) -> int:
    spec = _search_spec(args)
    m_grid = np.linspace(0.0, spec.m_max, args.n_m)
    scales = _floats(args.t_scales)
    rows = qd.momentum_horizon_sweep(args.kappa, args.delay, m_grid, scales, args.method, spec)
    out = _out_dir(args)
    stem = out / f"sweep_{args.method}_k{args.kappa:g}_D{args.delay}"
    hn.write_rows(stem.with_suffix(".csv"), rows,
                  ("m", "T_scale", "half_life", "stable", "r_star", "eta_lambda_min"))
    _write_sidecar(stem.with_suffix(".json"), {
        "command": "quad-sweep", "method": args.method, "kappa": args.kappa, "D": args.delay,
        "T_scales": scales, "search_spec": {**spec.to_dict(), "m_grid": m_grid.tolist()}})
    best = min(rows, key=lambda r: r["half_life"])
    print(f"quad-sweep {args.method} kappa={args.kappa:g} D={args.delay}: best half-life "
          f"{best['half_life']:.4g} at m={best['m']:.4g}, T_scale={best['T_scale']:g}")
    return 0


# -- training ----------------------------------------------------------------

def _load(args, runner: str | None) -> hn.ExperimentConfig:
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = hn.load_config(args.config)
    d = cfg.to_dict()
    if runner is not None:
        d.setdefault("pipeline", {})["runner"] = runner
    if getattr(args, "delay", None) is not None:
        d.setdefault("pipeline", {})["delay"] = args.delay
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if getattr(args, "steps", None) is not None:
        d["steps"] = args.steps
    return hn.ExperimentConfig.from_dict(d)


def _train(args, runner: str | None) -> int:
    cfg = _load(args, runner)
    out = _out_dir(args, cfg.output_dir)
    summary = hn.run_experiment(cfg, out, save=True, workers=args.workers)
    std = summary["std_final_loss"]
    print(f"{cfg.name}: {len(summary['seeds'])} seed(s), {cfg.steps} steps, mean final loss "
          f"{summary['mean_final_loss']:.6g}" + ("" if std is None else f" (std {std:.3g})")
          + f", diverged {summary['diverged']} -> {out}")
    return EXIT_DIVERGED if summary["diverged"] else 0


def cmd_train(args) -> int:
    return _train(args, None)


def cmd_pb_train(args) -> int:
    return _train(args, "pb")


def cmd_delay_train(args) -> int:
    return _train(args, "delay")


def cmd_sweep(args) -> int:
    cfg = _load(args, None)
    values = [_value(v) for v in args.values.split(",")]
    out = _out_dir(args, cfg.output_dir)
    rows = hn.sweep(cfg, args.param, values, out, save=True, workers=args.workers)
    cells = ", ".join(f"{r['value']}: {r['mean_final_loss']:.4g}" for r in rows)
    print(f"sweep {args.param}: {cells}")
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) else 0


# -- utilization -------------------------------------------------------------

def _kv(items: list[str], keys: tuple[str, ...]) -> dict:
    out = {}
    for it in items:
        k, sep, v = it.partition("=")
        if not sep or k not in keys:
            raise UsageError(f"expected {'/'.join(keys)}=<value>, got {it!r}")
        out[k] = v
    missing = [k for k in keys if k not in out]
    if missing:
        raise UsageError(f"missing {', '.join(missing)}")
    return out


def cmd_util(args) -> int:
    if args.pipeline:
        kv = _kv(args.pipeline, ("N", "S"))
        try:
            N, S = int(kv["N"]), int(kv["S"])
        except ValueError:
            raise UsageError("N and S must be integers") from None
        print(f"{pl.pipeline_utilization(N, S):.6f}")
    elif args.dp:
        kv = _kv(args.dp, ("flop", "sps", "peak"))
        try:
            vals = {k: float(v) for k, v in kv.items()}
        except ValueError:
            raise UsageError("flop, sps and peak must be numbers") from None
        print(f"{pl.dp_utilization(vals['flop'], vals['sps'], vals['peak']):.6f}")
    else:
        raise UsageError("util needs --pipeline N=.. S=.. or --dp flop=.. sps=.. peak=..")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipecomp", description="Delay-compensated momentum and pipelined backprop.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False):
        sp.add_argument("--out", help=f"output directory (default: ${hn.OUT_ENV} or ./runs)")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        if config:
            sp.add_argument("--config", required=True, help="experiment JSON config")
            sp.add_argument("--steps", type=int, help="override the config's step count")
            sp.add_argument("--workers", type=int, default=1, help="parallel processes over seeds")

    def quad(sp):
        sp.add_argument("--a", type=float)
        sp.add_argument("--b", type=float)
        sp.add_argument("--T", type=float)

    def search(sp):
        sp.add_argument("--kappa", type=float, default=1e3)
        sp.add_argument("--n-eta", type=int, default=200)
        sp.add_argument("--n-lambda", type=int, default=200)
        sp.add_argument("--n-m", type=int, default=100)

    sp = sub.add_parser("quad-heatmap", help="r_max over an (m, eta*lambda) grid")
    common(sp)
    quad(sp)
    sp.add_argument("--method", choices=qd.METHODS, required=True)
    sp.add_argument("--delay", type=int, default=0)
    sp.add_argument("--n-m", type=int, default=100)
    sp.add_argument("--n-el", type=int, default=100)
    sp.add_argument("--m-max", type=float, default=0.99)
    sp.add_argument("--el-max", type=float, default=4.0)
    sp.set_defaults(func=cmd_quad_heatmap)

    sp = sub.add_parser("quad-halflife", help="optimal half-life per method and delay")
    common(sp)
    quad(sp)
    search(sp)
    sp.add_argument("--method", default=",".join(qd.METHODS), help="comma-separated methods")
    sp.add_argument("--delays", default="0", help="comma-separated delays")
    sp.set_defaults(func=cmd_quad_halflife)

    sp = sub.add_parser("quad-sweep", help="best half-life over (m, T = scale * D)")
    common(sp)
    search(sp)
    sp.add_argument("--method", choices=("lwp", "lwp_w_plus_gsc"), default="lwp")
    sp.add_argument("--delay", type=int, required=True)
    sp.add_argument("--t-scales", default="0,0.5,1,1.5,2,2.5,3")
    sp.set_defaults(func=cmd_quad_sweep)

    for name, func, help_ in (("train", cmd_train, "run a config with its own runner"),
                              ("pb-train", cmd_pb_train, "pipelined backprop simulator"),
                              ("delay-train", cmd_delay_train, "uniform gradient delay")):
        sp = sub.add_parser(name, help=help_)
        common(sp, config=True)
        if name == "delay-train":
            sp.add_argument("--delay", type=int, help="override pipeline.delay")
        sp.set_defaults(func=func)

    sp = sub.add_parser("sweep", help="grid of runs over one config key")
    common(sp, config=True)
    sp.add_argument("--param", required=True, help="dotted key, e.g. optimizer.mitigation.gamma")
    sp.add_argument("--values", required=True, help="comma-separated values (JSON literals)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("util", help="utilization formulas")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--pipeline", nargs="+", metavar="K=V", help="N=<micro-batches> S=<stages>")
    g.add_argument("--dp", nargs="+", metavar="K=V", help="flop=<per sample> sps=<samples/s> peak=<flop/s>")
    sp.set_defaults(func=cmd_util)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, hn.ConfigError, FileNotFoundError) as exc:
        print(f"pipecomp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"pipecomp {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
