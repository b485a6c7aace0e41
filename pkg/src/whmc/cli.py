"""Command-line harness: ``whmc generate | run | modesearch | rem``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .geometry import Mode, ModeLibrary
from .integrators import NumericalError
from .metrics import (
    rem,
    rem_by_iteration,
    time_grid,
    time_to_threshold,
    true_mean_gmm,
    write_metrics_jsonl,
    write_rem_csv,
)
from .modesearch import known_basin_fraction, prune_library, search_new_modes, update_library
from .regeneration import HybridConfig, fit_independence_kernel, hybrid_chain, write_events
from .samplers import Sampler, SamplerConfig, Trace, run_chain, write_manifest
from .targets import (
    GaussianMixtureTarget,
    four_mode_benchmark,
    generate_gmm_instance,
    generate_sensor_data,
    load_target,
    save_target,
    welling_target,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    """Invalid or incomplete configuration."""


def chain_seed(master, index):
    """Per-chain seed material; chain ``i`` is unaffected by how many chains run."""
    return [int(master), int(index)]


def load_config(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc


def require(cfg, key, where="config"):
    if key not in cfg:
        raise ConfigError(f"missing required key '{key}' in {where}")
    return cfg[key]


def gmm_library(target):
    """Library holding the exact components of a Gaussian mixture."""
    return ModeLibrary(tuple(Mode(m, p, w) for m, p, w in zip(target.means, target.precisions, target.weights)))


# -- generate -------------------------------------------------------------------


def _make_instance(spec):
    kind = require(spec, "type", "target spec")
    seed = spec.get("seed", 0)
    if kind == "gmm":
        target = generate_gmm_instance(int(require(spec, "K", "gmm spec")), int(require(spec, "D", "gmm spec")), seed, spec.get("spacing", 20.0))
        return target, gmm_library(target), {"seed": seed}
    if kind == "sensor":
        target, truth = generate_sensor_data(seed)
        return target, None, {"seed": seed, "truth": truth.tolist()}
    if kind == "welling":
        return welling_target(seed, int(spec.get("n", 1000))), None, {"seed": seed}
    if kind == "four_mode":
        target, known = four_mode_benchmark()
        lib = gmm_library(target)
        known_lib = ModeLibrary(tuple(lib[i] for i in known))
        return target, known_lib, {"known": list(known)}
    raise ConfigError(f"unknown target type {kind!r}")


def cmd_generate(args):
    spec = load_config(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for item in require(spec, "targets"):
        name = require(item, "name", "target spec")
        path = out / f"{name}.json"
        lib_path = out / f"{name}.library.json"
        if not args.force and (path.exists() or lib_path.exists()):
            raise ConfigError(f"{path} exists; pass --force to overwrite")
        target, library, meta = _make_instance(item)
        save_target(target, path, {"spec": item, **meta})
        written.append(str(path))
        if library is not None:
            library.save(lib_path)
            written.append(str(lib_path))
    print(json.dumps({"written": written}))
    return EXIT_OK


# -- run ------------------------------------------------------------------------


def _reference(cfg, target):
    ref = cfg.get("reference")
    if ref is None:
        return None
    if ref == "true_mean":
        if not isinstance(target, GaussianMixtureTarget):
            raise ConfigError("reference 'true_mean' needs a gmm target")
        return true_mean_gmm(target)
    if isinstance(ref, list):
        return np.asarray(ref, dtype=float)
    data = json.loads(Path(ref).read_text())
    return np.asarray(data["mean"] if isinstance(data, dict) else data, dtype=float)


def cmd_run(args):
    cfg = load_config(args.config)
    target = load_target(require(cfg, "target"))
    lib_path = cfg.get("library")
    library = ModeLibrary.load(lib_path) if lib_path else ModeLibrary()
    try:
        sampler_cfg = SamplerConfig.from_dict(cfg.get("sampler", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sampler section: {exc}") from exc
    mode = cfg.get("mode", "chain")
    n_chains = int(cfg.get("n_chains", 1))
    master = int(cfg.get("seed", 0))
    n_iter = cfg.get("n_iter")
    budget = cfg.get("wall_budget")
    if n_iter is None and budget is None:
        raise ConfigError("missing required key 'n_iter' or 'wall_budget' in config")
    out = Path(cfg.get("out_dir", args.out or "run_output"))
    out.mkdir(parents=True, exist_ok=True)
    theta_star = _reference(cfg, target)
    init = cfg.get("initial")
    records = []
    for c in range(n_chains):
        seed = chain_seed(master, c)
        rng = np.random.default_rng(seed)
        if init is not None:
            start = np.asarray(init, dtype=float)
        elif len(library):
            start = library[c % len(library)].location
        else:
            raise ConfigError("missing required key 'initial' in config (no library to start from)")
        if mode == "chain":
            try:
                sampler = Sampler(target, sampler_cfg, library)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            trace = run_chain(sampler, start, n_iter=n_iter, rng=rng, wall_budget=budget)
            final_lib = library
        elif mode == "hybrid":
            hcfg = cfg.get("hybrid", {})
            hybrid = HybridConfig(
                sampler=sampler_cfg,
                alternation=int(hcfg.get("alternation", 1)),
                n_starts=int(hcfg.get("n_starts", 20)),
                temperature=float(hcfg.get("temperature", 1.05)),
                burn_in=int(hcfg.get("burn_in", 0)),
            )
            res = hybrid_chain(
                start, target, library, hybrid, rng, n_cycles=n_iter, wall_budget=budget,
                max_regenerations=hcfg.get("max_regenerations"),
            )
            trace, final_lib = res.trace, res.library
            write_events(out / f"events_chain{c}.jsonl", res.events)
            final_lib.save(out / f"library_chain{c}.json")
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        trace.write_csv(out / f"chain{c}.csv")
        rec = {"chain": c, "seed": seed, "n_samples": len(trace), "acceptance": trace.acceptance_rate,
               "jump_rate": float(np.mean(trace.jumped)) if len(trace) else 0.0}
        if theta_star is not None and len(trace):
            curve = rem(trace, theta_star, budget=budget)
            write_rem_csv(out / f"rem_chain{c}.csv", curve)
            rec["final_rem"] = float(rem_by_iteration(trace.as_array(), theta_star)[-1])
        records.append(rec)
        write_manifest(out / f"manifest_chain{c}.json", sampler_cfg, seed, final_lib,
                       {"run_config": cfg, "chain": c, "mode": mode, "initial": trace.initial.tolist()})
    write_metrics_jsonl(out / "metrics.jsonl", records)
    print(json.dumps({"out_dir": str(out), "chains": records}))
    return EXIT_OK


# -- modesearch -----------------------------------------------------------------


def cmd_modesearch(args):
    cfg = load_config(args.config)
    target = load_target(require(cfg, "target"))
    lib_path = cfg.get("library")
    library = ModeLibrary.load(lib_path) if lib_path else ModeLibrary()
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    n_starts = int(cfg.get("n_starts", 20))
    D = target.dim
    if "start_box" in cfg:
        lo, hi = (float(b) for b in cfg["start_box"])
        starts = rng.uniform(lo, hi, (n_starts, D))
    elif "start_mean" in cfg or not len(library):
        mean = np.broadcast_to(np.asarray(cfg.get("start_mean", 0.0), dtype=float), (D,))
        sd = np.broadcast_to(np.asarray(cfg.get("start_sd", 1.0), dtype=float), (D,))
        starts = mean + sd * rng.standard_normal((n_starts, D))
    else:
        starts = None
    if len(library):
        kernel = fit_independence_kernel(library, None, target)
        new, reports = search_new_modes(target, kernel, library, n_starts, float(cfg.get("temperature", 1.05)), rng,
                                        starts=starts)
    else:
        new, reports = search_new_modes(target, None, library, n_starts, 1.0, rng, starts=starts, use_residual=False,
                                        max_iter=int(cfg.get("max_iter", 200)))
    updated = update_library(library, new)
    if cfg.get("min_weight") is not None:
        updated = prune_library(target, updated, float(cfg["min_weight"]))
    out = Path(require(cfg, "out"))
    updated.save(out)
    report = {
        "n_before": len(library),
        "n_after": len(updated),
        "new_modes": [m.location.tolist() for m in new],
        "known_basin_fraction": known_basin_fraction([r.end for r in reports], library) if len(library) else 0.0,
        "starts": [r.to_dict() for r in reports],
    }
    report_path = Path(cfg.get("report", str(out.with_suffix("")) + ".report.json"))
    report_path.write_text(json.dumps(report, indent=1))
    print(json.dumps({k: report[k] for k in ("n_before", "n_after", "new_modes")}))
    return EXIT_OK


# -- rem ------------------------------------------------------------------------


def cmd_rem(args):
    if args.reference is None and args.target is None:
        raise ConfigError("need --reference or --target")
    if args.reference is not None:
        data = json.loads(Path(args.reference).read_text())
        theta_star = np.asarray(data["mean"] if isinstance(data, dict) else data, dtype=float)
    else:
        target = load_target(args.target)
        if not isinstance(target, GaussianMixtureTarget):
            raise ConfigError("--target must be a gmm instance")
        theta_star = true_mean_gmm(target)
    traces = [Trace.read_csv(p) for p in args.traces]
    if any(len(t) == 0 for t in traces):
        raise ConfigError("empty trace file")
    budget = args.budget or max(t.times[-1] for t in traces)
    grid = time_grid(budget)
    cols = []
    for t in traces:
        curve = dict(map(tuple, rem(t, theta_star, times=grid)))
        cols.append([curve.get(g, np.nan) for g in grid])
    cols = np.array(cols)
    summary = []
    with open(args.out, "w") as fh:
        fh.write("time," + ",".join(f"chain{i}" for i in range(len(traces))) + ",mean,lower,upper\n")
        for j, g in enumerate(grid):
            vals = cols[:, j]
            ok = vals[np.isfinite(vals)]
            m = ok.mean() if len(ok) else np.nan
            half = 1.96 * ok.std(ddof=1) / np.sqrt(len(ok)) if len(ok) > 1 else 0.0
            fh.write(f"{g:.6g}," + ",".join(f"{v:.10g}" for v in vals) + f",{m:.10g},{m - half:.10g},{m + half:.10g}\n")
    for i, t in enumerate(traces):
        curve = rem(t, theta_star, times=grid)
        summary.append({
            "trace": str(args.traces[i]),
            "final_rem": float(rem_by_iteration(t.as_array(), theta_star)[-1]),
            "time_to_threshold": time_to_threshold(curve, args.threshold),
        })
    print(json.dumps({"threshold": args.threshold, "chains": summary}))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="whmc", description="Wormhole HMC experiment harness")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="materialize target instances from a spec file")
    g.add_argument("spec")
    g.add_argument("--out", default="data")
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.set_defaults(func=cmd_generate)
    r = sub.add_parser("run", help="run chains from a config file")
    r.add_argument("config")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_run)
    m = sub.add_parser("modesearch", help="offline mode search against a target and library")
    m.add_argument("config")
    m.set_defaults(func=cmd_modesearch)
    e = sub.add_parser("rem", help="REM curves from trace CSVs")
    e.add_argument("traces", nargs="+")
    e.add_argument("--reference")
    e.add_argument("--target")
    e.add_argument("--out", default="rem.csv")
    e.add_argument("--threshold", type=float, default=0.1)
    e.add_argument("--budget", type=float, default=None)
    e.set_defaults(func=cmd_rem)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
