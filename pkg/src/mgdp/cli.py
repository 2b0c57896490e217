"""Command-line entry point: ``mgdp <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .errors import MgdpError
from .experiment import ExperimentConfig, prepare, run_experiment, sensitivity
from .lr import mode_to_flat, solve_lr
from .netmodel import load_case, to_per_unit, validate_radial
from .privacy import PrivacyConfig, exact_sensitivity, perturb_pickup, stream
from .restore import enumerate_fr_oracle, solve_fr

log = logging.getLogger("mgdp")


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def read_matrix(path):
    """Pickup matrix from JSON (nested list or ``{"noisy": ...}``) or headerless CSV."""
    p = Path(path)
    if p.suffix == ".json":
        data = json.loads(p.read_text())
        if isinstance(data, dict):
            data = data.get("noisy", data.get("pickup"))
        return np.asarray(data, dtype=float)
    with p.open() as fh:
        return np.asarray([[float(x) for x in row] for row in csv.reader(fh) if row], dtype=float)


def cmd_parse(args):
    case = load_case(args.case, args.format)
    root = args.root if args.root is not None else case.root
    topo = validate_radial(case, root)
    net = to_per_unit(case, args.ess or [], root=root) if topo.is_tree else None
    return {
        "base_mva": case.base_mva,
        "n_buses": len(case.buses),
        "n_branches": len(case.branches),
        "root": root,
        "radial": topo.is_tree,
        "components": topo.n_components,
        "cycle": topo.cycle_witness,
        "ess_buses": list(args.ess or []),
        "n_loads": None if net is None else net.n_loads,
        "total_load_mw": sum(b.p_load for b in case.buses),
        "total_load_mvar": sum(b.q_load for b in case.buses),
        "notes": [] if net is None else list(net.notes),
    }


def cmd_lr(args):
    cfg = _config(args)
    setup = prepare(cfg)
    sol = solve_lr(setup.ctx, setup.d)
    out = sol.to_dict()
    out["audit"] = sol.audit(setup.ctx)
    out["mode"] = mode_to_flat(setup.d).tolist()
    return out


def cmd_sens(args):
    cfg = _config(args)
    opts = dict(cfg.sensitivity, mode="greedy")
    if args.tol is not None:
        opts["tol"] = args.tol
    if args.max_iter is not None:
        opts["max_iter"] = args.max_iter
    if args.scoring is not None:
        opts["scoring"] = args.scoring
    cfg.sensitivity = opts
    _, trace = sensitivity(cfg, prepare(cfg))
    out = trace.to_dict()
    out["unique_iterates"] = trace.unique_iterates
    return out


def cmd_dp(args):
    cfg = _config(args)
    setup = prepare(cfg)
    delta = args.delta if args.delta is not None else sensitivity(cfg, setup)[0]
    pcfg = PrivacyConfig(args.epsilon, delta, cfg.seed)
    r = solve_lr(setup.ctx, setup.d).pickup
    out = perturb_pickup(r, pcfg, stream(cfg.seed, f"mechanism/{float(args.epsilon)!r}"))
    # only the noisy release leaves the process
    return {"epsilon": args.epsilon, "delta": delta, "scale": out.scale, "noisy": out.noisy.tolist()}


def cmd_fr(args):
    from .experiment import fr_limits

    cfg = _config(args)
    ctx = prepare(cfg).ctx
    res = solve_fr(ctx, read_matrix(args.noisy_pickup), fr_limits(cfg), seed=cfg.seed,
                   trace=args.trace)
    return res.to_dict()


def cmd_oracle(args):
    cfg = _config(args)
    setup = prepare(cfg)
    delta, pair = exact_sensitivity(setup.ctx, args.max_bits)
    out = {"exact_delta": delta, "pair": pair}
    if args.noisy_pickup:
        out["fr"] = enumerate_fr_oracle(setup.ctx, read_matrix(args.noisy_pickup), args.max_bits).to_dict()
    return out


def cmd_run(args):
    cfg = _config(args)
    report, _ = run_experiment(cfg, args.out)
    out = report.to_dict()
    out.pop("runtimes")
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="mgdp", description="Private load restoration for radial microgrids.")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--out", default=None, help="output file (or directory for 'run')")
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a case and report its topology")
    p.add_argument("--case", required=True)
    p.add_argument("--format", choices=("matpower", "json"), default=None)
    p.add_argument("--root", type=int, default=None)
    p.add_argument("--ess", type=int, nargs="*", help="storage buses")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("lr", help="non-private restoration for the configured mode vector")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_lr)

    p = sub.add_parser("sens", help="greedy sensitivity estimate")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--scoring", choices=("flip", "dual"))
    p.set_defaults(func=cmd_sens)

    p = sub.add_parser("dp", help="noisy pickup from the Laplace mechanism")
    p.add_argument("--config", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, help="sensitivity; estimated when omitted")
    p.set_defaults(func=cmd_dp)

    p = sub.add_parser("fr", help="restore feasibility of a noisy pickup")
    p.add_argument("--config", required=True)
    p.add_argument("--noisy-pickup", required=True, help="JSON or CSV matrix (loads x steps)")
    p.add_argument("--trace", help="write one JSON line per branch-and-bound node")
    p.set_defaults(func=cmd_fr)

    p = sub.add_parser("oracle", help="brute-force checks for tiny instances")
    p.add_argument("--config", required=True)
    p.add_argument("--noisy-pickup")
    p.add_argument("--max-bits", type=int, default=16)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("run", help="full pipeline with tables")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", kernels.backend())
    try:
        result = args.func(args)
    except (MgdpError, ValueError, FileNotFoundError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    if args.command == "run":
        _emit(result, None)
    else:
        _emit(result, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
