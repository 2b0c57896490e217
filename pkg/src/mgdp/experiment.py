"""Experiment configuration, the end-to-end private restoration pipeline and its tables."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import IoFailure
from .lr import EssFleet, LoadForecast, LrContext, is_lr_feasible, solve_lr
from .netmodel import load_case, to_per_unit
from .privacy import PrivacyConfig, estimate_sensitivity, perturb_pickup, stream
from .restore import FrLimits, solve_fr

logger = logging.getLogger(__name__)

ESS_FIELDS = ("s_min", "s_max", "p_ch_max", "p_dis_max", "gamma_ch", "gamma_dis")


@dataclass
class ExperimentConfig:
    case_path: str
    ess_buses: list
    ess: dict
    format: str | None = None
    root: int | None = None
    v_bounds: list | None = None
    horizon: int = 6
    epsilons: list = field(default_factory=list)
    seed: int = 0
    d_init: dict = field(default_factory=lambda: {"mode": "bernoulli", "p": 0.4})
    s_init: dict = field(default_factory=lambda: {"mode": "uniform", "lo_frac": 0.7, "hi_frac": 0.9})
    sensitivity: dict = field(default_factory=lambda: {"mode": "greedy", "tol": 1e-6, "max_iter": 100})
    weights: object = None
    fr: dict = field(default_factory=dict)
    output_dir: str = "mgdp-out"
    base_dir: str | None = None  # directory relative paths resolve against

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")
        if any(not e > 0 for e in self.epsilons):
            raise ValueError("every epsilon must be positive")
        missing = [k for k in ESS_FIELDS if k not in self.ess]
        if missing:
            raise ValueError(f"ess parameters missing: {missing}")
        dm = self.d_init.get("mode")
        if dm == "bernoulli":
            if not 0.0 <= float(self.d_init.get("p", 0.4)) <= 1.0:
                raise ValueError("bernoulli p must lie in [0, 1]")
        elif dm != "explicit":
            raise ValueError(f"unknown d_init mode {dm!r}")
        sm = self.s_init.get("mode")
        if sm == "uniform":
            lo, hi = float(self.s_init["lo_frac"]), float(self.s_init["hi_frac"])
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("s_init fractions need 0 <= lo <= hi <= 1")
        elif sm != "explicit":
            raise ValueError(f"unknown s_init mode {sm!r}")
        if self.sensitivity.get("mode") not in ("greedy", "fixed"):
            raise ValueError("sensitivity mode must be 'greedy' or 'fixed'")

    @classmethod
    def from_dict(cls, data, base_dir=None):
        data = dict(data)
        data.setdefault("base_dir", base_dir)
        return cls(**data)

    @classmethod
    def load(cls, path):
        """Read a JSON config; bare names resolve to the bundled configs."""
        p = Path(path)
        if p.exists():
            return cls.from_dict(json.loads(p.read_text()), str(p.resolve().parent))
        res = resources.files("mgdp") / "data" / (str(path) if str(path).endswith(".json") else f"{path}.json")
        if res.is_file():
            return cls.from_dict(json.loads(res.read_text()))
        raise FileNotFoundError(path)

    def to_dict(self):
        out = asdict(self)
        out.pop("base_dir")
        return out

    def resolve(self, path):
        p = Path(path)
        if not p.is_absolute() and self.base_dir and (Path(self.base_dir) / p).exists():
            return str(Path(self.base_dir) / p)
        return str(path)


@dataclass
class Setup:
    """Everything fixed before the private data is used: network, s_init and d."""

    ctx: LrContext
    d: np.ndarray
    s_init: np.ndarray


def build_context(cfg, s_init=None):
    case = load_case(cfg.resolve(cfg.case_path), cfg.format)
    net = to_per_unit(case, cfg.ess_buses, root=cfg.root,
                      v_bounds=None if cfg.v_bounds is None else tuple(cfg.v_bounds))
    if s_init is None:
        s_init = draw_s_init(cfg)
    ess = EssFleet.identical(cfg.ess_buses, s_init=s_init,
                             **{k: cfg.ess[k] for k in ESS_FIELDS},
                             **{k: cfg.ess[k] for k in ("q_min", "q_max") if k in cfg.ess})
    forecast = LoadForecast.constant(net, int(cfg.horizon), cfg.weights)
    return LrContext(net, ess, forecast)


def draw_s_init(cfg):
    opts = cfg.s_init
    n = len(cfg.ess_buses)
    if opts["mode"] == "explicit":
        return np.broadcast_to(np.asarray(opts["values"], dtype=float), (n,)).copy()
    s_max = np.broadcast_to(np.asarray(cfg.ess["s_max"], dtype=float), (n,))
    u = stream(cfg.seed, "s_init").uniform(opts["lo_frac"], opts["hi_frac"], n)
    return u * s_max


def draw_mode(cfg, ctx, max_draws=1000):
    """Initial mode vector; Bernoulli draws are repeated until one is restoration-feasible."""
    opts = cfg.d_init
    shape = (len(cfg.ess_buses), int(cfg.horizon))
    if opts["mode"] == "explicit":
        d = np.asarray(opts["bits"], dtype=np.int8)
        if d.shape != shape:
            d = d.reshape(shape[1], shape[0]).T  # flat time-major list
        return d
    rng = stream(cfg.seed, "d_init")
    for _ in range(max_draws):
        d = (rng.random(shape) < float(opts["p"])).astype(np.int8)
        if is_lr_feasible(ctx, d).feasible:
            return d
    raise RuntimeError(f"no restoration-feasible mode vector in {max_draws} draws")


def prepare(cfg):
    s_init = draw_s_init(cfg)
    ctx = build_context(cfg, s_init)
    return Setup(ctx, draw_mode(cfg, ctx), s_init)


def sensitivity(cfg, setup):
    """Returns ``(delta, trace_or_None)``."""
    opts = cfg.sensitivity
    if opts["mode"] == "fixed":
        return float(opts["value"]), None
    trace = estimate_sensitivity(setup.ctx, setup.d, tol=float(opts.get("tol", 1e-6)),
                                 max_iter=int(opts.get("max_iter", 100)),
                                 rng=stream(cfg.seed, "projection"),
                                 scoring=opts.get("scoring", "flip"))
    return trace.delta_estimate, trace


def fr_limits(cfg):
    return FrLimits(**{k: v for k, v in cfg.fr.items() if v is not None})


@dataclass
class Variant:
    epsilon: float
    noise: np.ndarray
    noisy: np.ndarray
    fr: object
    runtime: float

    def summary(self, ctx, d):
        w = ctx.forecast.weights
        fr = self.fr
        return {
            "epsilon": self.epsilon,
            "noise_l1": float(np.abs(self.noise).sum()),
            "noise_l2": float(np.linalg.norm(self.noise)),
            "objective_noisy": float((w * self.noisy).sum()),
            "objective_post": None if fr.r_hat is None else float((w * fr.r_hat).sum()),
            "fr_objective": fr.objective,
            "fr_status": fr.status,
            "fr_gap": fr.gap,
            "fr_nodes": fr.nodes_explored,
            "mismatch": None if fr.d_hat is None else int((fr.d_hat != d).sum()),
        }


@dataclass
class ExperimentReport:
    delta_estimate: float
    delta_source: str
    nonprivate_objective: float
    variants: list
    manifest: list
    seed: int
    s_init: list
    d_init: list  # flat time-major bits
    runtimes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def run_experiment(cfg, output_dir=None, *, write=True):
    """Full pipeline; returns ``(report, artefacts)`` where artefacts feed :func:`emit_tables`."""
    t0 = time.perf_counter()
    setup = prepare(cfg)
    ctx, d = setup.ctx, setup.d
    delta, trace = sensitivity(cfg, setup)
    t_sens = time.perf_counter() - t0
    base = solve_lr(ctx, d)
    limits = fr_limits(cfg)

    variants = []
    for eps in cfg.epsilons:
        t1 = time.perf_counter()
        pcfg = PrivacyConfig(float(eps), delta, cfg.seed)
        out = perturb_pickup(base.pickup, pcfg, stream(cfg.seed, f"mechanism/{float(eps)!r}"))
        fr = solve_fr(ctx, out.noisy, limits, rng=stream(cfg.seed, f"fr-repair/{float(eps)!r}"))
        variants.append(Variant(float(eps), out.noise, out.noisy, fr, time.perf_counter() - t1))

    flat = d.T.reshape(-1).astype(int).tolist()
    report = ExperimentReport(
        delta_estimate=delta,
        delta_source="fixed" if trace is None else f"greedy/{cfg.sensitivity.get('scoring', 'flip')}",
        nonprivate_objective=base.objective,
        variants=[v.summary(ctx, d) for v in variants],
        manifest=[],
        seed=int(cfg.seed),
        s_init=[float(s) for s in setup.s_init],
        d_init=flat,
        runtimes={"sensitivity": t_sens, "total": time.perf_counter() - t0,
                  **{f"eps={v.epsilon!r}": v.runtime for v in variants}},
    )
    artefacts = {"ctx": ctx, "d": d, "base": base, "variants": variants, "trace": trace}
    if write:
        target = cfg.resolve(output_dir or cfg.output_dir)
        report.manifest = emit_tables(report, artefacts, target)
    return report, artefacts


def _fmt(x):
    return "" if x is None else format(float(x), ".10g")


def _tables(report, art):
    ctx, d, base, variants = art["ctx"], art["d"], art["base"], art["variants"]
    net = ctx.network
    loads, buses, ess = net.load_buses, net.bus_ids, ctx.ess.buses
    T = ctx.horizon

    pick = io.StringIO()
    w = csv.writer(pick, lineterminator="\n")
    w.writerow(["t", "load_bus", "epsilon", "r_nonprivate", "r_noisy", "r_post"])
    for v in variants or [None]:
        for t in range(T):
            for i, bus in enumerate(loads):
                if v is None:
                    w.writerow([t, bus, "", _fmt(base.pickup[i, t]), "", ""])
                else:
                    post = None if v.fr.r_hat is None else v.fr.r_hat[i, t]
                    w.writerow([t, bus, _fmt(v.epsilon), _fmt(base.pickup[i, t]),
                                _fmt(v.noisy[i, t]), _fmt(post)])

    volt = io.StringIO()
    w = csv.writer(volt, lineterminator="\n")
    w.writerow(["t", "bus", "variant", "vmag"])
    sols = [("nonprivate", base)] + [(f"post_eps={_fmt(v.epsilon)}", v.fr.solution)
                                     for v in variants if v.fr.solution is not None]
    for name, sol in sols:
        for t in range(T):
            for n, bus in enumerate(buses):
                w.writerow([t, bus, name, _fmt(np.sqrt(max(sol.v[n, t], 0.0)))])

    modes = io.StringIO()
    w = csv.writer(modes, lineterminator="\n")
    w.writerow(["t", "ess_bus", "epsilon", "d_requested", "d_implemented", "mismatch"])
    for v in variants or [None]:
        for t in range(T):
            for e, bus in enumerate(ess):
                if v is None or v.fr.d_hat is None:
                    w.writerow([t, bus, "" if v is None else _fmt(v.epsilon), int(d[e, t]), "", ""])
                else:
                    di = int(v.fr.d_hat[e, t])
                    w.writerow([t, bus, _fmt(v.epsilon), int(d[e, t]), di, int(di != d[e, t])])

    summary = {k: v for k, v in report.to_dict().items() if k not in ("manifest", "runtimes")}
    return {
        "pickups.csv": pick.getvalue(),
        "voltages.csv": volt.getvalue(),
        "modes.csv": modes.getvalue(),
        "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
    }


def emit_tables(report, artefacts, output_dir):
    """Write the CSV/JSON tables; on any failure the files already written are removed."""
    out = Path(output_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in _tables(report, artefacts).items():
            path = out / name
            tmp = out / f".{name}.tmp"
            tmp.write_text(text)
            os.replace(tmp, path)
            written.append(str(path))
    except OSError as exc:
        for p in written:
            Path(p).unlink(missing_ok=True)
        raise IoFailure(f"could not write tables to {out}: {exc}") from exc
    return written
