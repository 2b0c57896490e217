"""Multi-period load restoration over the relaxed branch-flow model.

One assembler serves both the restoration problem (maximise weighted pickup
for a given charge/discharge schedule) and the feasibility-restoration
relaxation in :mod:`mgdp.restore`.  In the latter the pickup is written as
``offset + z`` with the noisy pickup as offset and ``z`` the perturbation.

Mode vectors are ``(n_ess, T)`` 0/1 arrays, 1 meaning charge.  Their flat
index follows time-major stacking, ``j = t * n_ess + e``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import kernels
from .conic import ConicProgram, RotatedCone, SocCone, Status, solve_conic
from .errors import DimensionMismatch, NotOptimal

logger = logging.getLogger(__name__)

LR_ACCEPT_TOL = 1e-6
LOSS_WEIGHT = 1e-3


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class EssFleet:
    """Storage parameters; energies in MWh, powers in MW/MVAr, factors in hours."""

    buses: tuple[int, ...]
    s_min: np.ndarray
    s_max: np.ndarray
    p_ch_max: np.ndarray
    p_dis_max: np.ndarray
    gamma_ch: np.ndarray
    gamma_dis: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    s_init: np.ndarray

    def __post_init__(self):
        n = len(self.buses)
        for name in ("s_min", "s_max", "p_ch_max", "p_dis_max", "gamma_ch", "gamma_dis",
                     "q_min", "q_max", "s_init"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            object.__setattr__(self, name, arr)
        if np.any(self.s_min < 0) or np.any(self.s_min >= self.s_max):
            raise ValueError("need 0 <= s_min < s_max")
        if np.any(self.p_ch_max <= 0) or np.any(self.p_dis_max <= 0):
            raise ValueError("charge/discharge limits must be positive")
        if np.any(self.gamma_ch <= 0) or np.any(self.gamma_dis <= 0):
            raise ValueError("conversion factors must be positive")
        if np.any(self.q_min > self.q_max):
            raise ValueError("need q_min <= q_max")
        if np.any(self.s_init < self.s_min) or np.any(self.s_init > self.s_max):
            # kept constructible: such a fleet has no feasible schedule at all
            logger.warning("initial state of charge outside its bounds")

    @classmethod
    def identical(cls, buses, *, s_min, s_max, p_ch_max, p_dis_max, gamma_ch, gamma_dis,
                  s_init, q_max=None, q_min=None):
        """Fleet of identical units; reactive limits default to +/- ``p_dis_max``."""
        q_max = p_dis_max if q_max is None else q_max
        q_min = -q_max if q_min is None else q_min
        return cls(tuple(buses), s_min, s_max, p_ch_max, p_dis_max, gamma_ch, gamma_dis,
                   q_min, q_max, s_init)

    @property
    def n(self):
        return len(self.buses)

    def with_s_init(self, s_init):
        return EssFleet(self.buses, self.s_min, self.s_max, self.p_ch_max, self.p_dis_max,
                        self.gamma_ch, self.gamma_dis, self.q_min, self.q_max, s_init)


@dataclass(frozen=True, eq=False)
class LoadForecast:
    """Demand magnitudes (MW, MVAr, positive) and pickup weights per (load bus, t)."""

    p_hat: np.ndarray
    q_hat: np.ndarray
    weights: np.ndarray
    pickup_cap: float = 1.0

    @property
    def horizon(self):
        return self.p_hat.shape[1]

    @classmethod
    def constant(cls, network, horizon, weights=None, pickup_cap=1.0):
        """Flat forecast equal to the network's load for every step."""
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        base = network.base_mva
        p = np.repeat((network.p_load[network.load_idx] * base)[:, None], horizon, axis=1)
        q = np.repeat((network.q_load[network.load_idx] * base)[:, None], horizon, axis=1)
        w = np.ones_like(p) if weights is None else np.broadcast_to(
            np.asarray(weights, dtype=float), p.shape).copy()
        if np.any(w < 0):
            raise ValueError("pickup weights must be nonnegative")
        return cls(np.abs(p), np.abs(q), w, float(pickup_cap))


@dataclass(frozen=True, eq=False)
class LrContext:
    network: object  # MicrogridNetwork
    ess: EssFleet
    forecast: LoadForecast

    def __post_init__(self):
        if tuple(self.ess.buses) != tuple(self.network.ess_buses):
            raise DimensionMismatch("ESS fleet buses differ from the network's storage buses")
        if self.forecast.p_hat.shape[0] != self.network.n_loads:
            raise DimensionMismatch(
                f"forecast covers {self.forecast.p_hat.shape[0]} loads, "
                f"network has {self.network.n_loads}")

    @property
    def base_mva(self):
        return self.network.base_mva

    @property
    def horizon(self):
        return self.forecast.horizon

    @property
    def n_bits(self):
        return self.ess.n * self.horizon

    @property
    def shape(self):
        """Pickup matrix shape ``(n_loads, T)``."""
        return (self.network.n_loads, self.horizon)


def as_mode(d, ctx):
    d = np.asarray(d)
    if d.shape != (ctx.ess.n, ctx.horizon):
        raise DimensionMismatch(f"mode vector has shape {d.shape}, "
                                f"expected {(ctx.ess.n, ctx.horizon)}")
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("mode vector entries must be 0 or 1")
    return d.astype(np.int8)


def mode_to_flat(d):
    return np.asarray(d).T.reshape(-1)


def mode_from_flat(bits, n_ess):
    return np.asarray(bits, dtype=np.int8).reshape(-1, n_ess).T.copy()


# ---------------------------------------------------------------------------
# program assembly
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class LrIndex:
    """Variable positions inside an assembled program."""

    z: np.ndarray  # (N_L, T) pickup (LR) or perturbation (FR)
    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    v: np.ndarray
    p_ch: np.ndarray
    p_dis: np.ndarray
    s: np.ndarray  # (N_E, T+1)
    d: np.ndarray = field(default=None)  # (N_E, T) relaxed mode variables, -1 where fixed
    t_obj: int = -1
    offset: np.ndarray = field(default=None)
    n_vars: int = 0


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []
        self.m = 0

    def add(self, cols, coefs, rhs):
        """Add len(rhs) rows; ``cols``/``coefs`` are lists of equally long arrays."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        k = len(rhs)
        rows = self.m + np.arange(k)
        for cc, vv in zip(cols, coefs):
            cc = np.asarray(cc).reshape(-1)
            self.r.append(rows)
            self.c.append(cc)
            self.v.append(np.broadcast_to(np.asarray(vv, dtype=float).reshape(-1)
                                          if np.ndim(vv) else vv, (k,)))
        self.b.append(rhs)
        self.m += k

    def matrix(self, n):
        if not self.m:
            return sp.csr_matrix((0, n)), np.zeros(0)
        A = sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r),
                                                     np.concatenate(self.c))), shape=(self.m, n))
        return A, np.concatenate(self.b)


def _assemble(ctx, *, mode=None, fixed_bits=None, offset=None):
    """Build the shared constraint set.

    Exactly one of ``mode`` (restoration: all bits given, pickup variable) or
    ``offset`` (feasibility restoration: pickup = offset + z) is used.
    ``fixed_bits`` maps flat index -> bit for the latter.
    """
    net, ess, fc = ctx.network, ctx.ess, ctx.forecast
    N, E, NE, NL, T = net.n_buses, net.n_branches, ess.n, net.n_loads, ctx.horizon
    base = ctx.base_mva
    fr = offset is not None

    counter = [0]

    def block(*shape):
        size = int(np.prod(shape))
        idx = np.arange(counter[0], counter[0] + size).reshape(shape)
        counter[0] += size
        return idx

    ix = LrIndex(z=block(NL, T), p=block(N, T), q=block(N, T), P=block(E, T), Q=block(E, T),
                 l=block(E, T), v=block(N, T), p_ch=block(NE, T), p_dis=block(NE, T),
                 s=block(NE, T + 1))
    ix.d = np.full((NE, T), -1, dtype=np.int64)
    bits = np.full((NE, T), -1, dtype=np.int64)
    if fr:
        for j, bit in (fixed_bits or {}).items():
            bits[j % NE, j // NE] = int(bit)
        # relaxed mode variables laid out in flat (time-major) order
        flat_free = [j for j in range(NE * T) if bits[j % NE, j // NE] < 0]
        for k, j in enumerate(flat_free):
            ix.d[j % NE, j // NE] = counter[0] + k
        counter[0] += len(flat_free)
        ix.t_obj = counter[0]
        counter[0] += 1
        offset = np.asarray(offset, dtype=float)
    else:
        bits = np.asarray(mode, dtype=np.int64)
        offset = np.zeros((NL, T))
    ix.offset = offset
    n = counter[0]
    ix.n_vars = n

    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    cap = fc.pickup_cap
    lo[ix.z] = 0.0 - offset
    hi[ix.z] = cap - offset
    lo[ix.v] = net.v_min[:, None]
    hi[ix.v] = net.v_max[:, None]
    lo[ix.l] = 0.0
    hi[ix.l] = net.l_max[:, None]
    # state of charge carried in p.u.-hours inside the program
    lo[ix.s] = (ess.s_min / base)[:, None]
    hi[ix.s] = (ess.s_max / base)[:, None]

    pch_max = (ess.p_ch_max / base)[:, None] * np.ones((1, T))
    pdis_max = (ess.p_dis_max / base)[:, None] * np.ones((1, T))
    lo[ix.p_ch] = 0.0
    lo[ix.p_dis] = 0.0
    known = bits >= 0
    hi[ix.p_ch] = np.where(known, bits * pch_max, pch_max)
    hi[ix.p_dis] = np.where(known, (1 - bits) * pdis_max, pdis_max)
    lo[ix.q[net.ess_idx]] = (ess.q_min / base)[:, None]
    hi[ix.q[net.ess_idx]] = (ess.q_max / base)[:, None]
    passive = np.setdiff1d(np.arange(N), np.concatenate([net.ess_idx, net.load_idx]))
    lo[ix.p[passive]] = hi[ix.p[passive]] = 0.0
    lo[ix.q[passive]] = hi[ix.q[passive]] = 0.0

    eq = _Rows()
    p_hat = fc.p_hat / base
    q_hat = fc.q_hat / base
    # loads follow the pickup at constant power factor
    eq.add([ix.p[net.load_idx], ix.z], [1.0, p_hat], (-p_hat * offset).ravel())
    eq.add([ix.q[net.load_idx], ix.z], [1.0, q_hat], (-q_hat * offset).ravel())
    # storage net injection
    eq.add([ix.p[net.ess_idx], ix.p_ch, ix.p_dis], [1.0, 1.0, -1.0], np.zeros(NE * T))

    # bus balance: parent inflow net of loss + injection - child outflow = 0
    r_bt = np.repeat(net.r[:, None], T, axis=1)
    x_bt = np.repeat(net.x[:, None], T, axis=1)
    bal = _Rows()
    rows_bus = np.arange(N * T).reshape(N, T)
    to_rows = rows_bus[net.br_to]
    from_rows = rows_bus[net.br_from]
    for inj, flow, react in ((ix.p, ix.P, r_bt), (ix.q, ix.Q, x_bt)):
        r_ = np.concatenate([rows_bus.ravel(), to_rows.ravel(), to_rows.ravel(), from_rows.ravel()])
        c_ = np.concatenate([inj.ravel(), flow.ravel(), ix.l.ravel(), flow.ravel()])
        v_ = np.concatenate([np.ones(N * T), np.ones(E * T), -react.ravel(), -np.ones(E * T)])
        bal.r.append(r_ + bal.m)
        bal.c.append(c_)
        bal.v.append(v_)
        bal.b.append(np.zeros(N * T))
        bal.m += N * T
    A_bal, b_bal = bal.matrix(n)

    # voltage drop along each branch
    z2 = (net.r ** 2 + net.x ** 2)[:, None] * np.ones((1, T))
    eq.add([ix.v[net.br_from], ix.v[net.br_to], ix.P, ix.Q, ix.l],
           [1.0, -1.0, -2 * r_bt, -2 * x_bt, z2], np.zeros(E * T))

    # state-of-charge recursion
    g_ch = ess.gamma_ch[:, None] * np.ones((1, T))
    g_dis = ess.gamma_dis[:, None] * np.ones((1, T))
    eq.add([ix.s[:, 1:], ix.s[:, :-1], ix.p_ch, ix.p_dis], [1.0, -1.0, -g_ch, g_dis],
           np.zeros(NE * T))
    in_box = np.all(ess.s_init >= ess.s_min) and np.all(ess.s_init <= ess.s_max)
    if in_box:
        lo[ix.s[:, 0]] = hi[ix.s[:, 0]] = ess.s_init / base
    else:
        eq.add([ix.s[:, 0]], [1.0], ess.s_init / base)

    ineq = _Rows()
    if T > 1:
        ineq.add([ix.z[:, :-1], ix.z[:, 1:]], [1.0, -1.0], (offset[:, 1:] - offset[:, :-1]).ravel())
    if fr:
        free = ix.d >= 0
        lo[ix.d[free]] = 0.0
        hi[ix.d[free]] = 1.0
        if free.any():
            ineq.add([ix.p_ch[free], ix.d[free]], [1.0, -pch_max[free]], np.zeros(int(free.sum())))
            ineq.add([ix.p_dis[free], ix.d[free]], [1.0, pdis_max[free]], pdis_max[free])
        lo[ix.t_obj] = 0.0

    A_eq, b_eq = eq.matrix(n)
    A_eq = sp.vstack([A_eq, A_bal], format="csr")
    b_eq = np.concatenate([b_eq, b_bal])
    A_in, b_in = ineq.matrix(n)

    cones = [RotatedCone(int(ix.v[net.br_from[b], t]), int(ix.l[b, t]),
                         (int(ix.P[b, t]), int(ix.Q[b, t])), 1.0)
             for t in range(T) for b in range(E)]
    obj = np.zeros(n)
    socs = []
    # small price on squared currents picks the tight point among equally good ones
    loss = LOSS_WEIGHT * np.ones((E, T))
    if fr:
        obj[ix.t_obj] = 1.0
        obj[ix.l] = loss
        socs.append(SocCone(int(ix.t_obj), tuple(int(k) for k in ix.z.ravel())))
        sense = "min"
    else:
        obj[ix.z] = fc.weights
        obj[ix.l] = -loss
        sense = "max"
    prog = ConicProgram(n, obj, sense, A_eq, b_eq, A_in, b_in, lo, hi, socs, cones,
                        _var_names(ix, net, ctx))
    return prog, ix


def _var_names(ix, net, ctx):
    names = [""] * ix.n_vars
    buses = net.bus_ids
    loads = net.load_buses
    ess = ctx.ess.buses

    def label(arr, tag, owners, extra=0):
        for a in range(arr.shape[0]):
            for t in range(arr.shape[1]):
                if arr[a, t] >= 0:
                    names[arr[a, t]] = f"{tag}[{owners[a]},{t + extra}]"

    branch = [f"{buses[i]}-{buses[j]}" for i, j in zip(net.br_from, net.br_to)]
    label(ix.z, "r" if ix.t_obj < 0 else "rho", loads)
    for arr, tag in ((ix.p, "p"), (ix.q, "q"), (ix.v, "v")):
        label(arr, tag, buses)
    for arr, tag in ((ix.P, "P"), (ix.Q, "Q"), (ix.l, "l")):
        label(arr, tag, branch)
    label(ix.p_ch, "p_ch", ess)
    label(ix.p_dis, "p_dis", ess)
    label(ix.s, "s", ess)
    label(ix.d, "d", ess)
    if ix.t_obj >= 0:
        names[ix.t_obj] = "t"
    return names


def build_lr_program(ctx, d):
    """Conic program of the restoration problem for mode vector ``d``, plus its index map."""
    return _assemble(ctx, mode=as_mode(d, ctx))


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class LrSolution:
    status: Status
    pickup: np.ndarray  # (N_L, T)
    p: np.ndarray  # p.u.
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    v: np.ndarray  # squared magnitude
    l: np.ndarray
    soc: np.ndarray  # MWh, (N_E, T+1)
    p_ch: np.ndarray  # MW
    p_dis: np.ndarray
    objective: float
    conic: object = None
    index: LrIndex = None

    def to_dict(self):
        keys = ("pickup", "p", "q", "P", "Q", "v", "l", "soc", "p_ch", "p_dis")
        out = {k: np.asarray(getattr(self, k)).tolist() for k in keys}
        out["status"] = str(self.status)
        out["objective"] = self.objective
        return out

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def audit(self, ctx):
        """Constraint residuals recomputed from the reported variables."""
        net, ess = ctx.network, ctx.ess
        bal_p, bal_q, drop = kernels.distflow_residuals(
            net.br_from, net.br_to, net.r, net.x, self.p, self.q, self.P, self.Q, self.l, self.v)
        soc_res = (self.soc[:, 1:] - self.soc[:, :-1] - ess.gamma_ch[:, None] * self.p_ch
                   + ess.gamma_dis[:, None] * self.p_dis)
        gaps = kernels.relaxation_gap(self.v[net.br_from], self.l, self.P, self.Q)
        r = self.pickup
        return {
            "complementarity": float(np.abs(self.p_ch * self.p_dis).max(initial=0.0)),
            "soc_recursion": float(np.abs(soc_res).max(initial=0.0)),
            "soc_init": float(np.abs(self.soc[:, 0] - ess.s_init).max(initial=0.0)),
            "monotone": float(np.maximum(r[:, :-1] - r[:, 1:], 0.0).max(initial=0.0)),
            "pickup_box": float(max(np.maximum(-r, 0).max(initial=0.0),
                                    np.maximum(r - ctx.forecast.pickup_cap, 0).max(initial=0.0))),
            "voltage_box": float(max(np.maximum(net.v_min[:, None] - self.v, 0).max(),
                                     np.maximum(self.v - net.v_max[:, None], 0).max())),
            "balance": float(max(np.abs(bal_p).max(), np.abs(bal_q).max())),
            "voltage_drop": float(np.abs(drop).max(initial=0.0)),
            "cone": float(np.maximum(-gaps, 0.0).max(initial=0.0)),
        }


def _extract(ctx, ix, sol, pickup):
    x = sol.x
    base = ctx.base_mva
    return LrSolution(
        status=sol.status,
        pickup=pickup,
        p=x[ix.p], q=x[ix.q], P=x[ix.P], Q=x[ix.Q], v=x[ix.v], l=x[ix.l],
        soc=x[ix.s] * base,
        p_ch=x[ix.p_ch] * base,
        p_dis=x[ix.p_dis] * base,
        objective=float(ctx.forecast.weights.ravel() @ pickup.ravel()),
        conic=sol,
        index=ix,
    )


def solve_lr(ctx, d, tol=None):
    """Optimal pickup for mode vector ``d``; raises :class:`NotOptimal` otherwise."""
    prog, ix = build_lr_program(ctx, d)
    sol = solve_conic(prog, tol)
    if not sol.optimal:
        raise NotOptimal(sol.status)
    return _extract(ctx, ix, sol, sol.x[ix.z])


class Feasibility(NamedTuple):
    feasible: bool
    diagnostic: str
    solution: LrSolution | None = None


def is_lr_feasible(ctx, d, tol=None):
    """Whether the restoration problem for ``d`` is provably nonempty.

    A numerical failure is indeterminate and reported as infeasible.
    """
    prog, ix = build_lr_program(ctx, d)
    sol = solve_conic(prog, tol)
    if sol.optimal:
        return Feasibility(True, "optimal", _extract(ctx, ix, sol, sol.x[ix.z]))
    if sol.status is Status.INFEASIBLE:
        return Feasibility(False, "infeasible")
    logger.warning("feasibility of mode vector indeterminate (%s)", sol.status)
    return Feasibility(False, f"indeterminate: {sol.status}")


@dataclass(frozen=True, eq=False)
class GapReport:
    gaps: np.ndarray  # (E, T)
    max_gap: float
    min_gap: float


def relaxation_gap(sol, ctx):
    """Per (branch, t) slack ``v_i * l_b - P_b**2 - Q_b**2`` of the relaxed cone."""
    net = ctx.network
    g = kernels.relaxation_gap(sol.v[net.br_from], sol.l, sol.P, sol.Q)
    return GapReport(g, float(g.max(initial=0.0)), float(g.min(initial=0.0)))
