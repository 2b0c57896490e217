"""Numeric inner loops used by the audits and the Laplace sampler.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version.  The public name is bound at import time to one or the other:
numba is used when it imports cleanly unless ``MGDP_DISABLE_NUMBA`` is set
to a truthy value.  Both variants stay reachable through ``NUMBA_KERNELS``
and ``NUMPY_KERNELS`` so the tests and ``benchmarks/bench_kernels.py`` can
compare them.

Ragged cone index lists are passed in CSR form: cone ``k`` owns
``idx[ptr[k]:ptr[k + 1]]``.
"""
import os

import numpy as np

_FLAG = os.environ.get("MGDP_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------
def _laplace_from_uniform_np(u, b):
    c = u - 0.5
    return -b * np.sign(c) * np.log(1.0 - 2.0 * np.abs(c))


def _soc_violation_np(x, head, ptr, idx):
    sq = np.zeros(len(head))
    if len(idx):
        owner = np.repeat(np.arange(len(head)), np.diff(ptr))
        np.add.at(sq, owner, x[idx] ** 2)
    return np.maximum(0.0, np.sqrt(sq) - x[head])


def _rotated_violation_np(x, u, v, scale, ptr, idx):
    # ||w||^2 <= s*u*v  <=>  ||(w, c(u - v))|| <= c(u + v),  c = sqrt(s)/2
    c = np.sqrt(scale) / 2.0
    sq = (c * (x[u] - x[v])) ** 2
    if len(idx):
        owner = np.repeat(np.arange(len(u)), np.diff(ptr))
        np.add.at(sq, owner, x[idx] ** 2)
    return np.maximum(0.0, np.sqrt(sq) - c * (x[u] + x[v]))


def _distflow_residuals_np(br_from, br_to, r, x, p, q, P, Q, l, v):
    bal_p = p.copy()
    bal_q = q.copy()
    np.add.at(bal_p, br_to, P - r[:, None] * l)
    np.add.at(bal_q, br_to, Q - x[:, None] * l)
    np.subtract.at(bal_p, br_from, P)
    np.subtract.at(bal_q, br_from, Q)
    z2 = (r * r + x * x)[:, None]
    drop = v[br_from] - v[br_to] - 2.0 * (r[:, None] * P + x[:, None] * Q) + z2 * l
    return bal_p, bal_q, drop


def _relaxation_gap_np(v_from, l, P, Q):
    return v_from * l - P * P - Q * Q


NUMPY_KERNELS = {
    "laplace_from_uniform": _laplace_from_uniform_np,
    "soc_violation": _soc_violation_np,
    "rotated_violation": _rotated_violation_np,
    "distflow_residuals": _distflow_residuals_np,
    "relaxation_gap": _relaxation_gap_np,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------
if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _laplace_from_uniform_nb(u, b):
        out = np.empty(u.shape[0])
        for i in range(u.shape[0]):
            c = u[i] - 0.5
            s = 0.0
            if c > 0.0:
                s = 1.0
            elif c < 0.0:
                s = -1.0
            out[i] = -b * s * np.log(1.0 - 2.0 * abs(c))
        return out

    @numba.njit(cache=True)
    def _soc_violation_nb(x, head, ptr, idx):
        out = np.empty(head.shape[0])
        for k in range(head.shape[0]):
            acc = 0.0
            for m in range(ptr[k], ptr[k + 1]):
                acc += x[idx[m]] * x[idx[m]]
            out[k] = max(0.0, np.sqrt(acc) - x[head[k]])
        return out

    @numba.njit(cache=True)
    def _rotated_violation_nb(x, u, v, scale, ptr, idx):
        out = np.empty(u.shape[0])
        for k in range(u.shape[0]):
            c = np.sqrt(scale[k]) / 2.0
            d = c * (x[u[k]] - x[v[k]])
            acc = d * d
            for m in range(ptr[k], ptr[k + 1]):
                acc += x[idx[m]] * x[idx[m]]
            out[k] = max(0.0, np.sqrt(acc) - c * (x[u[k]] + x[v[k]]))
        return out

    @numba.njit(cache=True)
    def _distflow_residuals_nb(br_from, br_to, r, x, p, q, P, Q, l, v):
        n_br, n_t = P.shape
        bal_p = p.copy()
        bal_q = q.copy()
        drop = np.empty((n_br, n_t))
        for b in range(n_br):
            i = br_from[b]
            j = br_to[b]
            z2 = r[b] * r[b] + x[b] * x[b]
            for t in range(n_t):
                bal_p[j, t] += P[b, t] - r[b] * l[b, t]
                bal_q[j, t] += Q[b, t] - x[b] * l[b, t]
                bal_p[i, t] -= P[b, t]
                bal_q[i, t] -= Q[b, t]
                drop[b, t] = (v[i, t] - v[j, t]
                              - 2.0 * (r[b] * P[b, t] + x[b] * Q[b, t])
                              + z2 * l[b, t])
        return bal_p, bal_q, drop

    @numba.njit(cache=True)
    def _relaxation_gap_nb(v_from, l, P, Q):
        out = np.empty(P.shape)
        for b in range(P.shape[0]):
            for t in range(P.shape[1]):
                out[b, t] = v_from[b, t] * l[b, t] - P[b, t] ** 2 - Q[b, t] ** 2
        return out

    NUMBA_KERNELS = {
        "laplace_from_uniform": _laplace_from_uniform_nb,
        "soc_violation": _soc_violation_nb,
        "rotated_violation": _rotated_violation_nb,
        "distflow_residuals": _distflow_residuals_nb,
        "relaxation_gap": _relaxation_gap_nb,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = {}

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


# ---------------------------------------------------------------------------
# public entry points (argument coercion lives here, not in the kernels)
# ---------------------------------------------------------------------------
def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def laplace_from_uniform(u, b):
    """Inverse-CDF map of uniforms on (0, 1) to Laplace(0, b) draws."""
    u = np.asarray(u, dtype=np.float64)
    return _ACTIVE["laplace_from_uniform"](_f64(u.ravel()), float(b)).reshape(u.shape)


def soc_violation(x, head, ptr, idx):
    """Per-cone ``max(0, ||x[idx_k]|| - x[head_k])``."""
    if len(head) == 0:
        return np.zeros(0)
    return _ACTIVE["soc_violation"](_f64(x), _i64(head), _i64(ptr), _i64(idx))


def rotated_violation(x, u, v, scale, ptr, idx):
    """Per-cone violation of ``||x[idx_k]||^2 <= scale_k * x[u_k] * x[v_k]``.

    Measured in the equivalent Lorentz-cone form, so the value has the units
    of ``x`` rather than ``x**2``.
    """
    if len(u) == 0:
        return np.zeros(0)
    return _ACTIVE["rotated_violation"](
        _f64(x), _i64(u), _i64(v), _f64(scale), _i64(ptr), _i64(idx))


def distflow_residuals(br_from, br_to, r, x, p, q, P, Q, l, v):
    """Residuals of the branch-flow balance and voltage-drop equations.

    Returns ``(bal_p, bal_q, drop)`` of shapes ``(N, T)``, ``(N, T)`` and
    ``(E, T)``.  Balance at bus j: inflow on the parent branch net of its
    loss, plus the injection, minus the outflow on child branches.
    """
    return _ACTIVE["distflow_residuals"](
        _i64(br_from), _i64(br_to), _f64(r), _f64(x), _f64(p), _f64(q),
        _f64(P), _f64(Q), _f64(l), _f64(v))


def relaxation_gap(v_from, l, P, Q):
    """``v_i * l_b - P_b**2 - Q_b**2`` elementwise over (branch, t)."""
    return _ACTIVE["relaxation_gap"](_f64(v_from), _f64(l), _f64(P), _f64(Q))


def backend():
    return "numba" if USE_NUMBA else "numpy"
