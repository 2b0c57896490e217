"""Small hand-checkable instances used by tests, the oracle command and docs."""
import numpy as np

from .lr import EssFleet, LoadForecast, LrContext
from .netmodel import Branch, Bus, NetworkCase, load_case, to_per_unit

CASE33_ESS_BUSES = (2, 7, 12, 17, 23, 27, 31)
CASE33_ESS = dict(s_min=0.3594, s_max=3.5940, p_ch_max=1.1980, p_dis_max=1.1980,
                 gamma_ch=0.90, gamma_dis=1.11)


def _case(buses, branches, base_mva=1.0, root=1):
    return NetworkCase(base_mva, tuple(Bus(*b) for b in buses),
                       tuple(Branch(*br) for br in branches), root)


def two_bus_context(horizon=3, demand=(0.1, 0.05)):
    """Storage at bus 1 feeding a single load at bus 2 over a short line."""
    case = _case([(1, 0.0, 0.0, 0.9, 1.1), (2, demand[0], demand[1], 0.9, 1.1)],
                 [(1, 2, 0.01, 0.02)])
    net = to_per_unit(case, [1], root=1)
    ess = EssFleet.identical([1], s_min=0.1, s_max=10.0, p_ch_max=1.0, p_dis_max=1.0,
                             gamma_ch=0.9, gamma_dis=1.11, s_init=9.0)
    return LrContext(net, ess, LoadForecast.constant(net, horizon))


def tiny_case():
    """4-bus feeder 1-2-3-4 with storage at buses 1 and 3 and loads at 2 and 4."""
    return _case([(1, 0.0, 0.0, 0.9, 1.1), (2, 0.5, 0.2, 0.9, 1.1),
                  (3, 0.0, 0.0, 0.9, 1.1), (4, 0.4, 0.15, 0.9, 1.1)],
                 [(1, 2, 0.01, 0.01), (2, 3, 0.01, 0.01), (3, 4, 0.01, 0.01)])


def tiny_context(horizon=2, s_init=(0.7, 0.7)):
    """Energy-limited 2-storage instance; mode flips change the optimal pickup.

    2 ESS x 2 steps = 4 bits, small enough to enumerate all 16 mode vectors.
    """
    net = to_per_unit(tiny_case(), [1, 3], root=1)
    ess = EssFleet.identical([1, 3], s_min=0.1, s_max=1.0, p_ch_max=0.6, p_dis_max=0.6,
                             gamma_ch=0.9, gamma_dis=1.11, s_init=np.asarray(s_init))
    return LrContext(net, ess, LoadForecast.constant(net, horizon))


def zero_demand_context(horizon=2):
    """The tiny feeder with every load removed: the optimal pickup never changes."""
    case = tiny_case().scaled_loads(0.0)
    net = to_per_unit(case, [1, 3], root=1)
    ess = EssFleet.identical([1, 3], s_min=0.1, s_max=1.0, p_ch_max=0.6, p_dis_max=0.6,
                             gamma_ch=0.9, gamma_dis=1.11, s_init=0.7)
    return LrContext(net, ess, LoadForecast.constant(net, horizon))


def case33_network(ess_buses=CASE33_ESS_BUSES, v_bounds=(0.9, 1.1)):
    return to_per_unit(load_case("case33bw"), ess_buses, root=1, v_bounds=v_bounds)


def case33_context(s_init, horizon=6, ess_buses=CASE33_ESS_BUSES, weights=None):
    net = case33_network(ess_buses)
    ess = EssFleet.identical(ess_buses, s_init=np.asarray(s_init, dtype=float), **CASE33_ESS)
    return LrContext(net, ess, LoadForecast.constant(net, horizon, weights))
