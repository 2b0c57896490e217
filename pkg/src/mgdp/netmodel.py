"""Network data: MATPOWER/JSON ingestion, radial checks and per-unit model."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from .errors import (
    DuplicateBusId,
    EssBusUnknown,
    MalformedRow,
    MissingBlock,
    NotRadial,
    SchemaViolation,
    UnknownRoot,
)

logger = logging.getLogger(__name__)

# MATPOWER column positions (0-based)
BUS_I, BUS_TYPE, PD, QD = 0, 1, 2, 3
BASE_KV, VMAX, VMIN = 9, 11, 12
F_BUS, T_BUS, BR_R, BR_X, RATE_A, BR_STATUS = 0, 1, 2, 3, 5, 10
MIN_BUS_COLS = 13
MIN_BRANCH_COLS = 11
REF_BUS = 3


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float  # MW
    q_load: float  # MVAr
    v_min: float  # p.u. magnitude
    v_max: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float  # p.u.
    x: float
    l_max: float = math.inf  # p.u.^2, squared current magnitude


@dataclass(frozen=True)
class NetworkCase:
    """Raw network as read from a case file; loads in MW/MVAr, impedances in p.u."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    root: int | None = None
    ess_buses: tuple[int, ...] = ()
    source_units: str = field(default="pu", compare=False)

    def __post_init__(self):
        if not self.base_mva > 0:
            raise SchemaViolation("base_mva must be positive", ("base_mva",))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateBusId(f"duplicate bus ids {dup}")
        known = set(ids)
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise SchemaViolation(f"unknown bus {end}", ("branches", k))

    @property
    def bus_ids(self):
        return [b.id for b in self.buses]

    def scaled_loads(self, factor):
        buses = tuple(Bus(b.id, b.p_load * factor, b.q_load * factor, b.v_min, b.v_max)
                      for b in self.buses)
        return NetworkCase(self.base_mva, buses, self.branches, self.root,
                           self.ess_buses, self.source_units)


@dataclass(frozen=True)
class TopologyReport:
    is_tree: bool
    n_components: int
    cycle_witness: tuple[tuple[int, int], ...] | None
    bfs_order: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class MicrogridNetwork:
    """Per-unit radial model.

    Buses keep the case order (index ``k`` is bus ``bus_ids[k]``); branches
    are sorted by the BFS position of their child and oriented parent to
    child.  Voltage and current bounds are on squared magnitudes.
    """

    base_mva: float
    bus_ids: tuple[int, ...]
    root: int  # bus index
    br_from: np.ndarray
    br_to: np.ndarray
    r: np.ndarray
    x: np.ndarray
    l_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    p_load: np.ndarray  # p.u.
    q_load: np.ndarray
    ess_idx: np.ndarray
    load_idx: np.ndarray
    bfs_order: tuple[int, ...]
    notes: tuple[str, ...] = ()

    @property
    def n_buses(self):
        return len(self.bus_ids)

    @property
    def n_branches(self):
        return len(self.br_from)

    @property
    def ess_buses(self):
        return tuple(self.bus_ids[i] for i in self.ess_idx)

    @property
    def load_buses(self):
        return tuple(self.bus_ids[i] for i in self.load_idx)

    @property
    def n_ess(self):
        return len(self.ess_idx)

    @property
    def n_loads(self):
        return len(self.load_idx)

    def index_of(self, bus_id):
        return self.bus_ids.index(bus_id)


# ---------------------------------------------------------------------------
# MATPOWER subset
# ---------------------------------------------------------------------------
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_BASE_RE = re.compile(r"mpc\.baseMVA\s*=\s*(" + _NUM + r")\s*;")
_BLOCK_RE = re.compile(r"mpc\.(bus|branch)\s*=\s*\[(.*?)\]\s*;", re.S)
_LOAD_SCALE_RE = re.compile(
    r"mpc\.bus\(\s*:\s*,\s*\[\s*PD\s*,?\s*QD\s*\]\s*\)\s*=\s*"
    r"mpc\.bus\(\s*:\s*,\s*\[\s*PD\s*,?\s*QD\s*\]\s*\)\s*/\s*(" + _NUM + r")\s*;")
_OHM_RE = re.compile(
    r"mpc\.branch\(\s*:\s*,\s*\[\s*BR_R\s*,?\s*BR_X\s*\]\s*\)\s*=\s*"
    r"mpc\.branch\(\s*:\s*,\s*\[\s*BR_R\s*,?\s*BR_X\s*\]\s*\)\s*/\s*"
    r"\(\s*Vbase\s*\^\s*2\s*/\s*Sbase\s*\)\s*;")


def _strip_comments(text):
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(body, name, min_cols):
    rows = []
    for raw in re.split(r"[;\n]", body):
        toks = [t for t in re.split(r"[\s,]+", raw.strip()) if t]
        if not toks:
            continue
        try:
            rows.append([float(t) for t in toks])
        except ValueError as exc:
            raise MalformedRow(f"{name} row {len(rows) + 1}: {exc}") from None
    if not rows:
        raise MissingBlock(f"mpc.{name} matrix is empty")
    width = len(rows[0])
    for k, row in enumerate(rows):
        if len(row) != width or len(row) < min_cols:
            raise MalformedRow(
                f"{name} row {k + 1} has {len(row)} columns "
                f"(expected {max(width, min_cols)})")
    return np.array(rows)


def parse_matpower_case(text):
    """Read base power, bus and branch matrices from MATPOWER case text.

    Only the numeric subset is interpreted.  When the file carries the usual
    trailing unit conversions (kW to MW for loads, ohms to p.u. for branch
    impedances) they are applied here, so the returned case is always in
    MW/MVAr and p.u.  Out-of-service branches are dropped.  ``RATE_A`` maps to
    a squared-current limit ``(rateA / baseMVA)**2`` at nominal voltage; zero
    means unbounded.
    """
    code = _strip_comments(text)
    m = _BASE_RE.search(code)
    if m is None:
        raise MissingBlock("no mpc.baseMVA assignment")
    base_mva = float(m.group(1))
    blocks = {name: body for name, body in _BLOCK_RE.findall(code)}
    for name in ("bus", "branch"):
        if name not in blocks:
            raise MissingBlock(f"no mpc.{name} matrix")
    bus = _parse_matrix(blocks["bus"], "bus", MIN_BUS_COLS)
    branch = _parse_matrix(blocks["branch"], "branch", MIN_BRANCH_COLS)

    load_div = 1.0
    m = _LOAD_SCALE_RE.search(code)
    if m is not None:
        load_div = float(m.group(1))
    units = "pu"
    z_base = 1.0
    if _OHM_RE.search(code):
        units = "ohm"
        kv = bus[0, BASE_KV]
        z_base = kv ** 2 / base_mva

    ids = bus[:, BUS_I].astype(int)
    if len(set(ids.tolist())) != len(ids):
        raise DuplicateBusId("duplicate ids in mpc.bus")
    buses = tuple(
        Bus(int(row[BUS_I]), float(row[PD] / load_div), float(row[QD] / load_div),
            float(row[VMIN]), float(row[VMAX]))
        for row in bus)
    refs = [int(row[BUS_I]) for row in bus if int(row[BUS_TYPE]) == REF_BUS]

    branches = []
    for row in branch:
        if row[BR_STATUS] == 0:
            continue
        rate = row[RATE_A]
        l_max = (rate / base_mva) ** 2 if rate > 0 else math.inf
        branches.append(Branch(int(row[F_BUS]), int(row[T_BUS]),
                               float(row[BR_R] / z_base), float(row[BR_X] / z_base), l_max))
    dropped = len(branch) - len(branches)
    if dropped:
        logger.info("dropped %d out-of-service branches", dropped)
    try:
        return NetworkCase(base_mva, buses, tuple(branches),
                           refs[0] if refs else None, (), units)
    except SchemaViolation as exc:
        raise MalformedRow(str(exc)) from None


# ---------------------------------------------------------------------------
# native JSON format
# ---------------------------------------------------------------------------
NETWORK_SCHEMA = {
    "type": "object",
    "required": ["base_mva", "buses", "branches"],
    "properties": {
        "base_mva": {"type": "number", "exclusiveMinimum": 0},
        "root": {"type": ["integer", "null"]},
        "buses": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "p_load_mw", "q_load_mvar", "vmin_pu", "vmax_pu"],
                "properties": {
                    "id": {"type": "integer"},
                    "p_load_mw": {"type": "number"},
                    "q_load_mvar": {"type": "number"},
                    "vmin_pu": {"type": "number", "minimum": 0},
                    "vmax_pu": {"type": "number", "minimum": 0},
                },
            },
        },
        "branches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["from", "to", "r_pu", "x_pu"],
                "properties": {
                    "from": {"type": "integer"},
                    "to": {"type": "integer"},
                    "r_pu": {"type": "number"},
                    "x_pu": {"type": "number"},
                    "l_max_pu2": {"type": ["number", "null"], "minimum": 0},
                },
            },
        },
        "ess_buses": {"type": "array", "items": {"type": "integer"}},
    },
}


def parse_network_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc}") from None
    try:
        jsonschema.validate(doc, NETWORK_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaViolation(exc.message, exc.absolute_path) from None

    seen = set()
    for k, b in enumerate(doc["buses"]):
        if b["id"] in seen:
            raise SchemaViolation(f"duplicate bus id {b['id']}", ("buses", k, "id"))
        seen.add(b["id"])
    for k, br in enumerate(doc["branches"]):
        for key in ("from", "to"):
            if br[key] not in seen:
                raise SchemaViolation(f"unknown bus id {br[key]}", ("branches", k, key))
    root = doc.get("root")
    if root is not None and root not in seen:
        raise SchemaViolation(f"unknown bus id {root}", ("root",))
    for k, e in enumerate(doc.get("ess_buses", [])):
        if e not in seen:
            raise SchemaViolation(f"unknown bus id {e}", ("ess_buses", k))

    buses = tuple(Bus(int(b["id"]), float(b["p_load_mw"]), float(b["q_load_mvar"]),
                      float(b["vmin_pu"]), float(b["vmax_pu"])) for b in doc["buses"])
    branches = tuple(
        Branch(int(br["from"]), int(br["to"]), float(br["r_pu"]), float(br["x_pu"]),
               math.inf if br.get("l_max_pu2") is None else float(br["l_max_pu2"]))
        for br in doc["branches"])
    return NetworkCase(float(doc["base_mva"]), buses, branches, root,
                       tuple(int(e) for e in doc.get("ess_buses", [])))


def serialize_network_json(case, indent=2):
    doc = {
        "base_mva": case.base_mva,
        "root": case.root,
        "buses": [{"id": b.id, "p_load_mw": b.p_load, "q_load_mvar": b.q_load,
                   "vmin_pu": b.v_min, "vmax_pu": b.v_max}
                  for b in case.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus, "r_pu": br.r, "x_pu": br.x,
                      "l_max_pu2": None if math.isinf(br.l_max) else br.l_max}
                     for br in case.branches],
        "ess_buses": list(case.ess_buses),
    }
    return json.dumps(doc, indent=indent)


def load_case(path, fmt=None):
    """Load a case from ``path``; bare names such as ``case33bw`` resolve to bundled data."""
    text = read_case_text(path)
    fmt = fmt or ("json" if str(path).endswith(".json") else "matpower")
    if fmt == "json":
        return parse_network_json(text)
    return parse_matpower_case(text)


def read_case_text(path):
    from pathlib import Path

    p = Path(path)
    if p.exists():
        return p.read_text()
    data = resources.files("mgdp") / "data"
    for cand in (str(path), f"{path}.m", f"{path}.json"):
        res = data / cand
        if res.is_file():
            return res.read_text()
    raise FileNotFoundError(path)


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------
def validate_radial(case, root):
    ids = case.bus_ids
    if root not in ids:
        raise UnknownRoot(f"root bus {root} is not in the case")
    pos = {b: k for k, b in enumerate(ids)}
    adj = {b: [] for b in ids}
    parent = list(range(len(ids)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    witness = None
    forest = {b: [] for b in ids}
    for br in case.branches:
        u, v = br.from_bus, br.to_bus
        adj[u].append(v)
        adj[v].append(u)
        ru, rv = find(pos[u]), find(pos[v])
        if ru == rv:
            if witness is None:
                witness = _forest_path(forest, u, v) + ((v, u),)
        else:
            parent[ru] = rv
            forest[u].append(v)
            forest[v].append(u)
    n_comp = len({find(k) for k in range(len(ids))})

    order, seen, queue = [], {root}, deque([root])
    while queue:
        b = queue.popleft()
        order.append(b)
        for nb in sorted(set(adj[b]), key=pos.__getitem__):
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return TopologyReport(n_comp == 1 and witness is None, n_comp, witness, tuple(order))


def _forest_path(forest, src, dst):
    prev = {src: None}
    queue = deque([src])
    while queue:
        b = queue.popleft()
        if b == dst:
            break
        for nb in forest[b]:
            if nb not in prev:
                prev[nb] = b
                queue.append(nb)
    path, b = [], dst
    while prev.get(b) is not None:
        path.append((prev[b], b))
        b = prev[b]
    return tuple(reversed(path))


def _relocate_ess_loads(case, ess):
    next_id = max(case.bus_ids) + 1
    buses, branches, notes = [], list(case.branches), []
    for b in case.buses:
        if b.id in ess and (b.p_load or b.q_load):
            buses.append(Bus(b.id, 0.0, 0.0, b.v_min, b.v_max))
            buses.append(Bus(next_id, b.p_load, b.q_load, b.v_min, b.v_max))
            branches.append(Branch(b.id, next_id, 0.0, 0.0))
            notes.append(f"load of ESS bus {b.id} moved to new bus {next_id}")
            next_id += 1
        else:
            buses.append(b)
    return NetworkCase(case.base_mva, tuple(buses), tuple(branches), case.root,
                       case.ess_buses, case.source_units), notes


def to_per_unit(case, ess_buses, root=None, *, v_bounds=None, ess_load_policy="zero",
                drop_zero_demand=False):
    """Convert a radial case to the per-unit model used by the optimisation layers.

    Parameters
    ----------
    case : NetworkCase
    ess_buses : iterable of int
        Storage buses, in the order the ESS fleet will be indexed.
    root : int, optional
        Defaults to ``case.root``.
    v_bounds : (float, float), optional
        Magnitude bounds applied to every bus, overriding the case values.
    ess_load_policy : {"zero", "relocate"}
        "zero" drops the native load of storage buses; "relocate" moves it to a
        new bus hung off the storage bus by an impedance-free line.
    drop_zero_demand : bool
        Exclude non-storage buses without demand from the load set.  Off by
        default, so every non-storage bus is a load bus (the root of
        case33bw included).
    """
    root = case.root if root is None else root
    ess = [int(e) for e in ess_buses]
    unknown = [e for e in ess if e not in case.bus_ids]
    if unknown:
        raise EssBusUnknown(f"storage buses {unknown} are not in the case")
    if root is None:
        raise UnknownRoot("no root bus given and the case declares none")

    notes = []
    if ess_load_policy == "relocate":
        case, notes = _relocate_ess_loads(case, set(ess))
    elif ess_load_policy != "zero":
        raise ValueError(f"unknown ess_load_policy {ess_load_policy!r}")

    report = validate_radial(case, root)
    if not report.is_tree:
        raise NotRadial(f"{report.n_components} components, cycle {report.cycle_witness}")

    ids = tuple(case.bus_ids)
    pos = {b: k for k, b in enumerate(ids)}
    ess_set = set(ess)
    p = np.array([b.p_load for b in case.buses]) / case.base_mva
    q = np.array([b.q_load for b in case.buses]) / case.base_mva
    for b in ess:
        k = pos[b]
        if p[k] or q[k]:
            notes.append(f"dropped native load of ESS bus {b}")
            p[k] = q[k] = 0.0
    for n in notes:
        logger.info(n)

    if v_bounds is not None:
        vmin = np.full(len(ids), float(v_bounds[0]))
        vmax = np.full(len(ids), float(v_bounds[1]))
    else:
        vmin = np.array([b.v_min for b in case.buses])
        vmax = np.array([b.v_max for b in case.buses])

    # orient by BFS: branch k feeds the (k+1)-th bus in BFS order
    bfs_pos = {b: k for k, b in enumerate(report.bfs_order)}
    oriented = []
    for br in case.branches:
        u, v = br.from_bus, br.to_bus
        if bfs_pos[u] > bfs_pos[v]:
            u, v = v, u
        oriented.append((bfs_pos[v], pos[u], pos[v], br))
    oriented.sort(key=lambda t: t[0])

    load_idx = [k for k, b in enumerate(ids) if b not in ess_set
                and not (drop_zero_demand and p[k] == 0 and q[k] == 0)]
    return MicrogridNetwork(
        base_mva=case.base_mva,
        bus_ids=ids,
        root=pos[root],
        br_from=np.array([o[1] for o in oriented], dtype=np.int64),
        br_to=np.array([o[2] for o in oriented], dtype=np.int64),
        r=np.array([o[3].r for o in oriented]),
        x=np.array([o[3].x for o in oriented]),
        l_max=np.array([o[3].l_max for o in oriented]),
        v_min=vmin ** 2,
        v_max=vmax ** 2,
        p_load=p,
        q_load=q,
        ess_idx=np.array([pos[e] for e in ess], dtype=np.int64),
        load_idx=np.array(load_idx, dtype=np.int64),
        bfs_order=report.bfs_order,
        notes=tuple(notes),
    )
