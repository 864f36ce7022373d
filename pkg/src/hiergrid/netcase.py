"""Transmission case data model, file formats and admittance matrices.

Everything is stored per-unit on ``base_mva``. Angles are radians in memory and
degrees in files.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, replace
from functools import cached_property
from typing import Any, Sequence

import numpy as np

SCHEMA = "hiergrid.case/1"

# Fallback machine data for MATPOWER imports without a ``dyn`` table.
DEFAULT_DYN = {
    "H": 5.0,
    "D": 0.0,
    "Td0p": 6.0,
    "Tq0p": 0.5,
    "xd": 1.0,
    "xq": 0.9,
    "xdp": 0.25,
    "xqp": 0.25,
    "KA": 0.0,
    "KS": 0.0,
}


class CaseError(ValueError):
    """Base class for case-file problems."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseValidationError(CaseError):
    """A case parsed but violates a structural invariant."""


@dataclass(frozen=True)
class GenDynParams:
    M: float
    D: float = 0.0
    Td0p: float = 6.0
    Tq0p: float = 0.5
    xd: float = 1.0
    xq: float = 0.9
    xdp: float = 0.25
    xqp: float = 0.25
    KA: float = 0.0
    KS: float = 0.0

    def check(self, where: str) -> None:
        if not self.M > 0:
            raise CaseValidationError(f"{where}: inertia M must be positive")
        if not (self.Td0p > 0 and self.Tq0p > 0):
            raise CaseValidationError(f"{where}: transient time constants must be positive")
        if not self.xd >= self.xdp > 0:
            raise CaseValidationError(f"{where}: requires xd >= xd' > 0")
        if not self.xq >= self.xqp > 0:
            raise CaseValidationError(f"{where}: requires xq >= xq' > 0")
        if self.D < 0 or self.KA < 0 or self.KS < 0:
            raise CaseValidationError(f"{where}: D, KA and KS must be nonnegative")


@dataclass(frozen=True)
class Bus:
    id: int
    type: str  # "slack" | "PV" | "PQ"
    vmin: float = 0.9
    vmax: float = 1.1
    gs: float = 0.0
    bs: float = 0.0
    vm: float = 1.0
    va: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    rate: float = 0.0  # apparent-power limit, p.u.; 0 means unlimited


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float
    qg: float
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    vg: float
    dyn: GenDynParams
    # piecewise-linear cost curve as (p [p.u.], cost [$/h]) breakpoints
    cost: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float
    pmin: float
    pmax: float
    qmin: float
    qmax: float


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...] = ()
    frequency: float = 60.0
    name: str = "case"

    def __post_init__(self):
        _validate(self)

    # ---- index helpers -------------------------------------------------
    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def slack(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.type == "slack")

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=int)

    @cached_property
    def load_bus(self) -> np.ndarray:
        """Buses carrying the network-side power balance rows: every bus
        without a generator (zero-injection buses included)."""
        has_gen = np.zeros(self.n_bus, dtype=bool)
        has_gen[self.gen_bus] = True
        return np.flatnonzero(~has_gen)

    @cached_property
    def bus_load(self) -> np.ndarray:
        """Complex nominal load per bus (sum of all Load records)."""
        s = np.zeros(self.n_bus, dtype=complex)
        for ld in self.loads:
            s[self.bus_index[ld.bus]] += ld.p + 1j * ld.q
        return s

    @cached_property
    def bus_load_limits(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(pmin, pmax, qmin, qmax) summed per bus."""
        arr = np.zeros((4, self.n_bus))
        for ld in self.loads:
            k = self.bus_index[ld.bus]
            arr[:, k] += (ld.pmin, ld.pmax, ld.qmin, ld.qmax)
        return arr[0], arr[1], arr[2], arr[3]

    def dyn_array(self, name: str) -> np.ndarray:
        return np.array([getattr(g.dyn, name) for g in self.generators], dtype=float)

    @property
    def omega_s(self) -> float:
        return 2.0 * math.pi * self.frequency

    # ---- convenience rewrites -----------------------------------------
    def with_load_flexibility(self, frac: float) -> "NetworkCase":
        """Return a copy whose loads may move by +/- ``frac`` of nominal."""
        if frac < 0:
            raise ValueError("flexibility must be nonnegative")
        loads = []
        for ld in self.loads:
            dp, dq = abs(ld.p) * frac, abs(ld.q) * frac
            loads.append(replace(ld, pmin=ld.p - dp, pmax=ld.p + dp, qmin=ld.q - dq, qmax=ld.q + dq))
        return replace(self, loads=tuple(loads))

    def with_dyn(self, **overrides: float) -> "NetworkCase":
        gens = tuple(replace(g, dyn=replace(g.dyn, **overrides)) for g in self.generators)
        return replace(self, generators=gens)

    def scaled_loads(self, factor: float) -> "NetworkCase":
        loads = tuple(
            replace(ld, p=ld.p * factor, q=ld.q * factor, pmin=ld.pmin * factor,
                    pmax=ld.pmax * factor, qmin=ld.qmin * factor, qmax=ld.qmax * factor)
            for ld in self.loads
        )
        return replace(self, loads=loads)


def _validate(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    seen: set[int] = set()
    for i in ids:
        if i in seen:
            raise CaseValidationError(f"duplicate bus id {i}")
        seen.add(i)
    for b in case.buses:
        if b.type not in ("slack", "PV", "PQ"):
            raise CaseValidationError(f"bus {b.id}: unknown type {b.type!r}")
        if b.vmin > b.vmax:
            raise CaseValidationError(f"bus {b.id}: empty voltage interval")
    n_slack = sum(b.type == "slack" for b in case.buses)
    if n_slack != 1:
        raise CaseValidationError(f"exactly one slack bus required, found {n_slack}")
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise CaseValidationError(f"branch {k}: unknown bus {end}")
        if not math.hypot(br.r, br.x) > 0:
            raise CaseValidationError(f"branch {k}: impedance magnitude must be positive")
        if br.rate < 0:
            raise CaseValidationError(f"branch {k}: negative flow limit")
    for k, g in enumerate(case.generators):
        if g.bus not in seen:
            raise CaseValidationError(f"generator {k}: unknown bus {g.bus}")
        if g.pmin > g.pmax or g.qmin > g.qmax:
            raise CaseValidationError(f"generator {k}: empty limit interval")
        g.dyn.check(f"generator {k}")
    for k, ld in enumerate(case.loads):
        if ld.bus not in seen:
            raise CaseValidationError(f"load {k}: unknown bus {ld.bus}")
        if ld.pmin > ld.pmax or ld.qmin > ld.qmax:
            raise CaseValidationError(f"load {k}: empty limit interval")


# ---------------------------------------------------------------------------
# admittance structures


@dataclass(frozen=True)
class Admittance:
    Y: np.ndarray
    Yf: np.ndarray
    Yt: np.ndarray
    Cf: np.ndarray
    Ct: np.ndarray
    Cg: np.ndarray
    Cl: np.ndarray

    @property
    def Yg(self) -> np.ndarray:
        return self.Cg @ self.Y

    @property
    def Yl(self) -> np.ndarray:
        return self.Cl @ self.Y


def build_ybus(case: NetworkCase, extra_shunt: dict[int, complex] | None = None) -> Admittance:
    """Dense bus admittance matrix with branch and selection matrices.

    ``extra_shunt`` maps bus *index* to an additional shunt admittance (used
    for fault studies).
    """
    nb, nl = case.n_bus, len(case.branches)
    idx = case.bus_index
    f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
    ys = np.array([1.0 / complex(br.r, br.x) for br in case.branches])
    bc = np.array([br.b for br in case.branches])
    tap = np.array([(br.tap if br.tap else 1.0) * np.exp(1j * br.shift) for br in case.branches])

    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap

    Cf = np.zeros((nl, nb))
    Ct = np.zeros((nl, nb))
    Cf[np.arange(nl), f] = 1.0
    Ct[np.arange(nl), t] = 1.0
    Yf = yff[:, None] * Cf + yft[:, None] * Ct
    Yt = ytf[:, None] * Cf + ytt[:, None] * Ct
    ysh = np.array([b.gs + 1j * b.bs for b in case.buses])
    if extra_shunt:
        for k, y in extra_shunt.items():
            ysh[k] += y
    Y = Cf.T @ Yf + Ct.T @ Yt + np.diag(ysh)

    Cg = np.zeros((case.n_gen, nb))
    Cg[np.arange(case.n_gen), case.gen_bus] = 1.0
    lb = case.load_bus
    Cl = np.zeros((len(lb), nb))
    Cl[np.arange(len(lb)), lb] = 1.0
    return Admittance(Y=Y, Yf=Yf, Yt=Yt, Cf=Cf, Ct=Ct, Cg=Cg, Cl=Cl)


# ---------------------------------------------------------------------------
# native JSON format


def case_to_dict(case: NetworkCase) -> dict[str, Any]:
    def bus(b: Bus):
        d = asdict(b)
        d["va_deg"] = math.degrees(d.pop("va"))
        return d

    def branch(br: Branch):
        d = asdict(br)
        d["from"] = d.pop("from_bus")
        d["to"] = d.pop("to_bus")
        d["shift_deg"] = math.degrees(d.pop("shift"))
        return d

    def gen(g: Generator):
        d = asdict(g)
        d["cost"] = [list(p) for p in g.cost]
        return d

    return {
        "schema": SCHEMA,
        "name": case.name,
        "base_mva": case.base_mva,
        "frequency_hz": case.frequency,
        "buses": [bus(b) for b in case.buses],
        "branches": [branch(br) for br in case.branches],
        "generators": [gen(g) for g in case.generators],
        "loads": [asdict(ld) for ld in case.loads],
    }


def serialize_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=1)


def _dyn_from_dict(d: dict[str, Any], frequency: float) -> GenDynParams:
    d = dict(d)
    if "M" not in d:
        if "H" not in d:
            raise CaseValidationError("generator dynamics need M or H")
        d["M"] = 2.0 * d.pop("H") / (2.0 * math.pi * frequency)
    else:
        d.pop("H", None)
    if "D" not in d:
        d["D"] = 0.0
    try:
        return GenDynParams(**{k: float(v) for k, v in d.items()})
    except TypeError as exc:
        raise CaseValidationError(f"bad generator dynamics: {exc}") from None


def case_from_dict(d: dict[str, Any]) -> NetworkCase:
    schema = d.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise CaseValidationError(f"unsupported schema {schema!r}")
    freq = float(d.get("frequency_hz", 60.0))
    try:
        buses = tuple(
            Bus(id=int(b["id"]), type=b["type"], vmin=b.get("vmin", 0.9), vmax=b.get("vmax", 1.1),
                gs=b.get("gs", 0.0), bs=b.get("bs", 0.0), vm=b.get("vm", 1.0),
                va=math.radians(b.get("va_deg", 0.0)))
            for b in d["buses"]
        )
        branches = tuple(
            Branch(from_bus=int(br["from"]), to_bus=int(br["to"]), r=br["r"], x=br["x"],
                   b=br.get("b", 0.0), tap=br.get("tap", 1.0) or 1.0,
                   shift=math.radians(br.get("shift_deg", 0.0)), rate=br.get("rate", 0.0))
            for br in d["branches"]
        )
        gens = []
        for g in d["generators"]:
            gens.append(Generator(
                bus=int(g["bus"]), pg=g["pg"], qg=g.get("qg", 0.0), pmin=g["pmin"], pmax=g["pmax"],
                qmin=g["qmin"], qmax=g["qmax"], vg=g.get("vg", 1.0),
                dyn=_dyn_from_dict(g.get("dyn", DEFAULT_DYN), freq),
                cost=tuple((float(p), float(c)) for p, c in g.get("cost", ())),
            ))
        loads = tuple(
            Load(bus=int(ld["bus"]), p=ld["p"], q=ld["q"], pmin=ld.get("pmin", ld["p"]),
                 pmax=ld.get("pmax", ld["p"]), qmin=ld.get("qmin", ld["q"]), qmax=ld.get("qmax", ld["q"]))
            for ld in d.get("loads", ())
        )
    except KeyError as exc:
        raise CaseValidationError(f"missing field {exc}") from None
    return NetworkCase(base_mva=float(d["base_mva"]), buses=buses, branches=branches,
                       generators=tuple(gens), loads=loads, frequency=freq, name=d.get("name", "case"))


def parse_case(content: bytes | str, format: str = "native-json") -> NetworkCase:
    """Parse case-file content in ``native-json`` or ``matpower-m`` format."""
    if isinstance(content, bytes):
        content = content.decode("utf-8")
    if format == "native-json":
        try:
            d = json.loads(content)
        except json.JSONDecodeError as exc:
            raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
        return case_from_dict(d)
    if format == "matpower-m":
        return _parse_matpower(content)
    raise ValueError(f"unknown case format {format!r}")


def load_case(path: str) -> NetworkCase:
    fmt = "matpower-m" if str(path).endswith(".m") else "native-json"
    with open(path, "rb") as fh:
        return parse_case(fh.read(), fmt)


def builtin_case(name: str) -> NetworkCase:
    """Load one of the bundled benchmark cases (``case9``, ``case39``, ...)."""
    from importlib import resources

    data = resources.files("hiergrid.data").joinpath(f"{name}.json").read_bytes()
    return parse_case(data)


# ---------------------------------------------------------------------------
# MATPOWER import

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?Inf", re.IGNORECASE)

MATPOWER_DYN_COLUMNS = ("bus", "H", "D", "Td0p", "Tq0p", "xd", "xq", "xdp", "xqp", "KA", "KS")


def _strip_comment(line: str) -> str:
    quote = False
    for k, ch in enumerate(line):
        if ch == "'":
            quote = not quote
        elif ch == "%" and not quote:
            return line[:k]
    return line


def _parse_matpower(text: str) -> NetworkCase:
    lines = text.splitlines()
    scalars: dict[str, float] = {}
    tables: dict[str, list[list[float]]] = {}
    name = "case"
    k = 0
    while k < len(lines):
        raw = _strip_comment(lines[k])
        m_fn = re.match(r"\s*function\s+mpc\s*=\s*(\w+)", raw)
        if m_fn:
            name = m_fn.group(1)
        m = _ASSIGN.search(raw)
        if not m:
            k += 1
            continue
        key = m.group(1)
        rest = raw[m.end():]
        col0 = m.end() + 1
        if rest.lstrip().startswith("["):
            start_line = k + 1
            body = rest.lstrip()[1:]
            buf = []
            while "]" not in body:
                buf.append((k + 1, body))
                k += 1
                if k >= len(lines):
                    raise CaseSyntaxError(f"unterminated matrix for mpc.{key}", start_line, col0)
                body = _strip_comment(lines[k])
            buf.append((k + 1, body[: body.index("]")]))
            rows: list[list[float]] = []
            for lineno, chunk in buf:
                for part in chunk.split(";"):
                    part_s = part.strip()
                    if not part_s:
                        continue
                    toks = part_s.replace(",", " ").split()
                    row = []
                    for tok in toks:
                        if not _NUMBER.fullmatch(tok):
                            col = lines[lineno - 1].find(tok) + 1
                            raise CaseSyntaxError(f"bad number {tok!r} in mpc.{key}", lineno, max(col, 1))
                        row.append(float(tok))
                    rows.append(row)
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                raise CaseSyntaxError(f"ragged rows in mpc.{key}", start_line, col0)
            tables[key] = rows
        else:
            val = rest.split(";")[0].strip()
            if _NUMBER.fullmatch(val):
                scalars[key] = float(val)
            elif key != "version":
                raise CaseSyntaxError(f"cannot parse value for mpc.{key}", k + 1, col0)
        k += 1

    for req in ("bus", "gen", "branch"):
        if req not in tables:
            raise CaseValidationError(f"missing mpc.{req} table")
    base = scalars.get("baseMVA", 100.0)
    freq = scalars.get("frequency", 60.0)
    btype = {1: "PQ", 2: "PV", 3: "slack"}

    buses, loads = [], []
    for row in tables["bus"]:
        if len(row) < 13:
            raise CaseValidationError("mpc.bus rows need 13 columns")
        bid = int(row[0])
        t = int(row[1])
        if t == 4:
            continue
        buses.append(Bus(id=bid, type=btype.get(t, "PQ"), vmin=row[12], vmax=row[11],
                         gs=row[4] / base, bs=row[5] / base, vm=row[7], va=math.radians(row[8])))
        if row[2] or row[3]:
            p, q = row[2] / base, row[3] / base
            loads.append(Load(bus=bid, p=p, q=q, pmin=p, pmax=p, qmin=q, qmax=q))

    dyn_rows = tables.get("dyn")
    gens = []
    gen_rows = [r for r in tables["gen"] if len(r) < 8 or r[7] > 0]
    if dyn_rows is not None and len(dyn_rows) != len(gen_rows):
        raise CaseValidationError("mpc.dyn must have one row per in-service generator")
    costs = tables.get("gencost")
    for g_i, row in enumerate(gen_rows):
        if dyn_rows is not None:
            dr = dyn_rows[g_i]
            if int(dr[0]) != int(row[0]):
                raise CaseValidationError(f"mpc.dyn row {g_i + 1} bus {int(dr[0])} does not match generator bus")
            dd = dict(zip(MATPOWER_DYN_COLUMNS[1:], dr[1:]))
        else:
            dd = dict(DEFAULT_DYN)
        cost: tuple[tuple[float, float], ...] = ()
        if costs is not None and g_i < len(costs) and int(costs[g_i][0]) == 1:
            n = int(costs[g_i][3])
            pts = costs[g_i][4: 4 + 2 * n]
            cost = tuple((pts[2 * j] / base, pts[2 * j + 1]) for j in range(n))
        gens.append(Generator(
            bus=int(row[0]), pg=row[1] / base, qg=row[2] / base, qmax=row[3] / base, qmin=row[4] / base,
            vg=row[5], pmax=row[8] / base, pmin=row[9] / base, dyn=_dyn_from_dict(dd, freq), cost=cost,
        ))
    branches = []
    for row in tables["branch"]:
        if len(row) > 10 and row[10] <= 0:
            continue
        branches.append(Branch(from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3], b=row[4],
                               tap=row[8] or 1.0, shift=math.radians(row[9]), rate=row[5] / base))
    return NetworkCase(base_mva=base, buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
                       loads=tuple(loads), frequency=freq, name=name)


__all__: Sequence[str] = (
    "Admittance", "Branch", "Bus", "CaseError", "CaseSyntaxError", "CaseValidationError", "GenDynParams",
    "Generator", "Load", "NetworkCase", "build_ybus", "builtin_case", "case_from_dict", "case_to_dict",
    "load_case", "parse_case", "serialize_case",
)
