"""Unbalanced three-phase network model and bus admittance matrix.

A network is read from a JSON file in physical units (kW, kVAr, ohm,
microsiemens, kV, A) and converted to per-unit on a per-phase base of
``s_base_kva`` and the line-to-ground nominal voltage.  All downstream
modules work exclusively on the resulting immutable :class:`NetworkModel`.

Two JSON dialects are accepted:

* ``"units": "physical"`` (the default) for hand-written feeder files.
* ``"units": "pu"`` for files produced by :func:`save_network`.  Values are
  stored as per-unit floats so that a save/load round trip is exact.

Complex numbers are encoded as ``[re, im]`` pairs throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Phase",
    "PerUnitBase",
    "Bus",
    "DgUnit",
    "LineSegment",
    "NetworkModel",
    "IndexMap",
    "NetworkError",
    "SchemaError",
    "ValidationError",
    "parse_phases",
    "phase_label",
    "load_network",
    "save_network",
    "network_to_dict",
    "network_from_dict",
    "bundled_network_path",
    "delta_to_wye_load",
    "build_bus_admittance",
    "kron_reduce",
]

FEET_PER_MILE = 5280.0
DEFAULT_PCC_VOLTAGE = np.array(
    [1.0, np.exp(-2j * np.pi / 3), np.exp(2j * np.pi / 3)], dtype=complex
)


class NetworkError(ValueError):
    """Base class for network ingestion errors."""


class SchemaError(NetworkError):
    """The input does not follow the documented JSON schema.

    Attributes
    ----------
    path : str
        JSON-pointer-like location of the offending field.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ValidationError(NetworkError):
    """The input parses but describes an inconsistent network."""


class Phase(IntEnum):
    """Phase label. The integer value fixes the (a, b, c) ordering."""

    A = 0
    B = 1
    C = 2

    @property
    def label(self) -> str:
        return "abc"[self.value]


def parse_phases(spec: str | Sequence[int]) -> tuple[int, ...]:
    """Turn ``"ac"`` or ``[0, 2]`` into a sorted tuple of phase integers."""
    if isinstance(spec, str):
        try:
            idx = [Phase["ABC"["abc".index(ch)]] for ch in spec.lower()]
        except ValueError as exc:
            raise ValueError(f"unknown phase in {spec!r}") from exc
    else:
        idx = [Phase(int(p)) for p in spec]
    if not idx:
        raise ValueError("empty phase set")
    if len(set(idx)) != len(idx):
        raise ValueError(f"repeated phase in {spec!r}")
    return tuple(sorted(int(p) for p in idx))


def phase_label(phases: Iterable[int]) -> str:
    return "".join("abc"[p] for p in phases)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PerUnitBase:
    """Per-phase power base and line-to-ground voltage base.

    Parameters
    ----------
    s_base_va : float
        Per-phase apparent power base in VA.
    v_base_v : float
        Line-to-ground voltage base in V.
    """

    s_base_va: float = 1.0e6
    v_base_v: float = 4160.0 / math.sqrt(3.0)

    def __post_init__(self):
        if not (self.s_base_va > 0 and self.v_base_v > 0):
            raise ValidationError("per-unit bases must be positive")

    @property
    def z_base(self) -> float:
        return self.v_base_v**2 / self.s_base_va

    @property
    def i_base(self) -> float:
        return self.s_base_va / self.v_base_v

    @property
    def s_base_kw(self) -> float:
        return self.s_base_va / 1e3

    @property
    def s_base_mw(self) -> float:
        return self.s_base_va / 1e6


@dataclass(frozen=True)
class Bus:
    """A network node.

    ``load`` and ``cap_susceptance`` are indexed like ``phases`` (missing
    phases are skipped, never padded).
    """

    id: int
    phases: tuple[int, ...]
    load: np.ndarray
    cap_susceptance: np.ndarray
    vmin: float = 0.95
    vmax: float = 1.05
    is_pcc: bool = False

    def __post_init__(self):
        object.__setattr__(self, "load", _frozen(np.asarray(self.load, dtype=complex)))
        object.__setattr__(
            self, "cap_susceptance", _frozen(np.asarray(self.cap_susceptance, dtype=float))
        )
        n = len(self.phases)
        if self.load.shape != (n,) or self.cap_susceptance.shape != (n,):
            raise ValidationError(f"bus {self.id}: per-phase arrays must have length {n}")
        if self.vmin > self.vmax:
            raise ValidationError(f"bus {self.id}: vmin {self.vmin} > vmax {self.vmax}")


@dataclass(frozen=True)
class DgUnit:
    """Dispatchable generator with per-phase power boxes in pu.

    A committed (renewable) source is a unit with ``p_min == p_max``.
    ``cost`` is in currency per pu of active power (per hour).
    """

    bus: int
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    cost: float = 0.0

    def __post_init__(self):
        for name in ("p_min", "p_max", "q_min", "q_max"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=float)))
        shapes = {a.shape for a in (self.p_min, self.p_max, self.q_min, self.q_max)}
        if len(shapes) != 1:
            raise ValidationError(f"DG at bus {self.bus}: limit arrays differ in length")
        if np.any(self.p_min > self.p_max) or np.any(self.q_min > self.q_max):
            raise ValidationError(f"DG at bus {self.bus}: lower limit exceeds upper limit")


@dataclass(frozen=True)
class LineSegment:
    """pi-model line between ``from_bus`` and ``to_bus``.

    ``z`` and ``y_shunt`` are square over ``phases``; ``y_shunt`` is the
    total shunt admittance, half of which is placed at each end.
    ``neutral_t`` maps phase currents to neutral-conductor currents.
    Optional caps are ``None`` when absent; current caps are per phase.
    """

    from_bus: int
    to_bus: int
    phases: tuple[int, ...]
    z: np.ndarray
    y_shunt: np.ndarray
    neutral_t: np.ndarray | None = None
    loss_cap: float | None = None
    current_caps: np.ndarray | None = None
    neutral_current_caps: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.phases)
        z = np.asarray(self.z, dtype=complex)
        ys = np.asarray(self.y_shunt, dtype=complex)
        tag = f"line {self.from_bus}-{self.to_bus}"
        if z.shape != (n, n) or ys.shape != (n, n):
            raise ValidationError(f"{tag}: Z and Yshunt must be {n}x{n}")
        if np.linalg.matrix_rank(z) < n:
            raise ValidationError(f"{tag}: singular impedance matrix")
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "y_shunt", _frozen(ys))
        if self.neutral_t is not None:
            t = np.atleast_2d(np.asarray(self.neutral_t, dtype=complex))
            if t.shape[1] != n:
                raise ValidationError(f"{tag}: neutral_T must have {n} columns")
            object.__setattr__(self, "neutral_t", _frozen(t))
        if self.current_caps is not None:
            c = np.asarray(self.current_caps, dtype=float)
            if c.shape != (n,):
                raise ValidationError(f"{tag}: current_caps must have length {n}")
            object.__setattr__(self, "current_caps", _frozen(c))
        if self.neutral_current_caps is not None:
            if self.neutral_t is None:
                raise ValidationError(f"{tag}: neutral caps given without neutral_T")
            c = np.asarray(self.neutral_current_caps, dtype=float)
            if c.shape != (self.neutral_t.shape[0],):
                raise ValidationError(f"{tag}: neutral caps must match neutral_T rows")
            object.__setattr__(self, "neutral_current_caps", _frozen(c))

    @property
    def y_series(self) -> np.ndarray:
        return np.linalg.inv(self.z)


class IndexMap:
    """Bijection between (bus id, phase) pairs and global row indices.

    The PCC block comes first, the remaining buses follow by increasing id,
    and phases are ordered (a, b, c) within a bus.
    """

    def __init__(self, buses: Sequence[Bus]):
        pcc = [b for b in buses if b.is_pcc]
        rest = sorted((b for b in buses if not b.is_pcc), key=lambda b: b.id)
        self._order = tuple(b.id for b in pcc + rest)
        self._fwd: dict[tuple[int, int], int] = {}
        self._bus_slices: dict[int, np.ndarray] = {}
        k = 0
        for b in pcc + rest:
            start = k
            for p in b.phases:
                self._fwd[(b.id, p)] = k
                k += 1
            self._bus_slices[b.id] = np.arange(start, k)
        self._inv = tuple(sorted(self._fwd, key=self._fwd.__getitem__))
        self.size = k

    def __len__(self) -> int:
        return self.size

    def index(self, bus: int, phase: int) -> int:
        try:
            return self._fwd[(bus, int(phase))]
        except KeyError:
            raise KeyError(f"phase {phase_label([phase])} not present at bus {bus}") from None

    def pair(self, index: int) -> tuple[int, int]:
        return self._inv[index]

    def bus_indices(self, bus: int) -> np.ndarray:
        return self._bus_slices[bus]

    def phase_indices(self, bus: int, phases: Iterable[int]) -> np.ndarray:
        return np.array([self.index(bus, p) for p in phases], dtype=int)

    @property
    def bus_order(self) -> tuple[int, ...]:
        return self._order

    def pairs(self) -> tuple[tuple[int, int], ...]:
        return self._inv


@dataclass(frozen=True)
class NetworkModel:
    """Validated microgrid in per-unit.

    Use :func:`load_network` or :func:`network_from_dict` to build one; the
    constructor performs the cross-object validation.
    """

    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    dg_units: tuple[DgUnit, ...] = ()
    base: PerUnitBase = field(default_factory=PerUnitBase)
    pcc_voltage: np.ndarray = field(default_factory=lambda: DEFAULT_PCC_VOLTAGE.copy())
    areas: tuple[tuple[int, ...], ...] | None = None
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(sorted(self.buses, key=lambda b: b.id)))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "dg_units", tuple(self.dg_units))
        self._validate()
        pcc = self.pcc_bus
        v0 = np.asarray(self.pcc_voltage, dtype=complex)
        if v0.shape == (3,) and len(pcc.phases) < 3:
            v0 = v0[list(pcc.phases)]
        if v0.shape != (len(pcc.phases),):
            raise ValidationError("pcc_voltage length must match PCC phases")
        object.__setattr__(self, "pcc_voltage", _frozen(v0))
        object.__setattr__(self, "_index", IndexMap(self.buses))
        if self.areas is not None:
            object.__setattr__(
                self, "areas", tuple(tuple(int(n) for n in a) for a in self.areas)
            )

    def _validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus id")
        pccs = [b.id for b in self.buses if b.is_pcc]
        if len(pccs) != 1:
            raise ValidationError(f"exactly one PCC bus required, found {len(pccs)}")
        by_id = {b.id: b for b in self.buses}
        adj: dict[int, set[int]] = {i: set() for i in ids}
        seen_pairs = set()
        for ln in self.lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in by_id:
                    raise ValidationError(
                        f"line {ln.from_bus}-{ln.to_bus} references missing bus {end}"
                    )
                if not set(ln.phases) <= set(by_id[end].phases):
                    raise ValidationError(
                        f"line {ln.from_bus}-{ln.to_bus} phases {phase_label(ln.phases)} "
                        f"not present at bus {end}"
                    )
            if ln.from_bus == ln.to_bus:
                raise ValidationError(f"self-loop at bus {ln.from_bus}")
            key = frozenset((ln.from_bus, ln.to_bus))
            if key in seen_pairs:
                raise ValidationError(f"parallel lines between {sorted(key)}")
            seen_pairs.add(key)
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        stack, reached = [ids[0]], {ids[0]}
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in reached:
                    reached.add(nb)
                    stack.append(nb)
        if len(reached) != len(ids):
            missing = sorted(set(ids) - reached)
            raise ValidationError(f"network is disconnected; unreachable buses {missing}")
        dg_buses = set()
        for dg in self.dg_units:
            if dg.bus not in by_id:
                raise ValidationError(f"DG references missing bus {dg.bus}")
            if dg.bus in dg_buses:
                raise ValidationError(f"more than one DG unit at bus {dg.bus}")
            if by_id[dg.bus].is_pcc:
                raise ValidationError("DG unit cannot sit at the PCC")
            if dg.p_min.shape != (len(by_id[dg.bus].phases),):
                raise ValidationError(f"DG at bus {dg.bus}: limits must match bus phases")
            dg_buses.add(dg.bus)

    @property
    def index(self) -> IndexMap:
        return self._index  # type: ignore[attr-defined]

    @property
    def size(self) -> int:
        return self.index.size

    @property
    def pcc_bus(self) -> Bus:
        return next(b for b in self.buses if b.is_pcc)

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(f"unknown bus {bus_id}")

    def dg_at(self, bus_id: int) -> DgUnit | None:
        for dg in self.dg_units:
            if dg.bus == bus_id:
                return dg
        return None

    def neighbors(self, bus_id: int) -> list[int]:
        out = []
        for ln in self.lines:
            if ln.from_bus == bus_id:
                out.append(ln.to_bus)
            elif ln.to_bus == bus_id:
                out.append(ln.from_bus)
        return sorted(out)

    def total_load(self) -> complex:
        return complex(sum(b.load.sum() for b in self.buses))

    def with_dg_costs(self, costs: float | Sequence[float]) -> "NetworkModel":
        """Copy with DG cost coefficients replaced (scalar or one per unit)."""
        if np.isscalar(costs):
            costs = [float(costs)] * len(self.dg_units)
        if len(costs) != len(self.dg_units):
            raise ValueError("one cost per DG unit required")
        units = tuple(
            DgUnit(d.bus, d.p_min, d.p_max, d.q_min, d.q_max, float(c))
            for d, c in zip(self.dg_units, costs)
        )
        return NetworkModel(
            self.buses, self.lines, units, self.base, self.pcc_voltage, self.areas, self.name
        )


# ---------------------------------------------------------------------------
# Electrical helpers
# ---------------------------------------------------------------------------


def delta_to_wye_load(delta_loads: Mapping[str, complex]) -> np.ndarray:
    """Convert delta-connected spot loads to equivalent wye loads.

    Each phase-pair load is split equally between its two phases, which is
    exact for the total power and a first-order approximation under
    nominal balanced voltages.

    Parameters
    ----------
    delta_loads : mapping
        Complex powers keyed by ``"ab"``, ``"bc"`` and ``"ca"``.

    Returns
    -------
    ndarray of complex, shape (3,)
        Wye loads on phases (a, b, c).
    """
    out = np.zeros(3, dtype=complex)
    for pair in ("ab", "bc", "ca"):
        if pair not in delta_loads:
            raise ValueError(f"missing delta phase pair {pair!r}")
        s = complex(delta_loads[pair])
        for ch in pair:
            out["abc".index(ch)] += s / 2
    return out


def kron_reduce(primitive_z: np.ndarray, p: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Eliminate grounded neutral conductors from a primitive impedance.

    Parameters
    ----------
    primitive_z : ndarray, shape (p + q, p + q)
        Primitive impedance with phase conductors first.
    p, q : int
        Numbers of phase and neutral conductors.

    Returns
    -------
    z : ndarray, shape (p, p)
        Phase impedance ``Zpp - Zpn Znn^-1 Znp``.
    t : ndarray, shape (q, p)
        Neutral transformation ``-Znn^-1 Znp`` so that neutral currents are
        ``t @ i_phase``.
    """
    zp = np.asarray(primitive_z, dtype=complex)
    if zp.shape != (p + q, p + q):
        raise ValueError(f"primitive impedance must be {p + q}x{p + q}")
    if q == 0:
        return zp.copy(), np.zeros((0, p), dtype=complex)
    zpp, zpn = zp[:p, :p], zp[:p, p:]
    znp, znn = zp[p:, :p], zp[p:, p:]
    if np.linalg.cond(znn) > 1e14:
        raise np.linalg.LinAlgError("singular neutral block in Kron reduction")
    t = -np.linalg.solve(znn, znp)
    return zpp + zpn @ t, t


def build_bus_admittance(net: NetworkModel) -> np.ndarray:
    """Assemble the global bus admittance matrix of the pi-model network.

    The off-diagonal block of line (m, n) is ``-Z^-1`` and each end receives
    ``Z^-1 + Yshunt/2`` on its diagonal block; blocks are embedded on the
    line phases only.  The result is complex symmetric.
    """
    idx = net.index
    y = np.zeros((idx.size, idx.size), dtype=complex)
    for ln in net.lines:
        try:
            yl = np.linalg.inv(ln.z)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"singular impedance on line {ln.from_bus}-{ln.to_bus}"
            ) from exc
        im = idx.phase_indices(ln.from_bus, ln.phases)
        jn = idx.phase_indices(ln.to_bus, ln.phases)
        diag = yl + 0.5 * ln.y_shunt
        y[np.ix_(im, im)] += diag
        y[np.ix_(jn, jn)] += diag
        y[np.ix_(im, jn)] -= yl
        y[np.ix_(jn, im)] -= yl
    return y


# ---------------------------------------------------------------------------
# JSON ingestion
# ---------------------------------------------------------------------------


def bundled_network_path(name: str) -> Path:
    """Path of a bundled network file (``"ten_node"`` or ``"ieee37"``)."""
    stem = name[:-5] if name.endswith(".json") else name
    path = Path(__file__).with_name("data") / f"{stem}.json"
    if not path.exists():
        raise FileNotFoundError(f"no bundled network named {name!r}")
    return path


def load_network(path: str | Path, format: str = "json") -> NetworkModel:
    """Read a network file and return the validated per-unit model."""
    if format != "json":
        raise ValueError(f"unsupported network format {format!r}")
    path = Path(path)
    if not path.exists():
        try:
            path = bundled_network_path(str(path))
        except FileNotFoundError:
            raise FileNotFoundError(f"network file not found: {path}") from None
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON ({exc})") from exc
    return network_from_dict(raw)


def save_network(net: NetworkModel, path: str | Path) -> None:
    """Write ``net`` in the exact per-unit dialect."""
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)


def _cplx(x: np.ndarray) -> list:
    a = np.asarray(x, dtype=complex)
    if a.ndim == 0:
        return [float(a.real), float(a.imag)]
    return [_cplx(r) for r in a]


class _Reader:
    """Small helper that tracks the JSON path for error messages."""

    def __init__(self, obj: Mapping, path: str):
        if not isinstance(obj, Mapping):
            raise SchemaError(path, "expected an object")
        self.obj = obj
        self.path = path

    def has(self, key: str) -> bool:
        return key in self.obj and self.obj[key] is not None

    def raw(self, key: str, default: Any = ...):
        if key not in self.obj or self.obj[key] is None:
            if default is ...:
                raise SchemaError(f"{self.path}.{key}", "required field missing")
            return default
        return self.obj[key]

    def num(self, key: str, default: Any = ...) -> float:
        v = self.raw(key, default)
        if v is default and default is not ...:
            return v
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{self.path}.{key}", "expected a number")
        return float(v)

    def vec(self, key: str, n: int, default: Any = ...) -> np.ndarray:
        v = self.raw(key, default)
        if v is default and default is not ...:
            return np.full(n, default, dtype=float) if np.isscalar(default) else default
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return np.full(n, float(v))
        try:
            a = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise SchemaError(f"{self.path}.{key}", "expected a list of numbers") from None
        if a.shape != (n,):
            raise SchemaError(f"{self.path}.{key}", f"expected {n} values, got shape {a.shape}")
        return a

    def cmat(self, key: str, n: int) -> np.ndarray:
        v = self.raw(key)
        try:
            a = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise SchemaError(f"{self.path}.{key}", "expected [re, im] matrix") from None
        if a.shape != (n, n, 2):
            raise SchemaError(
                f"{self.path}.{key}", f"expected {n}x{n} matrix of [re, im] pairs"
            )
        return a[..., 0] + 1j * a[..., 1]

    def cvec(self, key: str, n: int) -> np.ndarray:
        v = self.raw(key)
        a = np.asarray(v, dtype=float)
        if a.shape != (n, 2):
            raise SchemaError(f"{self.path}.{key}", f"expected {n} [re, im] pairs")
        return a[:, 0] + 1j * a[:, 1]

    def rmat(self, key: str, n: int) -> np.ndarray:
        v = self.raw(key)
        a = np.asarray(v, dtype=float)
        if a.ndim == 1 and a.shape == (n,):
            return np.diag(a)
        if a.shape != (n, n):
            raise SchemaError(f"{self.path}.{key}", f"expected {n} values or {n}x{n} matrix")
        return a

    def phases(self, key: str = "phases") -> tuple[int, ...]:
        try:
            return parse_phases(self.raw(key))
        except ValueError as exc:
            raise SchemaError(f"{self.path}.{key}", str(exc)) from None


_PER_MILE_KEYS = ("z_ohm_per_mile", "primitive_z_ohm_per_mile", "b_us_per_mile")


def _sub_matrix(full: np.ndarray, phases: tuple[int, ...], cfg_phases: tuple[int, ...]):
    pos = [cfg_phases.index(p) for p in phases]
    return full[np.ix_(pos, pos)]


def network_from_dict(raw: Mapping) -> NetworkModel:
    """Build a :class:`NetworkModel` from a decoded JSON document."""
    top = _Reader(raw, "$")
    units = top.raw("units", "physical")
    if units not in ("physical", "pu"):
        raise SchemaError("$.units", "must be 'physical' or 'pu'")
    pu = units == "pu"

    b = _Reader(top.raw("base", {}), "$.base")
    if pu:
        base = PerUnitBase(b.num("s_base_va"), b.num("v_base_v"))
    else:
        s_kva = b.num("s_base_kva", 1000.0)
        if b.has("v_ln_kv"):
            v_ln = b.num("v_ln_kv")
        else:
            v_ln = b.num("v_ll_kv") / math.sqrt(3.0)
        base = PerUnitBase(s_kva * 1e3, v_ln * 1e3)
    s_kw = base.s_base_kw
    zb, ib = base.z_base, base.i_base

    bus_list = top.raw("buses")
    if not isinstance(bus_list, list) or not bus_list:
        raise SchemaError("$.buses", "expected a non-empty list")
    buses = []
    for k, bd in enumerate(bus_list):
        r = _Reader(bd, f"$.buses[{k}]")
        bid = r.raw("id")
        if isinstance(bid, bool) or not isinstance(bid, int) or bid < 0:
            raise SchemaError(f"{r.path}.id", "expected integer >= 0")
        ph = r.phases()
        n = len(ph)
        if pu:
            load = r.cvec("load", n) if r.has("load") else np.zeros(n, complex)
            cap = r.vec("cap", n, 0.0)
        else:
            load = r.vec("load_kw", n, 0.0) + 1j * r.vec("load_kvar", n, 0.0)
            if r.has("delta_load_kw") or r.has("delta_load_kvar"):
                dkw = r.raw("delta_load_kw", {})
                dkvar = r.raw("delta_load_kvar", {})
                try:
                    dl = {
                        pair: float(dkw.get(pair, 0.0)) + 1j * float(dkvar.get(pair, 0.0))
                        for pair in ("ab", "bc", "ca")
                    }
                except (AttributeError, TypeError, ValueError):
                    raise SchemaError(f"{r.path}.delta_load_kw", "expected pair map") from None
                wye = delta_to_wye_load(dl)
                extra = set(np.nonzero(np.abs(wye) > 0)[0]) - set(ph)
                if extra:
                    raise ValidationError(f"bus {bid}: delta load on absent phase")
                load = load + wye[list(ph)]
            load = load / s_kw
            cap = r.vec("cap_kvar", n, 0.0) / s_kw
        buses.append(
            Bus(
                id=bid,
                phases=ph,
                load=load,
                cap_susceptance=cap,
                vmin=r.num("vmin_pu" if not pu else "vmin", 0.95),
                vmax=r.num("vmax_pu" if not pu else "vmax", 1.05),
                is_pcc=bool(r.raw("pcc", False)),
            )
        )

    configs = top.raw("line_configs", {})
    lines = []
    for k, ld in enumerate(top.raw("lines", [])):
        r = _Reader(ld, f"$.lines[{k}]")
        ph = r.phases()
        n = len(ph)
        t = None
        if pu:
            z = r.cmat("z", n)
            ys = r.cmat("y_shunt", n) if r.has("y_shunt") else np.zeros((n, n), complex)
            if r.has("neutral_t"):
                tv = np.asarray(r.raw("neutral_t"), dtype=float)
                t = tv[..., 0] + 1j * tv[..., 1]
            loss_cap = r.num("loss_cap", None)
            ccap = r.vec("current_caps", n, None)
            ncap = r.raw("neutral_current_caps", None)
        else:
            scale = 1.0
            src = r
            if r.has("config"):
                name = str(r.raw("config"))
                if name not in configs:
                    raise SchemaError(f"{r.path}.config", f"unknown line config {name!r}")
                src = _Reader(configs[name], f"$.line_configs.{name}")
            if any(src.has(key) for key in _PER_MILE_KEYS):
                if r.has("length_ft"):
                    scale = r.num("length_ft") / FEET_PER_MILE
                else:
                    scale = r.num("length_mi")
            cfg_ph = src.phases() if src is not r and src.has("phases") else ph
            m = len(cfg_ph)
            if not set(ph) <= set(cfg_ph):
                raise ValidationError(f"line {k}: phases not in configuration")
            if src.has("primitive_z_ohm") or src.has("primitive_z_ohm_per_mile"):
                key = "primitive_z_ohm" if src.has("primitive_z_ohm") else "primitive_z_ohm_per_mile"
                q = int(src.num("neutrals"))
                prim = _Reader({key: src.raw(key)}, src.path).cmat(key, m + q) * scale
                zfull, tfull = kron_reduce(prim, m, q)
                pos = [cfg_ph.index(p) for p in ph]
                z = zfull[np.ix_(pos, pos)]
                t = tfull[:, pos]
            else:
                key = "z_ohm" if src.has("z_ohm") else "z_ohm_per_mile"
                z = _sub_matrix(src.cmat(key, m), ph, cfg_ph) * scale
            z = z / zb
            bkey = "b_us" if src.has("b_us") else "b_us_per_mile"
            if src.has(bkey):
                bmat = _sub_matrix(src.rmat(bkey, m), ph, cfg_ph) * scale
                ys = 1j * bmat * 1e-6 * zb
            else:
                ys = np.zeros((n, n), complex)
            loss_cap = r.num("loss_cap_kw", None)
            loss_cap = None if loss_cap is None else loss_cap / s_kw
            ccap = r.vec("current_cap_a", n, None)
            ccap = None if ccap is None else ccap / ib
            ncap = r.raw("neutral_current_cap_a", None)
            ncap = None if ncap is None else np.asarray(ncap, dtype=float) / ib
        try:
            lines.append(
                LineSegment(
                    from_bus=int(r.raw("from")),
                    to_bus=int(r.raw("to")),
                    phases=ph,
                    z=z,
                    y_shunt=ys,
                    neutral_t=t,
                    loss_cap=loss_cap,
                    current_caps=ccap,
                    neutral_current_caps=ncap,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"$.lines[{k}]: {exc}") from None

    phase_of = {bb.id: bb.phases for bb in buses}
    dgs = []
    for k, dd in enumerate(top.raw("dg", [])):
        r = _Reader(dd, f"$.dg[{k}]")
        bus = int(r.raw("bus"))
        if bus not in phase_of:
            raise ValidationError(f"DG references missing bus {bus}")
        n = len(phase_of[bus])
        if pu:
            lim = [r.vec(key, n) for key in ("p_min", "p_max", "q_min", "q_max")]
            cost = r.num("cost", 0.0)
        else:
            lim = [
                r.vec(key, n, 0.0) / s_kw
                for key in ("p_min_kw", "p_max_kw", "q_min_kvar", "q_max_kvar")
            ]
            cost = r.num("cost_per_mw", 0.0) * base.s_base_mw
        dgs.append(DgUnit(bus, *lim, cost=cost))

    if top.has("pcc_voltage"):
        pv = np.asarray(top.raw("pcc_voltage"), dtype=float)
        if pv.ndim != 2 or pv.shape[1] != 2:
            raise SchemaError("$.pcc_voltage", "expected list of pairs")
        if pu:
            v0 = pv[:, 0] + 1j * pv[:, 1]
        else:
            v0 = pv[:, 0] * np.exp(1j * np.deg2rad(pv[:, 1]))
    else:
        v0 = DEFAULT_PCC_VOLTAGE.copy()

    areas = top.raw("areas", None)
    if areas is not None:
        areas = tuple(tuple(int(x) for x in a) for a in areas)

    return NetworkModel(
        buses=tuple(buses),
        lines=tuple(lines),
        dg_units=tuple(dgs),
        base=base,
        pcc_voltage=v0,
        areas=areas,
        name=str(top.raw("name", "network")),
    )


def network_to_dict(net: NetworkModel) -> dict:
    """Per-unit JSON document that reloads to an identical model."""
    doc: dict[str, Any] = {
        "name": net.name,
        "units": "pu",
        "base": {"s_base_va": net.base.s_base_va, "v_base_v": net.base.v_base_v},
        "pcc_voltage": _cplx(net.pcc_voltage),
        "buses": [],
        "lines": [],
        "dg": [],
    }
    for b in net.buses:
        doc["buses"].append(
            {
                "id": b.id,
                "phases": phase_label(b.phases),
                "pcc": b.is_pcc,
                "load": _cplx(b.load),
                "cap": [float(x) for x in b.cap_susceptance],
                "vmin": b.vmin,
                "vmax": b.vmax,
            }
        )
    for ln in net.lines:
        d: dict[str, Any] = {
            "from": ln.from_bus,
            "to": ln.to_bus,
            "phases": phase_label(ln.phases),
            "z": _cplx(ln.z),
            "y_shunt": _cplx(ln.y_shunt),
        }
        if ln.neutral_t is not None:
            d["neutral_t"] = _cplx(ln.neutral_t)
        if ln.loss_cap is not None:
            d["loss_cap"] = ln.loss_cap
        if ln.current_caps is not None:
            d["current_caps"] = [float(x) for x in ln.current_caps]
        if ln.neutral_current_caps is not None:
            d["neutral_current_caps"] = [float(x) for x in ln.neutral_current_caps]
        doc["lines"].append(d)
    for dg in net.dg_units:
        doc["dg"].append(
            {
                "bus": dg.bus,
                "p_min": [float(x) for x in dg.p_min],
                "p_max": [float(x) for x in dg.p_max],
                "q_min": [float(x) for x in dg.q_min],
                "q_max": [float(x) for x in dg.q_max],
                "cost": dg.cost,
            }
        )
    if net.areas is not None:
        doc["areas"] = [list(a) for a in net.areas]
    return doc
