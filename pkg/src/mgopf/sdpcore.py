"""Trace-form OPF building blocks and the relaxed OPF problem.

Every physical quantity of the nonconvex OPF that is quadratic in the
stacked voltage vector ``v`` is written as ``Tr(Phi V)`` with ``V = v v^H``
and a Hermitian ``Phi``.  This module builds those matrices and assembles
them into an :class:`SdpProblem`, a solver-neutral description that
:mod:`mgopf.ipsolver` consumes.

Matrices are kept sparse (``scipy.sparse.csr_array``) because each one
touches only a handful of buses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .netmodel import Bus, LineSegment, NetworkModel, build_bus_admittance, phase_label

__all__ = [
    "HermitianMatrix",
    "SelectorVector",
    "FlowMatrices",
    "LinearConstraint",
    "BlockSpec",
    "SdpProblem",
    "CostKind",
    "CapOptions",
    "AssemblyError",
    "selector",
    "build_phi_pqv",
    "build_phi_flow",
    "build_phi_loss",
    "build_phi_current",
    "build_phi_neutral",
    "flow_matrices",
    "entry_functionals",
    "assemble_p3",
    "supply_cost_constant",
]


class AssemblyError(ValueError):
    """Raised when the network data cannot produce a well-posed problem."""


class HermitianMatrix:
    """Sparse complex Hermitian matrix.

    The input is symmetrized as ``(M + M^H) / 2`` on construction, so
    ``Tr(M X)`` is real for every Hermitian ``X``.
    """

    __slots__ = ("_m",)

    def __init__(self, m, *, assume_hermitian: bool = False):
        m = sp.csr_array(m, dtype=complex)
        if m.shape[0] != m.shape[1]:
            raise ValueError("Hermitian matrix must be square")
        if not assume_hermitian:
            m = sp.csr_array(0.5 * (m + m.conj().T))
        m.eliminate_zeros()
        m.sort_indices()
        self._m = m

    @classmethod
    def zeros(cls, n: int) -> "HermitianMatrix":
        return cls(sp.csr_array((n, n), dtype=complex), assume_hermitian=True)

    @property
    def sparse(self) -> sp.csr_array:
        return self._m

    @property
    def dim(self) -> int:
        return self._m.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._m.shape

    def dense(self) -> np.ndarray:
        return self._m.toarray()

    def trace_with(self, x: np.ndarray) -> float:
        """``Tr(M X)`` for a dense Hermitian ``X`` (real part returned)."""
        m = self._m.tocoo()
        return float(np.real(np.sum(m.data * x[m.col, m.row])))

    def quad(self, v: np.ndarray) -> float:
        """``v^H M v`` which equals ``Tr(M v v^H)``."""
        return float(np.real(np.vdot(v, self._m @ v)))

    def support(self) -> np.ndarray:
        m = self._m.tocoo()
        return np.unique(np.concatenate([m.row, m.col])).astype(int)

    def submatrix(self, idx: Sequence[int]) -> "HermitianMatrix":
        idx = np.asarray(idx, dtype=int)
        return HermitianMatrix(self._m[idx][:, idx], assume_hermitian=True)

    def embed(self, idx: Sequence[int], n: int) -> "HermitianMatrix":
        """Place this matrix at rows/cols ``idx`` of an ``n x n`` matrix."""
        idx = np.asarray(idx, dtype=int)
        m = self._m.tocoo()
        out = sp.coo_array((m.data, (idx[m.row], idx[m.col])), shape=(n, n))
        return HermitianMatrix(out, assume_hermitian=True)

    def is_zero(self) -> bool:
        return self._m.nnz == 0

    def __add__(self, other: "HermitianMatrix") -> "HermitianMatrix":
        return HermitianMatrix(self._m + other._m, assume_hermitian=True)

    def __sub__(self, other: "HermitianMatrix") -> "HermitianMatrix":
        return HermitianMatrix(self._m - other._m, assume_hermitian=True)

    def __mul__(self, s: float) -> "HermitianMatrix":
        return HermitianMatrix(self._m * float(s), assume_hermitian=True)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"HermitianMatrix(dim={self.dim}, nnz={self._m.nnz})"


@dataclass(frozen=True)
class SelectorVector:
    """Canonical basis vector picking one (bus, phase) entry of ``v``."""

    index: int
    dim: int

    def __post_init__(self):
        if not 0 <= self.index < self.dim:
            raise IndexError(f"selector index {self.index} outside [0, {self.dim})")

    def dense(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[self.index] = 1.0
        return e

    def outer(self) -> HermitianMatrix:
        m = sp.coo_array(([1.0 + 0j], ([self.index], [self.index])), shape=(self.dim, self.dim))
        return HermitianMatrix(m, assume_hermitian=True)


def selector(net: NetworkModel, bus: int, phase: int) -> SelectorVector:
    return SelectorVector(net.index.index(bus, phase), net.size)


@dataclass(frozen=True)
class FlowMatrices:
    """Per-line linear maps from the stacked voltage vector.

    ``a @ v`` is the series current leaving ``from_bus`` towards ``to_bus``,
    ``b_from @ v`` picks the sending-end voltages on the line phases and
    ``b_line @ v`` is the line current ``Z^-1 (v_m - v_n)``.
    """

    a: sp.csr_array
    b_from: sp.csr_array
    b_line: sp.csr_array


def _line(net: NetworkModel, line: LineSegment | int) -> LineSegment:
    if isinstance(line, (int, np.integer)):
        return net.lines[int(line)]
    return line


def flow_matrices(net: NetworkModel, line: LineSegment | int, direction: str = "forward") -> FlowMatrices:
    """Build the flow maps for ``line`` in the given direction.

    ``direction`` is ``"forward"`` (from -> to) or ``"reverse"``.
    """
    ln = _line(net, line)
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")
    m, n = (ln.from_bus, ln.to_bus) if direction == "forward" else (ln.to_bus, ln.from_bus)
    k = len(ln.phases)
    yl = np.linalg.inv(ln.z)
    im = net.index.phase_indices(m, ln.phases)
    jn = net.index.phase_indices(n, ln.phases)
    rows = np.repeat(np.arange(k), k)
    a = sp.coo_array(
        (
            np.concatenate([yl.ravel(), -yl.ravel()]),
            (np.concatenate([rows, rows]), np.concatenate([np.tile(im, k), np.tile(jn, k)])),
        ),
        shape=(k, net.size),
    ).tocsr()
    b_from = sp.coo_array((np.ones(k, complex), (np.arange(k), im)), shape=(k, net.size)).tocsr()
    return FlowMatrices(a=a, b_from=b_from, b_line=a)


def build_phi_pqv(
    net: NetworkModel, n: int, phase: int, y: np.ndarray | sp.sparray | None = None
) -> tuple[HermitianMatrix, HermitianMatrix, HermitianMatrix]:
    """Injection matrices at bus ``n`` and ``phase``.

    Returns ``(Phi_P, Phi_Q, Phi_V)`` with ``Tr(Phi_P V) = Re(V_n I_n^*)``,
    ``Tr(Phi_Q V) = Im(V_n I_n^*)`` and ``Tr(Phi_V V) = |V_n|^2``.
    A precomputed admittance matrix may be passed as ``y``.
    """
    bus = net.bus(n)
    if phase not in bus.phases:
        raise KeyError(f"phase {phase_label([phase])} not present at bus {n}")
    if y is None:
        y = build_bus_admittance(net)
    k = net.index.index(n, phase)
    row = sp.csr_array(y)[[k], :].toarray().ravel()
    cols = np.nonzero(row)[0]
    yn = sp.coo_array((row[cols], (np.full(cols.size, k), cols)), shape=(net.size, net.size))
    yn = sp.csr_array(yn)
    ynh = yn.conj().T
    phi_p = HermitianMatrix(0.5 * (yn + ynh), assume_hermitian=True)
    phi_q = HermitianMatrix(0.5j * (yn - ynh), assume_hermitian=True)
    return phi_p, phi_q, SelectorVector(k, net.size).outer()


def build_phi_flow(net: NetworkModel, line: LineSegment | int, direction: str = "forward") -> HermitianMatrix:
    """``Phi`` such that ``Tr(Phi V)`` is the series active power flow."""
    fm = flow_matrices(net, line, direction)
    m = fm.a.conj().T @ fm.b_from
    return HermitianMatrix(0.5 * (m + m.conj().T), assume_hermitian=True)


def build_phi_loss(net: NetworkModel, line: LineSegment | int) -> HermitianMatrix:
    """Series loss on a line, the sum of both directional flows."""
    return build_phi_flow(net, line, "forward") + build_phi_flow(net, line, "reverse")


def build_phi_current(net: NetworkModel, line: LineSegment | int, phase: int) -> HermitianMatrix:
    """``Phi_I`` with ``Tr(Phi_I V) = |I_mn|^2`` on ``phase``; PSD Gram form."""
    ln = _line(net, line)
    if phase not in ln.phases:
        raise KeyError(f"phase {phase_label([phase])} not on line {ln.from_bus}-{ln.to_bus}")
    fm = flow_matrices(net, ln)
    r = fm.b_line[[ln.phases.index(phase)], :]
    return HermitianMatrix(r.conj().T @ r, assume_hermitian=True)


def build_phi_neutral(net: NetworkModel, line: LineSegment | int, neutral: int) -> HermitianMatrix:
    """Squared magnitude of neutral current ``neutral`` through ``T``."""
    ln = _line(net, line)
    if ln.neutral_t is None:
        raise AssemblyError(f"line {ln.from_bus}-{ln.to_bus} has no neutral transformation")
    if not 0 <= neutral < ln.neutral_t.shape[0]:
        raise IndexError(f"neutral index {neutral} out of range")
    fm = flow_matrices(net, ln)
    r = sp.csr_array(ln.neutral_t[[neutral], :]) @ fm.b_line
    return HermitianMatrix(r.conj().T @ r, assume_hermitian=True)


def entry_functionals(n: int, p: int, q: int) -> tuple[HermitianMatrix, HermitianMatrix | None]:
    """Matrices reading ``Re V_pq`` and ``Im V_pq`` through ``Tr(E V)``.

    The imaginary functional is ``None`` on the diagonal.
    """
    if p == q:
        e = sp.coo_array(([1.0 + 0j], ([p], [p])), shape=(n, n))
        return HermitianMatrix(e, assume_hermitian=True), None
    re = sp.coo_array(([0.5 + 0j, 0.5 + 0j], ([p, q], [q, p])), shape=(n, n))
    im = sp.coo_array(([0.5j, -0.5j], ([p, q], [q, p])), shape=(n, n))
    return HermitianMatrix(re, assume_hermitian=True), HermitianMatrix(im, assume_hermitian=True)


# ---------------------------------------------------------------------------
# Abstract problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSpec:
    """One variable block.

    ``kind`` is ``"hpsd"`` (complex Hermitian PSD, ``size x size``),
    ``"nonneg"`` (``size`` nonnegative reals) or ``"soc"`` (one
    second-order cone ``x0 >= ||x[1:]||`` of dimension ``size``).
    """

    kind: str
    size: int
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("hpsd", "nonneg", "soc"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("block size must be positive")


@dataclass
class LinearConstraint:
    """``sum_k <terms[k], X_k>  sense  bound``.

    For ``hpsd`` blocks the coefficient is a :class:`HermitianMatrix` and
    the pairing is ``Tr(A X)``; for vector blocks it is a real vector.
    """

    terms: dict[int, HermitianMatrix | np.ndarray]
    sense: str
    bound: float
    tag: str

    def __post_init__(self):
        if self.sense not in ("eq", "le", "ge"):
            raise ValueError(f"unknown constraint sense {self.sense!r}")
        self.bound = float(self.bound)

    @property
    def A(self) -> HermitianMatrix:
        """Coefficient on block 0 (the voltage block)."""
        return self.terms[0]

    def evaluate(self, blocks: Sequence[np.ndarray]) -> float:
        total = 0.0
        for k, coef in self.terms.items():
            if isinstance(coef, HermitianMatrix):
                total += coef.trace_with(blocks[k])
            else:
                total += float(np.dot(coef, blocks[k]))
        return total

    def violation(self, blocks: Sequence[np.ndarray]) -> float:
        val = self.evaluate(blocks)
        if self.sense == "eq":
            return abs(val - self.bound)
        if self.sense == "le":
            return max(0.0, val - self.bound)
        return max(0.0, self.bound - val)


@dataclass
class SdpProblem:
    """Linear objective over PSD, nonnegative and SOC blocks.

    Attributes
    ----------
    blocks : list of BlockSpec
    cost : dict
        Block index to cost coefficient; absent blocks cost nothing.
    constraints : list of LinearConstraint
    fixed_entries : list of (block, row, col, value)
        Entries of Hermitian blocks pinned to a complex value.  They are
        expanded into real equality rows by :meth:`pin_constraints`.
    cost_constant : float
        Constant added to the solver objective when reporting.
    meta : dict
        Free-form provenance (cost kind, coefficients).
    """

    blocks: list[BlockSpec]
    cost: dict[int, HermitianMatrix | np.ndarray]
    constraints: list[LinearConstraint]
    fixed_entries: list[tuple[int, int, int, complex]] = field(default_factory=list)
    cost_constant: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for k, coef in list(self.cost.items()) + [
            (k, c) for con in self.constraints for k, c in con.terms.items()
        ]:
            if not 0 <= k < len(self.blocks):
                raise AssemblyError(f"coefficient on unknown block {k}")
            self._check_coef(self.blocks[k], coef)
        for blk, r, c, _ in self.fixed_entries:
            if self.blocks[blk].kind != "hpsd":
                raise AssemblyError("fixed entries only apply to Hermitian blocks")
            if r > c:
                raise AssemblyError("fixed entries must be upper-triangular (row <= col)")

    @staticmethod
    def _check_coef(spec: BlockSpec, coef) -> None:
        if spec.kind == "hpsd":
            if not isinstance(coef, HermitianMatrix) or coef.dim != spec.size:
                raise AssemblyError(f"block {spec.name!r} needs a {spec.size}x{spec.size} Hermitian coefficient")
        else:
            if np.shape(coef) != (spec.size,):
                raise AssemblyError(f"block {spec.name!r} needs a length-{spec.size} coefficient")

    def pin_constraints(self) -> list[LinearConstraint]:
        """Real equality rows equivalent to ``fixed_entries``."""
        out = []
        for blk, r, c, val in self.fixed_entries:
            n = self.blocks[blk].size
            e_re, e_im = entry_functionals(n, r, c)
            out.append(LinearConstraint({blk: e_re}, "eq", complex(val).real, f"pin:re[{r},{c}]"))
            if e_im is not None:
                out.append(LinearConstraint({blk: e_im}, "eq", complex(val).imag, f"pin:im[{r},{c}]"))
        return out

    def all_constraints(self) -> list[LinearConstraint]:
        return list(self.constraints) + self.pin_constraints()

    def objective(self, blocks: Sequence[np.ndarray]) -> float:
        """Variable part of the objective at the given block values."""
        total = 0.0
        for k, coef in self.cost.items():
            if isinstance(coef, HermitianMatrix):
                total += coef.trace_with(blocks[k])
            else:
                total += float(np.dot(coef, blocks[k]))
        return total

    def tags(self) -> list[str]:
        return [c.tag for c in self.all_constraints()]

    def to_json(self) -> dict:
        """Debug dump: block sizes and sparse triplets of all coefficients."""

        def enc(coef):
            if isinstance(coef, HermitianMatrix):
                m = coef.sparse.tocoo()
                return {
                    "rows": m.row.tolist(),
                    "cols": m.col.tolist(),
                    "re": m.data.real.tolist(),
                    "im": m.data.imag.tolist(),
                }
            return {"vector": np.asarray(coef, dtype=float).tolist()}

        return {
            "blocks": [{"kind": b.kind, "size": b.size, "name": b.name} for b in self.blocks],
            "cost": {str(k): enc(c) for k, c in self.cost.items()},
            "cost_constant": self.cost_constant,
            "constraints": [
                {
                    "tag": c.tag,
                    "sense": c.sense,
                    "bound": c.bound,
                    "terms": {str(k): enc(v) for k, v in c.terms.items()},
                }
                for c in self.constraints
            ],
            "fixed_entries": [
                [b, r, c, [complex(v).real, complex(v).imag]] for b, r, c, v in self.fixed_entries
            ],
            "meta": self.meta,
        }

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


class CostKind(str, Enum):
    LOSS = "loss"
    SUPPLY = "supply"


@dataclass(frozen=True)
class CapOptions:
    """Which optional line limits to append. All are off by default."""

    loss: bool = False
    current: bool = False
    neutral: bool = False

    @classmethod
    def all(cls) -> "CapOptions":
        return cls(True, True, True)


def supply_cost_constant(net: NetworkModel, c0: float) -> float:
    """Load terms of the supply cost that do not depend on ``V``."""
    total = c0 * float(net.pcc_bus.load.real.sum())
    for dg in net.dg_units:
        total += dg.cost * float(net.bus(dg.bus).load.real.sum())
    return total


def _bus_rows(
    net: NetworkModel, bus: Bus, y: sp.csr_array
) -> list[LinearConstraint]:
    rows = []
    dg = net.dg_at(bus.id)
    for k, ph in enumerate(bus.phases):
        phi_p, phi_q, phi_v = build_phi_pqv(net, bus.id, ph, y)
        tag = f"bus{bus.id}.{phase_label([ph])}"
        pl, ql = bus.load[k].real, bus.load[k].imag
        q_expr = phi_q - phi_v * bus.cap_susceptance[k]
        if not bus.is_pcc:
            if dg is None:
                rows.append(LinearConstraint({0: phi_p}, "eq", -pl, f"{tag}:p_balance"))
                rows.append(LinearConstraint({0: q_expr}, "eq", -ql, f"{tag}:q_balance"))
            else:
                rows += _box_rows(phi_p, dg.p_min[k] - pl, dg.p_max[k] - pl, f"{tag}:dg_p")
                rows += _box_rows(q_expr, dg.q_min[k] - ql, dg.q_max[k] - ql, f"{tag}:dg_q")
        rows.append(LinearConstraint({0: phi_v}, "ge", bus.vmin**2, f"{tag}:vmin"))
        rows.append(LinearConstraint({0: phi_v}, "le", bus.vmax**2, f"{tag}:vmax"))
    return rows


def _box_rows(phi: HermitianMatrix, lo: float, hi: float, tag: str) -> list[LinearConstraint]:
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise AssemblyError(f"{tag}: DG limits must be finite")
    if lo == hi:
        return [LinearConstraint({0: phi}, "eq", lo, tag)]
    return [
        LinearConstraint({0: phi}, "ge", lo, f"{tag}_min"),
        LinearConstraint({0: phi}, "le", hi, f"{tag}_max"),
    ]


def _cap_rows(
    net: NetworkModel, caps: CapOptions, lines: Iterable[int] | None = None
) -> list[LinearConstraint]:
    rows = []
    for li in range(len(net.lines)) if lines is None else lines:
        ln = net.lines[li]
        tag = f"line{ln.from_bus}-{ln.to_bus}"
        if caps.loss and ln.loss_cap is not None:
            rows.append(LinearConstraint({0: build_phi_loss(net, li)}, "le", ln.loss_cap, f"{tag}:loss_cap"))
        if caps.current and ln.current_caps is not None:
            for k, ph in enumerate(ln.phases):
                rows.append(
                    LinearConstraint(
                        {0: build_phi_current(net, li, ph)},
                        "le",
                        ln.current_caps[k] ** 2,
                        f"{tag}.{phase_label([ph])}:current_cap",
                    )
                )
        if caps.neutral and ln.neutral_current_caps is not None:
            for k, cap in enumerate(ln.neutral_current_caps):
                rows.append(
                    LinearConstraint(
                        {0: build_phi_neutral(net, li, k)}, "le", cap**2, f"{tag}.n{k}:neutral_cap"
                    )
                )
    return rows


def loss_cost_matrix(net: NetworkModel) -> HermitianMatrix:
    total = HermitianMatrix.zeros(net.size)
    for li in range(len(net.lines)):
        total = total + build_phi_loss(net, li)
    return total


def supply_cost_matrix(net: NetworkModel, c0: float, y=None) -> HermitianMatrix:
    if y is None:
        y = sp.csr_array(build_bus_admittance(net))
    total = HermitianMatrix.zeros(net.size)
    payers = [(net.pcc_bus, c0)] + [(net.bus(d.bus), d.cost) for d in net.dg_units]
    for bus, c in payers:
        if c == 0.0:
            continue
        for ph in bus.phases:
            total = total + build_phi_pqv(net, bus.id, ph, y)[0] * c
    return total


def assemble_p3(
    net: NetworkModel,
    cost: CostKind | str = CostKind.LOSS,
    c0: float = 1.0,
    caps: CapOptions | bool = False,
) -> SdpProblem:
    """Relaxed OPF over a single Hermitian voltage block.

    Parameters
    ----------
    net : NetworkModel
    cost : {"loss", "supply"}
        ``"loss"`` sums series losses over all lines; ``"supply"`` charges
        ``c0`` for the PCC injection and each DG its own ``cost``.
    c0 : float
        PCC cost in currency per pu (only used for ``"supply"``).
    caps : CapOptions or bool
        Optional line limits; ``True`` enables every cap present in the data.
    """
    cost = CostKind(cost)
    if isinstance(caps, bool):
        caps = CapOptions.all() if caps else CapOptions()
    y = sp.csr_array(build_bus_admittance(net))
    constraints: list[LinearConstraint] = []
    for bus in net.buses:
        constraints += _bus_rows(net, bus, y)
    constraints += _cap_rows(net, caps)

    if cost is CostKind.LOSS:
        c_mat = loss_cost_matrix(net)
        const = 0.0
    else:
        c_mat = supply_cost_matrix(net, c0, y)
        const = supply_cost_constant(net, c0)

    pcc = net.pcc_bus
    idx = net.index.bus_indices(pcc.id)
    v0 = net.pcc_voltage
    fixed = []
    for a in range(len(idx)):
        for b in range(a, len(idx)):
            fixed.append((0, int(idx[a]), int(idx[b]), complex(v0[a] * np.conj(v0[b]))))

    return SdpProblem(
        blocks=[BlockSpec("hpsd", net.size, "V")],
        cost={0: c_mat},
        constraints=constraints,
        fixed_entries=fixed,
        cost_constant=const,
        meta={
            "network": net.name,
            "cost": cost.value,
            "c0": c0,
            "dg_costs": [d.cost for d in net.dg_units],
        },
    )
