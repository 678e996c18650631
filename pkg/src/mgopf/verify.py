"""Independent checks of operating points and sampled feasible regions.

Everything here works on a voltage vector ``v`` through ``i = Y v`` and
direct complex arithmetic, without touching the SDP machinery, so it can
serve as an oracle for the relaxed solutions.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .netmodel import NetworkModel, build_bus_admittance, phase_label
from .sdpcore import build_phi_loss, build_phi_pqv

__all__ = [
    "ResidualReport",
    "Quantities",
    "RegionSample",
    "check_operating_point",
    "report_quantities",
    "line_flows",
    "pareto_mask",
    "hull_pareto_gap",
    "grid_cell_diameter",
    "sample_line_flow_region",
    "sample_injection_region",
    "angle_bound_deg",
    "FIG_Z12",
    "fig1_scenario",
    "fig2_scenario",
]


# ---------------------------------------------------------------------------
# Operating-point residuals
# ---------------------------------------------------------------------------


@dataclass
class ResidualReport:
    """Per bus-phase residuals and bound violations (all nonnegative).

    ``rows`` lists ``(bus, phase, quantity, value)`` for every checked
    item; ``quantity`` is one of ``p_balance``, ``q_balance``, ``vmin``,
    ``vmax``, ``dg_p``, ``dg_q``, ``current_cap``, ``loss_cap`` or
    ``neutral_cap``.  Line caps use the ``from-to`` pair as ``bus``.
    """

    rows: list[tuple[str, str, str, float]] = field(default_factory=list)

    def values(self, quantity: str | Sequence[str]) -> np.ndarray:
        q = {quantity} if isinstance(quantity, str) else set(quantity)
        return np.array([r[3] for r in self.rows if r[2] in q], dtype=float)

    @property
    def balance(self) -> np.ndarray:
        return self.values(("p_balance", "q_balance"))

    @property
    def max_balance(self) -> float:
        b = self.balance
        return float(b.max()) if b.size else 0.0

    @property
    def mean_balance(self) -> float:
        b = self.balance
        return float(b.mean()) if b.size else 0.0

    @property
    def max_violation(self) -> float:
        v = self.values(("vmin", "vmax", "dg_p", "dg_q", "current_cap", "loss_cap", "neutral_cap"))
        return float(v.max()) if v.size else 0.0

    @property
    def max_residual(self) -> float:
        return max(self.max_balance, self.max_violation)

    def feasible(self, tol: float = 1e-6) -> bool:
        return self.max_residual <= tol

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bus", "phase", "quantity", "value"])
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], repr(float(r[3]))])


def _violation(x: float, lo: float, hi: float) -> float:
    return max(lo - x, x - hi, 0.0)


def line_flows(net: NetworkModel, v: np.ndarray) -> list[tuple[float, float]]:
    """``(P_m->n, P_n->m)`` in pu for every line, pi model included."""
    idx = net.index
    out = []
    for ln in net.lines:
        vm = v[idx.phase_indices(ln.from_bus, ln.phases)]
        vn = v[idx.phase_indices(ln.to_bus, ln.phases)]
        yl = np.linalg.inv(ln.z)
        im = yl @ (vm - vn) + 0.5 * ln.y_shunt @ vm
        jn = yl @ (vn - vm) + 0.5 * ln.y_shunt @ vn
        out.append((float(np.real(np.vdot(im, vm))), float(np.real(np.vdot(jn, vn)))))
    return out


def check_operating_point(
    net: NetworkModel,
    v: np.ndarray,
    caps: bool = False,
) -> ResidualReport:
    """Residuals of the load-flow equations and bounds at voltage vector ``v``.

    Load buses report ``|p_inj + P_L|`` and ``|q_inj + Q_L - b_C |V|^2|``;
    DG buses report how far the recovered ``P_G`` and ``Q_G`` fall outside
    their boxes; every bus reports voltage-band violations.  With
    ``caps=True`` the optional line limits present in the data are checked
    too.  Never raises on infeasibility.
    """
    v = np.asarray(v, dtype=complex)
    if v.shape != (net.size,):
        raise ValueError(f"v must have length {net.size}")
    y = build_bus_admittance(net)
    s = v * np.conj(y @ v)
    idx = net.index
    rep = ResidualReport()
    for bus in net.buses:
        dg = net.dg_at(bus.id)
        for k, ph in enumerate(bus.phases):
            i = idx.index(bus.id, ph)
            name, lab = str(bus.id), phase_label([ph])
            mag = abs(v[i])
            p_inj, q_inj = s[i].real, s[i].imag
            pl, ql = bus.load[k].real, bus.load[k].imag
            q_net = q_inj + ql - bus.cap_susceptance[k] * mag**2
            if not bus.is_pcc:
                if dg is None:
                    rep.rows.append((name, lab, "p_balance", abs(p_inj + pl)))
                    rep.rows.append((name, lab, "q_balance", abs(q_net)))
                else:
                    rep.rows.append((name, lab, "dg_p", _violation(p_inj + pl, dg.p_min[k], dg.p_max[k])))
                    rep.rows.append((name, lab, "dg_q", _violation(q_net, dg.q_min[k], dg.q_max[k])))
            rep.rows.append((name, lab, "vmin", max(bus.vmin - mag, 0.0)))
            rep.rows.append((name, lab, "vmax", max(mag - bus.vmax, 0.0)))
    if caps:
        flows = line_flows(net, v)
        for ln, (pmn, pnm) in zip(net.lines, flows):
            name = f"{ln.from_bus}-{ln.to_bus}"
            if ln.loss_cap is not None:
                rep.rows.append((name, "", "loss_cap", max(pmn + pnm - ln.loss_cap, 0.0)))
            vm = v[idx.phase_indices(ln.from_bus, ln.phases)]
            vn = v[idx.phase_indices(ln.to_bus, ln.phases)]
            cur = np.linalg.solve(ln.z, vm - vn)
            if ln.current_caps is not None:
                for k, ph in enumerate(ln.phases):
                    rep.rows.append(
                        (name, phase_label([ph]), "current_cap", max(abs(cur[k]) - ln.current_caps[k], 0.0))
                    )
            if ln.neutral_current_caps is not None and ln.neutral_t is not None:
                neu = ln.neutral_t @ cur
                for k, cap in enumerate(ln.neutral_current_caps):
                    rep.rows.append((name, f"n{k}", "neutral_cap", max(abs(neu[k]) - cap, 0.0)))
    return rep


# ---------------------------------------------------------------------------
# Reported quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Quantities:
    """Table quantities of an operating point.

    Powers are given in pu and in physical units; ``c2`` is the supply
    cost in the currency of the coefficients passed in.  ``trace_error`` is
    the largest relative mismatch between the trace forms ``Tr(Phi v v^H)``
    of the costs and their direct evaluation.
    """

    p_loss_pu: float
    p0_pu: float
    pg_pu: float
    load_pu: float
    p_loss_kw: float
    p0_mw: float
    pg_mw: float
    c2: float
    trace_error: float

    @property
    def balance_error(self) -> float:
        """``P0 + PG - P_L - P_loss`` in pu."""
        return self.p0_pu + self.pg_pu - self.load_pu - self.p_loss_pu

    def as_dict(self) -> dict:
        return {
            "p_loss_kw": self.p_loss_kw,
            "p0_mw": self.p0_mw,
            "pg_mw": self.pg_mw,
            "c2": self.c2,
            "p_loss_pu": self.p_loss_pu,
            "p0_pu": self.p0_pu,
            "pg_pu": self.pg_pu,
            "load_pu": self.load_pu,
            "trace_error": self.trace_error,
        }


def report_quantities(
    net: NetworkModel,
    v: np.ndarray,
    c0: float = 0.0,
    dg_costs: float | Sequence[float] | None = None,
) -> Quantities:
    """Losses, PCC injection, DG output and supply cost at ``v``.

    ``c0`` and ``dg_costs`` are in currency per pu of active power, like
    the costs stored with the network (which ``dg_costs`` defaults to).
    """
    v = np.asarray(v, dtype=complex)
    y = build_bus_admittance(net)
    s = v * np.conj(y @ v)
    idx = net.index
    flows = line_flows(net, v)
    p_loss = float(sum(a + b for a, b in flows))
    pcc = net.pcc_bus
    p0 = float(s[idx.bus_indices(pcc.id)].real.sum())
    if dg_costs is None:
        costs = [d.cost for d in net.dg_units]
    elif np.isscalar(dg_costs):
        costs = [float(dg_costs)] * len(net.dg_units)
    else:
        costs = [float(c) for c in dg_costs]
    pg_units = [
        float(s[idx.bus_indices(d.bus)].real.sum() + net.bus(d.bus).load.real.sum()) for d in net.dg_units
    ]
    pg = float(sum(pg_units))
    load = float(sum(b.load.real.sum() for b in net.buses if not b.is_pcc))
    base = net.base
    p_mw = base.s_base_mw
    c2 = c0 * (p0 + float(pcc.load.real.sum())) + sum(c * g for c, g in zip(costs, pg_units))

    # trace forms against the direct evaluations above
    V = np.outer(v, v.conj())
    series = 0.0
    trace_loss = 0.0
    for li, ln in enumerate(net.lines):
        d = v[idx.phase_indices(ln.from_bus, ln.phases)] - v[idx.phase_indices(ln.to_bus, ln.phases)]
        series += float(np.real(np.vdot(np.linalg.solve(ln.z, d), d)))
        trace_loss += build_phi_loss(net, li).trace_with(V)
    trace_p = 0.0
    for ph in pcc.phases:
        trace_p += build_phi_pqv(net, pcc.id, ph)[0].trace_with(V)
    errs = [abs(trace_loss - series) / max(abs(series), 1e-12), abs(trace_p - p0) / max(abs(p0), 1e-12)]
    return Quantities(
        p_loss_pu=p_loss,
        p0_pu=p0,
        pg_pu=pg,
        load_pu=load,
        p_loss_kw=p_loss * base.s_base_kw,
        p0_mw=p0 * p_mw,
        pg_mw=pg * p_mw,
        c2=float(c2),
        trace_error=float(max(errs)),
    )


# ---------------------------------------------------------------------------
# Pareto geometry
# ---------------------------------------------------------------------------


def pareto_mask(points: np.ndarray) -> np.ndarray:
    """Flags of componentwise-minimal points.

    A point is flagged unless another point is no larger in every
    coordinate and strictly smaller in at least one.  Duplicates do not
    dominate each other, so the result does not depend on the order.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    order = np.lexsort(pts.T[::-1])
    mask = np.zeros(n, dtype=bool)
    # a lexicographically later point cannot dominate an earlier one, so
    # each point only needs checking against the front found so far
    front = np.empty_like(pts)
    size = 0
    for i in order:
        p = pts[i]
        f = front[:size]
        if size and np.any(np.all(f <= p, axis=1) & np.any(f < p, axis=1)):
            continue
        mask[i] = True
        front[size] = p
        size += 1
    return mask


def hull_pareto_gap(points: np.ndarray, mask: np.ndarray | None = None) -> float:
    """How far the convex hull improves on the sampled Pareto points.

    For every flagged point ``p`` the LP
    ``max t  s.t.  sum_k w_k x_k + t 1 <= p,  w >= 0,  sum w = 1`` over the
    hull vertices ``x_k`` measures by how much a convex combination of
    samples dominates ``p``.  The largest such ``t`` is returned; zero
    means the sampled Pareto front is also the Pareto front of the hull.
    """
    pts = np.asarray(points, dtype=float)
    if mask is None:
        mask = pareto_mask(pts)
    try:
        verts = pts[ConvexHull(pts).vertices]
    except (QhullError, ValueError):
        verts = np.unique(pts, axis=0)
    k, d = verts.shape
    c = np.zeros(k + 1)
    c[-1] = -1.0
    a_ub = np.hstack([verts.T, np.ones((d, 1))])
    a_eq = np.hstack([np.ones((1, k)), np.zeros((1, 1))])
    bounds = [(0, None)] * k + [(None, None)]
    worst = 0.0
    for p in pts[mask]:
        res = linprog(c, A_ub=a_ub, b_ub=p, A_eq=a_eq, b_eq=[1.0], bounds=bounds, method="highs")
        if res.status == 0:
            worst = max(worst, -res.fun)
    return float(worst)


def grid_cell_diameter(points: np.ndarray, shape: Sequence[int]) -> float:
    """Largest image of one grid cell: norm of the per-axis worst steps."""
    grid = np.asarray(points).reshape(*shape, -1)
    steps = []
    for ax in range(len(shape)):
        if shape[ax] > 1:
            steps.append(float(np.max(np.linalg.norm(np.diff(grid, axis=ax), axis=-1))))
    return float(np.sqrt(np.sum(np.square(steps)))) if steps else 0.0


@dataclass
class RegionSample:
    """Sampled angles, resulting powers and Pareto flags.

    ``angles`` has one column per name in ``angle_names`` (degrees),
    ``points`` one column per name in ``point_names`` and ``shape`` is the
    grid shape before flattening (row-major).
    """

    angle_names: tuple[str, ...]
    point_names: tuple[str, ...]
    angles: np.ndarray
    points: np.ndarray
    shape: tuple[int, ...]
    pareto: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def cell_diameter(self) -> float:
        return grid_cell_diameter(self.points, self.shape)

    def hull_gap(self) -> float:
        return hull_pareto_gap(self.points, self.pareto)

    def slice(self, column: int, value: float, half_width: float) -> "RegionSample":
        """Samples with ``points[:, column]`` within ``half_width`` of ``value``.

        The sliced coordinate is dropped and Pareto flags are recomputed on
        the remaining ones.
        """
        keep = np.abs(self.points[:, column] - value) <= half_width
        if not np.any(keep):
            raise ValueError(f"no samples with {self.point_names[column]} near {value}")
        cols = [c for c in range(self.points.shape[1]) if c != column]
        pts = self.points[keep][:, cols]
        return RegionSample(
            self.angle_names,
            tuple(self.point_names[c] for c in cols),
            self.angles[keep],
            pts,
            (int(keep.sum()),),
            pareto_mask(pts),
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.angle_names) + list(self.point_names) + ["pareto"])
            for a, p, f in zip(self.angles, self.points, self.pareto):
                w.writerow([repr(float(x)) for x in a] + [repr(float(x)) for x in p] + [int(f)])


def _grid(ranges: Sequence[np.ndarray]) -> np.ndarray:
    for r in ranges:
        if np.size(r) == 0:
            raise ValueError("angle grids must be nonempty")
    mesh = np.meshgrid(*[np.asarray(r, dtype=float) for r in ranges], indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _chunks(n: int, workers: int):
    size = max(1, -(-n // max(workers, 1)))
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, angles: np.ndarray, workers: int) -> np.ndarray:
    parts = _chunks(angles.shape[0], workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda sl: fn(angles[sl]), parts))
    else:
        out = [fn(angles[sl]) for sl in parts]
    return np.concatenate(out, axis=0)


def _phasors(mag: float, a_deg: np.ndarray, ab_deg: np.ndarray) -> np.ndarray:
    """Two-phase voltages with phase-a angle ``a`` and ``theta^ab = a - b``."""
    a = np.deg2rad(a_deg)
    b = a - np.deg2rad(ab_deg)
    return mag * np.stack([np.exp(1j * a), np.exp(1j * b)], axis=-1)


def sample_line_flow_region(
    z: np.ndarray,
    theta12: Sequence[float],
    theta1_ab: Sequence[float],
    theta2_ab: Sequence[float],
    v_mag: float = 1.0,
    workers: int = 1,
) -> RegionSample:
    """Flows ``(P_1->2, P_2->1)`` of a two-phase line over an angle grid.

    Node 1 phase a is the angle reference; ``theta12`` is the phase-a angle
    difference across the line and ``theta*_ab`` the phase a-b difference
    at each end (all in degrees).
    """
    z = np.asarray(z, dtype=complex)
    if z.shape != (2, 2):
        raise ValueError("Z must be 2x2")
    if abs(np.linalg.det(z)) < 1e-14 * max(1.0, float(np.max(np.abs(z))) ** 2):
        raise np.linalg.LinAlgError("singular line impedance")
    y = np.linalg.inv(z)
    angles = _grid([theta12, theta1_ab, theta2_ab])
    shape = tuple(int(np.size(r)) for r in (theta12, theta1_ab, theta2_ab))

    def flows(a):
        v1 = _phasors(v_mag, np.zeros(a.shape[0]), a[:, 1])
        v2 = _phasors(v_mag, -a[:, 0], a[:, 2])
        i12 = (v1 - v2) @ y.T
        p12 = np.real(np.sum(v1 * np.conj(i12), axis=1))
        p21 = np.real(np.sum(v2 * np.conj(-i12), axis=1))
        return np.stack([p12, p21], axis=1)

    pts = _map_chunks(flows, angles, workers)
    return RegionSample(
        ("theta12_a", "theta1_ab", "theta2_ab"), ("P12", "P21"), angles, pts, shape, pareto_mask(pts)
    )


def sample_injection_region(
    z12: np.ndarray,
    z23: np.ndarray,
    theta12: Sequence[float],
    theta23: Sequence[float],
    theta1_ab: Sequence[float],
    theta2_ab: Sequence[float],
    theta3_ab: Sequence[float],
    v_mag: float = 1.0,
    workers: int = 1,
) -> RegionSample:
    """Injections ``(P_1, P_2, P_3)`` of a two-phase chain 1-2-3.

    ``P_n`` sums the injections of both phases at node ``n``.
    """
    y12 = np.linalg.inv(np.asarray(z12, dtype=complex))
    y23 = np.linalg.inv(np.asarray(z23, dtype=complex))
    ranges = [theta12, theta23, theta1_ab, theta2_ab, theta3_ab]
    angles = _grid(ranges)
    shape = tuple(int(np.size(r)) for r in ranges)

    def inject(a):
        zeros = np.zeros(a.shape[0])
        v1 = _phasors(v_mag, zeros, a[:, 2])
        v2 = _phasors(v_mag, -a[:, 0], a[:, 3])
        v3 = _phasors(v_mag, -a[:, 0] - a[:, 1], a[:, 4])
        i12 = (v1 - v2) @ y12.T
        i23 = (v2 - v3) @ y23.T
        p1 = np.real(np.sum(v1 * np.conj(i12), axis=1))
        p2 = np.real(np.sum(v2 * np.conj(i23 - i12), axis=1))
        p3 = np.real(np.sum(v3 * np.conj(-i23), axis=1))
        return np.stack([p1, p2, p3], axis=1)

    pts = _map_chunks(inject, angles, workers)
    return RegionSample(
        ("theta12_a", "theta23_a", "theta1_ab", "theta2_ab", "theta3_ab"),
        ("P1", "P2", "P3"),
        angles,
        pts,
        shape,
        pareto_mask(pts),
    )


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

FIG_Z12 = np.array(
    [[0.0753 + 0.1181j, 0.0156 + 0.0502j], [0.0156 + 0.0502j, 0.0744 + 0.1211j]]
)


def angle_bound_deg(z: np.ndarray) -> float:
    """``atan(|Re / Im|)`` of the first diagonal entry of ``Z^-1`` in degrees."""
    y11 = np.linalg.inv(np.asarray(z, dtype=complex))[0, 0]
    return float(np.degrees(np.arctan(abs(y11.real / y11.imag))))


def fig1_scenario(n_theta: int = 73, n_ab: int = 5, workers: int = 1) -> RegionSample:
    """Two-node flow region with the line-line angles in ``[110, 130]`` degrees."""
    return sample_line_flow_region(
        FIG_Z12,
        np.linspace(-180.0, 180.0, n_theta),
        np.linspace(110.0, 130.0, n_ab),
        np.linspace(110.0, 130.0, n_ab),
        workers=workers,
    )


def fig2_scenario(n_theta: int = 13, n_ab: int = 5, workers: int = 1) -> RegionSample:
    """Three-node injection region with line angles inside the bound."""
    bound = angle_bound_deg(FIG_Z12)
    th = np.linspace(-bound, bound, n_theta)
    ab = np.linspace(110.0, 130.0, n_ab)
    return sample_injection_region(FIG_Z12, FIG_Z12, th, th, ab, ab, ab, workers=workers)
