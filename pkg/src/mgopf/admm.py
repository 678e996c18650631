"""Distributed relaxed OPF by ADMM over a partitioned network.

Each area repeatedly solves a local SDP over its extended-area voltage
matrix, exchanges the blocks it shares with neighbouring areas through an
in-process message bus, and updates its own multipliers.  With zero
initial multipliers the multipliers of the two ends of every link stay
exact negatives of each other, so no multiplier traffic is needed.

The quadratic penalty ``kappa/2 ||r||^2`` of the augmented Lagrangian is
carried by epigraph variables ``alpha_j`` and ``beta_j`` bounded through
rotated second-order cones, which are the same sets as the Schur-complement
LMIs ``[[alpha, r'], [r, I]] >= 0``.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ipsolver import SolverConfig, SolverResult, solve_sdp
from .netmodel import NetworkModel
from .partition import PartitionPlan, slice_local
from .sdpcore import (
    BlockSpec,
    CapOptions,
    CostKind,
    HermitianMatrix,
    LinearConstraint,
    SdpProblem,
    _bus_rows,
    _cap_rows,
    build_phi_loss,
    build_phi_pqv,
    entry_functionals,
    supply_cost_constant,
)
from .netmodel import build_bus_admittance

import scipy.sparse as sp

__all__ = [
    "AdmmConfig",
    "AdmmError",
    "LinkFailure",
    "LocalState",
    "BlockMessage",
    "TraceRecord",
    "ConvergenceTrace",
    "AdmmResult",
    "LocalModel",
    "build_local_models",
    "assemble_local_subproblem",
    "dual_update",
    "message_bus",
    "run_admm",
    "complete_psd",
    "delta_v",
]


class AdmmError(RuntimeError):
    """A local subproblem could not be solved."""


class LinkFailure(RuntimeError):
    """A message was dropped under the ``fail`` outage policy."""


@dataclass(frozen=True)
class AdmmConfig:
    """ADMM run settings.

    Parameters
    ----------
    kappa : float
        Penalty parameter, strictly positive.
    tol : float
        Stop once every link disagreement is at or below this value (pu).
    max_iter : int
    drop_prob : float
        Per-link, per-iteration probability that a message is lost.
    policy : {"hold-last", "fail"}
        What a receiver does when a message is lost.
    seed : int
        Seed of the outage random generator.
    workers : int
        Threads used to solve the area subproblems of one round.
    solver : SolverConfig
    """

    kappa: float = 100.0
    tol: float = 1e-3
    max_iter: int = 500
    drop_prob: float = 0.0
    policy: str = "hold-last"
    seed: int = 0
    workers: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if self.policy not in ("hold-last", "fail"):
            raise ValueError("policy must be 'hold-last' or 'fail'")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass
class LocalState:
    """Everything area ``area`` keeps between rounds.

    ``gamma[j]`` and ``lam[j]`` are real ``|P_lj| x |P_lj|`` multipliers,
    ``received[j]`` the last block obtained from ``j`` and ``V`` the
    current local voltage matrix.
    """

    area: int
    V: np.ndarray
    gamma: dict[int, np.ndarray]
    lam: dict[int, np.ndarray]
    received: dict[int, np.ndarray]
    objective: float = 0.0
    pen_scale: dict[tuple[int, str], float] = field(default_factory=dict)

    def own_block(self, plan: PartitionPlan, j: int) -> np.ndarray:
        r = plan.shared_local(self.area, j)
        return self.V[np.ix_(r, r)]


@dataclass(frozen=True)
class BlockMessage:
    sender: int
    receiver: int
    iteration: int
    block: np.ndarray


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    edge_l: int
    edge_j: int
    delta_v: float
    area_objective_sum: float


@dataclass
class ConvergenceTrace:
    """Append-only per-iteration, per-link disagreement record."""

    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def max_delta(self, it: int) -> float:
        return max(r.delta_v for r in self.records if r.iter == it)

    def iterations(self) -> list[int]:
        return sorted({r.iter for r in self.records})

    def series(self, l: int, j: int) -> np.ndarray:
        return np.array([r.delta_v for r in self.records if (r.edge_l, r.edge_j) == (l, j)])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "edge_l", "edge_j", "delta_v", "area_objective_sum"])
            for r in self.records:
                w.writerow([r.iter, r.edge_l, r.edge_j, repr(r.delta_v), repr(r.area_objective_sum)])


@dataclass
class AdmmResult:
    """Final local matrices, convergence data and diagnostics.

    ``antisymmetry`` holds, per iteration, the largest absolute entry of
    ``Gamma_lj + Gamma_jl`` and ``Lambda_lj + Lambda_jl`` over all links.
    """

    V: list[np.ndarray]
    trace: ConvergenceTrace
    converged: bool
    iterations: int
    objective: float
    states: list[LocalState]
    antisymmetry: list[float]
    config: AdmmConfig

    def metadata(self, plan: PartitionPlan, cost: str) -> dict:
        cfg = asdict(self.config)
        return {
            "kappa": self.config.kappa,
            "tol": self.config.tol,
            "max_iter": self.config.max_iter,
            "seed": self.config.seed,
            "drop_prob": self.config.drop_prob,
            "policy": self.config.policy,
            "solver": cfg["solver"],
            "cost": cost,
            "partition": plan.summary(),
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective,
        }


def delta_v(a: np.ndarray, b: np.ndarray) -> float:
    """Entrywise l1 distance normalized by the number of entries."""
    return float(np.abs(a - b).sum() / a.size)


# ---------------------------------------------------------------------------
# Local model: constraints and cost restricted to one area
# ---------------------------------------------------------------------------


@dataclass
class LocalModel:
    """Local constraint set and cost matrix of one area."""

    area: int
    size: int
    constraints: list[LinearConstraint]
    cost: HermitianMatrix
    fixed_entries: list[tuple[int, int, int, complex]]
    cost_constant: float


def build_local_models(
    plan: PartitionPlan,
    cost: CostKind | str = CostKind.LOSS,
    c0: float = 1.0,
    caps: CapOptions | bool = False,
) -> list[LocalModel]:
    """Split the global constraints and cost among the areas.

    Bus rows go to the area owning the bus, line caps to the smaller id
    among the areas of the two ends.  Interior lines contribute their full
    loss to the owner and tie lines half to each side; for the supply
    cost each area pays for its own DG and the PCC area for the PCC.
    """
    net = plan.net
    cost = CostKind(cost)
    if isinstance(caps, bool):
        caps = CapOptions.all() if caps else CapOptions()
    y = sp.csr_array(build_bus_admittance(net))
    L = plan.n_areas
    rows: list[list[LinearConstraint]] = [[] for _ in range(L)]
    for bus in net.buses:
        l = plan.owner[bus.id]
        for con in _bus_rows(net, bus, y):
            rows[l].append(LinearConstraint({0: slice_local(plan, con.terms[0], l)}, con.sense, con.bound, con.tag))
    for li, ln in enumerate(net.lines):
        l = min(plan.owner[ln.from_bus], plan.owner[ln.to_bus])
        for con in _cap_rows(net, caps, [li]):
            rows[l].append(LinearConstraint({0: slice_local(plan, con.terms[0], l)}, con.sense, con.bound, con.tag))

    costs = [HermitianMatrix.zeros(net.size) for _ in range(L)]
    consts = [0.0] * L
    if cost is CostKind.LOSS:
        for li, ln in enumerate(net.lines):
            la, lb = plan.owner[ln.from_bus], plan.owner[ln.to_bus]
            phi = build_phi_loss(net, li)
            if la == lb:
                costs[la] = costs[la] + phi
            else:
                costs[la] = costs[la] + phi * 0.5
                costs[lb] = costs[lb] + phi * 0.5
    else:
        payers = [(net.pcc_bus.id, c0, net.pcc_bus)] + [(d.bus, d.cost, net.bus(d.bus)) for d in net.dg_units]
        for bus_id, c, bus in payers:
            l = plan.owner[bus_id]
            consts[l] += c * float(bus.load.real.sum())
            if c == 0.0:
                continue
            for ph in bus.phases:
                costs[l] = costs[l] + build_phi_pqv(net, bus_id, ph, y)[0] * c

    models = []
    for l in range(L):
        fixed = []
        if l == plan.pcc_area:
            gidx = net.index.bus_indices(net.pcc_bus.id)
            loc = plan.to_local(l, gidx)
            v0 = net.pcc_voltage
            for a in range(len(loc)):
                for b in range(a, len(loc)):
                    fixed.append((0, int(loc[a]), int(loc[b]), complex(v0[a] * np.conj(v0[b]))))
        models.append(
            LocalModel(
                area=l,
                size=int(plan.local_index[l].size),
                constraints=rows[l],
                cost=slice_local(plan, costs[l], l),
                fixed_entries=fixed,
                cost_constant=consts[l],
            )
        )
    return models


def _unique_entries(k: int):
    """Entry pairs and weights so that the weighted stack has the Frobenius norm.

    Returns ``(re_pairs, re_w, im_pairs, im_w)``; diagonal entries have
    weight 1 and off-diagonal entries sqrt(2) (each stands for two).
    """
    re_pairs, re_w, im_pairs, im_w = [], [], [], []
    for p in range(k):
        for q in range(p, k):
            re_pairs.append((p, q))
            re_w.append(1.0 if p == q else np.sqrt(2.0))
            if p != q:
                im_pairs.append((p, q))
                im_w.append(np.sqrt(2.0))
    return re_pairs, np.array(re_w), im_pairs, np.array(im_w)


def assemble_local_subproblem(
    plan: PartitionPlan,
    l: int,
    state: LocalState,
    model: LocalModel,
    kappa: float,
    centers: Mapping[int, np.ndarray] | None = None,
    initial_scale: float = 1e-3,
) -> SdpProblem:
    """Local augmented-Lagrangian SDP of area ``l``.

    Block 0 is the local voltage matrix.  For each neighbour ``j`` two
    second-order cone blocks ``(u0, u1, r)`` encode ``||r_Re||^2 <= alpha_j``
    and ``||r_Im||^2 <= beta_j`` with ``alpha = delta (u0 + u1)`` and
    ``u0 - u1 = delta``.  Any ``delta > 0`` describes the same set; it is
    taken from ``state.pen_scale`` (the size of ``r`` in the previous
    round, ``initial_scale`` before the first) so that ``u0``, ``u1`` and
    ``r`` have comparable magnitudes.  This keeps the cone iterates away
    from the boundary rays ``(1, +-1, 0)`` where the interior-point
    scaling loses precision.
    ``centers[j]`` is the consensus point ``(V_j^(l)(i) + V_l^(j)(i)) / 2``;
    by default it is formed from the current own block and the last
    received block.
    """
    n = model.size
    blocks = [BlockSpec("hpsd", n, f"V{l}")]
    cost: dict = {}
    c_mat = model.cost
    constraints = list(model.constraints)
    centers_used = {}
    for j in plan.neighbors(l):
        rows = plan.shared_local(l, j)
        k = rows.size
        if centers is not None and j in centers:
            center = centers[j]
        else:
            if j not in state.received:
                raise LinkFailure(f"area {l} has no block from area {j}")
            center = 0.5 * (state.own_block(plan, j) + state.received[j])
        centers_used[j] = center
        g = state.gamma[j]
        lm = state.lam[j]
        c_g = np.zeros((n, n), dtype=complex)
        c_g[np.ix_(rows, rows)] = 0.5 * (g + g.T) + 0.5j * (lm - lm.T)
        c_mat = c_mat + HermitianMatrix(c_g, assume_hermitian=True)

        re_pairs, re_w, im_pairs, im_w = _unique_entries(k)
        for part, pairs, w in (("re", re_pairs, re_w), ("im", im_pairs, im_w)):
            if not pairs:
                continue
            d = len(pairs) + 2
            delta = state.pen_scale.get((j, part), initial_scale)
            bidx = len(blocks)
            blocks.append(BlockSpec("soc", d, f"{part}{l}-{j}"))
            cvec = np.zeros(d)
            cvec[0] = cvec[1] = kappa * delta / 2.0
            cost[bidx] = cvec
            e01 = np.zeros(d)
            e01[0], e01[1] = 1.0, -1.0
            constraints.append(LinearConstraint({bidx: e01}, "eq", delta, f"pen{l}-{j}:{part}:epi"))
            for t, ((p, q), wt) in enumerate(zip(pairs, w)):
                e_re, e_im = entry_functionals(n, int(rows[p]), int(rows[q]))
                func = e_re if part == "re" else e_im
                target = center[p, q].real if part == "re" else center[p, q].imag
                ev = np.zeros(d)
                ev[2 + t] = 1.0
                constraints.append(
                    LinearConstraint(
                        {0: func * (-wt), bidx: ev},
                        "eq",
                        -wt * target,
                        f"pen{l}-{j}:{part}[{p},{q}]",
                    )
                )
    cost[0] = c_mat
    return SdpProblem(
        blocks=blocks,
        cost=cost,
        constraints=constraints,
        fixed_entries=list(model.fixed_entries),
        cost_constant=model.cost_constant,
        meta={"area": l, "kappa": kappa, "centers": centers_used},
    )


def dual_update(
    state: LocalState,
    plan: PartitionPlan,
    received: Mapping[int, np.ndarray],
    kappa: float,
) -> None:
    """Local multiplier step using own and received shared blocks (in place)."""
    for j, blk in received.items():
        own = state.own_block(plan, j)
        if blk.shape != own.shape or state.gamma[j].shape != own.shape:
            raise ValueError(f"dimension mismatch on link {state.area}-{j}")
        diff = own - blk
        state.gamma[j] = state.gamma[j] + (kappa / 2.0) * diff.real
        state.lam[j] = state.lam[j] + (kappa / 2.0) * diff.imag


def message_bus(
    messages: Sequence[BlockMessage],
    drop_prob: float = 0.0,
    policy: str = "hold-last",
    rng: np.random.Generator | None = None,
    last: Mapping[tuple[int, int], BlockMessage] | None = None,
) -> list[BlockMessage]:
    """Deliver one synchronized round of messages.

    Each message is lost independently with probability ``drop_prob``.
    Under ``hold-last`` the previously delivered message on that link is
    handed over again (or nothing, if none exists yet); under ``fail`` a
    :class:`LinkFailure` is raised.
    """
    if drop_prob == 0.0:
        return list(messages)
    rng = rng or np.random.default_rng(0)
    last = last or {}
    out = []
    for msg in messages:
        if rng.random() < drop_prob:
            if policy == "fail":
                raise LinkFailure(f"message {msg.sender}->{msg.receiver} lost at iteration {msg.iteration}")
            prev = last.get((msg.sender, msg.receiver))
            if prev is not None:
                out.append(prev)
        else:
            out.append(msg)
    return out


_SCALE_FLOOR = 1e-9


def _flat_start(net: NetworkModel) -> np.ndarray:
    v = np.empty(net.size, dtype=complex)
    ref = np.zeros(3, dtype=complex)
    ref[list(net.pcc_bus.phases)] = net.pcc_voltage
    missing = [p for p in range(3) if p not in net.pcc_bus.phases]
    ref[missing] = np.exp(-2j * np.pi / 3 * np.array(missing))
    for b in net.buses:
        v[net.index.bus_indices(b.id)] = ref[list(b.phases)]
    return v


def run_admm(
    net: NetworkModel,
    plan: PartitionPlan,
    cost: CostKind | str = CostKind.LOSS,
    config: AdmmConfig | None = None,
    c0: float = 1.0,
    caps: CapOptions | bool = False,
    on_iteration=None,
) -> AdmmResult:
    """Run synchronized ADMM rounds until consensus or ``max_iter``.

    Each round: every area solves its subproblem, the shared blocks are
    exchanged over :func:`message_bus`, and each area updates its own
    multipliers.  Multipliers start at zero.  The local matrices start
    from the flat voltage profile ``v v^H``.
    """
    config = config or AdmmConfig()
    models = build_local_models(plan, cost, c0, caps)
    v_flat = _flat_start(net)
    v_flat_outer = np.outer(v_flat, v_flat.conj())
    L = plan.n_areas
    states = []
    for l in range(L):
        nb = plan.neighbors(l)
        states.append(
            LocalState(
                area=l,
                V=slice_local(plan, v_flat_outer, l),
                gamma={j: np.zeros((plan.shared[(l, j)].size,) * 2) for j in nb},
                lam={j: np.zeros((plan.shared[(l, j)].size,) * 2) for j in nb},
                received={},
            )
        )
    for st in states:
        for j in plan.neighbors(st.area):
            st.received[j] = states[j].own_block(plan, st.area)

    rng = np.random.default_rng(config.seed)
    trace = ConvergenceTrace()
    antisym: list[float] = []
    last_delivered: dict[tuple[int, int], BlockMessage] = {}
    converged = False
    it = 0
    objective = float("nan")
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None

    def solve_area(l: int) -> tuple[SolverResult, dict]:
        prob = assemble_local_subproblem(plan, l, states[l], models[l], config.kappa)
        return solve_sdp(prob, config.solver), prob.meta["centers"]

    try:
        for it in range(1, config.max_iter + 1):
            results = list(pool.map(solve_area, range(L))) if pool else [solve_area(l) for l in range(L)]
            for l, (res, centers) in enumerate(results):
                if res.status != "optimal":
                    raise AdmmError(f"area {l} subproblem {res.status} at iteration {it}: {res.message}")
                V = res.blocks[0]
                states[l].V = V
                for j, center in centers.items():
                    r = states[l].own_block(plan, j) - center
                    states[l].pen_scale[(j, "re")] = max(float(np.linalg.norm(r.real)), _SCALE_FLOOR)
                    states[l].pen_scale[(j, "im")] = max(float(np.linalg.norm(r.imag)), _SCALE_FLOOR)
                states[l].objective = models[l].cost.trace_with(V) + models[l].cost_constant

            messages = [
                BlockMessage(l, j, it, states[l].own_block(plan, j))
                for l in range(L)
                for j in plan.neighbors(l)
            ]
            delivered = message_bus(messages, config.drop_prob, config.policy, rng, last_delivered)
            inbox: dict[int, dict[int, np.ndarray]] = {l: {} for l in range(L)}
            for msg in delivered:
                inbox[msg.receiver][msg.sender] = msg.block
                last_delivered[(msg.sender, msg.receiver)] = msg
            for l in range(L):
                for j in plan.neighbors(l):
                    if j not in inbox[l]:
                        inbox[l][j] = states[l].received[j]
                states[l].received.update(inbox[l])
                dual_update(states[l], plan, inbox[l], config.kappa)

            objective = float(sum(st.objective for st in states))
            worst = 0.0
            for l, j in plan.macro_edges:
                dv = delta_v(states[l].own_block(plan, j), states[j].own_block(plan, l))
                worst = max(worst, dv)
                trace.append(TraceRecord(it, l, j, dv, objective))
            asym = 0.0
            for l, j in plan.macro_edges:
                asym = max(
                    asym,
                    float(np.max(np.abs(states[l].gamma[j] + states[j].gamma[l]))),
                    float(np.max(np.abs(states[l].lam[j] + states[j].lam[l]))),
                )
            antisym.append(asym)
            if on_iteration is not None:
                on_iteration(it, states)
            if worst <= config.tol:
                converged = True
                break
            if L == 1:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    return AdmmResult(
        V=[st.V for st in states],
        trace=trace,
        converged=converged,
        iterations=it,
        objective=objective,
        states=states,
        antisymmetry=antisym,
        config=config,
    )


def complete_psd(
    plan: PartitionPlan, local: Sequence[np.ndarray], rcond: float = 1e-6, project: bool = False
) -> np.ndarray:
    """Assemble a global PSD matrix from local blocks.

    Entries covered by several areas are averaged; the remaining entries are
    filled along the macro tree so that each new clique is joined through
    its separator with ``X[U-S, K-S] = X[U-S, S] X[S, S]^+ X[S, K-S]``,
    which keeps the result PSD whenever the local blocks agree.  Separator
    eigenvalues below ``rcond`` times the largest are treated as zero so
    that small disagreements are not amplified.  Blocks that disagree (an
    unconverged run) can still leave negative eigenvalues; ``project=True``
    clips them, returning the nearest PSD matrix in Frobenius norm.
    """
    n = plan.net.size
    acc = np.zeros((n, n), dtype=complex)
    cnt = np.zeros((n, n))
    for loc, V in zip(plan.local_index, local):
        acc[np.ix_(loc, loc)] += V
        cnt[np.ix_(loc, loc)] += 1
    avg = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0)
    # breadth-first over the macro tree starting at area 0
    order, seen = [0], {0}
    k = 0
    while k < len(order):
        for j in plan.neighbors(order[k]):
            if j not in seen:
                seen.add(j)
                order.append(j)
        k += 1
    X = np.zeros((n, n), dtype=complex)
    first = plan.local_index[order[0]]
    X[np.ix_(first, first)] = avg[np.ix_(first, first)]
    covered = set(int(i) for i in first)
    for l in order[1:]:
        K = [int(i) for i in plan.local_index[l]]
        S = sorted(covered & set(K))
        new = [i for i in K if i not in covered]
        old = sorted(covered - set(S))
        X[np.ix_(K, K)] = avg[np.ix_(K, K)]
        if old and new:
            xs_pinv = np.linalg.pinv(X[np.ix_(S, S)], rcond=rcond, hermitian=True) if S else np.zeros((0, 0))
            block = X[np.ix_(old, S)] @ xs_pinv @ X[np.ix_(S, new)] if S else np.zeros((len(old), len(new)))
            X[np.ix_(old, new)] = block
            X[np.ix_(new, old)] = block.conj().T
        covered |= set(K)
    X = 0.5 * (X + X.conj().T)
    if project:
        w, u = np.linalg.eigh(X)
        X = (u * np.maximum(w, 0.0)) @ u.conj().T
    return X
