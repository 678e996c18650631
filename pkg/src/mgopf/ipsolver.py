"""Dense primal-dual interior-point solver for small conic problems.

The solver handles products of nonnegative orthants, second-order cones and
real PSD cones.  Complex Hermitian blocks are mapped to real symmetric
blocks of twice the size through :class:`RealEmbedding`.

Algorithm
---------
Homogeneous self-dual embedding of

    minimize    c'x              maximize   b'y
    subject to  A x = b          subject to A'y + s = c
                x in K                      s in K

with Nesterov-Todd scaling and a Mehrotra predictor-corrector, in the
style of CVXOPT's ``conelp``.  The Schur complement ``A H A'`` is formed
densely and factored by Cholesky.  For PSD blocks only the entries on the
aggregate sparsity pattern of ``A`` are evaluated, which keeps the cost of
forming the Schur matrix proportional to the constraint supports.

Variables are stored as one flat vector: orthant entries, then every SOC,
then every PSD block as a full row-major ``n*n`` vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .sdpcore import BlockSpec, HermitianMatrix, LinearConstraint, SdpProblem

__all__ = [
    "RealEmbedding",
    "SolverConfig",
    "SolverResult",
    "Rank1Extraction",
    "solve_sdp",
    "extract_rank1",
    "write_iteration_log",
]


# ---------------------------------------------------------------------------
# Complex to real embedding
# ---------------------------------------------------------------------------


class RealEmbedding:
    """``X -> [[Re X, -Im X], [Im X, Re X]]`` for ``n x n`` Hermitian ``X``.

    ``Tr(A X) = 0.5 * Tr(embed(A) embed(X))`` for Hermitian ``A`` and ``X``,
    and ``X`` is PSD exactly when its embedding is.
    """

    trace_scale = 0.5

    def __init__(self, n: int):
        self.n = n

    def embed(self, x: np.ndarray) -> np.ndarray:
        xr, xi = np.real(x), np.imag(x)
        return np.block([[xr, -xi], [xi, xr]])

    def embed_sparse(self, m: sp.sparray) -> sp.coo_array:
        m = sp.coo_array(m)
        n = self.n
        r, c, re, im = m.row, m.col, m.data.real, m.data.imag
        rows = np.concatenate([r, r + n, r, r + n])
        cols = np.concatenate([c, c + n, c + n, c])
        data = np.concatenate([re, re, -im, im])
        keep = data != 0
        return sp.coo_array((data[keep], (rows[keep], cols[keep])), shape=(2 * n, 2 * n))

    def project(self, xhat: np.ndarray) -> np.ndarray:
        """Nearest structured matrix, returned in complex form."""
        n = self.n
        xr = 0.5 * (xhat[:n, :n] + xhat[n:, n:])
        xi = 0.5 * (xhat[n:, :n] - xhat[:n, n:])
        x = xr + 1j * xi
        return 0.5 * (x + x.conj().T)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    """Interior-point settings.

    Parameters
    ----------
    gap_tol : float
        Relative duality gap tolerance.
    feas_tol : float
        Relative primal and dual residual tolerance.
    abs_gap_tol : float
        Absolute gap accepted in place of the relative one.
    max_iter : int
    init_scale : float
        Multiplier of the identity starting point.
    step_fraction : float
        Fraction of the maximal step to the cone boundary.
    equilibrate : bool
        Scale constraint rows to unit norm before solving.
    facial_reduction : bool
        When the fixed entries of a Hermitian block pin a whole principal
        submatrix to a rank-one value ``w w^H``, no feasible point is
        positive definite.  The block is then rewritten as
        ``V = T W T^H`` with ``T`` mapping one coordinate onto ``w``, which
        restores strict feasibility.  Results are reported in the original
        coordinates.
    """

    gap_tol: float = 1e-8
    feas_tol: float = 1e-8
    abs_gap_tol: float = 1e-9
    max_iter: int = 100
    init_scale: float = 1.0
    step_fraction: float = 0.99
    equilibrate: bool = True
    facial_reduction: bool = True

    def __post_init__(self):
        if min(self.gap_tol, self.feas_tol, self.abs_gap_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


@dataclass
class SolverResult:
    """Outcome of :func:`solve_sdp`.

    ``blocks`` holds complex Hermitian matrices for ``hpsd`` blocks and real
    vectors otherwise.  ``duals`` follows ``problem.all_constraints()``.
    ``objective`` includes ``problem.cost_constant``.
    """

    status: str
    blocks: list[np.ndarray]
    duals: np.ndarray
    objective: float
    primal_objective: float
    dual_objective: float
    iterations: int
    log: list[dict] = field(default_factory=list)
    slack_blocks: list[np.ndarray] = field(default_factory=list)
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


LOG_FIELDS = ("iter", "pobj", "dobj", "gap", "pres", "dres", "tau", "kappa", "mu", "step")


def write_iteration_log(result: SolverResult, path: str | Path) -> None:
    """CSV with one row per iteration."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in result.log:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})


# ---------------------------------------------------------------------------
# Cone algebra
# ---------------------------------------------------------------------------


class _Cones:
    def __init__(self, l: int, q: Sequence[int], s: Sequence[int]):
        self.l = int(l)
        self.q = [int(v) for v in q]
        self.s = [int(v) for v in s]
        off = self.l
        self.q_off = []
        for d in self.q:
            self.q_off.append(off)
            off += d
        self.s_off = []
        for n in self.s:
            self.s_off.append(off)
            off += n * n
        self.size = off
        self.degree = self.l + len(self.q) + sum(self.s)

    def q_slices(self):
        return [slice(o, o + d) for o, d in zip(self.q_off, self.q)]

    def s_slices(self):
        return [(slice(o, o + n * n), n) for o, n in zip(self.s_off, self.s)]

    def identity(self) -> np.ndarray:
        e = np.zeros(self.size)
        e[: self.l] = 1.0
        for sl in self.q_slices():
            e[sl.start] = 1.0
        for sl, n in self.s_slices():
            e[sl] = np.eye(n).ravel()
        return e

    def inner(self, u, v) -> float:
        return float(np.dot(u, v))

    def jprod(self, u, v) -> np.ndarray:
        out = np.empty(self.size)
        out[: self.l] = u[: self.l] * v[: self.l]
        for sl in self.q_slices():
            a, b = u[sl], v[sl]
            out[sl.start] = np.dot(a, b)
            out[sl.start + 1 : sl.stop] = a[0] * b[1:] + b[0] * a[1:]
        for sl, n in self.s_slices():
            a, b = u[sl].reshape(n, n), v[sl].reshape(n, n)
            ab = a @ b
            out[sl] = (0.5 * (ab + ab.T)).ravel()
        return out

    def jdiv(self, lam: "_Lambda", r) -> np.ndarray:
        """Solve ``lam o u = r`` for ``u``."""
        out = np.empty(self.size)
        out[: self.l] = r[: self.l] / lam.l
        for sl, lq in zip(self.q_slices(), lam.q):
            rr = r[sl]
            den = _jdet(lq)
            u0 = (lq[0] * rr[0] - np.dot(lq[1:], rr[1:])) / den
            out[sl.start] = u0
            out[sl.start + 1 : sl.stop] = (rr[1:] - u0 * lq[1:]) / lq[0]
        for (sl, n), ls in zip(self.s_slices(), lam.s):
            rr = r[sl].reshape(n, n)
            out[sl] = (2.0 * rr / (ls[:, None] + ls[None, :])).ravel()
        return out

    def max_step(self, lam: "_Lambda", d) -> float:
        """Largest ``a`` with ``lam + a d`` in the cone (inf if unbounded)."""
        amax = math.inf
        if self.l:
            dl = d[: self.l]
            neg = dl < 0
            if np.any(neg):
                amax = min(amax, float(np.min(-lam.l[neg] / dl[neg])))
        for sl, lq in zip(self.q_slices(), lam.q):
            amax = min(amax, _soc_step(lq, d[sl]))
        for (sl, n), ls in zip(self.s_slices(), lam.s):
            dd = d[sl].reshape(n, n)
            isq = 1.0 / np.sqrt(ls)
            m = isq[:, None] * dd * isq[None, :]
            lmin = float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
            if lmin < 0:
                amax = min(amax, -1.0 / lmin)
        return amax

    def in_interior(self, x) -> bool:
        if self.l and np.any(x[: self.l] <= 0):
            return False
        for sl in self.q_slices():
            v = x[sl]
            if v[0] <= np.linalg.norm(v[1:]):
                return False
        for sl, n in self.s_slices():
            try:
                np.linalg.cholesky(x[sl].reshape(n, n))
            except np.linalg.LinAlgError:
                return False
        return True


def _soc_step(lam: np.ndarray, d: np.ndarray) -> float:
    a = d[0] ** 2 - np.dot(d[1:], d[1:])
    b = 2.0 * (lam[0] * d[0] - np.dot(lam[1:], d[1:]))
    c = _jdet(lam)
    cand = []
    if abs(a) <= 1e-14 * max(1.0, abs(b), abs(c)):
        if b < 0:
            cand.append(-c / b)
    else:
        disc = b * b - 4 * a * c
        if disc >= 0:
            sq = math.sqrt(disc)
            # numerically stable roots
            qv = -0.5 * (b + math.copysign(sq, b))
            roots = [qv / a] + ([c / qv] if qv != 0 else [])
            cand += [r for r in roots if r > 0]
    if d[0] < 0:
        cand.append(-lam[0] / d[0])
    return min(cand) if cand else math.inf


@dataclass
class _Lambda:
    l: np.ndarray
    q: list[np.ndarray]
    s: list[np.ndarray]

    def vector(self, cones: _Cones) -> np.ndarray:
        out = np.zeros(cones.size)
        out[: cones.l] = self.l
        for sl, lq in zip(cones.q_slices(), self.q):
            out[sl] = lq
        for (sl, n), ls in zip(cones.s_slices(), self.s):
            out[sl] = np.diag(ls).ravel()
        return out


def _jdet(u) -> float:
    """``u0^2 - |u1|^2`` in factored form to avoid cancellation."""
    nrm = float(np.linalg.norm(u[1:]))
    return (u[0] - nrm) * (u[0] + nrm)


def _jnorm(u):
    return math.sqrt(max(_jdet(u), 1e-300))


class _Scaling:
    """Nesterov-Todd scaling ``W`` with ``W s = W^-T x = lambda``."""

    def __init__(self, cones: _Cones, x: np.ndarray, s: np.ndarray):
        self.cones = cones
        xl, sl_ = x[: cones.l], s[: cones.l]
        self.d = np.sqrt(xl / sl_)
        lam_l = np.sqrt(xl * sl_)
        self.q_w = []
        self.q_winv = []
        lam_q = []
        for sl in cones.q_slices():
            xq, sq = x[sl], s[sl]
            nx, ns = _jnorm(xq), _jnorm(sq)
            xb, sb = xq / nx, sq / ns
            gamma = math.sqrt(max((1.0 + np.dot(xb, sb)) / 2.0, 1e-300))
            jsb = sb.copy()
            jsb[1:] *= -1
            wb = (xb + jsb) / (2.0 * gamma)
            v = wb.copy()
            v[0] += 1.0
            v /= math.sqrt(2.0 * (wb[0] + 1.0))
            jm = np.eye(len(v))
            jm[1:, 1:] *= -1
            beta = math.sqrt(nx / ns)
            w = beta * (2.0 * np.outer(v, v) - jm)
            jv = jm @ v
            winv = (2.0 * np.outer(jv, jv) - jm) / beta
            self.q_w.append(w)
            self.q_winv.append(winv)
            lam_q.append(w @ sq)
        self.r = []
        self.rinv = []
        self.g = []
        lam_s = []
        for sl, n in cones.s_slices():
            xs = x[sl].reshape(n, n)
            ss = s[sl].reshape(n, n)
            lx = np.linalg.cholesky(0.5 * (xs + xs.T))
            lz = np.linalg.cholesky(0.5 * (ss + ss.T))
            u, sv, vt = np.linalg.svd(lz.T @ lx)
            r = lx @ vt.T / np.sqrt(sv)[None, :]
            rinv = (u.T / np.sqrt(sv)[:, None]) @ lz.T
            self.r.append(r)
            self.rinv.append(rinv)
            self.g.append(r @ r.T)
            lam_s.append(sv)
        self.lam = _Lambda(lam_l, lam_q, lam_s)

    def _map(self, u, lp, q_mats, psd_fn):
        c = self.cones
        out = np.empty_like(u)
        out[: c.l] = lp(u[: c.l])
        for sl, m in zip(c.q_slices(), q_mats):
            out[sl] = m @ u[sl]
        for k, (sl, n) in enumerate(c.s_slices()):
            um = u[sl].reshape(n, n)
            res = psd_fn(k, um)
            out[sl] = (0.5 * (res + res.T)).ravel()
        return out

    def W(self, u):
        return self._map(u, lambda a: self.d * a, self.q_w, lambda k, m: self.r[k].T @ m @ self.r[k])

    def WT(self, u):
        return self._map(u, lambda a: self.d * a, self.q_w, lambda k, m: self.r[k] @ m @ self.r[k].T)

    def WinvT(self, u):
        return self._map(
            u, lambda a: a / self.d, self.q_winv, lambda k, m: self.rinv[k] @ m @ self.rinv[k].T
        )

    def H(self, u):
        return self._map(
            u,
            lambda a: self.d * self.d * a,
            [w @ w for w in self.q_w],
            lambda k, m: self.g[k] @ m @ self.g[k],
        )


# ---------------------------------------------------------------------------
# Standard form
# ---------------------------------------------------------------------------


@dataclass
class _StandardForm:
    A: sp.csr_array
    b: np.ndarray
    c: np.ndarray
    cones: _Cones
    row_scale: np.ndarray
    b_scale: float
    c_scale: float
    # maps from problem blocks to variable slices
    block_slices: list
    embeddings: list
    psd_patterns: list


def _to_standard_form(problem: SdpProblem, equilibrate: bool) -> _StandardForm:
    constraints = problem.all_constraints()
    m = len(constraints)
    n_slack = sum(1 for c in constraints if c.sense != "eq")
    nonneg = [k for k, b in enumerate(problem.blocks) if b.kind == "nonneg"]
    socs = [k for k, b in enumerate(problem.blocks) if b.kind == "soc"]
    psds = [k for k, b in enumerate(problem.blocks) if b.kind == "hpsd"]
    l_total = n_slack + sum(problem.blocks[k].size for k in nonneg)
    cones = _Cones(
        l_total,
        [problem.blocks[k].size for k in socs],
        [2 * problem.blocks[k].size for k in psds],
    )
    block_slices: list = [None] * len(problem.blocks)
    embeddings: list = [None] * len(problem.blocks)
    off = n_slack
    for k in nonneg:
        block_slices[k] = slice(off, off + problem.blocks[k].size)
        off += problem.blocks[k].size
    for k, sl in zip(socs, cones.q_slices()):
        block_slices[k] = sl
    for k, (sl, n2) in zip(psds, cones.s_slices()):
        block_slices[k] = sl
        embeddings[k] = RealEmbedding(n2 // 2)

    def coef_entries(k, coef):
        """(column indices, values) of a coefficient in the flat vector."""
        spec = problem.blocks[k]
        sl = block_slices[k]
        if spec.kind == "hpsd":
            n2 = 2 * spec.size
            e = embeddings[k].embed_sparse(coef.sparse)
            return sl.start + e.row * n2 + e.col, RealEmbedding.trace_scale * e.data
        v = np.asarray(coef, dtype=float)
        nz = np.nonzero(v)[0]
        return sl.start + nz, v[nz]

    rows, cols, vals = [], [], []
    b = np.empty(m)
    slack_k = 0
    for i, con in enumerate(constraints):
        for k, coef in con.terms.items():
            ci, cv = coef_entries(k, coef)
            rows.append(np.full(ci.size, i))
            cols.append(ci)
            vals.append(cv)
        if con.sense != "eq":
            rows.append(np.array([i]))
            cols.append(np.array([slack_k]))
            vals.append(np.array([1.0 if con.sense == "le" else -1.0]))
            slack_k += 1
        b[i] = con.bound
    A = sp.coo_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, cones.size),
    ).tocsr()
    A.sum_duplicates()
    c = np.zeros(cones.size)
    for k, coef in problem.cost.items():
        ci, cv = coef_entries(k, coef)
        np.add.at(c, ci, cv)

    if equilibrate:
        norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
        norms[norms == 0] = 1.0
        scale = 1.0 / norms
    else:
        scale = np.ones(m)
    A = sp.csr_array(sp.diags_array(scale) @ A)
    b = b * scale
    if equilibrate:
        b_scale = max(1.0, float(np.linalg.norm(b, np.inf)))
        c_scale = max(1.0, float(np.linalg.norm(c, np.inf)))
    else:
        b_scale = c_scale = 1.0
    b = b / b_scale
    c = c / c_scale

    patterns = []
    for sl, n in cones.s_slices():
        blk = A[:, sl.start : sl.stop].tocsr()
        blk.eliminate_zeros()
        flat = np.unique(blk.indices)
        p_e, q_e = flat // n, flat % n
        a_e = blk[:, flat].tocsr()
        active = np.nonzero(np.diff(blk.indptr))[0]
        row_data = []
        for i in active:
            ind = blk.indices[blk.indptr[i] : blk.indptr[i + 1]]
            dat = blk.data[blk.indptr[i] : blk.indptr[i + 1]]
            pr, qr = ind // n, ind % n
            sup = np.unique(np.concatenate([pr, qr]))
            loc = np.searchsorted(sup, pr), np.searchsorted(sup, qr)
            a_loc = np.zeros((sup.size, sup.size))
            np.add.at(a_loc, loc, dat)
            row_data.append((int(i), sup, a_loc))
        patterns.append((p_e, q_e, a_e, row_data))

    return _StandardForm(
        A, b, c, cones, scale, b_scale, c_scale, block_slices, embeddings, patterns
    )


def _schur(sf: _StandardForm, scal: _Scaling) -> np.ndarray:
    A, cones = sf.A, sf.cones
    m = A.shape[0]
    M = np.zeros((m, m))
    if cones.l:
        al = A[:, : cones.l]
        M += (al @ sp.diags_array(scal.d * scal.d) @ al.T).toarray()
    for sl, w in zip(cones.q_slices(), scal.q_w):
        aq = A[:, sl].toarray()
        M += aq @ (w @ w) @ aq.T
    for (p_e, q_e, a_e, row_data), g in zip(sf.psd_patterns, scal.g):
        if not row_data:
            continue
        gp = g[p_e, :]
        gq = g[:, q_e]
        vals = np.empty((p_e.size, len(row_data)))
        for j, (_, sup, a_loc) in enumerate(row_data):
            vals[:, j] = np.einsum("es,se->e", gp[:, sup], a_loc @ gq[sup, :])
        cols = a_e @ vals
        idx = np.array([r for r, _, _ in row_data])
        M[:, idx] += cols
    return 0.5 * (M + M.T)


def _factor(M: np.ndarray):
    diag = np.diag(M)
    reg = 0.0
    for _ in range(6):
        try:
            return sla.cho_factor(M + reg * np.eye(M.shape[0]), lower=True, check_finite=False), reg
        except np.linalg.LinAlgError:
            reg = max(reg * 100.0, 1e-14 * max(1.0, float(np.max(np.abs(diag)))))
    return None, reg


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------


# ---------------------------------------------------------------------------
# Facial reduction of rank-one pinned blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _BlockReduction:
    block: int
    pinned: np.ndarray
    T: np.ndarray


def _find_rank1_pins(problem: SdpProblem, block: int):
    pins = {(r, c): complex(v) for b, r, c, v in problem.fixed_entries if b == block}
    idx = sorted({r for r, _ in pins} | {c for _, c in pins})
    if len(idx) < 2 or any((a, b) not in pins for i, a in enumerate(idx) for b in idx[i:]):
        return None
    k = len(idx)
    F = np.zeros((k, k), dtype=complex)
    for i, a in enumerate(idx):
        for j in range(i, k):
            F[i, j] = pins[(a, idx[j])]
            F[j, i] = np.conj(F[i, j])
    w, u = np.linalg.eigh(F)
    if w[-1] <= 0 or np.any(np.abs(w[:-1]) > 1e-12 * w[-1]):
        return None
    return np.array(idx), u[:, -1] * np.sqrt(w[-1])


def _facial_reduce(problem: SdpProblem):
    """Problem over reduced blocks plus the data needed to lift back."""
    reductions = []
    for k, spec in enumerate(problem.blocks):
        if spec.kind != "hpsd":
            continue
        found = _find_rank1_pins(problem, k)
        if found is None:
            continue
        idx, w = found
        n = spec.size
        rest = np.setdiff1d(np.arange(n), idx)
        T = np.zeros((n, rest.size + 1), dtype=complex)
        T[idx, 0] = w
        T[rest, np.arange(1, rest.size + 1)] = 1.0
        reductions.append(_BlockReduction(k, idx, T))
    if not reductions:
        return problem, []
    by_block = {r.block: r for r in reductions}

    def conv(k, coef):
        red = by_block.get(k)
        if red is None:
            return coef
        T = sp.csr_array(red.T)
        return HermitianMatrix(T.conj().T @ coef.sparse @ T)

    blocks = [
        BlockSpec("hpsd", by_block[k].T.shape[1], b.name) if k in by_block else b
        for k, b in enumerate(problem.blocks)
    ]
    cons = [
        LinearConstraint({k: conv(k, c) for k, c in con.terms.items()}, con.sense, con.bound, con.tag)
        for con in problem.constraints
    ]
    fixed = [f for f in problem.fixed_entries if f[0] not in by_block]
    fixed += [(k, 0, 0, 1.0) for k in by_block]
    reduced = SdpProblem(
        blocks=blocks,
        cost={k: conv(k, c) for k, c in problem.cost.items()},
        constraints=cons,
        fixed_entries=fixed,
        cost_constant=problem.cost_constant,
        meta=problem.meta,
    )
    return reduced, reductions


def _lift_result(problem: SdpProblem, reduced: SdpProblem, reductions, res: "SolverResult") -> "SolverResult":
    """Express a result of the reduced problem in the original coordinates.

    Primal blocks are lifted as ``T W T^H``.  Outside the pinned
    submatrix ``I`` the slack is fixed by stationarity,
    ``D = C - sum_i y_i A_i`` over the unpinned rows.  On ``I`` it is set to
    ``D_IR D_RR^+ D_RI + g w w^H / |w|^4``, the smallest completion that is
    PSD, raised along ``w`` until ``w^H S_II w`` matches the reduced slack.
    The pin multipliers are whatever remains of ``D - S`` on ``I``.
    """
    blocks = list(res.blocks)
    slacks = list(res.slack_blocks)
    for red in reductions:
        T = red.T
        blocks[red.block] = T @ res.blocks[red.block] @ T.conj().T
    n_con = len(problem.constraints)
    y_con = res.duals[:n_con]
    red_pins = reduced.pin_constraints()
    red_pin_duals = dict(zip([(c.tag, tuple(c.terms)) for c in red_pins], res.duals[n_con:]))
    residual = {}
    for red in reductions:
        k = red.block
        n = problem.blocks[k].size
        D = problem.cost[k].dense() if k in problem.cost else np.zeros((n, n), dtype=complex)
        for con, yi in zip(problem.constraints, y_con):
            if k in con.terms:
                D = D - yi * con.terms[k].dense()
        idx = red.pinned
        rest = np.setdiff1d(np.arange(n), idx)
        w = red.T[idx, 0]
        d_ir = D[np.ix_(idx, rest)]
        base = d_ir @ np.linalg.pinv(D[np.ix_(rest, rest)], rcond=1e-12, hermitian=True) @ d_ir.conj().T
        ww = float(np.real(np.vdot(w, w)))
        g = max(float(np.real(res.slack_blocks[k][0, 0])) - float(np.real(np.vdot(w, base @ w))), 0.0)
        S = D.copy()
        S[np.ix_(idx, idx)] = base + g * np.outer(w, w.conj()) / ww**2
        slacks[k] = 0.5 * (S + S.conj().T)
        residual[k] = D - slacks[k]
    pin_duals = []
    for con in problem.pin_constraints():
        (k,) = con.terms
        if k in residual:
            part, rc = con.tag.split(":")[1].split("[")
            r, c = (int(t) for t in rc.rstrip("]").split(","))
            val = residual[k][r, c]
            if r == c:
                pin_duals.append(val.real)
            else:
                pin_duals.append(2.0 * (val.real if part == "re" else val.imag))
        else:
            pin_duals.append(red_pin_duals[(con.tag, (k,))])
    res.blocks = blocks
    res.slack_blocks = slacks
    res.duals = np.concatenate([y_con, np.array(pin_duals)])
    res.primal_objective = problem.objective(blocks)
    res.objective = res.primal_objective + problem.cost_constant
    return res


def solve_sdp(problem: SdpProblem, config: SolverConfig | None = None) -> SolverResult:
    """Solve ``problem`` with the homogeneous self-dual interior-point method.

    Returns a :class:`SolverResult`; never raises on numerical trouble
    (status ``"numerical_error"`` or ``"max_iter"`` is reported instead).
    """
    config = config or SolverConfig()
    problem.validate()
    if config.facial_reduction:
        reduced, reductions = _facial_reduce(problem)
        if reductions:
            inner = SolverConfig(**{**config.__dict__, "facial_reduction": False})
            return _lift_result(problem, reduced, reductions, solve_sdp(reduced, inner))
    if not problem.all_constraints():
        raise ValueError("problem has no constraints")
    try:
        return _solve_hsd(problem, config)
    except np.linalg.LinAlgError as exc:
        return _failed_result(problem, f"linear algebra failure: {exc}")


def _failed_result(problem: SdpProblem, message: str) -> SolverResult:
    blocks = [
        np.zeros((b.size, b.size), dtype=complex) if b.kind == "hpsd" else np.zeros(b.size)
        for b in problem.blocks
    ]
    n = len(problem.all_constraints())
    return SolverResult(
        status="numerical_error",
        blocks=blocks,
        duals=np.zeros(n),
        objective=float("nan"),
        primal_objective=float("nan"),
        dual_objective=float("nan"),
        iterations=0,
        slack_blocks=[b.copy() for b in blocks],
        message=message,
    )


def _solve_hsd(problem: SdpProblem, config: SolverConfig) -> SolverResult:
    sf = _to_standard_form(problem, config.equilibrate)
    A, b, c, cones = sf.A, sf.b, sf.c, sf.cones
    AT = sp.csr_array(A.T)
    m = A.shape[0]

    e = cones.identity()
    x = config.init_scale * e
    s = config.init_scale * e
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0
    nu = cones.degree + 1
    bnorm = max(1.0, float(np.linalg.norm(b)))
    cnorm = max(1.0, float(np.linalg.norm(c)))

    log: list[dict] = []
    status, message = "max_iter", "iteration limit reached"
    it = 0
    for it in range(config.max_iter + 1):
        rp = A @ x - b * tau
        rd = AT @ y + s - c * tau
        cx, by = float(c @ x), float(b @ y)
        rg = cx - by + kappa
        mu = (float(x @ s) + tau * kappa) / nu
        pobj, dobj = cx / tau, by / tau
        pres = float(np.linalg.norm(rp)) / tau / bnorm
        dres = float(np.linalg.norm(rd)) / tau / cnorm
        gap = float(x @ s) / tau**2
        relgap = gap / max(1.0, min(abs(pobj), abs(dobj)))
        entry = {
            "iter": it,
            "pobj": pobj,
            "dobj": dobj,
            "gap": gap,
            "pres": pres,
            "dres": dres,
            "tau": tau,
            "kappa": kappa,
            "mu": mu,
            "step": log[-1]["next_step"] if log else 0.0,
        }
        log.append(entry)

        if pres <= config.feas_tol and dres <= config.feas_tol and (
            gap <= config.abs_gap_tol or relgap <= config.gap_tol
        ):
            status, message = "optimal", "converged"
            break
        # improving-ray certificates
        if by > 0:
            ray = float(np.linalg.norm(AT @ y + s)) / by
            if ray <= config.feas_tol and tau < 1e-3 * kappa:
                status, message = "infeasible", f"dual ray: b'y={by:.3e}, |A'y+s|/b'y={ray:.3e}"
                break
        if cx < 0:
            ray = float(np.linalg.norm(A @ x)) / -cx
            if ray <= config.feas_tol and tau < 1e-3 * kappa:
                status, message = "unbounded", f"primal ray: c'x={cx:.3e}, |Ax|/|c'x|={ray:.3e}"
                break
        if it == config.max_iter:
            break

        try:
            scal = _Scaling(cones, x, s)
        except np.linalg.LinAlgError:
            status, message = "numerical_error", "iterate left the cone interior"
            break
        M = _schur(sf, scal)
        fac, reg = _factor(M)
        if fac is None or not np.all(np.isfinite(M)):
            status, message = "numerical_error", "Schur complement not positive definite"
            break

        lam = scal.lam
        lamv = lam.vector(cones)
        lam_sq = cones.jprod(lamv, lamv)
        hc = scal.H(c)
        ahc = A @ hc
        chc = float(c @ hc)
        q_rhs = ahc + b

        def msolve(rhs):
            # Cholesky solve plus two rounds of iterative refinement
            sol = sla.cho_solve(fac, rhs, check_finite=False)
            for _ in range(2):
                sol = sol + sla.cho_solve(fac, rhs - M @ sol, check_finite=False)
            return sol

        q = msolve(q_rhs)
        hrd = scal.H(rd)
        ahrd = A @ hrd
        chrd = float(c @ hrd)
        coup = ahc - b

        def direction(sigma, eta, corr, corr_tk):
            ds_rhs = -lam_sq + sigma * mu * e - corr
            d_s = cones.jdiv(lam, ds_rhs)
            wtds = scal.WT(d_s)
            dtk = -tau * kappa + sigma * mu - corr_tk
            r1 = -eta * rp - A @ wtds - eta * ahrd
            r2 = -eta * rg - float(c @ wtds) - eta * chrd - dtk / tau
            p = msolve(r1)
            den = float(coup @ q) - chc - kappa / tau
            dtau = (r2 - float(coup @ p)) / den
            dy = p + q * dtau
            dsv = -eta * rd - AT @ dy + c * dtau
            dx = wtds - scal.H(dsv)
            dkap = (dtk - kappa * dtau) / tau
            return dx, dy, dsv, dtau, dkap

        def step_len(dx, dsv, dtau, dkap):
            a = min(cones.max_step(lam, scal.WinvT(dx)), cones.max_step(lam, scal.W(dsv)))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkap < 0:
                a = min(a, -kappa / dkap)
            return a

        dx, dy, dsv, dtau, dkap = direction(0.0, 1.0, 0.0, 0.0)
        a_aff = min(1.0, step_len(dx, dsv, dtau, dkap))
        sigma = (1.0 - a_aff) ** 3
        corr = cones.jprod(scal.WinvT(dx), scal.W(dsv))
        dx, dy, dsv, dtau, dkap = direction(sigma, 1.0 - sigma, corr, dtau * dkap)
        amax = step_len(dx, dsv, dtau, dkap)
        alpha = min(1.0, config.step_fraction * amax)
        entry["next_step"] = alpha
        if not np.isfinite(alpha) or alpha <= 0:
            status, message = "numerical_error", "zero step length"
            break
        x = x + alpha * dx
        s = s + alpha * dsv
        y = y + alpha * dy
        tau += alpha * dtau
        kappa += alpha * dkap
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s))):
            status, message = "numerical_error", "non-finite iterate"
            break
        if alpha < 1e-10:
            status, message = "numerical_error", "step length collapsed"
            break

    for row in log:
        row.pop("next_step", None)
        if "step" not in row:
            row["step"] = 0.0

    scale_tau = tau if status not in ("infeasible", "unbounded") else 1.0
    xs = x / scale_tau * sf.b_scale
    ss = s / scale_tau * sf.c_scale
    ys = y / scale_tau * sf.c_scale
    blocks, slacks = [], []
    for k, spec in enumerate(problem.blocks):
        sl = sf.block_slices[k]
        if spec.kind == "hpsd":
            n2 = 2 * spec.size
            emb = sf.embeddings[k]
            blocks.append(emb.project(xs[sl].reshape(n2, n2)))
            slacks.append(emb.project(ss[sl].reshape(n2, n2)))
        else:
            blocks.append(xs[sl].copy())
            slacks.append(ss[sl].copy())
    duals = ys * sf.row_scale
    pobj = problem.objective(blocks)
    dobj = float(sf.b @ ys) * sf.b_scale
    return SolverResult(
        status=status,
        blocks=blocks,
        duals=duals,
        objective=pobj + problem.cost_constant,
        primal_objective=pobj,
        dual_objective=dobj,
        iterations=it,
        log=log,
        slack_blocks=slacks,
        message=message,
    )


# ---------------------------------------------------------------------------
# Rank-one recovery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rank1Extraction:
    """Principal eigenvector recovery of a voltage matrix.

    ``v`` equals ``sqrt(lambda_1) u_1`` rotated so that entry ``ref_index``
    has angle ``ref_angle``.
    """

    v: np.ndarray
    ratio: float
    is_rank1: bool
    eigenvalues: np.ndarray


def extract_rank1(
    V: np.ndarray | HermitianMatrix,
    ratio_threshold: float = 1e-5,
    ref_index: int = 0,
    ref_angle: float = 0.0,
) -> Rank1Extraction:
    """Recover ``v`` from ``V`` and decide whether ``V`` is rank one.

    Parameters
    ----------
    V : ndarray
        Hermitian matrix, PSD up to round-off.
    ratio_threshold : float
        ``lambda_2 / lambda_1`` at or below which ``V`` counts as rank one.
    ref_index, ref_angle : int, float
        Global phase alignment: ``angle(v[ref_index]) == ref_angle`` (rad).
    """
    if isinstance(V, HermitianMatrix):
        V = V.dense()
    V = 0.5 * (V + V.conj().T)
    w, u = np.linalg.eigh(V)
    if w[0] < -1e-9 * max(1.0, abs(w[-1])):
        raise ValueError(f"matrix is not PSD (lambda_min = {w[0]:.3e})")
    lam1 = w[-1]
    if lam1 <= 0:
        raise ValueError("degenerate solution: largest eigenvalue is not positive")
    lam2 = max(w[-2], 0.0) if w.size > 1 else 0.0
    v = math.sqrt(lam1) * u[:, -1]
    ref = v[ref_index]
    if abs(ref) > 0:
        v = v * np.exp(1j * (ref_angle - np.angle(ref)))
    ratio = float(lam2 / lam1)
    return Rank1Extraction(v=v, ratio=ratio, is_rank1=ratio <= ratio_threshold, eigenvalues=w[::-1].copy())
