"""Command-line driver: ``mgopf {solve,admm,region,check}``.

Costs on the command line are in currency per MW and converted to the
per-unit costs used internally.  Every command writes a ``metadata.json``
sidecar with the full argument set so a run can be replayed.

Exit codes: 0 success, 1 ADMM did not converge, 2 infeasible (or a
checked point violates the equations), 3 numerical failure, 4 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .admm import AdmmConfig, AdmmError, LinkFailure, complete_psd, run_admm
from .ipsolver import SolverConfig, extract_rank1, solve_sdp
from .netmodel import (
    NetworkError,
    NetworkModel,
    build_bus_admittance,
    load_network,
    parse_phases,
    phase_label,
)
from .partition import PartitionError, build_plan
from .sdpcore import CostKind, assemble_p3
from .verify import check_operating_point, fig1_scenario, fig2_scenario, report_quantities

log = logging.getLogger("mgopf")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4


class ConfigError(ValueError):
    """Invalid command-line configuration."""


def _nonneg(text: str) -> float:
    x = float(text)
    if not x >= 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text}")
    return x


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgopf", description="SDP-relaxed OPF for unbalanced microgrids")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("network", help="network JSON file or bundled name (ten_node, ieee37)")
        sp.add_argument("-o", "--out", default="mgopf_out", help="output directory")
        sp.add_argument("--cost", choices=[c.value for c in CostKind], default="loss")
        sp.add_argument("--c0", type=_nonneg, default=40.0, help="PCC cost in $/MW")
        sp.add_argument(
            "--cs",
            type=_nonneg,
            nargs="+",
            default=None,
            help="DG costs in $/MW (one value for all units or one per unit)",
        )
        sp.add_argument("--caps", action="store_true", help="enforce the line caps present in the data")
        sp.add_argument("--max-iter-ipm", type=int, default=100, help="interior-point iteration limit")

    s = sub.add_parser("solve", help="centralized relaxed OPF")
    common(s)
    s.add_argument("--rank-tol", type=float, default=1e-5, help="lambda2/lambda1 threshold")

    a = sub.add_parser("admm", help="distributed ADMM over the network's areas")
    common(a)
    a.add_argument("--kappa", type=float, default=100.0)
    a.add_argument("--tol", type=float, default=1e-3)
    a.add_argument("--max-iter", type=int, default=500)
    a.add_argument("--drop", type=float, default=0.0, help="per-link message loss probability")
    a.add_argument("--policy", choices=["hold-last", "fail"], default="hold-last")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument(
        "--areas",
        default=None,
        help="JSON list of bus-id lists; defaults to the partition stored in the network file",
    )

    r = sub.add_parser("region", help="sample a feasible power region")
    r.add_argument("scenario", choices=["fig1", "fig2"])
    r.add_argument("-o", "--out", default="mgopf_out")
    r.add_argument("--n-theta", type=int, default=None, help="grid points per line angle")
    r.add_argument("--n-ab", type=int, default=5, help="grid points per line-line angle")
    r.add_argument("--fix-p1", type=float, default=None, help="slice at this P1 (fig2 only)")
    r.add_argument("--slice-width", type=float, default=None, help="half width of the slice")
    r.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("check", help="residuals of a voltage vector")
    c.add_argument("network")
    c.add_argument("solution", help="solution.json written by solve or admm")
    c.add_argument("-o", "--out", default="mgopf_out")
    c.add_argument("--caps", action="store_true")
    c.add_argument("--tol", type=float, default=1e-6)
    return p


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _costed_network(net: NetworkModel, args) -> tuple[NetworkModel, float]:
    """Network with DG costs applied and the PCC cost, both per pu."""
    per_pu = net.base.s_base_mw
    if args.cs is not None:
        cs = args.cs
        if len(cs) == 1:
            net = net.with_dg_costs(cs[0] * per_pu)
        elif len(cs) == len(net.dg_units):
            net = net.with_dg_costs([c * per_pu for c in cs])
        else:
            raise ConfigError(f"--cs needs 1 or {len(net.dg_units)} values, got {len(cs)}")
    return net, args.c0 * per_pu


def _voltage_records(net: NetworkModel, v: np.ndarray) -> list[dict]:
    out = []
    for bus in net.buses:
        for ph in bus.phases:
            x = v[net.index.index(bus.id, ph)]
            out.append(
                {
                    "bus": bus.id,
                    "phase": phase_label([ph]),
                    "re": float(x.real),
                    "im": float(x.imag),
                    "mag": float(abs(x)),
                    "angle_deg": float(np.degrees(np.angle(x))),
                }
            )
    return out


def _dg_records(net: NetworkModel, v: np.ndarray) -> list[dict]:
    s = v * np.conj(build_bus_admittance(net) @ v)
    base_kw = net.base.s_base_kw
    out = []
    for d in net.dg_units:
        bus = net.bus(d.bus)
        for k, ph in enumerate(bus.phases):
            i = net.index.index(bus.id, ph)
            pg = s[i].real + bus.load[k].real
            qg = s[i].imag + bus.load[k].imag - bus.cap_susceptance[k] * abs(v[i]) ** 2
            out.append(
                {
                    "bus": d.bus,
                    "phase": phase_label([ph]),
                    "p_pu": float(pg),
                    "q_pu": float(qg),
                    "p_kw": float(pg * base_kw),
                    "q_kvar": float(qg * base_kw),
                }
            )
    return out


def _voltages_from_json(net: NetworkModel, path: Path) -> np.ndarray:
    with open(path) as fh:
        data = json.load(fh)
    v = np.zeros(net.size, dtype=complex)
    seen = np.zeros(net.size, dtype=bool)
    for rec in data["voltages"]:
        (ph,) = parse_phases(rec["phase"])
        i = net.index.index(int(rec["bus"]), ph)
        v[i] = complex(rec["re"], rec["im"])
        seen[i] = True
    if not seen.all():
        raise ConfigError(f"{path}: voltages missing for {int((~seen).sum())} bus phases")
    return v


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metadata(args, extra: dict | None = None) -> dict:
    meta = {
        "version": __version__,
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
    }
    if extra:
        meta.update(extra)
    return meta


def _solver_config(args) -> SolverConfig:
    return SolverConfig(max_iter=args.max_iter_ipm)


def _finish_point(net: NetworkModel, v: np.ndarray, c0: float, out: Path, caps: bool) -> tuple[dict, object]:
    rep = check_operating_point(net, v, caps=caps)
    rep.to_csv(out / "residuals.csv")
    q = report_quantities(net, v, c0)
    return q.as_dict(), rep


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    net, c0 = _costed_network(load_network(args.network), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prob = assemble_p3(net, args.cost, c0=c0, caps=args.caps)
    res = solve_sdp(prob, _solver_config(args))
    summary = {
        "status": res.status,
        "message": res.message,
        "iterations": res.iterations,
        "objective": res.objective,
    }
    _write_json(out / "metadata.json", _metadata(args, {"solver": summary}))
    if res.status in ("infeasible", "unbounded"):
        summary["certificate"] = {
            "dual_objective": res.dual_objective,
            "primal_objective": res.primal_objective,
        }
        _write_json(out / "solution.json", summary)
        print(f"{res.status}: {res.message}")
        return EXIT_INFEASIBLE
    if res.status != "optimal":
        _write_json(out / "solution.json", summary)
        print(f"solver failed ({res.status}): {res.message}")
        return EXIT_NUMERICAL
    ex = extract_rank1(res.blocks[0], ratio_threshold=args.rank_tol)
    quantities, rep = _finish_point(net, ex.v, c0, out, args.caps)
    solution = {
        **summary,
        "rank_ratio": ex.ratio,
        "rank1": ex.is_rank1,
        "quantities": quantities,
        "max_residual": rep.max_residual,
        "voltages": _voltage_records(net, ex.v),
        "dg_setpoints": _dg_records(net, ex.v),
    }
    _write_json(out / "solution.json", solution)
    print(
        f"optimal objective={res.objective:.6g} P_loss={quantities['p_loss_kw']:.4f} kW "
        f"P0={quantities['p0_mw']:.4f} MW PG={quantities['pg_mw']:.4f} MW "
        f"rank ratio={ex.ratio:.2e}"
    )
    return EXIT_OK


def cmd_admm(args) -> int:
    net, c0 = _costed_network(load_network(args.network), args)
    areas = json.loads(args.areas) if args.areas else None
    plan = build_plan(net, areas)
    cfg = AdmmConfig(
        kappa=args.kappa,
        tol=args.tol,
        max_iter=args.max_iter,
        drop_prob=args.drop,
        policy=args.policy,
        seed=args.seed,
        workers=args.workers,
        solver=_solver_config(args),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(it, states):
        log.info("iteration %d: area objectives %s", it, [round(st.objective, 9) for st in states])

    result = run_admm(net, plan, args.cost, cfg, c0=c0, caps=args.caps, on_iteration=progress)
    result.trace.to_csv(out / "trace.csv")
    _write_json(out / "metadata.json", _metadata(args, {"admm": result.metadata(plan, args.cost)}))
    full = complete_psd(plan, result.V)
    lam_min = float(np.linalg.eigvalsh(full)[0])
    ex = extract_rank1(complete_psd(plan, result.V, project=True))
    quantities, rep = _finish_point(net, ex.v, c0, out, args.caps)
    solution = {
        "converged": result.converged,
        "iterations": result.iterations,
        "objective": result.objective,
        "rank_ratio": ex.ratio,
        "completion_lambda_min": lam_min,
        "quantities": quantities,
        "max_residual": rep.max_residual,
        "areas": [
            {"area": l, "buses": sorted(plan.extended[l].nodes), "re": V.real.tolist(), "im": V.imag.tolist()}
            for l, V in enumerate(result.V)
        ],
        "voltages": _voltage_records(net, ex.v),
        "dg_setpoints": _dg_records(net, ex.v),
    }
    _write_json(out / "solution.json", solution)
    word = "converged" if result.converged else "not converged"
    print(f"{word} after {result.iterations} iterations, objective={result.objective:.6g}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_region(args) -> int:
    if args.fix_p1 is not None and args.scenario != "fig2":
        raise ConfigError("--fix-p1 applies to fig2 only")
    if args.scenario == "fig1":
        sample = fig1_scenario(n_theta=73 if args.n_theta is None else args.n_theta, n_ab=args.n_ab, workers=args.workers)
    else:
        sample = fig2_scenario(n_theta=13 if args.n_theta is None else args.n_theta, n_ab=args.n_ab, workers=args.workers)
    if args.fix_p1 is not None:
        width = args.slice_width if args.slice_width is not None else 0.5 * sample.cell_diameter
        sample = sample.slice(0, args.fix_p1, width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.scenario if args.fix_p1 is None else f"{args.scenario}_p1_{args.fix_p1:g}"
    sample.to_csv(out / f"{name}.csv")
    gap = sample.hull_gap()
    _write_json(
        out / "metadata.json",
        _metadata(args, {"samples": len(sample), "pareto": int(sample.pareto.sum()), "hull_gap": gap}),
    )
    print(f"{len(sample)} samples, {int(sample.pareto.sum())} Pareto, hull gap {gap:.3g}")
    return EXIT_OK


def cmd_check(args) -> int:
    net = load_network(args.network)
    v = _voltages_from_json(net, Path(args.solution))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = check_operating_point(net, v, caps=args.caps)
    rep.to_csv(out / "residuals.csv")
    _write_json(out / "metadata.json", _metadata(args, {"max_residual": rep.max_residual}))
    print(f"max balance residual {rep.max_balance:.3e}, max violation {rep.max_violation:.3e}")
    return EXIT_OK if rep.feasible(args.tol) else EXIT_INFEASIBLE


COMMANDS = {"solve": cmd_solve, "admm": cmd_admm, "region": cmd_region, "check": cmd_check}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, NetworkError, PartitionError, ConfigError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LinkFailure as exc:
        print(f"link failure: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (AdmmError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
