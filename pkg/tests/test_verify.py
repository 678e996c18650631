import csv
import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from mgopf.ipsolver import extract_rank1, solve_sdp
from mgopf.netmodel import NetworkModel
from mgopf.sdpcore import assemble_p3
from mgopf.verify import (
    FIG_Z12,
    angle_bound_deg,
    check_operating_point,
    fig1_scenario,
    hull_pareto_gap,
    line_flows,
    pareto_mask,
    report_quantities,
    sample_injection_region,
    sample_line_flow_region,
)


@pytest.fixture(scope="module")
def solved(ten_node):
    net = ten_node.with_dg_costs(20.0)
    res = solve_sdp(assemble_p3(net, "supply", c0=40.0))
    return net, extract_rank1(res.blocks[0]).v, res


def unloaded(net: NetworkModel) -> NetworkModel:
    buses = [dataclasses.replace(b, load=np.zeros_like(b.load), cap_susceptance=np.zeros_like(b.cap_susceptance))
             for b in net.buses]
    return NetworkModel(tuple(buses), net.lines, net.dg_units, net.base, net.pcc_voltage, net.areas, net.name)


def flat(net: NetworkModel) -> np.ndarray:
    ref = dict(zip(net.pcc_bus.phases, net.pcc_voltage))
    return np.array([ref[ph] for _, ph in net.index.pairs()])


def test_solution_passes_checks(solved):
    net, v, _ = solved
    rep = check_operating_point(net, v)
    assert rep.max_residual < 1e-6
    assert rep.feasible()
    assert rep.mean_balance <= rep.max_balance


def test_flat_profile_without_load_is_exact(ten_node):
    net = unloaded(ten_node)
    rep = check_operating_point(net, flat(net))
    assert rep.max_residual == pytest.approx(0.0, abs=1e-12)


def test_perturbation_is_local(solved):
    net, v, _ = solved
    w = v.copy()
    k = net.index.index(9, 0)
    w[k] += 0.1
    rep = check_operating_point(net, w)
    hit = {int(r[0]) for r in rep.rows if r[2].endswith("balance") and r[3] > 1e-6}
    assert hit and hit <= {9, 6}


def test_wrong_length_rejected(ten_node):
    with pytest.raises(ValueError):
        check_operating_point(ten_node, np.ones(3))


def test_residual_csv(solved, tmp_path):
    net, v, _ = solved
    rep = check_operating_point(net, v, caps=True)
    rep.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(rep.rows)
    assert all(float(r["value"]) >= 0 for r in rows)


def test_quantities_match_objective_and_balance(solved):
    net, v, res = solved
    q = report_quantities(net, v, c0=40.0)
    assert q.c2 == pytest.approx(res.objective, rel=1e-6)
    assert q.trace_error < 1e-9
    assert abs(q.balance_error) < 1e-8
    assert q.p_loss_kw == pytest.approx(1e3 * q.p_loss_pu)


def test_quantities_zero_load(ten_node):
    net = unloaded(ten_node)
    q = report_quantities(net, flat(net))
    assert q.p_loss_kw == pytest.approx(0.0, abs=1e-12)
    assert q.p0_mw == pytest.approx(0.0, abs=1e-12)


def test_line_flows_sum_to_losses(solved):
    net, v, _ = solved
    q = report_quantities(net, v)
    assert sum(a + b for a, b in line_flows(net, v)) == pytest.approx(q.p_loss_pu, rel=1e-12)


def test_pareto_mask_basic():
    pts = np.array([[0, 1], [1, 0], [1, 1], [0.5, 0.5], [2, 2]])
    npt.assert_array_equal(pareto_mask(pts), [True, True, False, True, False])


def test_pareto_mask_order_independent_and_idempotent(rng):
    pts = rng.normal(size=(300, 3))
    pts[10] = pts[20]
    mask = pareto_mask(pts)
    perm = rng.permutation(len(pts))
    npt.assert_array_equal(pareto_mask(pts[perm]), mask[perm])
    front = pts[mask]
    assert pareto_mask(front).all()


def test_hull_gap_zero_on_convex_front():
    t = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    circle = np.stack([np.cos(t), np.sin(t)], axis=1)
    assert hull_pareto_gap(circle) < 1e-3


def test_hull_gap_positive_on_dent():
    pts = np.array([[0.0, 2.0], [2.0, 0.0], [1.5, 1.5], [3.0, 3.0]])
    assert hull_pareto_gap(pts) == pytest.approx(0.5, abs=1e-9)


def test_balanced_line_is_minkowski_sum_of_phases():
    z = (0.1 + 0.3j) * np.eye(2)
    th = np.linspace(-60, 60, 13)
    two = sample_line_flow_region(z, th, [120.0], [120.0])
    y = 1 / z[0, 0]
    v2 = np.exp(-1j * np.deg2rad(th))
    per_phase = np.real(np.conj(y * (1 - v2)))
    npt.assert_allclose(two.points[:, 0], 2 * per_phase, atol=1e-12)


def test_single_point_grid_is_pareto():
    s = sample_line_flow_region(FIG_Z12, [10.0], [120.0], [120.0])
    assert len(s) == 1
    assert s.pareto.all()


def test_singular_impedance():
    with pytest.raises(np.linalg.LinAlgError):
        sample_line_flow_region(np.ones((2, 2)), [0.0], [120.0], [120.0])


def test_empty_grid():
    with pytest.raises(ValueError):
        sample_line_flow_region(FIG_Z12, [], [120.0], [120.0])


def test_injection_point_box():
    s = sample_injection_region(FIG_Z12, FIG_Z12, [5.0], [-5.0], [120.0], [120.0], [120.0])
    assert len(s) == 1 and s.pareto.all()
    # power balance of a lossy chain: injections sum to the losses, which are positive
    assert s.points.sum() > 0


def test_injection_balanced_symmetry():
    z = (0.1 + 0.3j) * np.eye(2)
    th = np.linspace(-30, 30, 5)
    s = sample_injection_region(z, z, th, th, [120.0], [120.0], [120.0])
    # per-phase terms are identical, so each node injects twice the single-phase value
    y = 1 / z[0, 0]
    a12 = np.deg2rad(s.angles[:, 0])
    p1 = np.real(np.conj(y * (1 - np.exp(-1j * a12))))
    npt.assert_allclose(s.points[:, 0], 2 * p1, atol=1e-12)


def test_parallel_sampling_matches_serial():
    a = fig1_scenario(n_theta=19, n_ab=3)
    b = fig1_scenario(n_theta=19, n_ab=3, workers=4)
    npt.assert_array_equal(a.points, b.points)
    npt.assert_array_equal(a.pareto, b.pareto)


def test_slice_and_csv(tmp_path):
    s = sample_injection_region(FIG_Z12, FIG_Z12, np.linspace(-30, 30, 7), np.linspace(-30, 30, 7),
                                [120.0], [120.0], [120.0])
    cut = s.slice(0, float(s.points[0, 0]), 1e-9)
    assert cut.point_names == ("P2", "P3")
    cut.to_csv(tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header.endswith("P2,P3,pareto")
    with pytest.raises(ValueError):
        s.slice(0, 1e6, 1e-9)


def test_angle_bound():
    y11 = np.linalg.inv(FIG_Z12)[0, 0]
    assert np.tan(np.deg2rad(angle_bound_deg(FIG_Z12))) == pytest.approx(abs(y11.real / y11.imag))
