import numpy as np
import numpy.testing as npt
import pytest

from mgopf.ipsolver import SolverConfig, extract_rank1, solve_sdp, write_iteration_log
from mgopf.sdpcore import BlockSpec, HermitianMatrix, LinearConstraint, SdpProblem, assemble_p3

from conftest import hermitian_random, lambda_min_problem


@pytest.mark.parametrize("n", [2, 4, 7])
def test_lambda_min(rng, n):
    m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    m = m + m.conj().T
    res = solve_sdp(lambda_min_problem(m))
    assert res.optimal
    assert res.objective == pytest.approx(np.linalg.eigvalsh(m)[0], abs=1e-8)
    # the optimizer is the projector onto the bottom eigenvector
    ex = extract_rank1(res.blocks[0])
    assert ex.is_rank1


def test_linear_program():
    # min x0 + 2 x1  s.t.  x0 + x1 >= 1, x >= 0
    prob = SdpProblem(
        blocks=[BlockSpec("nonneg", 2)],
        cost={0: np.array([1.0, 2.0])},
        constraints=[LinearConstraint({0: np.array([1.0, 1.0])}, "ge", 1.0, "sum")],
    )
    res = solve_sdp(prob)
    assert res.optimal
    npt.assert_allclose(res.blocks[0], [1.0, 0.0], atol=1e-7)
    assert res.duals[0] == pytest.approx(1.0, abs=1e-7)


def test_second_order_cone():
    # min x0  s.t.  x1 = 3, x2 = 4, x0 >= ||(x1, x2)||
    prob = SdpProblem(
        blocks=[BlockSpec("soc", 3)],
        cost={0: np.array([1.0, 0.0, 0.0])},
        constraints=[
            LinearConstraint({0: np.array([0.0, 1.0, 0.0])}, "eq", 3.0, "x1"),
            LinearConstraint({0: np.array([0.0, 0.0, 1.0])}, "eq", 4.0, "x2"),
        ],
    )
    res = solve_sdp(prob)
    assert res.optimal
    assert res.objective == pytest.approx(5.0, abs=1e-7)


def test_infeasible_detected():
    prob = SdpProblem(
        blocks=[BlockSpec("nonneg", 1)],
        cost={0: np.array([1.0])},
        constraints=[LinearConstraint({0: np.array([1.0])}, "le", -1.0, "neg")],
    )
    assert solve_sdp(prob).status == "infeasible"


def test_unbounded_detected():
    prob = SdpProblem(
        blocks=[BlockSpec("nonneg", 2)],
        cost={0: np.array([-1.0, 0.0])},
        constraints=[LinearConstraint({0: np.array([0.0, 1.0])}, "eq", 1.0, "x1")],
    )
    assert solve_sdp(prob).status == "unbounded"


def test_iteration_limit_reported():
    res = solve_sdp(lambda_min_problem(np.diag([1.0, 2.0, 3.0])), SolverConfig(max_iter=1))
    assert res.status == "max_iter"


def test_deterministic_logs(ten_node, tmp_path):
    prob = assemble_p3(ten_node, "loss")
    a, b = solve_sdp(prob), solve_sdp(prob)
    write_iteration_log(a, tmp_path / "a.csv")
    write_iteration_log(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    npt.assert_array_equal(a.blocks[0], b.blocks[0])


def test_weak_duality_along_the_path(ten_node):
    res = solve_sdp(assemble_p3(ten_node, "loss"))
    assert res.optimal
    assert all(row["gap"] >= 0 for row in res.log)
    assert res.primal_objective - res.dual_objective >= -1e-7 * max(1.0, abs(res.primal_objective))


def test_facial_reduction_matches_plain_solve(ten_node):
    prob = assemble_p3(ten_node, "loss")
    red = solve_sdp(prob)
    plain = solve_sdp(prob, SolverConfig(facial_reduction=False, max_iter=200))
    assert red.optimal
    assert red.objective == pytest.approx(plain.objective, rel=1e-5)
    n = len(prob.constraints)
    scale = max(1.0, np.abs(red.duals[:n]).max())
    npt.assert_allclose(red.duals[:n], plain.duals[:n], atol=1e-3 * scale)


def test_recovered_pin_duals_certify_optimality(ten_node):
    """The lifted multipliers satisfy stationarity with a PSD slack and no gap."""
    prob = assemble_p3(ten_node, "loss")
    res = solve_sdp(prob)
    cons = prob.all_constraints()
    assert len(res.duals) == len(cons)
    d = prob.cost[0].dense()
    for con, y in zip(cons, res.duals):
        d = d - y * con.terms[0].dense()
    slack = res.slack_blocks[0]
    assert np.abs(d - slack).max() <= 1e-9 * max(1.0, np.abs(d).max())
    assert np.linalg.eigvalsh(slack)[0] >= -1e-6 * np.abs(slack).max()
    dual_obj = sum(y * c.bound for c, y in zip(cons, res.duals))
    assert dual_obj == pytest.approx(res.primal_objective, abs=1e-6)


def test_extract_rank1_phase_reference(rng):
    v = rng.normal(size=4) + 1j * rng.normal(size=4)
    ex = extract_rank1(np.outer(v, v.conj()), ref_index=1, ref_angle=0.3)
    assert ex.is_rank1
    assert np.angle(ex.v[1]) == pytest.approx(0.3)
    npt.assert_allclose(np.outer(ex.v, ex.v.conj()), np.outer(v, v.conj()), atol=1e-12)


def test_extract_rank1_flags_higher_rank(rng):
    ex = extract_rank1(hermitian_random(rng, 5, rank=2))
    assert not ex.is_rank1
    assert ex.ratio > 1e-5


def test_extract_rank1_rejects_indefinite():
    with pytest.raises(ValueError):
        extract_rank1(np.diag([1.0, -0.5]))


@pytest.mark.parametrize("field,value", [("gap_tol", 0.0), ("max_iter", 0), ("step_fraction", 1.0)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        SolverConfig(**{field: value})
