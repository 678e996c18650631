import numpy as np
import numpy.testing as npt
import pytest

from mgopf.admm import (
    AdmmConfig,
    BlockMessage,
    LinkFailure,
    LocalState,
    build_local_models,
    complete_psd,
    delta_v,
    dual_update,
    message_bus,
    run_admm,
)
from mgopf.ipsolver import solve_sdp
from mgopf.partition import build_plan, slice_local
from mgopf.sdpcore import assemble_p3, loss_cost_matrix, supply_cost_constant, supply_cost_matrix


@pytest.fixture(scope="module")
def plan(ten_node):
    return build_plan(ten_node)


@pytest.fixture(scope="module")
def short_run(ten_node, plan):
    return run_admm(ten_node, plan, "loss", AdmmConfig(kappa=10.0, max_iter=8, tol=1e-12))


def random_v(rng, net):
    return rng.uniform(0.9, 1.1, net.size) * np.exp(1j * rng.uniform(-np.pi, np.pi, net.size))


def test_delta_v_is_mean_absolute_difference():
    a = np.zeros((2, 2), complex)
    b = np.array([[1, 1j], [-1j, 3]])
    assert delta_v(a, b) == pytest.approx(6 / 4)
    assert delta_v(b, b) == 0.0


@pytest.mark.parametrize(
    "kwargs",
    [{"kappa": 0.0}, {"kappa": -1.0}, {"tol": 0.0}, {"drop_prob": 1.5}, {"policy": "retry"}, {"workers": 0}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AdmmConfig(**kwargs)


def test_local_costs_sum_to_global(ten_node, plan, rng):
    v = random_v(rng, ten_node)
    V = np.outer(v, v.conj())
    loss = build_local_models(plan, "loss")
    total = sum(m.cost.trace_with(slice_local(plan, V, m.area)) for m in loss)
    assert total == pytest.approx(loss_cost_matrix(ten_node).trace_with(V), rel=1e-12)
    net = ten_node.with_dg_costs(25.0)
    sup = build_local_models(build_plan(net), "supply", c0=40.0)
    total = sum(m.cost.trace_with(slice_local(plan, V, m.area)) + m.cost_constant for m in sup)
    expected = supply_cost_matrix(net, 40.0).trace_with(V) + supply_cost_constant(net, 40.0)
    assert total == pytest.approx(expected, rel=1e-12)


def test_every_global_row_lands_in_one_area(ten_node, plan):
    tags = [c.tag for m in build_local_models(plan, "loss") for c in m.constraints]
    assert sorted(tags) == sorted(c.tag for c in assemble_p3(ten_node, "loss").constraints)


def test_pcc_pins_only_in_pcc_area(plan):
    models = build_local_models(plan, "loss")
    assert [bool(m.fixed_entries) for m in models] == [True, False, False]


def test_dual_update_antisymmetric(plan, rng):
    k = plan.shared[(0, 1)].size
    states = []
    for l, j in ((0, 1), (1, 0)):
        V = np.zeros((plan.local_index[l].size,) * 2, complex)
        r = plan.shared_local(l, j)
        blk = rng.normal(size=(k, k)) + 1j * rng.normal(size=(k, k))
        V[np.ix_(r, r)] = blk + blk.conj().T
        states.append(LocalState(l, V, {j: np.zeros((k, k))}, {j: np.zeros((k, k))}, {}))
    a, b = states
    dual_update(a, plan, {1: b.own_block(plan, 0)}, kappa=3.0)
    dual_update(b, plan, {0: a.own_block(plan, 1)}, kappa=3.0)
    npt.assert_array_equal(a.gamma[1], -b.gamma[0])
    npt.assert_array_equal(a.lam[1], -b.lam[0])


def messages():
    return [BlockMessage(0, 1, 1, np.eye(2)), BlockMessage(1, 0, 1, 2 * np.eye(2))]


def test_message_bus_lossless():
    out = message_bus(messages())
    assert [(m.sender, m.receiver) for m in out] == [(0, 1), (1, 0)]


def test_message_bus_hold_last():
    last = {(0, 1): BlockMessage(0, 1, 0, np.zeros((2, 2)))}
    out = message_bus(messages(), drop_prob=1.0, policy="hold-last", last=last)
    assert len(out) == 1
    assert out[0].iteration == 0


def test_message_bus_fail():
    with pytest.raises(LinkFailure):
        message_bus(messages(), drop_prob=1.0, policy="fail")


def test_message_bus_seeded():
    many = messages() * 20
    a = message_bus(many, 0.5, rng=np.random.default_rng(3))
    b = message_bus(many, 0.5, rng=np.random.default_rng(3))
    assert [m.sender for m in a] == [m.sender for m in b]


def test_single_area_matches_centralized(ten_node):
    plan = build_plan(ten_node, [[b.id for b in ten_node.buses]])
    res = run_admm(ten_node, plan, "loss", AdmmConfig(kappa=10.0))
    central = solve_sdp(assemble_p3(ten_node, "loss"))
    assert res.converged
    assert res.iterations == 1
    assert res.objective == pytest.approx(central.objective, rel=1e-6)


def test_short_run_trace(short_run, plan):
    assert short_run.iterations == 8
    assert not short_run.converged
    assert len(short_run.trace.records) == 8 * len(plan.macro_edges)
    assert short_run.trace.iterations() == list(range(1, 9))
    assert short_run.trace.series(0, 1).shape == (8,)


def test_short_run_multipliers_antisymmetric(short_run):
    assert max(short_run.antisymmetry) == 0.0


def test_short_run_disagreement_shrinks(short_run):
    first, last = short_run.trace.max_delta(1), short_run.trace.max_delta(8)
    assert last < first


def test_parallel_workers_identical(ten_node, plan, short_run):
    par = run_admm(ten_node, plan, "loss", AdmmConfig(kappa=10.0, max_iter=8, tol=1e-12, workers=3))
    for a, b in zip(par.V, short_run.V):
        npt.assert_array_equal(a, b)


def test_trace_csv(short_run, tmp_path):
    path = tmp_path / "trace.csv"
    short_run.trace.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,edge_l,edge_j,delta_v,area_objective_sum"
    assert len(lines) == 1 + len(short_run.trace.records)


def test_link_failure_policy(ten_node, plan):
    with pytest.raises(LinkFailure):
        run_admm(ten_node, plan, "loss", AdmmConfig(max_iter=3, drop_prob=1.0, policy="fail"))


def test_complete_psd_exact_on_consistent_blocks(ten_node, plan, rng):
    v = random_v(rng, ten_node)
    V = np.outer(v, v.conj())
    local = [slice_local(plan, V, l) for l in range(plan.n_areas)]
    npt.assert_allclose(complete_psd(plan, local), V, atol=1e-12)


def test_complete_psd_projection(plan, short_run):
    X = complete_psd(plan, short_run.V, project=True)
    assert np.linalg.eigvalsh(X)[0] >= -1e-10
