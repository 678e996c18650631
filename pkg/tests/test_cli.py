import json

import pytest

from mgopf.netmodel import bundled_network_path

from mgopf.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NOT_CONVERGED, EXIT_OK, main


def read(path):
    return json.loads(path.read_text())


def test_solve_supply(tmp_path):
    code = main(["solve", "ten_node", "--cost", "supply", "--c0", "40", "--cs", "20", "-o", str(tmp_path)])
    assert code == EXIT_OK
    sol = read(tmp_path / "solution.json")
    assert sol["rank1"]
    assert sol["quantities"]["pg_mw"] == pytest.approx(0.3, rel=0.02)
    assert (tmp_path / "residuals.csv").exists()
    meta = read(tmp_path / "metadata.json")
    assert meta["arguments"]["cs"] == [20.0]


def test_solve_loss_equals_equal_price_supply(tmp_path):
    assert main(["solve", "ten_node", "--cost", "loss", "-o", str(tmp_path / "a")]) == EXIT_OK
    assert main(["solve", "ten_node", "--cost", "supply", "--c0", "40", "--cs", "40", "-o", str(tmp_path / "b")]) == 0
    a = read(tmp_path / "a" / "solution.json")["quantities"]["p_loss_kw"]
    b = read(tmp_path / "b" / "solution.json")["quantities"]["p_loss_kw"]
    assert a == pytest.approx(b, rel=1e-6)


def test_outputs_are_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["solve", "ten_node", "-o", str(tmp_path / d)]) == EXIT_OK
    for name in ("solution.json", "residuals.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_check_round_trip(tmp_path):
    assert main(["solve", "ten_node", "-o", str(tmp_path)]) == EXIT_OK
    assert main(["check", "ten_node", str(tmp_path / "solution.json"), "-o", str(tmp_path / "c")]) == EXIT_OK
    sol = read(tmp_path / "solution.json")
    sol["voltages"][5]["re"] += 0.1
    (tmp_path / "bad.json").write_text(json.dumps(sol))
    assert main(["check", "ten_node", str(tmp_path / "bad.json"), "-o", str(tmp_path / "d")]) == EXIT_INFEASIBLE


def test_infeasible_exit_code(tmp_path):
    doc = json.loads(bundled_network_path("ten_node").read_text())
    for bus in doc["buses"]:
        if not bus.get("pcc"):
            bus["vmin_pu"] = 1.2
            bus["vmax_pu"] = 1.3
    path = tmp_path / "net.json"
    path.write_text(json.dumps(doc))
    assert main(["solve", str(path), "-o", str(tmp_path / "out")]) == EXIT_INFEASIBLE
    assert read(tmp_path / "out" / "solution.json")["status"] == "infeasible"


def test_missing_file(tmp_path):
    assert main(["solve", str(tmp_path / "nope.json"), "-o", str(tmp_path)]) == EXIT_CONFIG


def test_bad_arguments(tmp_path):
    assert main(["admm", "ten_node", "--kappa", "0", "-o", str(tmp_path)]) == EXIT_CONFIG
    assert main(["solve", "ten_node", "--c0", "-1", "-o", str(tmp_path)]) == EXIT_CONFIG
    assert main(["solve", "ten_node", "--cs", "1", "2", "3", "-o", str(tmp_path)]) == EXIT_CONFIG
    assert main(["region", "fig3", "-o", str(tmp_path)]) == EXIT_CONFIG
    assert main(["region", "fig1", "--n-theta", "0", "-o", str(tmp_path)]) == EXIT_CONFIG


def test_admm_frozen_links_do_not_converge(tmp_path):
    code = main(["admm", "ten_node", "--drop", "1.0", "--policy", "hold-last", "--max-iter", "5", "-o", str(tmp_path)])
    assert code == EXIT_NOT_CONVERGED
    assert (tmp_path / "trace.csv").exists()
    assert read(tmp_path / "metadata.json")["admm"]["converged"] is False


def test_admm_converges(tmp_path):
    assert main(["admm", "ten_node", "--kappa", "100", "-o", str(tmp_path)]) == EXIT_OK
    meta = read(tmp_path / "metadata.json")["admm"]
    assert meta["converged"] and meta["iterations"] <= 300
    assert len(read(tmp_path / "solution.json")["areas"]) == 3


def test_region_fig1(tmp_path):
    assert main(["region", "fig1", "-o", str(tmp_path)]) == EXIT_OK
    meta = read(tmp_path / "metadata.json")
    assert meta["pareto"] > 0
    lines = (tmp_path / "fig1.csv").read_text().splitlines()
    assert lines[0] == "theta12_a,theta1_ab,theta2_ab,P12,P21,pareto"
    assert len(lines) == 1 + meta["samples"]


def test_region_fig2_slice(tmp_path):
    assert main(["region", "fig2", "--fix-p1", "-5", "--n-theta", "9", "-o", str(tmp_path)]) == EXIT_OK
    header = (tmp_path / "fig2_p1_-5.csv").read_text().splitlines()[0]
    assert header.endswith("P2,P3,pareto")
