import csv
import io
import json

import pytest

from gridlmp import cases
from gridlmp.casefile import emit_json, parse_json
from gridlmp.cli import main

from test_casefile import TWO_BUS


def write_grid(tmp_path, grid, name=None):
    path = tmp_path / f"{name or grid.name}.json"
    path.write_text(emit_json(grid))
    return str(path)


def summary(capsys):
    out = capsys.readouterr().out
    return json.loads(out[out.index("{"):])


def test_validate_json_ok(tmp_path, capsys):
    assert main(["validate", "--in", write_grid(tmp_path, cases.case9())]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_validate_matpower_ok(tmp_path):
    m = tmp_path / "tiny.m"
    m.write_text(TWO_BUS)
    assert main(["validate", "--in", str(m), "--format", "matpower"]) == 0


def test_validate_unknown_bus(tmp_path, capsys):
    m = tmp_path / "bad.m"
    m.write_text(TWO_BUS.replace("1  2  0.01", "1  7  0.01"))
    assert main(["validate", "--in", str(m)]) == 1
    assert "branch 1" in capsys.readouterr().err


def test_validate_cost_model_three(tmp_path, capsys):
    m = tmp_path / "bad.m"
    m.write_text(TWO_BUS.replace("2  0  0  3  0.01  40  0;", "3  0  0  3  0.01  40  0;"))
    assert main(["validate", "--in", str(m)]) == 1
    assert "UnsupportedCostModel" in capsys.readouterr().err


def test_missing_file(tmp_path):
    assert main(["validate", "--in", str(tmp_path / "nope.json")]) == 1


def test_nonpositive_tolerance_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["price", "--in", write_grid(tmp_path, cases.two_bus()), "--tol", "0"])


def test_upgrade_tree(tmp_path, capsys):
    assert main(["upgrade", "--in", write_grid(tmp_path, cases.tree4())]) == 0
    s = summary(capsys)
    assert s["converted"] == 0 and s["fraction"] == 0.0


def test_upgrade_triangle(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["upgrade", "--in", write_grid(tmp_path, cases.triangle()), "--out", str(out)]) == 0
    s = summary(capsys)
    assert s["converted"] == 1
    assert s["fraction"] == pytest.approx(1 / 3)
    hybrid = parse_json((out / "hybrid.json").read_text())
    assert hybrid.n_ac == 2 and hybrid.n_dc == 1
    dc = hybrid.dc_branches[0]
    assert dc.loss_factor == pytest.approx(0.035)
    assert dc.q_capability == pytest.approx(0.25 * dc.p_max)


def test_upgrade_parameters_overridable(tmp_path):
    out = tmp_path / "out"
    main(["upgrade", "--in", write_grid(tmp_path, cases.triangle()), "--out", str(out),
          "--loss-factor", "0.05", "--q-cap-fraction", "0.5"])
    dc = parse_json((out / "hybrid.json").read_text()).dc_branches[0]
    assert dc.loss_factor == pytest.approx(0.05)
    assert dc.q_capability == pytest.approx(0.5 * dc.p_max)


def test_price_hybrid_demo_exact(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["price", "--in", write_grid(tmp_path, cases.demo_hybrid4()), "--out", str(out)]) == 0
    s = summary(capsys)
    assert s["exact"] and s["kappa_max"] <= 1e-6
    rows = list(csv.reader(io.StringIO((out / "lmp.csv").read_text())))
    assert rows[0][:5] == ["bus_id", "lmp_p", "lmp_q", "v_mag", "v_ang"]
    assert len(rows) == 5
    report = json.loads((out / "report.json").read_text())
    assert report["exact"] is True


def test_price_tight_triangle_inexact(tmp_path, capsys):
    assert main(["price", "--in", write_grid(tmp_path, cases.tight_triangle())]) == 2
    s = summary(capsys)
    assert not s["exact"] and s["kappa_max"] > 1e-3


def test_price_overload_infeasible(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["price", "--in", write_grid(tmp_path, cases.overloaded()), "--out", str(out)]) == 3
    assert summary(capsys)["status"] == "infeasible"
    assert not (out / "lmp.csv").exists()


def test_dcopf_congested_prices(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["dcopf", "--in", write_grid(tmp_path, cases.congested_two_bus()),
                 "--out", str(out)]) == 0
    s = summary(capsys)
    assert s["lmp"] == pytest.approx([20.0, 50.0], abs=1e-6)
    rows = list(csv.reader(io.StringIO((out / "dcopf.csv").read_text())))
    assert rows[0] == ["bus_id", "lmp_p", "theta"]
    assert [float(r[1]) for r in rows[1:]] == pytest.approx([20.0, 50.0], abs=1e-6)


def test_dcopf_infeasible(tmp_path, capsys):
    assert main(["dcopf", "--in", write_grid(tmp_path, cases.overloaded())]) == 3


def test_perturb_byte_identical(tmp_path):
    path = write_grid(tmp_path, cases.demo_hybrid4())
    texts = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["perturb", "--in", path, "-n", "10", "--seed", "7", "--out", str(out)]) == 0
        texts.append((out / "scenarios.csv").read_bytes())
    assert texts[0] == texts[1]
    assert texts[0].decode().count("\n") == 11


def test_perturb_stdout(tmp_path, capsys):
    path = write_grid(tmp_path, cases.demo_hybrid4())
    assert main(["perturb", "--in", path, "-n", "2", "--threads", "1"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("scenario,kappa,kappa_max,exact")


def test_sweep_bracket(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["sweep", "--in", write_grid(tmp_path, cases.demo_hybrid4()), "--step", "0.01",
                 "--out", str(out)]) == 0
    s = summary(capsys)
    assert s["max_feasible_scale"] >= 1.0
    assert 0 < s["first_infeasible_scale"] - s["max_feasible_scale"] <= 0.01
    assert (out / "sweep.csv").exists()


def test_sweep_base_infeasible(tmp_path, capsys):
    assert main(["sweep", "--in", write_grid(tmp_path, cases.overloaded())]) == 3
