import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridlmp import cases
from gridlmp.casefile import (RawCase, emit_json, emit_raw_json, load_grid, parse_json,
                              parse_matpower, parse_raw_json, scale_all_powers, to_grid)
from gridlmp.errors import (IslandedBus, MalformedRow, MissingTable, NegativeResistance,
                            SchemaVersionMismatch, UnsupportedCostModel)
from gridlmp.grid import DcBranch, PiecewiseLinear, Polygon

TWO_BUS = """
function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0    0   0  0  1  1.0  0  230  1  1.05  0.95;
    2  1  100  30  0  0  1  1.0  0  230  1  1.05  0.95;
];
mpc.gen = [
    1  0  0  50  -50  1.0  100  1  200  0;
];
mpc.branch = [
    1  2  0.01  0.1  0.02  150  150  150  0  0  1  -60  60;
];
mpc.gencost = [
    2  0  0  3  0.01  40  0;
];
"""


def test_minimal_case_tables():
    raw = parse_matpower(TWO_BUS)
    assert raw.base_mva == 100.0
    assert len(raw.bus_table) == 2
    assert len(raw.branch_table) == 1
    assert len(raw.gen_table) == len(raw.gencost_table) == 1


def test_comment_inside_matrix_is_ignored():
    commented = TWO_BUS.replace("mpc.bus = [\n", "mpc.bus = [\n  % bus data follows\n")
    assert parse_matpower(commented) == parse_matpower(TWO_BUS)


def test_scientific_notation():
    raw = parse_matpower(TWO_BUS.replace("0.01  0.1", "1e-2  1.0E-1"))
    assert raw.branch_table[0][2] == pytest.approx(0.01)
    assert raw.branch_table[0][3] == pytest.approx(0.1)


def test_missing_table():
    text = TWO_BUS[:TWO_BUS.index("mpc.gencost")]
    with pytest.raises(MissingTable):
        parse_matpower(text)


def test_short_row_reports_line():
    text = TWO_BUS.replace("1  2  0.01  0.1  0.02  150  150  150  0  0  1  -60  60;", "1  2  0.01;")
    with pytest.raises(MalformedRow) as err:
        parse_matpower(text)
    assert "branch" in str(err.value)


def test_cost_model_three_rejected():
    with pytest.raises(UnsupportedCostModel):
        parse_matpower(TWO_BUS.replace("2  0  0  3  0.01  40  0;", "3  0  0  3  0.01  40  0;"))


def test_cubic_cost_rejected():
    with pytest.raises(UnsupportedCostModel):
        parse_matpower(TWO_BUS.replace("2  0  0  3  0.01  40  0;", "2  0  0  4  0.5  0.01  40  0;"))


def test_unknown_bus_in_branch():
    with pytest.raises(MalformedRow, match="branch 1"):
        parse_matpower(TWO_BUS.replace("1  2  0.01", "1  7  0.01"))


def test_extra_table_warns():
    with pytest.warns(UserWarning, match="bus_name"):
        parse_matpower(TWO_BUS + "\nmpc.bus_name = {\n 'a';\n 'b';\n};\n")


def test_per_unit_load():
    g = to_grid(parse_matpower(TWO_BUS))
    assert g.loads[0].region.p_min == pytest.approx(1.0)
    assert g.loads[0].region.q_min == pytest.approx(0.3)


def test_quadratic_cost_marginal_price():
    g = to_grid(parse_matpower(TWO_BUS))
    cost = g.generators[0].cost
    # cost per p.u. of output; 1 p.u. = 100 MW, so 40 $/MWh is 4000 $/h per p.u.
    assert cost.slope(0.0) / g.base_mva == pytest.approx(40.0)
    # symbolic derivative of 0.01 P^2 + 40 P at P = 50 MW
    assert cost.slope(0.5) / g.base_mva == pytest.approx(0.02 * 50 + 40)
    # objective in $/h is unchanged by the conversion
    assert cost(0.5) == pytest.approx(0.01 * 50 ** 2 + 40 * 50)


def test_piecewise_cost_conversion():
    text = TWO_BUS.replace("2  0  0  3  0.01  40  0;", "1  0  0  3  0 0 100 2000 200 6000;")
    fn = to_grid(parse_matpower(text)).generators[0].cost
    assert isinstance(fn, PiecewiseLinear)
    assert fn(1.5) == pytest.approx(4000.0)


def test_out_of_service_branch_dropped():
    text = TWO_BUS.replace(
        "mpc.branch = [\n",
        "mpc.branch = [\n    1  2  0.02  0.2  0  100  100  100  0  0  0  -60  60;\n"
        "    2  1  0.03  0.3  0  100  100  100  0  0  1  -60  60;\n")
    raw = parse_matpower(text)
    assert len(raw.branch_table) == 3
    g = to_grid(raw)
    assert g.n_ac == 2
    assert [br.label for br in g.ac_branches] == [2, 3]


def test_islanded_bus():
    text = TWO_BUS.replace("1  1.0  0  230  1  1.05  0.95;\n];",
                           "1  1.0  0  230  1  1.05  0.95;\n    3  1  0  0  0  0  1  1.0  0  230  1  1.05  0.95;\n];")
    with pytest.raises(IslandedBus):
        to_grid(parse_matpower(text))


def test_negative_resistance():
    with pytest.raises(NegativeResistance):
        to_grid(parse_matpower(TWO_BUS.replace("1  2  0.01", "1  2  -0.01")))


def test_bus_ids_renumbered():
    text = TWO_BUS.replace("    1  3", "    10  3").replace("    2  1  100", "    20  1  100")
    text = text.replace("    1  0  0  50", "    10  0  0  50").replace("    1  2  0.01", "    10  20  0.01")
    g = to_grid(parse_matpower(text))
    assert [b.label for b in g.buses] == [10, 20]
    assert (g.ac_branches[0].from_bus, g.ac_branches[0].to_bus) == (0, 1)


def test_rating_sets_current_limit():
    g = to_grid(parse_matpower(TWO_BUS))
    assert g.ac_branches[0].i_max_from == pytest.approx(1.5)


def test_scale_all_powers():
    raw = parse_matpower(TWO_BUS)
    g1 = to_grid(raw)
    g2 = to_grid(scale_all_powers(raw, 2.0))
    assert g2.loads[0].region.p_min == pytest.approx(2 * g1.loads[0].region.p_min)
    assert g2.ac_branches[0].i_max_from == pytest.approx(2 * g1.ac_branches[0].i_max_from)
    assert g2.generators[0].capability.p_max == pytest.approx(2 * g1.generators[0].capability.p_max)


def test_case9_raw_round_trip():
    text = open(cases.__file__.replace("cases.py", "data/case9.m")).read()
    raw = parse_matpower(text)
    assert parse_raw_json(emit_raw_json(raw)) == raw
    assert len(raw.bus_table) == 9 and len(raw.branch_table) == 9


def test_case9_grid_round_trip():
    g = cases.case9()
    assert parse_json(emit_json(g)) == g


def test_empty_dc_list_in_json():
    doc = json.loads(emit_json(cases.triangle()))
    assert doc["dc_branches"] == []
    assert doc["schema"] == 1


def test_unknown_field_warns():
    doc = json.loads(emit_json(cases.two_bus()))
    doc["buses"][0]["colour"] = "red"
    with pytest.warns(UserWarning, match="colour"):
        g = parse_json(json.dumps(doc))
    assert g == cases.two_bus()


def test_schema_mismatch():
    doc = json.loads(emit_json(cases.two_bus()))
    doc["schema"] = 99
    with pytest.raises(SchemaVersionMismatch):
        parse_json(json.dumps(doc))


def test_polygon_and_pwl_round_trip():
    g = cases.two_bus()
    gen = replace(g.generators[0], capability=Polygon(((0, -1), (2, -1), (2, 1), (0, 1))),
                  cost=PiecewiseLinear(((0.0, 0.0), (1.0, 10.0), (2.0, 30.0))))
    g = replace(g, generators=(gen,) + g.generators[1:])
    assert parse_json(emit_json(g)) == g


def test_load_grid_formats(tmp_path):
    m = tmp_path / "tiny.m"
    m.write_text(TWO_BUS)
    g = load_grid(m)
    j = tmp_path / "tiny.json"
    j.write_text(emit_json(g))
    assert load_grid(j) == g
    assert load_grid(m, "matpower") == g


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 6), hybrid=st.booleans())
def test_json_round_trip_random(seed, n, hybrid):
    g = cases.random_grid(np.random.default_rng(seed), n, extra_edges=1, hybrid=hybrid)
    assert parse_json(emit_json(g)) == g


def test_raw_case_from_dict_identity():
    raw = parse_matpower(TWO_BUS)
    assert RawCase.from_dict(raw.to_dict()) == raw
