import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stacklqg.errors import DimensionError, ScenarioParseError
from stacklqg.integrators import MatrixPath, TimeGrid
from stacklqg.io import (dump_scenario, load_scenario, parse_scenario, read_matrix_path_csv,
                         spec_to_document, write_matrix_path_csv)
from stacklqg.problem import FIXTURES

SCALAR_DOC = """
dims: {n: 1, k: 1, d: 1, l: 1, m: 1, w: 1}
horizon: 1.0
matrices: {A: [[0]], B_F: [[1]], B_L: [[1]], D: [[1]], H1: [[1]], H2: [[1]]}
weights:
  Q_F: [[1]]
  Q_L: [[1]]
  R_FF: [[1]]
  R_LL: [[1]]
  R_LF: [[1]]
  G_F: [[0]]
  G_L: [[0]]
initial: {mean: [0], cov: [[1]]}
"""


def test_parse_scalar_document():
    spec = parse_scenario(SCALAR_DOC)
    assert tuple(spec.dims) == (1,) * 6
    assert spec.equals(FIXTURES["scalar"]().replace(name=""))


def test_missing_R_FL_defaults_to_zero():
    spec = parse_scenario(SCALAR_DOC)
    np.testing.assert_array_equal(spec.R_FL, np.zeros((1, 1)))


def test_shape_contradiction(debt_spec):
    doc = spec_to_document(debt_spec)
    doc["matrices"]["H2"] = [[1.0, 2.0, 3.0]]
    with pytest.raises((ScenarioParseError, DimensionError)) as exc:
        parse_scenario(json.dumps(doc))
    msg = str(exc.value)
    assert "H2" in msg and "(1, 3)" in msg and "(1, 2)" in msg


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.replace("horizon: 1.0\n", ""), "horizon"),
    (lambda d: d.replace("  Q_L: [[1]]\n", ""), "weights.Q_L"),
    (lambda d: d.replace("R_FF: [[1]]", "R_FF: [[oops]]"), "weights.R_FF"),
    (lambda d: d.replace("d: 1,", "d: -1,"), "dims.d"),
    (lambda d: d + "extra: 1\n", "extra"),
    (lambda d: d.replace("mean: [0]", "mean: [0, 1]"), "initial.mean"),
])
def test_schema_errors_name_field(mutate, field):
    with pytest.raises(ScenarioParseError) as exc:
        parse_scenario(mutate(SCALAR_DOC))
    assert exc.value.field == field
    assert field in str(exc.value)


def test_syntax_error_carries_line():
    with pytest.raises(ScenarioParseError) as exc:
        parse_scenario("dims: {n: 1\nhorizon: [1\n: :\n")
    assert exc.value.line is not None


def test_not_a_mapping():
    with pytest.raises(ScenarioParseError):
        parse_scenario("- 1\n- 2\n")


@pytest.mark.parametrize("name", sorted(FIXTURES))
@pytest.mark.parametrize("suffix", [".yaml", ".json"])
def test_roundtrip_bit_exact(tmp_path, name, suffix):
    spec = FIXTURES[name]()
    path = tmp_path / f"{name}{suffix}"
    dump_scenario(spec, path)
    again = load_scenario(path)
    assert again.equals(spec)
    if suffix == ".json":
        json.loads(path.read_text())


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4), finite)
def test_roundtrip_arbitrary_floats(vals, T):
    spec = FIXTURES["debt"]()
    spec = spec.replace(A=np.array(vals).reshape(2, 2), T=abs(T) + 1e-300)
    assert parse_scenario(dump_scenario(spec)).equals(spec.replace(name=spec.name))


def test_document_keys(debt_spec):
    doc = spec_to_document(debt_spec)
    assert set(doc) == {"dims", "horizon", "matrices", "weights", "initial", "name"}
    assert doc["dims"]["n"] == 2


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioParseError):
        load_scenario(tmp_path / "absent.yaml")


def test_matrix_path_csv_roundtrip(tmp_path, rng):
    g = TimeGrid(1.0, 7)
    vals = rng.standard_normal((8, 2, 3))
    write_matrix_path_csv(MatrixPath(g, vals), tmp_path / "m.csv", "K")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header.startswith("node,t,K_1_1,K_1_2")
    np.testing.assert_array_equal(read_matrix_path_csv(tmp_path / "m.csv"), vals)
