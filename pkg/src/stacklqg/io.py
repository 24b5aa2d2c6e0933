"""Scenario documents and plain-text exports.

A scenario is a YAML (or JSON) mapping::

    dims:    {n: 1, k: 1, d: 1, l: 1, m: 1, w: 1}
    horizon: 1.0
    matrices: {A: [[0]], B_F: [[1]], B_L: [[1]], D: [[1]], H1: [[1]], H2: [[1]]}
    weights:  {Q_F: ..., Q_L: ..., R_FF: ..., R_FL: ..., R_LL: ..., R_LF: ..., G_F: ..., G_L: ...}
    initial:  {mean: [0], cov: [[1]]}

Matrices are row-major nested lists.  Numbers are written with the shortest
representation that round-trips, so emit -> load reproduces a spec bit-exactly.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import yaml

from .errors import DimensionError, ScenarioParseError
from .problem import MATRIX_FIELDS, WEIGHT_FIELDS, ProblemSpec

TOP_KEYS = ("dims", "horizon", "matrices", "weights", "initial")
DIM_KEYS = ("n", "k", "d", "l", "m", "w")


def fmt(x) -> str:
    """Shortest round-trip decimal form of a float (at most 17 significant digits)."""
    return repr(float(x))


def _number(value, field):
    if isinstance(value, bool):
        raise ScenarioParseError(f"expected a number, got {value!r}", field=field)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        # YAML 1.1 reads exponents without a dot ("1e-3") as strings
        try:
            return float(value)
        except ValueError:
            pass
    raise ScenarioParseError(f"expected a number, got {value!r}", field=field)


def _matrix(value, field, shape):
    if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
        raise ScenarioParseError("expected a nested list (row-major matrix)", field=field)
    if not value and 0 in shape:
        return np.zeros(shape)
    rows = [[_number(v, field) for v in r] for r in value]
    if len({len(r) for r in rows}) > 1:
        raise ScenarioParseError("rows have different lengths", field=field)
    arr = np.array(rows, dtype=float).reshape(len(rows), len(rows[0]) if rows else 0)
    if arr.shape != shape:
        raise ScenarioParseError(f"shape {arr.shape} does not match dims {shape}", field=field)
    return arr


def _expected_shapes(dims):
    n, k, d, l, m, w = (dims[key] for key in DIM_KEYS)
    return {
        "A": (n, n), "B_F": (n, k), "B_L": (n, d), "D": (n, w), "H1": (l, n), "H2": (m, n),
        "Q_F": (n, n), "Q_L": (n, n), "G_F": (n, n), "G_L": (n, n),
        "R_FF": (k, k), "R_LF": (k, k), "R_LL": (d, d), "R_FL": (d, d),
    }


def document_to_spec(doc, name="") -> ProblemSpec:
    """Validate the schema of a parsed document and build a :class:`ProblemSpec`."""
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario must be a mapping with keys " + ", ".join(TOP_KEYS))
    for key in TOP_KEYS:
        if key not in doc:
            raise ScenarioParseError("missing required key", field=key)
    unknown = set(doc) - set(TOP_KEYS) - {"name"}
    if unknown:
        raise ScenarioParseError(f"unknown keys {sorted(unknown)}", field=sorted(unknown)[0])
    raw_dims = doc["dims"]
    if not isinstance(raw_dims, dict):
        raise ScenarioParseError("expected a mapping", field="dims")
    dims = {}
    for key in DIM_KEYS:
        if key not in raw_dims:
            raise ScenarioParseError("missing dimension", field=f"dims.{key}")
        v = raw_dims[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise ScenarioParseError(f"expected a non-negative integer, got {v!r}", field=f"dims.{key}")
        dims[key] = v
    shapes = _expected_shapes(dims)
    values = {}
    for section, keys in (("matrices", MATRIX_FIELDS), ("weights", WEIGHT_FIELDS)):
        block = doc[section]
        if not isinstance(block, dict):
            raise ScenarioParseError("expected a mapping", field=section)
        for key in keys:
            if key not in block:
                if key == "R_FL":
                    continue
                raise ScenarioParseError("missing matrix", field=f"{section}.{key}")
            values[key] = _matrix(block[key], f"{section}.{key}", shapes[key])
    T = _number(doc["horizon"], "horizon")
    init = doc["initial"]
    if not isinstance(init, dict) or "mean" not in init or "cov" not in init:
        raise ScenarioParseError("expected a mapping with 'mean' and 'cov'", field="initial")
    mean = init["mean"]
    if not isinstance(mean, list):
        raise ScenarioParseError("expected a list", field="initial.mean")
    mean = np.array([_number(v, "initial.mean") for v in mean])
    if mean.shape != (dims["n"],):
        raise ScenarioParseError(f"length {mean.size} does not match n={dims['n']}", field="initial.mean")
    cov = _matrix(init["cov"], "initial.cov", (dims["n"], dims["n"]))
    try:
        return ProblemSpec(T=T, x0_mean=mean, x0_cov=cov, name=str(doc.get("name", name)), **values)
    except DimensionError as exc:
        raise ScenarioParseError(str(exc), field=exc.name) from exc


def _rows(M):
    return [[float(v) for v in row] for row in np.asarray(M)]


def spec_to_document(spec: ProblemSpec) -> dict:
    dims = spec.dims._asdict()
    doc = {
        "dims": {k: int(v) for k, v in dims.items()},
        "horizon": float(spec.T),
        "matrices": {k: _rows(getattr(spec, k)) for k in MATRIX_FIELDS},
        "weights": {k: _rows(getattr(spec, k)) for k in WEIGHT_FIELDS},
        "initial": {"mean": [float(v) for v in spec.x0_mean], "cov": _rows(spec.x0_cov)},
    }
    if spec.name:
        doc["name"] = spec.name
    return doc


class _FloatDumper(yaml.SafeDumper):
    pass


def _repr_float(dumper, value):
    if math.isnan(value):
        text = ".nan"
    elif math.isinf(value):
        text = ".inf" if value > 0 else "-.inf"
    else:
        text = repr(value)
        if "e" in text and "." not in text:
            # keep YAML 1.1 readers from seeing a string
            mant, exp = text.split("e")
            text = f"{mant}.0e{exp}"
    return dumper.represent_scalar("tag:yaml.org,2002:float", text)


_FloatDumper.add_representer(float, _repr_float)


def dump_scenario(spec: ProblemSpec, path=None, fmt_name: str | None = None) -> str:
    """Serialize a spec.  Format follows the file suffix (``.json`` or YAML)."""
    doc = spec_to_document(spec)
    if fmt_name is None:
        fmt_name = "json" if path is not None and str(path).endswith(".json") else "yaml"
    if fmt_name == "json":
        text = json.dumps(doc, indent=2)
    else:
        text = yaml.dump(doc, Dumper=_FloatDumper, sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_scenario(text: str, name="") -> ProblemSpec:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioParseError(f"not a valid YAML/JSON document ({getattr(exc, 'problem', exc)})",
                                 line=line) from exc
    return document_to_spec(doc, name=name)


def load_scenario(path) -> ProblemSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario file {path}: {exc.strerror}") from exc
    return parse_scenario(text, name=path.stem)


def write_matrix_path_csv(path_obj, filename, name="M"):
    """Write a :class:`MatrixPath` as ``node,t,<row-major entries>`` rows."""
    values = path_obj.values
    t = path_obj.grid.nodes
    rows, cols = values.shape[1:]
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "t"] + [f"{name}_{i + 1}_{j + 1}" for i in range(rows) for j in range(cols)])
        for j, M in enumerate(values):
            w.writerow([j, fmt(t[j])] + [fmt(v) for v in M.ravel()])


def read_matrix_path_csv(filename) -> np.ndarray:
    """Inverse of :func:`write_matrix_path_csv`; returns the ``(N+1, rows, cols)`` values."""
    with open(filename, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row[2:]] for row in r])
    rows, cols = (int(v) for v in header[-1].rsplit("_", 2)[1:])
    return data.reshape(data.shape[0], rows, cols)


def write_json(obj, filename):
    Path(filename).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
