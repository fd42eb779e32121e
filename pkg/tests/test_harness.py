import json
import math

import numpy as np
import pytest

import oracles
from branchsim.harness import (ANCHORS, CHECKS, ValidationError, eval_expression,
                               export_results, parse_spec, run_experiment, verify_suite)
from branchsim.io import canonical_json, csv_text, table_csv
from branchsim.picard import SemigroupTable


def spec_dict(**sections):
    base = {
        "base_process": {"kind": "single_site"},
        "killing": {"c": 1.0},
        "branching": {"q": [0.0, 0.0, 1.0]},
        "monte_carlo": {"master_seed": 17, "replicas": 4000},
        "experiment": {"t": 1.0, "initial": [0], "f": 1.0},
    }
    for k, v in sections.items():
        base[k] = {**base.get(k, {}), **v}
    return base


def test_time_zero_bundle_is_exact():
    spec = parse_spec(spec_dict(experiment={"t": 0.0, "initial": [0, 0], "f": 0.5}))
    b = run_experiment(spec, "simulate")
    est = b.estimates[0]
    assert est["mean"] == pytest.approx(math.exp(-1.0), rel=1e-15) and est["stderr"] == 0


def test_binary_cumulant_table():
    spec = parse_spec(spec_dict(mesh={"dt": 1e-3}))
    V = run_experiment(spec, "cumulant").tables["V"]
    closed = np.array([-math.log(oracles.logistic_h(math.exp(-1.0), t)) for t in V.times])
    assert np.max(np.abs(V.values[:, 0] - closed)) < 1e-5


def test_rerun_and_seed_override(tmp_path):
    data = spec_dict()
    outs = []
    for i, seed in enumerate((None, None, 5)):
        spec = parse_spec(data, seed=seed, out_dir=tmp_path / str(i))
        export_results(run_experiment(spec, "simulate"), spec.out_dir, spec.formats)
        outs.append((tmp_path / str(i) / "replicas.csv").read_bytes())
    assert outs[0] == outs[1] and outs[0] != outs[2]


@pytest.mark.parametrize("patch,message", [
    ({"monte_carlo": {"replicas": 10}}, None),
    ({"branching": {"q": [0.7, 0.7]}}, "sum"),
    ({"base_process": {"kind": "hexagon"}}, "unknown kind"),
    ({"verify": {"checks": ["nonsense"]}}, "unknown checks"),
    ({"experiment": {"f": -1.0}}, ">= 0"),
    ({"experiment": {"initial": [3]}}, "outside"),
    ({"experiment": {"t": -1.0}}, "t must be"),
    ({"experiment": {"f": "__import__('os').system('true')"}}, None),
])
def test_validation_errors(patch, message):
    data = spec_dict(**patch)
    if "replicas" in patch.get("monte_carlo", {}):
        del data["monte_carlo"]["master_seed"]
        message = "master_seed"
    with pytest.raises(ValidationError) as err:
        parse_spec(data)
    if message:
        assert message in str(err.value)


def test_safe_expressions():
    x = np.linspace(0, 1, 5)
    assert np.allclose(eval_expression("1 + 0.5 * sin(x) ** 2", x), 1 + 0.5 * np.sin(x) ** 2)
    with pytest.raises(ValidationError):
        eval_expression("x.__class__", x)


def test_verify_examples():
    spec = parse_spec(spec_dict(experiment={"nu": []}))
    report = verify_suite(spec, ["mass", "moment", "branching"])
    assert report["passed"]
    by = {r["check"]: r for r in report["checks"]}
    assert by["mass"]["measured"] == pytest.approx(1.0, abs=1e-5)
    # e^{-beta1 t} e^{t} with beta1 = 2
    assert by["moment"]["reference"] == pytest.approx(math.exp(-1.0), rel=1e-6)
    assert abs(by["branching"]["statistic"]) <= 3
    for r in report["checks"]:
        assert r["anchor"] == ANCHORS[r["check"]] and r["anchor"]


def test_every_check_has_an_anchor():
    assert set(CHECKS) <= set(ANCHORS)


def test_io_examples():
    assert csv_text(["name", "mean"], []) == "name,mean\n"
    t = np.linspace(0, 1, 4)
    table = SemigroupTable(t, np.ones((4, 2)), "H_of_phi", None, {})
    assert len(table_csv(table).splitlines()) == 4 * 2 + 1
    obj = {"b": [1.5, float("inf")], "a": {"z": 1, "y": np.float64(0.1)}}
    text = canonical_json(obj)
    assert canonical_json(json.loads(text)) == text


def test_json_bundle_round_trips(tmp_path):
    spec = parse_spec(spec_dict(), out_dir=tmp_path, fmt="json")
    export_results(run_experiment(spec, "solve-h"), tmp_path, spec.formats)
    text = (tmp_path / "bundle.json").read_text()
    assert canonical_json(json.loads(text)) == text
