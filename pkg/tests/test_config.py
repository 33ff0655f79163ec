import json

import pytest

from turnpike_lab.config import load_config, parse_config
from turnpike_lab.errors import SchemaError, ValidationError

MINIMAL = {"problem": {"type": "heat-1d", "n": 15, "target": {"kind": "feasible"}}, "horizons": [1, 2, 4]}


def _cfg(**top):
    doc = json.loads(json.dumps(MINIMAL))
    problem = top.pop("problem", None)
    if problem is not None:
        doc["problem"].update(problem)
    doc.update(top)
    return json.dumps(doc)


def test_minimal_config_defaults():
    cfg = parse_config(_cfg())
    assert cfg.problem["dt"] == 0.02
    assert cfg.solver["tolerance"] == 1e-8
    assert cfg.seed == 0
    assert cfg.epsilons == [0.1] and cfg.epsilon_mode == "relative"
    assert cfg.storage == {"kind": "multiplier"} and cfg.supply == {"kind": "shifted-cost"}
    assert (cfg.problem["lower"], cfg.problem["upper"]) == (-1.0, 1.0)
    assert cfg.horizons == [1.0, 2.0, 4.0]
    assert cfg.dynamic and cfg.kind == "heat-1d"


def test_typo_key_rejected_with_pointer():
    text = _cfg(epslions=[0.1])
    with pytest.raises(SchemaError) as exc:
        parse_config(text)
    assert "epslions" in str(exc.value)
    assert exc.value.path == "/epslions"


def test_nested_unknown_key_pointer():
    with pytest.raises(SchemaError) as exc:
        parse_config(_cfg(problem={"nn": 3}))
    assert exc.value.path == "/problem/nn"


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"horizons": "1"}, "/horizons"),
        ({"solver": {"tolerance": "tight"}}, "/solver/tolerance"),
        ({"storage": {"kind": "cubic"}}, "/storage/kind"),
        ({"problem": {"n": 0}}, "/problem/n"),
    ],
)
def test_type_errors_carry_path(doc, path):
    with pytest.raises(SchemaError) as exc:
        parse_config(_cfg(**doc))
    assert exc.value.path == path


def test_malformed_json():
    with pytest.raises(SchemaError):
        parse_config("{not json")


def test_empty_horizons():
    with pytest.raises(ValidationError, match="horizons must be nonempty") as exc:
        parse_config(_cfg(horizons=[]))
    assert exc.value.field == "horizons"


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"horizons": [2, 1]}, "horizons"),
        ({"horizons": [0, 1]}, "horizons"),
        ({"horizons": [1.01]}, "horizons"),
        ({"epsilons": [-0.1]}, "epsilons"),
        ({"problem": {"lower": 2.0}}, "problem/lower"),
        ({"problem": {"support": [16]}}, "problem/support"),
        ({"problem": {"target": {"kind": "values", "values": [1.0, 2.0]}}}, "problem/target"),
        ({"storage": {"kind": "half-norm"}}, "storage/kind"),
    ],
)
def test_validation_errors(doc, field):
    with pytest.raises(ValidationError) as exc:
        parse_config(_cfg(**doc))
    assert exc.value.field == field


def test_finite_dim_dimension_checks():
    doc = {"problem": {"type": "finite-dim", "A": [[-1.0, 0.0], [0.0, -2.0]], "B": [[1.0]], "target": [0.0, 0.0]}, "horizons": [1]}
    with pytest.raises(ValidationError, match="rows"):
        parse_config(json.dumps(doc))
    doc["problem"]["B"] = [[1.0], [0.0]]
    cfg = parse_config(json.dumps(doc))
    assert cfg.problem["y0"] is None


def test_semilinear_needs_no_horizons():
    cfg = parse_config(json.dumps({"problem": {"type": "semilinear-static", "n": 5, "target": {"kind": "zero"}}}))
    assert not cfg.dynamic
    assert cfg.problem["radius"] == 0.1


def test_round_trip_and_replace(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(_cfg(seed=7))
    cfg = load_config(path)
    again = parse_config(json.dumps(cfg.to_dict()))
    assert again.to_dict() == cfg.to_dict()
    other = cfg.replace(seed=9)
    assert (other.seed, cfg.seed) == (9, 7)


@pytest.mark.parametrize("name", ["heat_sweep.json", "semilinear.json", "trivial.json"])
def test_shipped_configs_parse(name):
    import pathlib

    load_config(pathlib.Path(__file__).parents[1] / "configs" / name)
