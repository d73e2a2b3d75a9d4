import pytest

from fsishape.config import load_config, parse_config
from fsishape.errors import ConfigError

from conftest import CONFIGS


def test_defaults():
    cfg = parse_config("")
    assert cfg.physics.nu == 1.0 and cfg.studies == []
    assert [s.name for s in cfg.functional_specs()] == ["ENERGY"]


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as ei:
        parse_config("geometry:\n  foo: 1\n")
    assert "geometry.foo" in str(ei.value.args[0])


def test_bad_expression_rejected():
    with pytest.raises(ConfigError) as ei:
        parse_config('physics:\n  f: ["x +", "0"]\n')
    assert "PARSE_ERROR" in ei.value.args[0] or "offset" in ei.value.args[0]


def test_bad_vector_length_rejected():
    with pytest.raises(ConfigError):
        parse_config('directions:\n  - name: V\n    field: ["x"]\n')


def test_bad_study_rejected():
    with pytest.raises(ConfigError):
        parse_config("studies:\n  - kind: MMS_STOKES\n    levels: [8, 16]\n")


def test_not_a_mapping():
    with pytest.raises(ConfigError):
        parse_config("- 1\n- 2\n")


@pytest.mark.parametrize("name", ["zero_load", "small_load", "oversized_load", "acceptance"])
def test_shipped_configs_parse(name):
    cfg, digest = load_config(CONFIGS / f"{name}.yaml")
    assert len(digest) == 64
    cfg.problem_data(), cfg.solver_settings(), cfg.geometry_config(), cfg.study_plans()


def test_custom_functional_and_directions():
    cfg, _ = load_config(CONFIGS / "small_load.yaml")
    specs = cfg.functional_specs()
    assert [s.name for s in specs] == ["ENERGY", "CUSTOM"] and specs[0].is_energy
    assert [n for n, _ in cfg.direction_fields()] == ["V1", "V2"]
