from __future__ import annotations

import math

import pytest

from orchardmap.config import ConfigError, PipelineConfig


def test_defaults_map_onto_module_params():
    cfg = PipelineConfig()
    assert cfg.window_spec().stride == 8.0
    assert cfg.encoder_params().resolution == 128
    assert cfg.csf_params().class_threshold == 0.1
    assert cfg.graph_params().heading_tolerance == pytest.approx(math.radians(15))


def test_yaml_round_trip(tmp_path):
    cfg = PipelineConfig.from_dict({"seed": 3, "encoder": {"resolution": 64}, "graph": {"lane_offset_m": 1.2}})
    cfg.dump(tmp_path / "c.yaml")
    assert PipelineConfig.load(tmp_path / "c.yaml") == cfg


@pytest.mark.parametrize("bad", [{"colour": 1}, {"csf": {"stiffness": 2}}, {"window": 3}])
def test_unknown_or_misshapen_keys_rejected(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)


def test_overrides_beat_file_values():
    cfg = PipelineConfig.from_dict({"csf": {"resolution_m": 0.5}})
    out = cfg.override(["csf.resolution_m=0.25", "detector.kind=external", "eval.use_3d=true", "seed=9"])
    assert out.csf.resolution_m == 0.25
    assert out.detector.kind == "external"
    assert out.eval.use_3d is True
    assert out.seed == 9
    assert cfg.csf.resolution_m == 0.5


@pytest.mark.parametrize("item", ["csf.iterations=many", "nokey", "csf.resolution_m=true"])
def test_bad_override(item):
    with pytest.raises(ConfigError):
        PipelineConfig().override([item])


def test_validation_catches_module_constraints():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"csf": {"rigidness": 7}}).validate()
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"detector": {"kind": "external"}}).validate()
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"detector": {"kind": "cnn"}}).validate()


def test_integer_valued_float_accepted_for_int_field():
    assert PipelineConfig.from_dict({"csf": {"iterations": 200.0}}).csf.iterations == 200


def test_top_level_must_be_mapping(tmp_path):
    (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "c.yaml")
