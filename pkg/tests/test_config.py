from pathlib import Path

import pytest

from axisforge.config import RunConfig, load_config
from axisforge.exceptions import ConfigError, IoError

CONFIGS = Path(__file__).resolve().parent.parent / "samples" / "configs"


def test_defaults():
    config = RunConfig()
    assert config.render.size == config.arch.size == 32
    assert config.schedule.T == 1000
    assert config.schedule.steps == 50
    assert config.eval.reproj_px == 15.0
    assert config.schedule.build().T == 1000


def test_record_round_trip():
    config = load_config(None, ["seeds.seed=11", "guidance.rho_base=0.5"])
    again = RunConfig.from_record(config.to_record())
    assert again == config
    assert again.to_record()["schema"] == 1


def test_overrides_parse_values():
    config = load_config(None, [
        "schedule.spacing=quad", "seeds.deterministic=true", "render.export_ppm=false",
        "opt.steps=12",
    ])
    assert config.schedule.spacing == "quad"
    assert config.seeds.deterministic is True
    assert config.render.export_ppm is False
    assert config.opt.steps == 12
    assert isinstance(config.opt.steps, int)


@pytest.mark.parametrize("item", [
    "seeds.colour=3",
    "paint.seed=3",
    "seed=3",
    "seeds.seed",
])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        load_config(None, [item])


def test_cross_section_checks():
    with pytest.raises(ConfigError):
        load_config(None, ["arch.size=16"])
    with pytest.raises(ConfigError):
        load_config(None, ["schedule.steps=2000"])
    with pytest.raises(ConfigError):
        load_config(None, ["render.depth_min=1.0"])
    with pytest.raises(ConfigError):
        load_config(None, ["guidance.rho_base=-1"])


def test_unknown_sections_and_schema():
    with pytest.raises(ConfigError):
        RunConfig.from_record({"schema": 1, "colours": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_record({"schema": 2})
    with pytest.raises(ConfigError):
        RunConfig.from_record({"seeds": {"seed": "many"}})
    with pytest.raises(ConfigError):
        RunConfig.from_record({"seeds": 3})


def test_sample_profiles_load():
    ci = load_config(CONFIGS / "ci.json")
    assert ci.render.size == ci.arch.size == 16
    assert ci.seeds.deterministic

    reference = load_config(CONFIGS / "reference.json")
    assert reference.render.size == 128
    assert reference.eval.thresholds(128).reproj_px == 15.0

    assert load_config(CONFIGS / "default.json") == RunConfig()


def test_reprojection_threshold_scales_with_size():
    config = RunConfig()
    assert config.eval.thresholds(128).reproj_px == 15.0
    assert config.eval.thresholds(32).reproj_px == pytest.approx(3.75)
    fixed = load_config(None, ["eval.scale_with_size=false"])
    assert fixed.eval.thresholds(32).reproj_px == 15.0


def test_missing_config_file(tmp_path):
    with pytest.raises(IoError):
        load_config(tmp_path / "absent.json")


@pytest.mark.parametrize("section, values", [
    ("opt", {"steps": 1.5}),
    ("seeds", {"deterministic": "false"}),
    ("seeds", {"deterministic": 1}),
    ("arch", {"hidden": True}),
    ("guidance", {"rho_base": False}),
    ("schedule", {"spacing": 3}),
])
def test_mistyped_values_are_rejected(section, values):
    with pytest.raises(ConfigError):
        RunConfig.from_record({section: values})


def test_ints_widen_to_float():
    config = RunConfig.from_record({"guidance": {"rho_base": 2}})
    assert config.guidance.rho_base == 2.0
    assert isinstance(config.guidance.rho_base, float)
    with pytest.raises(ConfigError):
        load_config(None, ["opt.steps=12.5"])


def test_sampler_noise_scale_range():
    assert load_config(None, ["schedule.sigma=1"]).schedule.sigma == 1.0
    with pytest.raises(ConfigError):
        load_config(None, ["schedule.sigma=1.5"])
