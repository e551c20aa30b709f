import pytest

from tinymetafed.config import ConfigError, ExperimentConfig, validate_config
from tinymetafed.harness import builtin_config


def test_defaults_are_clean():
    assert not ExperimentConfig().check()


@pytest.mark.parametrize("name", ["sine", "synthetic_class"])
def test_bundled_configs_validate(name):
    report = validate_config(builtin_config(name))
    assert report.ok, report.lines()
    assert not report.warnings


def test_bundled_sine_equals_defaults():
    assert ExperimentConfig.load(builtin_config("sine")) == ExperimentConfig()


def test_text_round_trip():
    cfg = ExperimentConfig(seed=3, layers=(1, 8, 1), top_p=12.5, retain_local=True)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    assert cfg.digest() != ExperimentConfig().digest()


def test_top_p_out_of_range_is_an_error():
    report = ExperimentConfig(top_p=150).check()
    assert not report.ok
    assert any("top_p" in e for e in report.errors)


def test_unusual_beta_warns_only():
    report = ExperimentConfig(beta=0.05).check()
    assert report.ok and any("beta" in w for w in report.warnings)
    assert ExperimentConfig(top_p=5).check().warnings
    assert not ExperimentConfig(top_p=100).check()


@pytest.mark.parametrize("change", [
    {"support_size": 0}, {"query_size": 17}, {"algorithm": "maml"}, {"family": "omniglot"},
    {"layers": (2, 4, 1)}, {"partition": "local_layers=[9]"}, {"eta_max": 1.5}, {"eta_min": 0.8, "eta_max": 0.5},
    {"k": 0}, {"rounds": -1}, {"schedule": "linear"},
])
def test_hard_errors(change):
    with pytest.raises(ConfigError):
        ExperimentConfig(**change).validated()


def test_parse_errors_carry_file_and_line(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nseed = 1\n\n[federated]\ntop_pp = 5\nk = five\n[task]\nbeta = 0.1\n")
    report = validate_config(path)
    assert not report.ok
    text = "\n".join(report.errors)
    assert f"{path}:5" in text and "unknown key" in text
    assert f"{path}:6" in text
    assert "belongs in [federated]" in text


def test_range_problem_in_file(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text("[federated]\ntop_p = 150\n")
    assert not validate_config(path).ok
    path.write_text("[federated]\nbeta = 0.05\n")
    r = validate_config(path)
    assert r.ok and r.warnings


def test_baselines_run_all_global():
    cfg = ExperimentConfig(algorithm="tinyreptile")
    assert cfg.partition_for().local_count == 0
    assert ExperimentConfig().partition_for().local_count == 17
