import numpy as np
import pytest

from axisforge.config import RunConfig
from axisforge.diffusion import make_schedule, sampling_timesteps
from axisforge.oracle import (
    OracleReport, OracleResult, check_ddim_gaussian, check_geometry_round_trip,
    check_orthogonality_residuals, cmd_oracle, gaussian_chain_moments, oracle_suite,
)


def test_suite_names():
    assert set(oracle_suite(RunConfig())) == {
        "geometry_round_trip", "orthogonality_residual", "raster_path", "ddim_gaussian",
        "gaussian_vjp", "extraction_vjp", "guidance_gradient", "rho_zero", "mlp_gradient",
        "schedule",
    }


def test_fast_checks_pass():
    report = cmd_oracle(RunConfig(), only=[
        "gaussian_vjp", "extraction_vjp", "guidance_gradient", "rho_zero", "mlp_gradient",
        "schedule",
    ])
    assert report.passed, report.format()
    assert {r.name for r in report.results} == {
        "gaussian_vjp_rel", "extraction_vjp_rel", "guidance_gradient_rel",
        "rho_zero_bitexact", "mlp_gradient_rel", "schedule_monotone",
    }


def test_geometry_round_trip():
    results = check_geometry_round_trip(np.random.default_rng(0), 100)
    assert all(r.passed for r in results), results


def test_omega_canary_is_caught():
    rng = np.random.default_rng(1)
    assert check_orthogonality_residuals(rng, 20)[0].passed
    broken = check_orthogonality_residuals(rng, 20, omega_perturbation=1e-3)[0]
    assert not broken.passed
    assert broken.to_record()["measured"] is None

    report = cmd_oracle(RunConfig(), only=["orthogonality_residual"], omega_perturbation=1e-3)
    assert not report.passed
    assert len(report.failures) == 1


def test_chain_moments_collapse_to_the_data():
    sched = make_schedule(1000, 1e-4, 0.02)
    mean, var = gaussian_chain_moments(sched, sampling_timesteps(sched, 1000), 2.0, 0.25,
                                       x_mean=0.0, x_var=1.0)
    assert abs(var - 0.25) < 0.0125
    assert abs(mean - 2.0) < 0.05


def test_ddim_gaussian():
    results = check_ddim_gaussian(np.random.default_rng(2))
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_unknown_oracle():
    with pytest.raises(ValueError):
        cmd_oracle(RunConfig(), only=["nonsense"])


def test_report_format():
    report = OracleReport([OracleResult("a", 1.0, 0.5, True), OracleResult("b", 1.0, 2.0, False)])
    assert not report.passed
    assert [r.name for r in report.failures] == ["b"]
    lines = report.format().splitlines()
    assert len(lines) == 3
    assert lines[1].endswith("pass") and lines[2].endswith("FAIL")
    assert report.to_records()[0]["measured"] == 0.5


@pytest.mark.slow
def test_quick_suite_passes():
    report = cmd_oracle(RunConfig(), quick=True)
    assert report.passed, report.format()
