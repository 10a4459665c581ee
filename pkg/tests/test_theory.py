import numpy as np
import pytest

from chromaphase import theory
from chromaphase.theory import SdeConfig
from chromaphase.util import ChromaphaseError, rng_stream


def test_config_validation():
    with pytest.raises(ChromaphaseError):
        SdeConfig(1.0, steps=5)
    with pytest.raises(ChromaphaseError):
        SdeConfig(1.0, paths=10)
    with pytest.raises(ChromaphaseError):
        SdeConfig(1.0, dim=0)
    with pytest.raises(ChromaphaseError):
        SdeConfig(1.0, times=(0.5, 1.5))


def test_gamma_integrates_beta():
    assert np.isclose(SdeConfig(2.0).gamma(0.5), np.exp(-1.0))

    def ramp(t):
        return 4 * t

    cfg = SdeConfig(ramp)
    assert cfg.beta_name == "ramp"
    assert np.isclose(cfg.gamma(1.0), np.exp(-2.0))


def test_paths_are_thread_independent():
    cfg = SdeConfig(2.0, steps=20, paths=600, dim=3, seed=4)
    start = theory.gaussian_start(np.ones(3))
    one = theory.simulate_forward_paths(start, cfg, threads=1)
    four = theory.simulate_forward_paths(start, cfg, threads=4)
    assert one.samples.shape == (3, 600, 3)
    assert np.array_equal(one.samples, four.samples)


def test_closed_form_matches_stepwise_recursion():
    cfg = SdeConfig(3.0, steps=10, paths=100, dim=2, seed=1, times=(1.0,))
    moments = theory.simulate_forward_paths(theory.constant_start([1.0, -2.0]), cfg)
    dt = 1.0 / cfg.steps
    for path in (0, 57, 99):
        rng = rng_stream(cfg.seed, path)
        y = np.array([1.0, -2.0])
        z = rng.standard_normal((cfg.steps, cfg.dim))
        for n in range(cfg.steps):
            y = y - 0.5 * 3.0 * y * dt + np.sqrt(3.0 * dt) * z[n]
        assert np.allclose(moments.samples[0, path], y, rtol=1e-12, atol=1e-12)


def test_time_zero_is_the_start():
    cfg = SdeConfig(1.0, steps=10, paths=100, dim=2, times=(0.0,))
    moments = theory.simulate_forward_paths(theory.constant_start([3.0, 4.0]), cfg)
    assert np.all(moments.samples[0] == [3.0, 4.0])


def test_coarse_step_warning(capsys):
    theory.simulate_forward_paths(theory.constant_start(np.zeros(1)), SdeConfig(200.0, steps=10, paths=100, dim=1))
    assert "too coarse" in capsys.readouterr().err


def test_lemma_mean_small_run():
    report = theory.check_lemma_mean(SdeConfig(2.0, steps=100, paths=4000, dim=4, seed=2), mu0=np.full(4, 10.0))
    assert report["check"] == "lemmaMean"
    assert report["passed"]
    assert [entry["t"] for entry in report["entries"]] == list(theory.DEFAULT_TIMES)


def test_lemma_mean_from_origin():
    report = theory.check_lemma_mean(SdeConfig(2.0, steps=50, paths=2000, dim=4, seed=3), mu0=np.zeros(4))
    assert all(entry["relativeError"] is None for entry in report["entries"])


def test_centered_process_small_run():
    report = theory.check_centered_process(SdeConfig(0.5, steps=50, paths=3000, dim=4, seed=5))
    assert report["passed"]
    for entry in report["entries"]:
        assert entry["traceGap"] <= 3 * entry["traceStandardError"]


def test_moment_identity():
    rng = rng_stream(0, 0)
    report = theory.check_moment_identity(rng.uniform(-10, 10, 5) + rng.standard_normal((64, 5)))
    assert report["passed"]
    assert report["centeringHelps"]
    assert report["centeredMoment"] < report["rawMoment"]
    with pytest.raises(ChromaphaseError):
        theory.check_moment_identity(np.zeros((0, 3)))


def test_moment_identity_with_zero_mean_data():
    report = theory.check_moment_identity(np.zeros((4, 3)))
    assert report["passed"]
    assert report["relativeError"] == 0.0


def test_verify_theory_report_layout():
    report = theory.verify_theory(betas=(1.0,), paths=500, steps=20, dim=2, datasets=2)
    kinds = [check["check"] for check in report["checks"]]
    assert kinds == ["lemmaMean", "centeredProcess", "momentIdentity", "momentIdentity"]
    assert report["passed"] == all(check["passed"] for check in report["checks"])


@pytest.mark.slow
def test_verify_theory_full():
    report = theory.verify_theory()
    assert report["passed"]
