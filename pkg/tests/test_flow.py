import numpy as np
import pytest

from adamoe.errors import ConfigError, DimensionError, NumericalError
from adamoe.flow import FlowSample, IntegrationConfig, fm_loss, integrate, make_flow_sample
from adamoe.tensor import Tensor


def test_sample_endpoints():
    rng = np.random.default_rng(0)
    clean = rng.normal(size=(5, 3))
    s0 = make_flow_sample(clean, rng, tau=0.0)
    np.testing.assert_array_equal(s0.noisy, clean)
    s1 = make_flow_sample(clean, rng, tau=1.0)
    np.testing.assert_array_equal(s1.noisy, s1.noise)


def test_sample_midpoint_zero_clean():
    rng = np.random.default_rng(1)
    s = make_flow_sample(np.zeros((4, 2)), rng, tau=0.5)
    np.testing.assert_allclose(s.noisy, s.noise / 2, atol=1e-15)


def test_sample_invariants_hold_over_many_draws():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        clean = rng.normal(size=(2, 3))
        s = make_flow_sample(clean, rng)
        assert 0.0 <= s.tau < 1.0
        np.testing.assert_allclose(s.noisy, (1 - s.tau) * s.clean + s.tau * s.noise, atol=1e-12)
        np.testing.assert_array_equal(s.target, s.noise - s.clean)


def test_fm_loss_identity_and_offset():
    rng = np.random.default_rng(3)
    s = make_flow_sample(rng.normal(size=(6, 3)), rng)
    assert fm_loss(Tensor(s.target), s).item() == 0.0
    assert abs(fm_loss(Tensor(s.target + 1.0), s).item() - 1.0) <= 1e-12


def test_fm_loss_matches_mean_of_squares_oracle():
    rng = np.random.default_rng(4)
    s = make_flow_sample(rng.normal(size=(6, 3)), rng)
    pred = rng.normal(size=(6, 3))
    # independent oracle: accumulate squared differences elementwise
    total = 0.0
    count = 0
    for i in range(6):
        for j in range(3):
            total += (pred[i, j] - s.target[i, j]) ** 2
            count += 1
    assert abs(fm_loss(Tensor(pred), s).item() - total / count) <= 1e-12


def test_fm_loss_nonnegative_zero_iff_equal():
    rng = np.random.default_rng(5)
    s = make_flow_sample(rng.normal(size=(3, 2)), rng)
    assert fm_loss(Tensor(s.target + 1e-9), s).item() > 0.0


def test_fm_loss_shape_mismatch():
    rng = np.random.default_rng(6)
    s = make_flow_sample(rng.normal(size=(3, 2)), rng)
    with pytest.raises(DimensionError):
        fm_loss(Tensor(np.zeros((2, 3))), s)


def test_integrate_zero_field_is_identity():
    start = np.random.default_rng(7).normal(size=(5, 3))
    out = integrate(lambda a, o, t: np.zeros_like(a), None, start, IntegrationConfig(8))
    np.testing.assert_array_equal(out, start)


@pytest.mark.parametrize("n_steps", [1, 10, 100])
def test_integrate_exact_on_analytic_target_field(n_steps):
    # the true field noise - clean is constant along the straight path,
    # so Euler from the noise endpoint lands on clean exactly for any N
    rng = np.random.default_rng(8)
    clean = rng.normal(size=(50, 3))
    noise = rng.normal(size=(50, 3))
    field = noise - clean
    out = integrate(lambda a, o, t: field, None, noise, IntegrationConfig(n_steps))
    assert np.abs(out - clean).max() <= 1e-12


def test_integrate_single_step_unrolls():
    rng = np.random.default_rng(9)
    start = rng.normal(size=(4, 2))
    v = rng.normal(size=(4, 2))
    out = integrate(lambda a, o, t: v, None, start, IntegrationConfig(1))
    np.testing.assert_allclose(out, start - v, atol=1e-15)


def test_integrate_visits_expected_taus():
    taus = []
    integrate(lambda a, o, t: (taus.append(t), np.zeros_like(a))[1], None,
              np.zeros((2, 2)), IntegrationConfig(4))
    np.testing.assert_allclose(taus, [1.0, 0.75, 0.5, 0.25], atol=1e-15)


def test_integrate_rejects_nonfinite_velocity():
    with pytest.raises(NumericalError, match="step 2"):
        integrate(lambda a, o, t: np.full_like(a, np.nan) if t < 0.6 else np.zeros_like(a),
                  None, np.zeros((2, 2)), IntegrationConfig(4))


def test_integration_config_validation():
    with pytest.raises(ConfigError):
        IntegrationConfig(0)
    assert IntegrationConfig(10).d_tau == 0.1
