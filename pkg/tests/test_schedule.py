import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structsr.errors import NumericalDomainError, ParameterError, ShapeError
from structsr.schedule import make_linear_schedule


def cumprod_oracle(num_steps, beta_start, beta_end, t):
    """High-precision a_t via mpmath, independent of the implementation."""
    mp.mp.dps = 60
    bs, be = mp.mpf(repr(beta_start)), mp.mpf(repr(beta_end))
    prod = mp.mpf(1)
    for i in range(t):
        beta = bs + (be - bs) * i / (num_steps - 1)
        prod *= 1 - beta
    return mp.sqrt(prod)


class TestLinearSchedule:
    def test_a1_matches_high_precision_oracle(self, default_schedule):
        oracle = float(cumprod_oracle(1000, 1e-4, 0.02, 1))
        assert oracle == pytest.approx(0.99994999874993749609, abs=1e-18)
        assert default_schedule.a[0] == pytest.approx(oracle, abs=1e-13)
        assert default_schedule.a[0] > 0.999
        assert default_schedule.b[0] < 0.02

    def test_a1000_matches_oracle_and_is_small(self, default_schedule):
        oracle = float(cumprod_oracle(1000, 1e-4, 0.02, 1000))
        assert oracle == pytest.approx(0.006352818087570022, abs=1e-15)
        assert default_schedule.a[-1] == pytest.approx(oracle, rel=1e-10)
        assert default_schedule.a[-1] < 0.01

    def test_variance_preserving(self, default_schedule):
        s = default_schedule
        assert np.max(np.abs(s.a**2 + s.b**2 - 1.0)) < 1e-12

    def test_monotonicity(self, default_schedule):
        assert np.all(np.diff(default_schedule.a) < 0)
        assert np.all(np.diff(default_schedule.b) > 0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(num_steps=1),
            dict(beta_start=0.0),
            dict(beta_start=0.03, beta_end=0.02),
            dict(beta_end=1.0),
            dict(weight_mode="bogus"),
        ],
    )
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ParameterError):
            make_linear_schedule(**kwargs)

    @given(
        num_steps=st.integers(2, 64),
        beta_start=st.floats(1e-6, 0.01),
        spread=st.floats(0.0, 0.5),
    )
    @settings(max_examples=50, deadline=None)
    def test_invariants_hold_for_any_valid_schedule(self, num_steps, beta_start, spread):
        s = make_linear_schedule(num_steps, beta_start, min(0.9, beta_start * (1 + spread) + spread))
        assert np.max(np.abs(s.a**2 + s.b**2 - 1.0)) < 1e-12
        assert np.all(np.diff(s.a) < 0)
        assert np.all(np.diff(s.b) > 0)
        assert np.all((s.a > 0) & (s.a <= 1)) and np.all((s.b >= 0) & (s.b < 1))


class TestPerturbPredict:
    def test_zero_noise(self, default_schedule, rng):
        z0 = rng.standard_normal((4, 4))
        a, _ = default_schedule.coeffs(300)
        assert np.array_equal(default_schedule.perturb(z0, 300, np.zeros_like(z0)), a * z0)

    def test_zero_signal(self, default_schedule, rng):
        eps = rng.standard_normal((4, 4))
        _, b = default_schedule.coeffs(300)
        assert np.array_equal(default_schedule.perturb(np.zeros_like(eps), 300, eps), b * eps)

    @given(t=st.integers(1, 1000))
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, default_schedule, t):
        gen = np.random.default_rng(t)
        z0 = gen.standard_normal((3, 5))
        eps = gen.standard_normal((3, 5))
        zt = default_schedule.perturb(z0, t, eps)
        back = default_schedule.predict_x0(zt, t, eps)
        assert np.max(np.abs(back - z0)) < 1e-10

    def test_predict_with_zero_eps(self, default_schedule, rng):
        zt = rng.standard_normal((2, 2))
        a, _ = default_schedule.coeffs(10)
        assert np.allclose(default_schedule.predict_x0(zt, 10, np.zeros_like(zt)), zt / a)

    def test_shape_mismatch(self, default_schedule, rng):
        with pytest.raises(ShapeError):
            default_schedule.perturb(np.zeros((2, 2)), 10, np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            default_schedule.predict_x0(np.zeros((2, 2)), 10, np.zeros((3, 3)))

    def test_out_of_range_t(self, default_schedule):
        with pytest.raises(ParameterError):
            default_schedule.coeffs(0)
        with pytest.raises(ParameterError):
            default_schedule.coeffs(1001)

    def test_tiny_a_raises(self):
        s = make_linear_schedule(1000, 0.01, 0.7)
        assert s.a[-1] < 1e-8
        with pytest.raises(NumericalDomainError):
            s.predict_x0(np.zeros(3), 1000, np.zeros(3))


class TestRegTimestep:
    def test_range_and_mean(self, default_schedule):
        gen = np.random.default_rng(7)
        draws = np.array(
            [default_schedule.sample_reg_timestep(gen) for _ in range(100_000)]
        )
        assert draws.min() >= 20 and draws.max() <= 980
        # Uniform [20, 980] has mean 500 and sd 277.4; the sample mean over
        # 1e5 draws sits within 500 +- 10 with huge margin.
        assert abs(draws.mean() - 500.0) < 10.0

    def test_fixed_seed_reproduces_sequence(self, default_schedule):
        seq1 = [
            default_schedule.sample_reg_timestep(np.random.default_rng(3))
            for _ in range(1)
        ]
        gen_a = np.random.default_rng(99)
        gen_b = np.random.default_rng(99)
        a = [default_schedule.sample_reg_timestep(gen_a) for _ in range(1000)]
        b = [default_schedule.sample_reg_timestep(gen_b) for _ in range(1000)]
        assert a == b

    def test_scaled_bounds_for_short_schedule(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        assert s.reg_t_bounds() == (2, 98)

    def test_weight_modes(self, default_schedule):
        w = default_schedule.reg_weight(500, numel=12)
        _, b = default_schedule.coeffs(500)
        assert w == pytest.approx(1.0 / (12 * b))
        s_const = make_linear_schedule(weight_mode="constant")
        assert s_const.reg_weight(500, numel=12) == 1.0
