import math

import numpy as np
import pytest

from magdrop_lab.errors import ConfigError, StateError
from magdrop_lab.regularizers import (AGR, FixedDropout, MagDrop, MagDropState, NoRegularizer,
                                      agr_penalty, build_regularizer, fixed_dropout_apply,
                                      magdrop_apply, magdrop_rate, magdrop_update_momentum)


def band(p, n):
    return 3.0 * math.sqrt(p * (1.0 - p) / n)


class TestMomentum:
    def test_first_call_copies(self, rng):
        st = MagDropState()
        g = rng.normal(size=(4, 6))
        m = magdrop_update_momentum(st, 0, g)
        np.testing.assert_array_equal(m, g)
        g[0, 0] = 99.0
        assert m[0, 0] != 99.0

    def test_from_zero(self, rng):
        st = MagDropState(beta=0.9)
        st.momentum[1] = np.zeros((3, 2))
        g = rng.normal(size=(3, 2))
        np.testing.assert_allclose(magdrop_update_momentum(st, 1, g), 0.1 * g, rtol=1e-15, atol=0)

    def test_constant_gradient_is_fixed_point(self, rng):
        st = MagDropState()
        g = rng.normal(size=(5, 3, 2, 2))
        for _ in range(10):
            m = magdrop_update_momentum(st, 0, g)
        np.testing.assert_array_equal(m, g)

    def test_recurrence(self, rng):
        st = MagDropState(beta=0.8)
        gs = rng.normal(size=(6, 2, 3))
        ref = gs[0].copy()
        magdrop_update_momentum(st, 0, gs[0])
        for g in gs[1:]:
            ref = 0.8 * ref + 0.2 * g
            m = magdrop_update_momentum(st, 0, g)
        np.testing.assert_allclose(m, ref, rtol=1e-12)

    def test_shape_change_is_state_error(self):
        st = MagDropState()
        magdrop_update_momentum(st, 0, np.ones((2, 3)))
        with pytest.raises(StateError):
            magdrop_update_momentum(st, 0, np.ones((2, 4)))


class TestRate:
    def test_agreement_gives_half_p_base(self):
        st = MagDropState(p_base=0.3)
        g = np.tile([1.0, -2.0, 0.5], (4, 1))
        np.testing.assert_array_equal(magdrop_rate(st, g, g.copy()), np.full(4, 0.15))

    def test_saturation_approaches_p_base(self):
        st = MagDropState(p_base=0.3, tau=0.1)
        m = np.ones((3, 2))
        g = m + 1e3
        np.testing.assert_allclose(magdrop_rate(st, g, m), 0.3, rtol=1e-12)

    def test_clamp(self):
        st = MagDropState(p_base=0.3, tau=0.1)
        # ratio 3 for sample 0 against two zero-norm rows; saturated sigmoid => raw 0.9
        m = np.array([[1.0], [0.0], [0.0]])
        g = m + np.array([[1e3], [0.0], [0.0]])
        r = magdrop_rate(st, g, m)
        assert r[0] == 0.6
        assert r[1] == r[2] == 0.0

    def test_zero_momentum_gives_zero(self):
        st = MagDropState()
        r = magdrop_rate(st, np.ones((3, 4)), np.zeros((3, 4)))
        np.testing.assert_array_equal(r, np.zeros(3))

    def test_norms_flatten_non_batch_dims(self, rng):
        st = MagDropState()
        g = rng.normal(size=(3, 2, 4, 4))
        m = rng.normal(size=(3, 2, 4, 4))
        np.testing.assert_array_equal(magdrop_rate(st, g, m),
                                      magdrop_rate(st, g.reshape(3, -1), m.reshape(3, -1)))

    def test_matches_formula(self, rng):
        st = MagDropState(p_base=0.2, tau=0.5)
        g = rng.normal(size=(6, 5))
        m = rng.normal(size=(6, 5))
        mn = np.linalg.norm(m, axis=1)
        dn = np.linalg.norm(g - m, axis=1)
        ref = np.clip(0.2 * mn / mn.mean() / (1 + np.exp(-dn / 0.5)), 0, 0.6)
        np.testing.assert_allclose(magdrop_rate(st, g, m), ref, rtol=1e-13)

    def test_always_within_clamp(self, rng):
        st = MagDropState()
        for _ in range(200):
            n = int(rng.integers(1, 9))
            scale = 10.0 ** rng.uniform(-6, 6, size=(n, 1))
            r = magdrop_rate(st, rng.normal(size=(n, 7)) * scale, rng.normal(size=(n, 7)) * scale)
            assert np.all((r >= 0.0) & (r <= 0.6))

    def test_tau_must_be_positive(self):
        with pytest.raises(ConfigError):
            MagDropState(tau=0.0)
        st = MagDropState()
        st.tau = -1.0
        with pytest.raises(ConfigError):
            magdrop_rate(st, np.ones((2, 2)), np.ones((2, 2)))

    @pytest.mark.parametrize("kw", [{"p_base": 0.0}, {"p_base": 1.0}, {"beta": 1.0},
                                    {"clamp_max": 1.0}, {"beta": -0.1}])
    def test_parameter_domains(self, kw):
        with pytest.raises(ConfigError):
            MagDropState(**kw)


class TestApply:
    def test_zero_rate_is_identity(self, rng):
        st = MagDropState()
        a = rng.normal(size=(4, 5))
        out, d = magdrop_apply(st, a, np.zeros(4))
        np.testing.assert_array_equal(out, a)
        assert np.all(d.mask == 1.0) and d.scale == 1.0

    def test_keep_fraction_band(self):
        st = MagDropState(rng_seed=7)
        n = 100_000
        _, d = magdrop_apply(st, np.ones((10, n // 10)), np.full(10, 0.5))
        assert abs(d.mask.mean() - 0.5) <= band(0.5, n)
        assert set(np.unique(d.mask)) <= {0.0, 1.0}

    def test_uniform_rate_unbiased(self):
        st = MagDropState(rng_seed=3)
        a = np.linspace(-2, 2, 8).reshape(2, 4)
        acc = np.zeros_like(a)
        trials = 40_000
        for _ in range(trials // 1000):
            big = np.broadcast_to(a, (1000,) + a.shape).reshape(2000, 4)
            out, _ = magdrop_apply(st, big, np.full(2000, 0.4))
            acc += out.reshape(1000, 2, 4).sum(axis=0)
        mean = acc / trials
        # per-element std of a*mask/(1-p) is |a| sqrt(p/(1-p)); 5 sigma
        tol = 5 * np.abs(a) * math.sqrt(0.4 / 0.6) / math.sqrt(trials) + 1e-12
        assert np.all(np.abs(mean - a) <= tol)

    def test_per_sample_rates_broadcast(self):
        st = MagDropState(rng_seed=11)
        _, d = magdrop_apply(st, np.ones((2, 3, 100, 100)), np.array([0.1, 0.5]))
        n = 30_000
        assert abs(1 - d.mask[0].mean() - 0.1) <= band(0.1, n)
        assert abs(1 - d.mask[1].mean() - 0.5) <= band(0.5, n)
        assert d.scale == pytest.approx(0.7, abs=1e-15)

    def test_eval_mode_identity(self, rng):
        st = MagDropState()
        a = rng.normal(size=(3, 3))
        out, d = magdrop_apply(st, a, np.full(3, 0.5), training=False)
        assert out is a and d is None
        assert st.rate_trace == {}

    def test_layers_have_independent_streams(self):
        st = MagDropState(rng_seed=0)
        _, d0 = magdrop_apply(st, np.ones((4, 50)), np.full(4, 0.5), layer_index=1)
        _, d1 = magdrop_apply(st, np.ones((4, 50)), np.full(4, 0.5), layer_index=3)
        assert not np.array_equal(d0.mask, d1.mask)
        # draws on layer 3 never shift layer 1's stream
        a, b = MagDropState(rng_seed=0), MagDropState(rng_seed=0)
        magdrop_apply(a, np.ones((4, 50)), np.full(4, 0.5), layer_index=1)
        magdrop_apply(b, np.ones((4, 50)), np.full(4, 0.5), layer_index=3)
        magdrop_apply(b, np.ones((4, 50)), np.full(4, 0.5), layer_index=1)
        np.testing.assert_array_equal(a.rng(1).random(5), b.rng(1).random(5))

    def test_rate_trace_records_mean(self):
        st = MagDropState()
        magdrop_apply(st, np.ones((2, 2)), np.array([0.1, 0.3]), layer_index=2)
        assert st.rate_trace[2] == [pytest.approx(0.2, abs=1e-16)]


class TestFixedDropout:
    def test_zero_rate_identity(self, rng):
        a = rng.normal(size=(3, 4))
        out, d = fixed_dropout_apply(a, 0.0, seed=1)
        np.testing.assert_array_equal(out, a)

    def test_keep_fraction(self):
        _, d = fixed_dropout_apply(np.ones((100, 1000)), 0.3, seed=2)
        assert abs(d.mask.mean() - 0.7) <= band(0.3, 100_000)

    def test_expectation_preserved(self):
        a = np.full((200, 500), 2.5)
        out, _ = fixed_dropout_apply(a, 0.3, seed=4)
        # std of one element is 2.5 sqrt(0.3/0.7)
        assert abs(out.mean() - 2.5) <= 5 * 2.5 * math.sqrt(0.3 / 0.7) / math.sqrt(out.size)

    def test_eval_and_errors(self, rng):
        a = rng.normal(size=(2, 2))
        assert fixed_dropout_apply(a, 0.5, 0, training=False)[0] is a
        with pytest.raises(ConfigError):
            fixed_dropout_apply(a, 1.0, 0)


class TestAGR:
    def test_lambda_zero(self, rng):
        gs = [rng.normal(size=(3, 3)), rng.normal(size=5)]
        for a, b in zip(agr_penalty(gs, 0.0), gs):
            np.testing.assert_array_equal(a, b)

    def test_all_zero(self):
        out = agr_penalty([np.zeros(3), np.zeros((2, 2))])
        assert all(np.all(g == 0) and np.all(np.isfinite(g)) for g in out)

    def test_single_unit_norm(self):
        g = np.array([0.6, 0.8])
        np.testing.assert_allclose(agr_penalty([g], 0.01)[0], 1.01 * g, rtol=1e-15)

    def test_relative_norm(self):
        a, b = np.array([3.0, 4.0]), np.array([1.0, 0.0])  # norms 5 and 1, mean 3
        out = agr_penalty([a, b], 0.3)
        np.testing.assert_allclose(out[0], a * 1.5, rtol=1e-15)
        np.testing.assert_allclose(out[1], b * 1.1, rtol=1e-15)

    def test_adapter_leaves_biases(self):
        grads = [np.ones((2, 2)), np.ones(2), np.ones((2, 3)) * 2, np.ones(3)]
        out = AGR(0.5).transform_grads(grads)
        np.testing.assert_array_equal(out[1], grads[1])
        np.testing.assert_array_equal(out[3], grads[3])
        assert not np.array_equal(out[0], grads[0])


class TestAdapters:
    def test_magdrop_first_step_is_noop(self, rng):
        reg = MagDrop(seed=1)
        a = rng.normal(size=(4, 5))
        out, factor = reg.hook(1, a, None)
        assert out is a and factor is None
        assert reg.rate_trace == {}

    def test_magdrop_steady_state_rate(self):
        reg = MagDrop(p_base=0.3, seed=0)
        g = np.tile(np.arange(1.0, 6.0), (8, 1))
        for _ in range(5):
            reg.hook(1, np.ones((8, 5)), g)
        assert reg.rate_trace[1] == [0.15] * 5

    def test_magdrop_batch_mismatch(self):
        reg = MagDrop()
        with pytest.raises(StateError):
            reg.hook(1, np.ones((4, 2)), np.ones((3, 2)))

    def test_factor_matches_output(self, rng):
        reg = FixedDropout(0.4, seed=2)
        a = rng.normal(size=(6, 7))
        out, factor = reg.hook(1, a, None)
        np.testing.assert_array_equal(out, a * factor)
        assert reg.rate_trace[1] == [0.4]

    def test_none_records_zero(self):
        reg = NoRegularizer()
        reg.hook(1, np.ones((1, 1)), None)
        assert reg.rate_trace == {1: [0.0]}

    def test_build(self):
        assert build_regularizer({"kind": "none"}).name == "none"
        assert build_regularizer({"kind": "dropout", "p": 0.3}).p == 0.3
        assert build_regularizer({"kind": "agr", "lambda": 0.02}).lam == 0.02
        assert build_regularizer({"kind": "magdrop", "tau": 0.2}).state.tau == 0.2
        with pytest.raises(ConfigError):
            build_regularizer({"kind": "magdrop", "bogus": 1})
        with pytest.raises(ConfigError):
            build_regularizer({"kind": "dropconnect"})
