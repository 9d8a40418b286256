import dataclasses
import math

import numpy as np
import pytest

from relctr import autograd as ag
from relctr.debias import (ConfigError, DebiasConfig, debias_loss, debias_loss_scalar, fake_rsl_from_uniform,
                           inject_noise, make_negative, make_pairs, pairwise_loss_naive, sample_fake_rsl)
from relctr.synth import SearchSample

LN2 = math.log(2)
# log(1+e^0.075) + log(1+e^0.025) + ln 2, mpmath at 30 digits
EXAMPLE_THREE_GAPS = 2.13022262491226533823
# sum of log(1+e^-g) for g in (-0.3, 0, 0.2, 1.5), mpmath at 30 digits
NAIVE_FOUR_GAPS = 2.34705457239281667742


def sample(click=1, rsl=4, uid=0):
    return SearchSample(uid, 2, 3, 1, ("a", "b"), ("c",), rsl, (0.5, -1.25, 3.0), click=click, exposed=1)


class TestFakeRsl:
    def test_thresholds(self):
        assert [fake_rsl_from_uniform(u, 0.2, 0.6) for u in (0.1, 0.5, 0.9)] == [1, 2, 3]

    def test_boundaries(self):
        assert fake_rsl_from_uniform(0.2, 0.2, 0.6) == 2
        assert fake_rsl_from_uniform(0.6, 0.2, 0.6) == 3

    def test_degenerate_interval(self):
        u = np.random.default_rng(0).random(10_000)
        assert not np.any(fake_rsl_from_uniform(u, 0.4, 0.4) == 2)

    def test_invalid(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            sample_fake_rsl(0.6, 0.2, rng)
        with pytest.raises(ConfigError):
            sample_fake_rsl(0.3, 0.3, rng)

    def test_frequencies(self):
        draws = sample_fake_rsl(0.2, 0.6, np.random.default_rng(1), size=200_000)
        freq = np.bincount(draws, minlength=4)[1:] / draws.size
        np.testing.assert_allclose(freq, [0.2, 0.4, 0.4], atol=0.005)


class TestNoise:
    class Zeros:
        def standard_normal(self, shape):
            return np.zeros(shape)

    def test_zero_rng(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(inject_noise(x, self.Zeros()), x)

    def test_chi_square_mean(self):
        rng = np.random.default_rng(2)
        x = np.zeros((10_000, 16))
        d2 = ((inject_noise(x, rng) - x) ** 2).sum(axis=1)
        assert abs(d2.mean() - 16.0) < 0.5

    def test_same_seed(self):
        x = np.ones(8)
        a = inject_noise(x, np.random.default_rng(5))
        b = inject_noise(x, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()


class TestPairs:
    def test_one_to_one(self):
        batch = [sample() for _ in range(3)] + [sample(click=0), sample(rsl=3)] * 2 + [sample(click=0, rsl=2)]
        pairs = make_pairs(batch, DebiasConfig(), np.random.default_rng(0), dim=4)
        assert len(pairs) == 3

    def test_non_qualifying_skipped(self):
        assert make_negative(sample(rsl=3), DebiasConfig(), np.random.default_rng(0)) is None

    def test_alignment(self):
        pos = sample()
        pair = make_negative(pos, DebiasConfig(), np.random.default_rng(0), dim=8)
        neg = pair.negative
        assert neg.dense_features == pos.dense_features
        for f in dataclasses.fields(SearchSample):
            if f.name not in ("rsl", "click"):
                assert getattr(neg, f.name) == getattr(pos, f.name), f.name
        assert neg.rsl == pair.fake_rsl in (1, 2, 3)
        assert pair.noise.shape == (8,)

    def test_fake_rsl_distribution(self):
        rng = np.random.default_rng(9)
        cfg = DebiasConfig()
        pos = sample()
        fakes = np.array([make_negative(pos, cfg, rng).fake_rsl for _ in range(100_000)])
        freq = np.bincount(fakes, minlength=4)[1:] / fakes.size
        np.testing.assert_allclose(freq, [0.2, 0.4, 0.4], atol=0.006)


class TestNaiveLoss:
    def test_zero_gap(self):
        assert pairwise_loss_naive([0.3], [0.3]).item() == pytest.approx(LN2)
        assert pairwise_loss_naive([0.2] * 5, [0.2] * 5).item() == pytest.approx(5 * LN2)

    def test_large_gap(self):
        assert pairwise_loss_naive([60.0], [0.0]).item() < 1e-25

    def test_four_gaps(self):
        gaps = np.array([-0.3, 0.0, 0.2, 1.5])
        assert pairwise_loss_naive(gaps, np.zeros(4)).item() == pytest.approx(NAIVE_FOUR_GAPS, rel=1e-14)

    def test_strictly_decreasing(self):
        vals = [pairwise_loss_naive([g], [0.0]).item() for g in np.linspace(-2, 2, 41)]
        assert np.all(np.diff(vals) < 0)


class TestRefinedLoss:
    cfg = DebiasConfig()

    def test_three_gap_example(self):
        f_pos = np.full(3, 0.05)
        f_neg = f_pos - np.array([0.0, 0.05, 0.1])
        got = debias_loss(f_pos, f_neg, self.cfg).item()
        assert got == pytest.approx(EXAMPLE_THREE_GAPS, rel=1e-12)
        assert debias_loss_scalar([0.0, 0.05, 0.1], 0.05, 0.075, 0.08) == pytest.approx(EXAMPLE_THREE_GAPS, rel=1e-12)

    def test_truncation(self):
        f_pos = ag.parameter(np.array([0.08, 0.10]))  # mean 0.09
        f_neg = ag.parameter(np.array([0.20, 0.00]))
        loss = debias_loss(f_pos, f_neg, self.cfg)
        assert loss.item() == 0.0
        g = ag.backward(loss, [f_pos, f_neg])
        assert not g[f_pos].any() and not g[f_neg].any()

    def test_saturation_at_margin(self):
        f_pos = ag.parameter(np.array([0.075]))
        f_neg = ag.parameter(np.array([0.0]))
        loss = debias_loss(f_pos, f_neg, self.cfg)
        assert loss.item() == pytest.approx(LN2)
        g = ag.backward(loss, [f_pos, f_neg])
        assert g[f_pos][0] == 0.0 and g[f_neg][0] == 0.0

    def test_gradient_sign_below_margin(self):
        f_pos = ag.parameter(np.array([0.05]))
        f_neg = ag.parameter(np.array([0.0]))
        g = ag.backward(debias_loss(f_pos, f_neg, self.cfg), [f_pos])
        assert g[f_pos][0] < 0

    def test_empty_and_disabled(self):
        assert debias_loss(np.zeros(0), np.zeros(0), self.cfg).item() == 0.0
        assert debias_loss([0.01], [0.5], dataclasses.replace(self.cfg, enabled=False)).item() == 0.0

    def test_weight(self):
        cfg = dataclasses.replace(self.cfg, w=2.5)
        assert debias_loss([0.01], [0.01], cfg).item() == pytest.approx(2.5 * math.log1p(math.exp(0.075)))

    def test_naive_variant_ignores_truncation(self):
        cfg = dataclasses.replace(self.cfg, naive=True)
        assert debias_loss([0.5], [0.5], cfg).item() == pytest.approx(LN2)

    def test_gradcheck(self):
        rng = np.random.default_rng(0)
        f_pos = ag.parameter(rng.random(6) * 0.1)
        f_neg = ag.parameter(rng.random(6) * 0.1)
        assert ag.gradcheck(lambda: debias_loss(f_pos, f_neg, self.cfg), [f_pos, f_neg]) <= 1e-4
        assert ag.gradcheck(lambda: pairwise_loss_naive(f_pos, f_neg), [f_pos, f_neg]) <= 1e-4


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(p1=0.6, p2=0.2), dict(p1=0.0), dict(margin=0.0), dict(threshold=1.0),
                                    dict(w=-1.0), dict(noise_side="both")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DebiasConfig(**kw).validate()

    def test_defaults_valid(self):
        DebiasConfig().validate()
