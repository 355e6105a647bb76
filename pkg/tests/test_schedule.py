import math

import numpy as np
import pytest

from smiso.exceptions import InvalidInputError
from smiso.schedule import (AveragingAccumulator, SamplingDist, StepSchedule, alpha_max_averaging,
                            alpha_max_composite, alpha_max_smooth, averaging_result,
                            averaging_update, eta_to_initial_step, q_default, theory_bound)


class TestBounds:
    def test_smooth(self):
        assert alpha_max_smooth(1, 1) == 0.5
        assert alpha_max_smooth(2, 11) == pytest.approx(2 / 42)
        assert alpha_max_smooth(10 ** 6, 2) == 0.5

    def test_averaging(self):
        assert alpha_max_averaging(1, 1) == 0.25
        assert alpha_max_averaging(2, 11) == pytest.approx(1 / 42)

    @pytest.mark.parametrize("n,kappa", [(1, 1), (5, 3.3), (100, 1e4), (10 ** 5, 1.5)])
    def test_averaging_tighter(self, n, kappa):
        assert alpha_max_averaging(n, kappa) <= alpha_max_smooth(n, kappa)

    def test_kappa_validated(self):
        with pytest.raises(InvalidInputError):
            alpha_max_smooth(3, 0.5)

    def test_composite_hand(self):
        q = SamplingDist.make_uniform(2)
        L = [1.1, 3.1]
        assert q.L_q(L, 0.1) == pytest.approx(3.0)
        assert alpha_max_composite(2, q, L, 0.1) == pytest.approx(1 / 60)

    def test_composite_uniform_branch(self):
        q = SamplingDist.make_uniform(4)
        # q_min = 1/n so the first branch is 1/2; tiny L makes it active
        assert alpha_max_composite(4, q, [0.1001] * 4, 0.1) == 0.5

    def test_composite_rejects_small_L(self):
        with pytest.raises(InvalidInputError):
            alpha_max_composite(2, SamplingDist.make_uniform(2), [0.05, 1.0], 0.1)


class TestSamplingDist:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            SamplingDist(np.array([0.5, 0.6]))
        with pytest.raises(InvalidInputError):
            SamplingDist(np.array([1.0, 0.0]))

    def test_q_default_hand(self):
        mu = 0.5
        q = q_default(np.array([1.0, 3.0]) + mu, mu)
        np.testing.assert_allclose(q.q, [0.375, 0.625], rtol=1e-15)

    def test_q_default_equal_is_uniform(self):
        q = q_default([2.0] * 5, 0.1)
        assert q.uniform
        np.testing.assert_array_equal(q.step_scale, np.ones(5))

    def test_q_default_degenerate(self):
        assert q_default([0.1] * 3, 0.1).uniform

    def test_sampling_frequencies(self):
        q = SamplingDist(np.array([0.1, 0.2, 0.7]))
        idx = q.sample(np.random.default_rng(0), 100_000)
        freq = np.bincount(idx, minlength=3) / idx.size
        np.testing.assert_allclose(freq, q.q, atol=0.006)

    def test_sigma_q_uniform(self):
        q = SamplingDist.make_uniform(4)
        s = np.array([1.0, 2.0, 3.0, 6.0])
        assert q.sigma_q_sq(s) == pytest.approx(s.mean())


class TestEtaMapping:
    def test_smiso(self):
        assert eta_to_initial_step("smiso", 1.0, 100, 1e-3, 1 + 1e-3) == pytest.approx(0.1)

    def test_sgd(self):
        assert eta_to_initial_step("sgd", 1.0, 100, 1e-3, 1.0) == 1.0

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            eta_to_initial_step("smiso", 0.0, 10, 0.1, 1.0)
        with pytest.raises(InvalidInputError):
            eta_to_initial_step("sgd", 1.0, 10, 0.1, 0.1)


class TestStepSchedule:
    def test_hand_switch(self):
        s = StepSchedule("smiso", n=100, mu=1e-3, alpha_bar=0.1, warmup_epochs=2)
        assert s.C == 200 and s.gamma == pytest.approx(1799)
        assert s.step_at(1) == 0.1 and s.step_at(200) == 0.1
        assert s.step_at(201) == pytest.approx(0.1, rel=1e-15)
        assert s.step_at(202) < 0.1

    def test_sgd_constant(self):
        s = StepSchedule("sgd", n=10, mu=0.5, alpha_bar=0.2, warmup_epochs=1)
        assert s.C == pytest.approx(4.0)
        assert s.step_at(11) == pytest.approx(0.2)

    def test_gamma_clamped(self):
        s = StepSchedule("smiso", n=10, mu=0.1, alpha_bar=1.0, warmup_epochs=2)
        assert s.gamma == 0.0 and s.warnings

    def test_theory_mode_caps(self):
        L = np.full(50, 1.1)
        s = StepSchedule.build("smiso", 50, 0.1, L, eta=10.0, mode="theory")
        assert s.alpha_bar == pytest.approx(alpha_max_smooth(50, 11.0))
        s = StepSchedule.build("sgd", 50, 0.1, L, eta=10.0, mode="theory")
        assert s.alpha_bar == pytest.approx(1 / 2.2)

    def test_tuned_warns(self):
        L = np.full(50, 1.1)
        s = StepSchedule.build("sgd", 50, 0.1, L, eta=10.0, mode="tuned")
        assert s.alpha_bar == pytest.approx(10 / 1.1)
        assert any("exceeds" in w for w in s.warnings)

    def test_weight_clamped_to_one(self):
        s = StepSchedule.build("smiso", 300, 0.01, np.full(300, 0.26), eta=1.0)
        assert s.alpha_bar == 1.0

    def test_nsaga_constant(self):
        s = StepSchedule("nsaga", n=5, mu=0.1, alpha_bar=0.3)
        assert s.step_at(10 ** 6) == 0.3

    def test_t_validated(self):
        with pytest.raises(InvalidInputError):
            StepSchedule("sgd", n=5, mu=0.1, alpha_bar=0.3).step_at(0)

    def test_nu_uses_mean_L(self):
        L = np.array([0.2, 0.2, 2.0]) + 0.01
        s = StepSchedule.build("sgd_nu", 3, 0.01, L, eta=1.0, mode="tuned",
                               q=q_default(L, 0.01))
        assert s.alpha_bar == pytest.approx(1.0 / L.mean())

    def test_theory_bound_nu_sgd(self):
        L = np.array([1.0, 4.0])
        q = SamplingDist(np.array([0.2, 0.8]))
        # L_q = max(1/(0.4), 4/(1.6)) = 2.5
        assert theory_bound("sgd_nu", 2, 0.1, L, q=q) == pytest.approx(1 / 5.0)


class TestAveraging:
    def test_single(self):
        acc = AveragingAccumulator(3.0)
        acc.update(np.array([1.5, -2.0]))
        np.testing.assert_array_equal(acc.result(), [1.5, -2.0])

    def test_constant(self):
        acc = AveragingAccumulator(2.5)
        for _ in range(7):
            acc.update(np.array([4.0]))
        assert acc.result()[0] == pytest.approx(4.0, rel=1e-15)

    def test_hand(self):
        acc = AveragingAccumulator(1.0)
        for t, x in enumerate([0.0, 3.0, 6.0]):
            averaging_update(acc, np.array([x]), t)
        assert averaging_result(acc)[0] == pytest.approx(4.0)

    def test_weight_total(self):
        acc = AveragingAccumulator(5.0)
        T = 13
        for t in range(T):
            acc.update(np.zeros(1), t)
        assert acc.weight_total == pytest.approx(T * (2 * 5.0 + T - 1) / 2, rel=1e-10)

    def test_errors(self):
        acc = AveragingAccumulator(1.0)
        with pytest.raises(InvalidInputError):
            acc.result()
        with pytest.raises(InvalidInputError):
            acc.update(np.zeros(1), t=3)
        with pytest.raises(InvalidInputError):
            AveragingAccumulator(0.5)
