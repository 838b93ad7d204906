import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedcmi import autodiff as ad
from fedcmi.imbalance import (
    DiscrepancyStats,
    LossBreakdown,
    LossConfig,
    adapt_temperature,
    assemble_total_loss,
    batch_discrepancy_ratio,
    choose_teacher,
    classwise_discrepancy,
    distillation_loss,
    prox_term,
)
from fedcmi.model import ArchConfig, branch_logits, forward_full, init_model, split_base

from conftest import finite_difference, max_relative_error, tape_gradient


class TestBatchRatio:
    def test_identical(self):
        lg = np.random.default_rng(0).normal(size=(5, 3))
        assert batch_discrepancy_ratio(lg, lg, [0, 1, 2, 0, 1]) == 1.0

    def test_analytic(self):
        r = batch_discrepancy_ratio(np.array([[math.log(3), 0.0]]), np.zeros((1, 2)), [0])
        assert r == pytest.approx(1.5, abs=1e-14)

    def test_swap_inverts(self):
        rng = np.random.default_rng(1)
        a, b, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
        assert batch_discrepancy_ratio(a, b, y) * batch_discrepancy_ratio(b, a, y) == pytest.approx(1.0, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ad.ParameterError):
            batch_discrepancy_ratio(np.zeros((0, 2)), np.zeros((0, 2)), [])


class TestClasswise:
    def test_identical(self):
        lg = np.random.default_rng(0).normal(size=(8, 3))
        rc, r = classwise_discrepancy(lg, lg, np.arange(8) % 3, 3)
        np.testing.assert_array_equal(rc, 1.0)
        assert r == 1.0

    def test_two_classes(self):
        l0 = np.array([[math.log(3), 0.0], [0.0, 0.0]])
        l1 = np.array([[0.0, 0.0], [0.0, math.log(3)]])
        rc, r = classwise_discrepancy(l0, l1, [0, 1], 2)
        np.testing.assert_allclose(rc, [1.5, 1 / 1.5], atol=1e-14)
        assert r == pytest.approx((1.5 + 1 / 1.5) / 2, abs=1e-14)
        assert r == pytest.approx(1.0833, abs=1e-4)

    def test_absent_class_neutral(self):
        rc, r = classwise_discrepancy(np.array([[math.log(3), 0.0]]), np.zeros((1, 2)), [0], 2)
        assert rc[1] == rc[0] == pytest.approx(1.5)
        assert r == pytest.approx(1.5)
        temps = adapt_temperature(rc, r, 3.0, 1.0)
        np.testing.assert_array_equal(temps, 3.0)


class TestTemperature:
    def test_boundary(self):
        np.testing.assert_array_equal(adapt_temperature([1.3, 1.3], 1.3, 3.0, 1.0), [3.0, 3.0])

    def test_analytic(self):
        rho = 1.2
        t = adapt_temperature([rho * math.e, rho / 2], rho, 3.0, 1.0)
        assert t[0] == pytest.approx(1.5, abs=1e-12)
        assert t[1] == 3.0

    def test_clamp(self):
        assert adapt_temperature([2.0 * 1e30], 2.0, 3.0, 1.0)[0] == 0.1

    def test_mirror_for_m1_dominant(self):
        # rho < 1: the same rule on reciprocals
        t = adapt_temperature([0.5 / math.e, 0.5 * 2], 0.5, 3.0, 1.0)
        assert t[0] == pytest.approx(1.5, abs=1e-12)
        assert t[1] == 3.0

    def test_non_positive(self):
        with pytest.raises(ad.ParameterError):
            adapt_temperature([0.0, 1.0], 1.0, 3.0, 1.0)
        with pytest.raises(ad.ParameterError):
            adapt_temperature([1.0], -1.0, 3.0, 1.0)


class TestTeacher:
    @pytest.mark.parametrize("rho,teacher", [(1.5, 0), (1.0, 1), (0.2, 1)])
    def test_cases(self, rho, teacher):
        assert choose_teacher(rho) == teacher

    @given(st.floats(1e-6, 1e6))
    def test_sign_rule(self, rho):
        assert (choose_teacher(rho) == 0) == (rho > 1)


class TestDistillation:
    def test_self_distillation_zero(self):
        lg = np.random.default_rng(0).normal(size=(4, 3))
        assert float(distillation_loss(lg, lg, [0, 1, 2, 0], 3.0, np.full(3, 3.0))) == pytest.approx(0.0, abs=1e-15)

    def test_one_hot_teacher(self):
        loss = distillation_loss(np.array([[30.0, -30.0]]), np.zeros((1, 2)), [0], 1.0, np.ones(2))
        assert float(loss) == pytest.approx(math.log(2), abs=1e-8)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(17)
        t, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        y = np.array([0, 2, 1, 2])
        temps = np.array([3.0, 1.2, 0.7])
        T = 3.0
        oracle = 0.0
        for k in range(4):
            pt = np.exp(t[k] / T) / np.exp(t[k] / T).sum()
            ps = np.exp(s[k] / temps[y[k]]) / np.exp(s[k] / temps[y[k]]).sum()
            oracle += sum(pt[c] * (math.log(pt[c] + 1e-12) - math.log(ps[c] + 1e-12)) for c in range(3))
        assert float(distillation_loss(t, s, y, T, temps)) == pytest.approx(oracle / 4, abs=1e-12)

    def test_t2_variant(self):
        rng = np.random.default_rng(2)
        t, s = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        base = float(distillation_loss(t, s, [0, 1, 0], 2.0, np.full(2, 2.0)))
        assert float(distillation_loss(t, s, [0, 1, 0], 2.0, np.full(2, 2.0), t2_scaling=True)) == pytest.approx(4 * base)

    def test_class_count_mismatch(self):
        with pytest.raises(ad.ShapeError):
            distillation_loss(np.zeros((2, 3)), np.zeros((2, 2)), [0, 1], 1.0, np.ones(2))

    def test_gradient_only_reaches_student(self):
        rng = np.random.default_rng(4)
        y = np.array([0, 1, 1])
        tape = ad.Tape()
        student = tape.param("student", rng.normal(size=(3, 2)))
        teacher = tape.param("teacher", rng.normal(size=(3, 2)))
        loss = distillation_loss(teacher, student, y, 2.0, np.array([2.0, 0.8]))
        g = ad.backward(tape, loss)
        np.testing.assert_array_equal(g["teacher"], 0.0)
        assert np.abs(g["student"]).sum() > 0


class TestProx:
    def test_equal(self):
        p = {"a": np.ones(3)}
        assert float(prox_term(p, {"a": np.ones(3)})) == 0.0

    def test_scalar(self):
        assert float(prox_term({"w": np.array(3.0)}, {"w": np.array(1.0)})) == 2.0

    def test_flat_vector_oracle(self):
        rng = np.random.default_rng(19)
        local = {k: rng.normal(size=s) for k, s in [("a", (3, 2)), ("b", (4,)), ("c", (1, 5))]}
        glob = {k: rng.normal(size=v.shape) for k, v in local.items()}
        flat = np.concatenate([(local[k] - glob[k]).ravel() for k in sorted(local)])
        assert float(prox_term(local, glob)) == pytest.approx(0.5 * flat @ flat, abs=1e-12)

    def test_key_mismatch(self):
        with pytest.raises(ad.UsageError):
            prox_term({"a": np.ones(1)}, {"b": np.ones(1)})


def _fedcmi_setup(seed=0):
    cfg = ArchConfig(dim_m0=3, dim_m1=3, num_classes=2, feature_dim=3, hidden_dim=3, init_seed=seed)
    p = init_model(cfg)
    rng = np.random.default_rng(seed)
    p.tensors = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.tensors.items()}
    x0, x1 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    y = np.array([0, 1, 1, 0])
    glob, _ = split_base(init_model(cfg))
    teacher = rng.normal(size=(4, 2))
    return p, x0, x1, y, glob, teacher


class TestAssemble:
    def test_arithmetic(self):
        # components (1.0, 0.5, 0.7, 0.2, 0.3) with kappa=2, mu=1
        bd = LossBreakdown(1.0, 0.5, 0.7, 0.2, 0.3)
        assert bd.l_ce + bd.l_ce_m0 + bd.l_ce_m1 + 2 * bd.l_rd + 1 * bd.l_prox == pytest.approx(2.9)

    def test_breakdown_invariant_and_degenerate(self):
        p, x0, x1, y, glob, teacher = _fedcmi_setup()
        out = forward_full(p, x0, x1)
        base, _ = split_base(p)
        stats = DiscrepancyStats(np.ones(2), 1.0, np.array([3.0, 1.1]))
        for kappa, mu in [(2.0, 1.0), (0.0, 0.0)]:
            _, bd = assemble_total_loss(out, y, LossConfig(kappa=kappa, mu=mu), base, glob, stats=stats, teacher=0,
                                        teacher_logits=teacher, student_logits=out.ip_logits[1])
            expect = bd.l_ce + bd.l_ce_m0 + bd.l_ce_m1 + kappa * bd.l_rd + mu * bd.l_prox
            assert bd.total == pytest.approx(expect, abs=1e-12)
            assert min(bd.as_tuple()) >= 0
        assert bd.total == pytest.approx(bd.l_ce + bd.l_ce_m0 + bd.l_ce_m1, abs=1e-12)

    def test_matched_everything_is_zero(self):
        C = 2
        big = 40.0
        y = np.array([0, 1])
        logits = np.where(np.eye(C)[y] > 0, big, -big)
        from fedcmi.model import ForwardOutputs

        out = ForwardOutputs(logits, [logits, logits], [logits, logits], [], [], [])
        p = {"w": np.ones(2)}
        stats = DiscrepancyStats(np.ones(C), 1.0, np.full(C, 3.0))
        _, bd = assemble_total_loss(out, y, LossConfig(kappa=2, mu=1), p, {"w": np.ones(2)}, stats=stats, teacher=0,
                                    teacher_logits=logits, student_logits=logits)
        assert bd.total == pytest.approx(0.0, abs=1e-9)

    def test_requires_stats(self):
        p, x0, x1, y, glob, _ = _fedcmi_setup()
        base, _ = split_base(p)
        with pytest.raises(ad.UsageError):
            assemble_total_loss(forward_full(p, x0, x1), y, LossConfig(), base, glob)

    def test_gradient_matches_finite_differences(self):
        p, x0, x1, y, glob, teacher = _fedcmi_setup(3)
        stats = DiscrepancyStats(np.ones(2), 1.0, np.array([3.0, 0.9]))

        def loss(t):
            from fedcmi.model import ModelParams

            q = ModelParams(p.cfg, t)
            out = forward_full(q, x0, x1, with_ip=False)
            _, s = branch_logits(q, "ip", 1, out.z[1])
            base = {k: v for k, v in t.items() if not k.startswith("ip_")}
            total, _ = assemble_total_loss(out, y, LossConfig(kappa=2.0, mu=1.0), base, glob, stats=stats, teacher=0,
                                           teacher_logits=teacher, student_logits=s)
            return total

        params = {k: v.copy() for k, v in p.tensors.items()}
        assert max_relative_error(tape_gradient(loss, params), finite_difference(loss, params)) < 1e-4


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-8, 8)), arrays(np.float64, (5, 3), elements=st.floats(-8, 8)),
       arrays(np.float64, (5, 1), elements=st.floats(-30, 30)))
def test_ratios_shift_invariant(a, b, shift):
    y = np.array([0, 1, 2, 0, 1])
    r = batch_discrepancy_ratio(a, b, y)
    assert abs(batch_discrepancy_ratio(a + shift, b + shift, y) - r) <= 1e-12 * max(1.0, r)
    rc, ro = classwise_discrepancy(a, b, y, 3)
    rc2, ro2 = classwise_discrepancy(a + shift, b + shift, y, 3)
    np.testing.assert_allclose(rc2, rc, rtol=1e-12)
