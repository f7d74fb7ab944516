"""Optimizer and EMA checks against a plain-float reference recurrence."""

import numpy as np
import pytest

from dcgen import Rng, Tensor
from dcgen.optim import AdamW, EmaState, OptimizerState, adamw_step, effective_lr, ema_update

from oracles import adam_reference


def scalar_param(v):
    return {"p": Tensor(np.array([v], dtype=np.float32), requires_grad=True)}


class TestAdamW:
    def test_first_step_hand_value(self):
        # Hand recurrence: m=0.1, v=1e-3, mhat=1, vhat=1 -> p = 1 - 0.1 = 0.9.
        params = scalar_param(1.0)
        adamw_step(params, {"p": np.array([1.0])}, OptimizerState(), lr=0.1)
        assert params["p"].data[0] == pytest.approx(0.9, abs=1e-6)
        assert adam_reference(1.0, [1.0], lr=0.1) == pytest.approx(0.9, abs=1e-6)

    def test_trajectory_matches_reference(self):
        rng = Rng(5)
        gs = [float(g) for g in rng.normal([30], dtype=np.float64)]
        params = scalar_param(0.7)
        st = OptimizerState()
        for g in gs:
            adamw_step(params, {"p": np.array([g])}, st, lr=0.05,
                       weight_decay=0.01, warmup_steps=10)
        want = adam_reference(0.7, gs, lr=0.05, weight_decay=0.01, warmup_steps=10)
        assert params["p"].data[0] == pytest.approx(want, rel=1e-5)

    def test_zero_grad_no_decay_fixed_point(self):
        params = scalar_param(0.3)
        before = params["p"].data.copy()
        st = OptimizerState()
        for _ in range(5):
            adamw_step(params, {"p": np.array([0.0])}, st, lr=0.1)
        np.testing.assert_array_equal(params["p"].data, before)

    def test_zero_grad_with_decay_closed_form(self):
        # Decay alone shrinks p by (1 - lr*wd) per step.
        lr, wd, steps = 1e-4, 1e-3, 50
        params = scalar_param(1.0)
        st = OptimizerState()
        for _ in range(steps):
            adamw_step(params, {"p": np.array([0.0])}, st, lr=lr, weight_decay=wd)
        assert params["p"].data[0] == pytest.approx((1 - lr * wd) ** steps, rel=1e-6)

    def test_warmup_scales_first_step(self):
        params = scalar_param(1.0)
        adamw_step(params, {"p": np.array([1.0])}, OptimizerState(), lr=0.1, warmup_steps=10)
        # Effective lr at step 1 is 0.1/10; the Adam delta for the first step is 1.
        assert params["p"].data[0] == pytest.approx(1.0 - 0.01, abs=1e-6)

    def test_effective_lr_schedule(self):
        assert effective_lr(1.0, 1, 0) == 1.0
        assert effective_lr(1.0, 3, 10) == pytest.approx(0.3)
        assert effective_lr(1.0, 10, 10) == 1.0
        assert effective_lr(1.0, 500, 10) == 1.0

    def test_untouched_params_do_not_move(self):
        rng = Rng(6)
        params = {
            "a": Tensor(rng.normal([3]), requires_grad=True),
            "b": Tensor(rng.normal([3]), requires_grad=True),
        }
        snapshot = params["b"].data.copy()
        adamw_step(params, {"a": np.ones(3)}, OptimizerState(), lr=0.1, weight_decay=0.01)
        np.testing.assert_array_equal(params["b"].data, snapshot)

    def test_bitwise_deterministic_trajectories(self):
        def run():
            rng = Rng(99)
            params = {"w": Tensor(rng.normal([4, 4]), requires_grad=True)}
            opt = AdamW(params, lr=1e-3, weight_decay=1e-3, warmup_steps=5)
            for step in range(100):
                g = rng.child("g", step).normal([4, 4])
                opt.step({"w": g})
            return params["w"].data.copy(), {k: v.copy() for k, v in opt.state.m.items()}

        p1, m1 = run()
        p2, m2 = run()
        assert p1.tobytes() == p2.tobytes()
        assert m1["w"].tobytes() == m2["w"].tobytes()


class TestEma:
    def test_first_sight_copies(self):
        ema = EmaState(decay=0.999)
        params = scalar_param(0.25)
        ema_update(ema, params)
        np.testing.assert_array_equal(ema.shadow["p"], params["p"].data)

    def test_constant_params_are_fixed_point(self):
        ema = EmaState(decay=0.999)
        params = scalar_param(0.25)
        for _ in range(10):
            ema_update(ema, params)
        np.testing.assert_allclose(ema.shadow["p"], params["p"].data, rtol=1e-7)

    def test_half_decay_single_update(self):
        # shadow 0, param 1, decay 0.5 -> 0.5 by direct evaluation.
        ema = EmaState(decay=0.5, shadow={"p": np.array([0.0], dtype=np.float32)})
        ema_update(ema, scalar_param(1.0))
        assert ema.shadow["p"][0] == pytest.approx(0.5)

    def test_shadow_tracks_slowly(self):
        ema = EmaState(decay=0.9, shadow={"p": np.array([0.0], dtype=np.float32)})
        for _ in range(200):
            ema_update(ema, scalar_param(1.0))
        assert ema.shadow["p"][0] == pytest.approx(1.0, abs=1e-6)
