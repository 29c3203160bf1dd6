import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowavoid import autodiff as ad
from flowavoid.errors import ContractViolation
from flowavoid.losses import (
    LossConfig,
    RolloutTrace,
    collision_loss,
    combine,
    smooth_l1_value,
    smoothness_losses,
    total_loss,
    velocity_loss,
)

CFG = LossConfig()
ATOL = 1e-9


def _value(node):
    return float(np.asarray(node.value))


def _vel_trace(err_norm, T=6):
    ref = np.tile([3.0, 0.0, 0.0], (T, 1))
    vbar = ref - np.array([0.0, err_norm, 0.0])
    return RolloutTrace.from_arrays(vbar=vbar, v_ref=ref)


def test_velocity_examples():
    assert _value(velocity_loss(_vel_trace(0.0))) == pytest.approx(0.0, abs=ATOL)
    assert _value(velocity_loss(_vel_trace(0.5))) == pytest.approx(0.125, abs=ATOL)
    assert _value(velocity_loss(_vel_trace(3.0))) == pytest.approx(2.5, abs=ATOL)


def test_collision_examples():
    far = RolloutTrace.from_arrays(d=np.full(4, CFG.r_q + 10.0), vc=np.zeros(4))
    assert _value(collision_loss(far, CFG)) == pytest.approx(0.1 * math.log1p(math.exp(-50.0)), abs=ATOL)
    assert _value(collision_loss(far, CFG)) == pytest.approx(0.0, abs=ATOL)
    touching = RolloutTrace.from_arrays(d=np.full(4, CFG.r_q), vc=np.full(4, 2.0))
    assert _value(collision_loss(touching, CFG)) == pytest.approx(2.0 + 0.1 * math.log(2.0), abs=ATOL)
    assert _value(collision_loss(touching, CFG)) == pytest.approx(2.0693147, abs=1e-7)
    edge = RolloutTrace.from_arrays(d=np.full(4, CFG.r_q + 1.0), vc=np.full(4, 7.0))
    assert _value(collision_loss(edge, CFG)) == pytest.approx(0.1 * math.log1p(math.exp(-5.0)), abs=ATOL)


def test_smoothness_examples():
    zero = RolloutTrace.from_arrays(cmd=np.zeros((5, 3)))
    la, lj = smoothness_losses(zero)
    assert (_value(la), _value(lj)) == (0.0, 0.0)
    const = RolloutTrace.from_arrays(cmd=np.tile([1.0, 0, 0], (5, 1)))
    la, lj = smoothness_losses(const)
    assert _value(la) == pytest.approx(1.0, abs=ATOL)
    assert _value(lj) == pytest.approx(0.0, abs=ATOL)
    alt = RolloutTrace.from_arrays(cmd=np.array([[1.0, 0, 0], [-1.0, 0, 0]] * 3), dt=0.1)
    assert _value(smoothness_losses(alt)[1]) == pytest.approx(400.0, abs=ATOL)


def test_single_step_has_zero_jerk():
    tr = RolloutTrace.from_arrays(cmd=np.array([[2.0, 0, 0]]))
    la, lj = smoothness_losses(tr)
    assert _value(la) == pytest.approx(4.0)
    assert _value(lj) == 0.0


def test_total_loss_weights():
    tape = ad.Tape(ad.WIDE)
    one = tape.const(1.0)
    total, br = combine(one, one, one, one, CFG)
    assert _value(total) == pytest.approx(3.018, abs=ATOL)
    zero = tape.const(0.0)
    assert _value(combine(zero, zero, zero, zero, CFG)[0]) == 0.0
    assert br.total == pytest.approx(3.018, abs=ATOL)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.integers(1, 4))
def test_breakdown_resums_and_is_nonnegative(seed, T, B):
    rng = np.random.default_rng(seed)
    alive = np.ones((T, B), dtype=bool)
    for b in range(B):
        alive[rng.integers(1, T + 1):, b] = False
    tr = RolloutTrace.from_arrays(
        vbar=rng.normal(size=(T, B, 3)) * 3,
        v_ref=rng.normal(size=(T, B, 3)) * 3,
        cmd=rng.uniform(-10, 10, (T, B, 3)),
        d=rng.uniform(-0.5, 5, (T, B)),
        vc=rng.uniform(0, 5, (T, B)),
        alive=alive,
    )
    total, br = total_loss(tr, CFG)
    parts = [br.velocity, br.collision, br.accel, br.jerk]
    assert min(parts) >= 0
    resum = CFG.w_velocity * br.velocity + CFG.w_collision * br.collision + CFG.w_accel * br.accel + CFG.w_jerk * br.jerk
    assert resum == pytest.approx(br.total, abs=1e-12 * max(1.0, abs(br.total)))
    assert _value(total) == br.total


@settings(max_examples=40, deadline=None)
@given(st.floats(-1, 5), st.floats(-1, 5), st.floats(0, 10))
def test_collision_monotone_in_clearance(d1, d2, vc):
    lo, hi = sorted([d1, d2])
    a = _value(collision_loss(RolloutTrace.from_arrays(d=[lo], vc=[vc]), CFG))
    b = _value(collision_loss(RolloutTrace.from_arrays(d=[hi], vc=[vc]), CFG))
    assert a >= b


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-50, 50)))
def test_smooth_l1_nonnegative_and_continuous(e):
    v = smooth_l1_value(e)
    assert np.all(v >= 0)
    assert smooth_l1_value(1.0) == pytest.approx(0.5)
    assert smooth_l1_value(1.0 - 1e-12) == pytest.approx(0.5)


def test_dead_steps_are_ignored():
    ref = np.tile([3.0, 0, 0], (4, 1))
    vbar = ref.copy()
    vbar[2:] = 100.0
    alive = np.array([True, True, False, False])
    tr = RolloutTrace.from_arrays(vbar=vbar, v_ref=ref, alive=alive)
    assert _value(velocity_loss(tr)) == 0.0


def test_loss_gradient_reaches_inputs():
    tape = ad.Tape(ad.WIDE)
    vbar = tape.param("vbar", np.full((3, 1, 3), 1.0))
    tr = RolloutTrace(tape, vbar=vbar, v_ref=np.zeros((3, 1, 3)), alive=np.ones((3, 1), bool))
    g = tape.backward(velocity_loss(tr))["vbar"]
    # smooth-L1 of |e| = sqrt(3) in the linear branch: gradient e/|e| averaged over 3 steps
    np.testing.assert_allclose(g, np.full((3, 1, 3), 1 / math.sqrt(3) / 3), atol=1e-12)


def test_empty_trace_rejected():
    tr = RolloutTrace(ad.Tape(), alive=np.zeros((0, 1), bool))
    with pytest.raises(ContractViolation):
        velocity_loss(tr)


def test_config_validation():
    with pytest.raises(ContractViolation):
        LossConfig(w_velocity=-1).validate()
    with pytest.raises(ContractViolation):
        LossConfig(r_q=0).validate()
