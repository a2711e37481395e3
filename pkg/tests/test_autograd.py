import numpy as np
import pytest

from bcdnet.autograd import (
    GradCheckReport,
    Parameter,
    Tape,
    add,
    dot,
    grad_check,
    mul,
    tsum,
    zero_grad,
)
from bcdnet.errors import NonDeterministicLayer, NotScalar
from bcdnet.nn import Linear, ReLU
from bcdnet.tensor import Tensor


def test_parameter_grad_starts_zero():
    p = Parameter(Tensor((2, 2), fill=1.0), "p")
    assert p.grad.shape == (2, 2)
    assert np.all(p.grad.data == 0.0)
    p.grad.data[...] = 3.0
    p.zero_grad()
    assert np.all(p.grad.data == 0.0)


def test_backward_simple_chain():
    # loss = sum((a + b) * a); d/da = (a + b) + a, d/db = a
    tape = Tape()
    a = tape.watch(Tensor((3,), data=[1, 2, 3], dtype="double"))
    b = tape.watch(Tensor((3,), data=[10, 20, 30], dtype="double"))
    s = add(tape, a, b)
    prod = mul(tape, s, a)
    loss = tsum(tape, prod)
    grads = tape.backward(loss)
    assert np.allclose(grads[a.tid].data, (a.data + b.data) + a.data)
    assert np.allclose(grads[b.tid].data, a.data)


def test_backward_requires_scalar():
    tape = Tape()
    a = tape.watch(Tensor((2,), data=[1, 2]))
    s = add(tape, a, a)
    with pytest.raises(NotScalar):
        tape.backward(s)


def test_backward_accumulates_fanout():
    # y = a * a uses a twice through separate nodes: diamond pattern
    tape = Tape()
    a = tape.watch(Tensor((2,), data=[3, 4], dtype="double"))
    left = mul(tape, a, a)        # a^2, sends grad to a twice
    right = add(tape, a, left)    # a + a^2
    loss = tsum(tape, right)
    grads = tape.backward(loss)
    # d/da (a + a^2) = 1 + 2a
    assert np.allclose(grads[a.tid].data, 1.0 + 2.0 * a.data)


def test_backward_accumulates_into_parameter_across_calls():
    p = Parameter(Tensor((2,), data=[1, 2], dtype="double"), "p")
    for _ in range(2):
        tape = Tape()
        tape.watch(p)
        loss = tsum(tape, mul(tape, p.value, p.value))
        tape.backward(loss)
    # two backward passes without zero_grad must sum: 2 * (2p)
    assert np.allclose(p.grad.data, 4.0 * p.value.data)
    zero_grad([p])
    assert np.all(p.grad.data == 0.0)


def test_constants_receive_no_gradient():
    tape = Tape()
    a = tape.watch(Tensor((2,), data=[1, 2], dtype="double"))
    c = Tensor((2,), data=[5, 5], dtype="double")  # never watched
    loss = tsum(tape, mul(tape, a, c))
    grads = tape.backward(loss)
    assert a.tid in grads
    assert np.allclose(grads[a.tid].data, c.data)


def test_unused_branches_are_skipped():
    tape = Tape()
    a = tape.watch(Tensor((2,), data=[1, 2], dtype="double"))
    mul(tape, a, a)  # dead branch, not part of the loss
    loss = tsum(tape, add(tape, a, a))
    grads = tape.backward(loss)
    assert np.allclose(grads[a.tid].data, 2.0)


def test_replay_reports_zero_for_pure_graph():
    tape = Tape()
    a = tape.watch(Tensor((3,), data=[1, 2, 3], dtype="double"))
    b = tape.watch(Tensor((3,), data=[4, 5, 6], dtype="double"))
    tsum(tape, mul(tape, add(tape, a, b), a))
    assert tape.replay() == 0.0
    # mutate an input: replay must see the deviation in downstream nodes
    a.data[0] += 1.0
    assert tape.replay() > 0.0


def test_dot_projection_gradient():
    tape = Tape()
    a = tape.watch(Tensor((2, 2), data=[1, 2, 3, 4], dtype="double"))
    r = Tensor((2, 2), data=[5, 6, 7, 8], dtype="double")
    loss = dot(tape, a, r)
    assert loss.item() == 5 + 12 + 21 + 32
    grads = tape.backward(loss)
    assert np.array_equal(grads[a.tid].data, r.data)


def test_grad_check_passes_for_linear():
    rng = np.random.default_rng(3)
    layer = Linear(4, 3, dtype="double", rng=rng)
    x = Tensor.wrap(rng.normal(size=(2, 4)))
    report = grad_check(layer, x, rng=rng)
    assert isinstance(report, GradCheckReport)
    assert report.passed
    assert report.max_rel_error <= 1e-4
    assert report.n_checked == 2 * 4 + 3 * 4 + 3
    assert set(report.per_input) == {"linear.weight", "linear.bias", "input"}
    assert "pass" in str(report)


def test_grad_check_requires_double():
    layer = ReLU()
    with pytest.raises(ValueError):
        grad_check(layer, Tensor((2, 2), fill=1.0, dtype="single"))


def test_grad_check_flags_nondeterministic_layer():
    class Jitter:
        def __init__(self):
            self.calls = 0

        def parameters(self):
            return []

        def forward(self, tape, x):
            self.calls += 1
            out = Tensor.wrap(x.data + self.calls)
            tape.record("jitter", [x], out, lambda g: (g,))
            return out

    with pytest.raises(NonDeterministicLayer):
        grad_check(Jitter(), Tensor((2,), data=[1, 2], dtype="double"))


def test_grad_check_catches_wrong_gradient():
    class Broken:
        def parameters(self):
            return []

        def forward(self, tape, x):
            out = Tensor.wrap(x.data * 3.0)
            # wrong rule: claims d(3x)/dx = 1
            tape.record("broken", [x], out, lambda g: (g.copy(),))
            return out

    report = grad_check(Broken(), Tensor((3,), data=[1, 2, 3], dtype="double"))
    assert not report.passed
    assert report.max_rel_error > 1e-2


def test_grad_check_excludes_kinks():
    # values straddling the ReLU kink within eps are excluded, not failed
    layer = ReLU()
    x = Tensor((3,), data=[1.0, 5e-6, -2.0], dtype="double")
    report = grad_check(layer, x, eps=1e-5)
    assert report.passed
    assert report.n_excluded >= 1
    assert report.n_checked + report.n_excluded == 3
