"""Reverse-mode differentiation over a dynamically recorded tape.

A Tape is rebuilt for every forward pass (define-by-run) and freed with it.
Each recorded node links one output tensor to its inputs and a backward rule
mapping the upstream gradient to per-input gradients. backward() runs one
reverse sweep over the recording order, which is already topological.

Gradients accumulate (+=) into Parameter.grad; callers own zero_grad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonDeterministicLayer, NotScalar
from .tensor import Tensor


class Parameter:
    """A trainable tensor: value, accumulated gradient, and a name path."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name):
        self.value = value
        self.grad = Tensor(value.shape, fill=0.0, dtype=value.dtype)
        self.name = name

    def zero_grad(self):
        self.grad.data[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def zero_grad(params):
    """Zero every gradient buffer; idempotent."""
    for p in params:
        p.zero_grad()


class Node:
    """One tape entry: output id, input ids, and the backward rule.

    backward_fn(upstream: ndarray) -> sequence of per-input ndarrays (None
    for inputs that take no gradient). forward_fn, when present, recomputes
    the output buffer from the current input buffers and is only used by
    replay().
    """

    __slots__ = ("op", "output_id", "input_ids", "backward_fn", "forward_fn")

    def __init__(self, op, output_id, input_ids, backward_fn, forward_fn=None):
        self.op = op
        self.output_id = output_id
        self.input_ids = input_ids
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn


class Tape:
    """Recording of one forward pass, in topological (recording) order."""

    def __init__(self):
        self.nodes = []
        self._watched = {}  # tid -> Parameter or leaf Tensor
        self._tensors = {}  # tid -> Tensor, for replay and leaf lookup

    def watch(self, leaf):
        """Mark a Parameter (or plain Tensor) as a leaf that collects gradient."""
        t = leaf.value if isinstance(leaf, Parameter) else leaf
        self._watched[t.tid] = leaf
        self._tensors[t.tid] = t
        return t

    def record(self, op, inputs, output, backward_fn, forward_fn=None):
        """Append a node; inputs not on the tape are treated as constants."""
        for t in inputs:
            self._tensors.setdefault(t.tid, t)
        self._tensors[output.tid] = output
        node = Node(op, output.tid, [t.tid for t in inputs], backward_fn, forward_fn)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, loss):
        """Reverse sweep from a scalar loss.

        Returns {tensor id -> Tensor gradient} for every tensor that received
        one, and accumulates into the .grad of each watched Parameter.
        """
        if loss.size != 1:
            raise NotScalar(f"loss has {loss.size} elements")
        grads = {loss.tid: np.ones(loss.shape, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.get(node.output_id)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for tid, gi in zip(node.input_ids, input_grads):
                if gi is None:
                    continue
                acc = grads.get(tid)
                # contributions may alias upstream buffers, so accumulation
                # allocates instead of updating in place
                grads[tid] = gi if acc is None else acc + gi
        for tid, leaf in self._watched.items():
            if isinstance(leaf, Parameter) and tid in grads:
                leaf.grad.data += grads[tid]
        return {tid: Tensor.wrap(g) for tid, g in grads.items()}

    def replay(self):
        """Re-run every forward_fn in order; returns the max abs deviation
        from the recorded outputs (0.0 means bit-exact reproduction)."""
        worst = 0.0
        for node in self.nodes:
            if node.forward_fn is None:
                continue
            inputs = [self._tensors[tid].data for tid in node.input_ids]
            fresh = node.forward_fn(*inputs)
            recorded = self._tensors[node.output_id].data
            if fresh.shape != recorded.shape:
                raise NotScalar("replay produced a different shape")
            if fresh.size:
                worst = max(worst, float(np.max(np.abs(fresh - recorded))))
        return worst


# --- composition helpers (used by tests and the loss plumbing) ---

def add(tape, a, b):
    out = Tensor.wrap(a.data + b.data)
    tape.record("add", [a, b], out, lambda g: (g, g), lambda x, y: x + y)
    return out


def mul(tape, a, b):
    ad, bd = a.data, b.data
    out = Tensor.wrap(ad * bd)
    tape.record("mul", [a, b], out, lambda g: (g * bd, g * ad), lambda x, y: x * y)
    return out


def tsum(tape, a):
    out = Tensor.wrap(np.asarray(a.data.sum(), dtype=a.data.dtype))
    shape, dt = a.shape, a.data.dtype

    def backward(g):
        return (np.full(shape, g.reshape(()), dtype=dt),)

    tape.record("sum", [a], out, backward,
                lambda x: np.asarray(x.sum(), dtype=dt))
    return out


def dot(tape, a, r):
    """Scalar projection sum(a * r) with r treated as a constant."""
    rd = r.data
    out = Tensor.wrap(np.asarray((a.data * rd).sum(), dtype=a.data.dtype))
    tape.record("dot", [a], out, lambda g: (g.reshape(()) * rd,))
    return out


@dataclass
class GradCheckReport:
    """Result of one finite-difference check."""

    name: str
    max_rel_error: float
    passed: bool
    n_checked: int = 0
    n_excluded: int = 0
    per_input: dict = field(default_factory=dict)

    def __str__(self):
        state = "pass" if self.passed else "FAIL"
        return (f"{self.name:<24} max_rel_error={self.max_rel_error:.3e} "
                f"checked={self.n_checked} excluded={self.n_excluded} {state}")


def grad_check(layer, x, eps=1e-5, tol=1e-4, rng=None, name=None):
    """Validate a layer's analytic gradients against central differences.

    ``layer`` needs forward(tape, x) -> Tensor and parameters(); the check
    runs the scalar projection sum(forward(x) * R) for a fixed random R and
    compares d/d(element) for every parameter and input element. Relative
    error per element is |a - n| / max(|a|, |n|, 1e-8).

    Elements where the two one-sided slopes disagree by more than 10% of
    their scale sit on a non-differentiable point (e.g. a ReLU kink); they
    are flagged and excluded rather than failed.

    Everything must run in double precision; single has too little headroom
    for eps around 1e-5.
    """
    if x.dtype != "double":
        raise ValueError("grad_check requires a double-precision input")
    params = list(layer.parameters()) if hasattr(layer, "parameters") else []
    for p in params:
        if p.value.dtype != "double":
            raise ValueError(f"grad_check requires double parameters ({p.name})")
    rng = rng or np.random.default_rng(0)

    def run_forward(tape=None):
        return layer.forward(tape or Tape(), x)

    probe_a = run_forward()
    probe_b = run_forward()
    if not np.array_equal(probe_a.data, probe_b.data):
        raise NonDeterministicLayer(
            "two identical forward passes disagree; pin the layer's seed"
        )
    r = Tensor.wrap(rng.uniform(0.5, 1.5, size=probe_a.shape))

    def loss_value():
        out = run_forward()
        return float((out.data * r.data).sum())

    # analytic gradients
    tape = Tape()
    for p in params:
        tape.watch(p)
    tape.watch(x)
    out = layer.forward(tape, x)
    loss = dot(tape, out, r)
    zero_grad(params)
    grads = tape.backward(loss)

    targets = [(p.name, p.value.data, p.grad.data) for p in params]
    x_grad = grads.get(x.tid)
    targets.append(("input", x.data, x_grad.data if x_grad is not None
                    else np.zeros_like(x.data)))

    f0 = loss_value()
    max_rel = 0.0
    n_checked = 0
    n_excluded = 0
    per_input = {}
    for tname, buf, analytic in targets:
        worst = 0.0
        flat = buf.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = loss_value()
            flat[i] = saved - eps
            f_minus = loss_value()
            flat[i] = saved
            d_plus = (f_plus - f0) / eps
            d_minus = (f0 - f_minus) / eps
            if abs(d_plus - d_minus) > 0.1 * max(abs(d_plus), abs(d_minus), 1.0):
                n_excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(aflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            n_checked += 1
        per_input[tname] = worst
        max_rel = max(max_rel, worst)

    return GradCheckReport(
        name=name or type(layer).__name__,
        max_rel_error=max_rel,
        passed=max_rel <= tol,
        n_checked=n_checked,
        n_excluded=n_excluded,
        per_input=per_input,
    )
