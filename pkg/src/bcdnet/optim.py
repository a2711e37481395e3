"""Loss, optimizer, and learning-rate schedule.

The loss is mean-reduced softmax cross-entropy computed with the
max-subtraction trick. The optimizer is Adam with bias-corrected moments
and epsilon added outside the square root. The schedule is a step decay:
lr = base_lr * gamma ** floor(epoch / step_size).
"""

from __future__ import annotations

import numpy as np

from .errors import BadLabel, EmptyBatch, ShapeMismatch
from .tensor import Tensor


def softmax(logits):
    """Row-wise softmax of a [N, K] array, max-subtracted for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy_data(logits, labels):
    """Mean-reduced cross-entropy on raw arrays.

    Returns (loss, probs, grad) where grad is d(loss)/d(logits), already
    divided by the batch size.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [N, K], got shape {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise EmptyBatch("cross-entropy over an empty batch")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels must be [N] = [{n}], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise BadLabel(f"labels must lie in [0, {k}), got range "
                       f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = float((logsum - picked).mean())
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, probs, grad.astype(logits.dtype)


def softmax_cross_entropy(tape, logits, labels):
    """Taped mean cross-entropy; returns a scalar Tensor."""
    loss, _, grad = softmax_cross_entropy_data(logits.data, labels)
    out = Tensor((), dtype=logits.dtype)
    out.data[...] = loss

    def backward(g):
        return (grad * g,)

    if tape is not None:
        tape.record("softmax_ce", [logits], out, backward)
    return out


def accuracy(logits, labels):
    """Fraction of rows whose argmax equals the label (first argmax on ties)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyBatch("accuracy over an empty batch")
    pred = logits.argmax(axis=1)
    return float((pred == labels).mean())


class Adam:
    """Adam with bias correction; eps is added outside the square root:

        theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value.data) for p in self.params]
        self.v = [np.zeros_like(p.value.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.value.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        """Scalar state for checkpoints: step count and hyperparameters."""
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}


class StepLR:
    """lr(epoch) = base_lr * gamma ** floor(epoch / step_size)."""

    def __init__(self, optimizer, base_lr=0.005, step_size=10, gamma=0.1):
        if step_size < 1:
            raise ShapeMismatch(f"step_size must be >= 1, got {step_size}")
        self.optimizer = optimizer
        self.base_lr = base_lr
        self.step_size = step_size
        self.gamma = gamma

    def lr_at(self, epoch):
        return self.base_lr * self.gamma ** (epoch // self.step_size)

    def apply(self, epoch):
        """Set the optimizer lr for the given zero-based epoch; returns it."""
        lr = self.lr_at(epoch)
        self.optimizer.lr = lr
        return lr
