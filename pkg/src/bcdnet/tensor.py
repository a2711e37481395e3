"""Dense n-dimensional arrays and the primitive kernels the layers build on.

Storage is a C-contiguous (row-major) numpy buffer per tensor, in one of two
precisions: "single" (float32, used for training) or "double" (float64,
reserved for gradient checking where central differences need the headroom).

Two execution modes exist, selected globally:

* deterministic (default): every dot-product style reduction accumulates in
  a documented order (ascending index, left to right), implemented with
  vectorized per-term updates so results are bit-identical to a plain
  sequential loop over the same terms. No BLAS is involved.
* fast: reductions may reorder (numpy/BLAS pairwise summation). Results are
  still run-to-run deterministic on one machine but are not bit-comparable
  with the sequential reference.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import BadAxis, EmptyReduce, ShapeMismatch

_DTYPES = {"single": np.float32, "double": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}

_deterministic = True


def set_deterministic(flag):
    """Select deterministic (ordered) or fast (reordering) kernels globally."""
    global _deterministic
    _deterministic = bool(flag)


def deterministic():
    return _deterministic


def np_dtype(name):
    try:
        return _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown dtype {name!r}, expected 'single' or 'double'")


class Tensor:
    """Shape metadata plus a flat row-major scalar buffer.

    Operations never mutate their inputs; the only sanctioned in-place writes
    are optimizer updates and batch-norm running-stat updates, which go
    through ``.data`` explicitly.
    """

    __slots__ = ("data", "tid")
    _ids = itertools.count()

    def __init__(self, shape, data=None, fill=0.0, dtype="single"):
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ShapeMismatch(f"negative extent in shape {shape}")
        n = math.prod(shape)
        dt = np_dtype(dtype)
        if data is not None:
            flat = np.asarray(data, dtype=dt).reshape(-1)
            if flat.size != n:
                raise ShapeMismatch(
                    f"data length {flat.size} != product(shape) {n} for shape {shape}"
                )
            self.data = flat.reshape(shape).copy()
        else:
            self.data = np.full(shape, fill, dtype=dt)
        self.tid = next(Tensor._ids)

    @classmethod
    def wrap(cls, array):
        """Adopt an existing float32/float64 numpy array (copied only if
        non-contiguous)."""
        t = object.__new__(cls)
        arr = np.asarray(array)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also flatten 0-d to 1-d, so only
            # call it when a copy is actually required
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            raise ShapeMismatch(f"unsupported buffer dtype {arr.dtype}")
        t.data = arr
        t.tid = next(cls._ids)
        return t

    # --- metadata ---

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return _DTYPE_NAMES[self.data.dtype]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # --- conversions ---

    def item(self):
        if self.size != 1:
            raise ShapeMismatch(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def copy(self):
        return Tensor.wrap(self.data.copy())

    def astype(self, dtype):
        return Tensor.wrap(self.data.astype(np_dtype(dtype)))

    def reshape(self, shape):
        """Metadata-only reshape; the buffer is shared, never copied."""
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != self.size:
            raise ShapeMismatch(f"cannot reshape {self.shape} to {shape}")
        return Tensor.wrap(self.data.reshape(shape))

    # --- elementwise ---

    def map(self, f):
        """Apply a scalar function elementwise; shape and dtype preserved."""
        vals = [f(float(v)) for v in self.data.flat]
        out = np.asarray(vals, dtype=self.data.dtype).reshape(self.shape)
        return Tensor.wrap(out)

    def zip(self, other, f):
        """Combine two same-shaped tensors elementwise with a binary function."""
        if self.shape != other.shape:
            raise ShapeMismatch(f"zip shapes differ: {self.shape} vs {other.shape}")
        pairs = np.stack([self.data.reshape(-1), other.data.reshape(-1)], axis=1)
        vals = [f(float(a), float(b)) for a, b in pairs]
        out = np.asarray(vals, dtype=self.data.dtype).reshape(self.shape)
        return Tensor.wrap(out)

    # --- reductions ---

    def reduce(self, axes, kind):
        """Reduce over ``axes`` with kind in {"sum", "mean", "max"}.

        Reduced extents are removed. In deterministic mode the reduced block
        of each output element is accumulated left to right in the row-major
        order of the input. Over zero elements: sum is 0, mean and max raise
        EmptyReduce.
        """
        if kind not in ("sum", "mean", "max"):
            raise ValueError(f"unknown reduce kind {kind!r}")
        axes = [int(a) for a in axes]
        for a in axes:
            if not 0 <= a < self.ndim:
                raise BadAxis(f"axis {a} out of range for rank {self.ndim}")
        if len(set(axes)) != len(axes):
            raise BadAxis(f"repeated axis in {axes}")
        if not axes:
            return self.copy()

        kept = [a for a in range(self.ndim) if a not in axes]
        kept_shape = tuple(self.shape[a] for a in kept)
        reduced_n = math.prod(self.shape[a] for a in sorted(axes))

        if reduced_n == 0:
            if kind == "sum":
                return Tensor(kept_shape, fill=0.0, dtype=self.dtype)
            raise EmptyReduce(f"{kind} over zero elements (shape {self.shape}, axes {axes})")

        moved = np.transpose(self.data, kept + sorted(axes))
        block = np.ascontiguousarray(moved).reshape(kept_shape + (reduced_n,))
        if kind == "max":
            out = block.max(axis=-1)
        elif deterministic():
            # cumsum accumulates strictly left to right, matching a scalar loop
            out = np.cumsum(block, axis=-1)[..., -1]
            if kind == "mean":
                out = out / np.asarray(reduced_n, dtype=self.data.dtype)
        else:
            out = block.sum(axis=-1) if kind == "sum" else block.mean(axis=-1)
        return Tensor.wrap(np.asarray(out, dtype=self.data.dtype))

    # --- structured ops ---

    def pad2d(self, pad, value=0.0):
        """Pad the two trailing spatial axes of an NCHW tensor on every side."""
        if self.ndim != 4:
            raise ShapeMismatch(f"pad2d expects rank 4, got {self.shape}")
        pad = int(pad)
        if pad < 0:
            raise ValueError("pad must be >= 0")
        if pad == 0:
            return self.copy()
        out = np.pad(
            self.data,
            ((0, 0), (0, 0), (pad, pad), (pad, pad)),
            constant_values=value,
        )
        return Tensor.wrap(out)

    def matmul(self, other):
        """2-D matrix product; deterministic mode accumulates k ascending."""
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeMismatch(
                f"matmul expects rank-2 operands, got {self.shape} and {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise ShapeMismatch(
                f"inner extents disagree: {self.shape} x {other.shape}"
            )
        if self.data.dtype != other.data.dtype:
            raise ShapeMismatch("matmul operands must share a dtype")
        return Tensor.wrap(matmul_data(self.data, other.data))


def matmul_data(a, b):
    """ndarray-level matmul used by Tensor.matmul and the linear layer.

    Deterministic mode builds the result as a sum of rank-1 updates with k
    ascending, which is bit-identical to the classic triple loop with the
    inner product accumulated from zero.
    """
    if not deterministic():
        return a @ b
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(k):
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return out


def zeros_like(t):
    return Tensor(t.shape, fill=0.0, dtype=t.dtype)
