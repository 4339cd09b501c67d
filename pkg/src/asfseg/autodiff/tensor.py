"""Rank-4 tensor value type.

Every value in the engine is a (N, C, H, W) float32 array, including
scalars, which are carried as (1, 1, 1, 1). Tensors are immutable: the
backing array is copied on construction and marked read-only, so they are
safe to share across threads and to reuse as graph bindings.
"""

import numpy as np

from ..errors import NumericFaultError, UsageError


class Tensor:
    __slots__ = ("data", "requires_grad", "_internal")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim != 4:
            raise UsageError(f"tensor must be rank 4 (N,C,H,W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise UsageError(f"tensor dims must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericFaultError("tensor", "non-finite values in tensor data")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._internal = None

    def internal(self):
        """Engine-layout view (N,H,W,C), computed once per tensor."""
        if self._internal is None:
            arr = np.ascontiguousarray(self.data.transpose(0, 2, 3, 1))
            arr.flags.writeable = False
            self._internal = arr
        return self._internal

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        """Read-only view of the backing array."""
        return self.data

    def with_data(self, data):
        """New tensor with the same requires_grad flag."""
        return Tensor(data, requires_grad=self.requires_grad)

    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value, requires_grad=False):
        return cls(np.full((1, 1, 1, 1), value, dtype=np.float32), requires_grad=requires_grad)

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_array4d(data, name="value"):
    """Coerce ndarray/Tensor/nested lists to a float32 (N,C,H,W) array.

    2-D input is promoted to (1, 1, H, W); scalars to (1, 1, 1, 1).
    """
    if isinstance(data, Tensor):
        return data.data
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    elif arr.ndim == 2:
        arr = arr.reshape((1, 1) + arr.shape)
    elif arr.ndim == 3:
        arr = arr.reshape((1,) + arr.shape)
    if arr.ndim != 4:
        raise UsageError(f"{name}: cannot interpret shape {np.shape(data)} as (N,C,H,W)")
    return arr
