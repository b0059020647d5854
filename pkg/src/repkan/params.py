"""Trainable parameter container: a value array paired with a gradient
accumulator of identical shape."""

import numpy as np


class Parameter:
    """float64 value + zero-initialized grad; shapes always match."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"
