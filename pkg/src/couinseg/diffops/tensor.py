from dataclasses import dataclass, field

import numpy as np


@dataclass
class DualTensor:
    """A value with a same-shape gradient slot for reverse-mode accumulation."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g):
        self.grad += g
