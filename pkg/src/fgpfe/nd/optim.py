"""Plain SGD: the only optimizer the overfit loop needs."""

from __future__ import annotations

from typing import Iterable

from fgpfe.nd.tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """value <- value - lr * grad, then zero the grads.

    Parameters with no accumulated gradient are left untouched.
    """
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
        p.grad = None


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
