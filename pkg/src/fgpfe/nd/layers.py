"""Layer primitives: linear, 1-D conv, and the single-linear MLP block.

Weights initialize uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from a
caller-provided generator; biases initialize to zero so zero-parameter
closed-form checks and empty-bin masking behave exactly.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from fgpfe.nd import ops
from fgpfe.nd.tensor import Parameter, Tensor, is_grad_enabled, record, uniform_init


class Module:
    """Base class: collects Parameters from attributes, recursively."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Parameter):
                        out.append(item)
                    elif isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for p in self.parameters():
            yield p.name, p


class Linear(Module):
    """y[..., j] = sum_i W[j, i] x[..., i] + b[j], over any leading dims."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        name: str = "linear",
    ):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            uniform_init(rng, (out_features, in_features), in_features), name=f"{name}.weight"
        )
        self.bias = Parameter(np.zeros(out_features), name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.in_features:
            raise ValueError(
                f"linear expects trailing dim {self.in_features}, got {x.data.shape}"
            )
        lead = x.data.shape[:-1]
        if not is_grad_enabled():
            # forward-only: same matmul/add sequence, minus the intermediates
            y = x.data.reshape(-1, self.in_features) @ self.weight.data.T.copy()
            if self.bias is not None:
                y += self.bias.data
            return Tensor(y.reshape(lead + (self.out_features,)))
        flat = ops.reshape(x, (-1, self.in_features))
        y = ops.matmul(flat, _transpose(self.weight))
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return ops.reshape(y, lead + (self.out_features,))


def _transpose(t: Tensor) -> Tensor:
    """2-D transpose as a recorded op (used by Linear)."""
    out = Tensor(t.data.T.copy())

    def backward(g):
        return (g.T,)

    return record(out, (t,), backward)


class Conv1d(Module):
    """Same-length 1-D conv along the length axis of [L, C_in] or [B, L, C_in]."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        bias: bool = False,
        name: str = "conv",
    ):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        fan_in = in_channels * kernel_size
        self.kernel = Parameter(
            uniform_init(rng, (out_channels, in_channels, kernel_size), fan_in),
            name=f"{name}.kernel",
        )
        self.bias = Parameter(np.zeros(out_channels), name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.kernel, self.bias)


class Mlp(Module):
    """Single linear layer, optionally followed by ReLU.

    The feature-mixing blocks in the encoders are this shape; ``with_relu``
    is a config switch so tests can run the affine-only variant.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        with_relu: bool = True,
        name: str = "mlp",
    ):
        self.linear = Linear(in_features, out_features, rng, bias=True, name=name)
        self.with_relu = with_relu

    def __call__(self, x: Tensor) -> Tensor:
        y = self.linear(x)
        if not self.with_relu:
            return y
        if not is_grad_enabled():
            # linear's forward-only path returned a fresh array; clamp in place
            np.maximum(y.data, 0.0, out=y.data)
            return y
        return ops.relu(y)
