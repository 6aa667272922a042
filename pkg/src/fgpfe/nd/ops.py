"""Differentiable primitives: elementwise math, pooling, conv1d, segment ops.

Every op computes the forward result eagerly in float64 and, when recording,
returns per-parent cotangents from a closure.  Summation orders are fixed so
identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from fgpfe.nd.tensor import Tensor, as_tensor, record


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing the broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise multiply; size-1 extents broadcast against any extent."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return record(out, (a, b), backward)


# spec name for the gating multiply
ewmul = mul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return record(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # exp(-|x|) never overflows; select the matching closed form per sign
    e = np.exp(-np.abs(x.data))
    denom = 1.0 + e
    s = np.where(x.data >= 0, 1.0 / denom, e / denom)
    out = Tensor(s)

    def backward(g):
        return (g * s * (1.0 - s),)

    return record(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))

    def backward(g):
        return (g / x.data,)

    return record(out, (x,), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** c for a constant exponent; c == 0 yields ones with zero gradient."""
    x = as_tensor(x)
    c = float(exponent)
    out = Tensor(np.power(x.data, c))
    if c == 0.0:

        def backward(g):
            return (np.zeros_like(x.data),)

    else:

        def backward(g):
            return (g * c * np.power(x.data, c - 1.0),)

    return record(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through wherever the input is in range."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * mask,)

    return record(out, (x,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select by a fixed boolean array (not differentiable in cond)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data))

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        )

    return record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and structure


def reduce(x: Tensor, axis: int, mode: str, keepdims: bool = False) -> Tensor:
    """Mean or max along one axis.

    Max routes its gradient to the first argmax element along the axis
    (numpy argmax tie-breaking), which keeps backward deterministic.
    """
    x = as_tensor(x)
    if x.data.shape == ():
        raise ValueError("reduce needs at least one axis")
    axis = axis % x.data.ndim
    if x.data.shape[axis] < 1:
        raise ValueError("reduce over an empty axis")
    if mode == "mean":
        out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
        extent = x.data.shape[axis]

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / extent, x.data.shape).copy(),)

    elif mode == "max":
        out = Tensor(np.max(x.data, axis=axis, keepdims=keepdims))
        winner = np.argmax(x.data, axis=axis)  # first max on ties

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            onehot = np.arange(x.data.shape[axis]).reshape(
                [-1 if i == axis else 1 for i in range(x.data.ndim)]
            ) == np.expand_dims(winner, axis)
            return (g * onehot,)

    else:
        raise ValueError(f"unknown reduce mode {mode!r}")
    return record(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    """Scalar mean over every element."""
    return reduce(reshape(x, (-1,)), axis=0, mode="mean")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.data.shape),)

    return record(out, (x,), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    x = as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv1d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-length 1-D cross-correlation along the length axis.

    ``x`` is [L, C_in] or [B, L, C_in]; ``kernel`` is [C_out, C_in, K] with K
    odd; the input is zero-padded by (K-1)/2 on both sides so the output
    length equals L.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if kernel.data.ndim != 3:
        raise ValueError("conv1d kernel must be [C_out, C_in, K]")
    c_out, c_in, k = kernel.data.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got {k}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[2] != c_in:
        raise ValueError(f"conv1d input shape {x.data.shape} incompatible with kernel {kernel.data.shape}")
    b, length, _ = xd.shape
    pad = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    # accumulate tap by tap: y[b, l, o] = sum_t sum_c xp[b, l+t, c] * w[o, c, t]
    y = np.zeros((b, length, c_out))
    if c_out == 1:
        # plain broadcast arithmetic beats einsum dispatch at this width
        acc = y[:, :, 0]
        for tap in range(k):
            for c in range(c_in):
                acc += xp[:, tap : tap + length, c] * kernel.data[0, c, tap]
    else:
        for tap in range(k):
            y += np.einsum("blc,oc->blo", xp[:, tap : tap + length, :],
                           kernel.data[:, :, tap], optimize=True)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y[0] if squeeze else y)

    def backward(g):
        gd = g[None] if squeeze else g
        gk = np.empty_like(kernel.data)
        gxp = np.zeros_like(xp)
        for tap in range(k):
            xs = xp[:, tap : tap + length, :]
            gk[:, :, tap] = np.einsum("blo,blc->oc", gd, xs, optimize=True)
            # scatter each tap's contribution back onto the padded input
            gxp[:, tap : tap + length, :] += np.einsum(
                "blo,oc->blc", gd, kernel.data[:, :, tap], optimize=True
            )
        gx = gxp[:, pad : pad + length, :]
        if squeeze:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gd.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, parents, backward)


# ---------------------------------------------------------------------------
# gather / scatter / segments


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a [N, ...] tensor; backward scatter-adds."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return record(out, (x,), backward)


def scatter_rows(values: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Place rows at unique positions of a zero [n_rows, ...] tensor."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    # sorted callers (the common case) get a cheap strictness check
    if index.size and not (
        np.all(np.diff(index) > 0) or index.size == len(np.unique(index))
    ):
        raise ValueError("scatter_rows requires unique row indices")
    out_data = np.zeros((n_rows,) + values.data.shape[1:], dtype=np.float64)
    out_data[index] = values.data
    out = Tensor(out_data)

    def backward(g):
        return (g[index],)

    return record(out, (values,), backward)


def sequential_segment_sum(
    values: np.ndarray, starts: np.ndarray, counts: np.ndarray
) -> np.ndarray:
    """Per-segment sums with strict left-to-right accumulation order.

    ``values`` is [n, ...] with segments stored contiguously (segment g
    occupies rows starts[g] : starts[g]+counts[g]).  Element s of every
    segment is added at step s, so each segment is summed in exactly the
    order its rows appear — the property the bit-reproducibility contracts
    rely on.  Vectorized over segments per step, so cost is O(n) plus one
    small numpy call per distinct rank.
    """
    values = np.asarray(values, dtype=np.float64)
    n_seg = len(starts)
    out = np.zeros((n_seg,) + values.shape[1:], dtype=np.float64)
    if n_seg == 0 or values.shape[0] == 0:
        return out
    counts = np.asarray(counts, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    # visit longer segments first so the active set is a shrinking prefix
    order = np.argsort(-counts, kind="stable")
    sorted_counts = counts[order]
    sorted_starts = starts[order]
    max_count = int(sorted_counts[0])
    for step in range(max_count):
        # segments still active at this step are those with count > step
        n_active = int(np.searchsorted(-sorted_counts, -step, side="left"))
        rows = sorted_starts[:n_active] + step
        out[order[:n_active]] += values[rows]
    return out


def _segment_ids(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(starts), dtype=np.int64), counts)


def segment_mean(x: Tensor, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Mean over contiguous row segments of a [n, C] tensor -> [G, C]."""
    x = as_tensor(x)
    counts = np.asarray(counts, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    denom = counts.reshape((-1,) + (1,) * (x.data.ndim - 1)).astype(np.float64)
    out = Tensor(sequential_segment_sum(x.data, starts, counts) / denom)
    seg = _segment_ids(starts, counts)

    def backward(g):
        return ((g / denom)[seg],)

    return record(out, (x,), backward)


def segment_sum(x: Tensor, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Sum over contiguous row segments of a [n, C] tensor -> [G, C].

    Rows accumulate strictly left to right (same order contract as
    ``segment_mean``).
    """
    x = as_tensor(x)
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    out = Tensor(sequential_segment_sum(x.data, starts, counts))
    seg = _segment_ids(starts, counts)

    def backward(g):
        return (g[seg],)

    return record(out, (x,), backward)


def segment_max(x: Tensor, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Max over contiguous row segments; gradient goes to the first maximal row."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("segment_max expects a [n, C] tensor")
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    n_seg = len(starts)
    if n_seg == 0 or x.data.shape[0] == 0:
        out = Tensor(np.zeros((0,) + x.data.shape[1:], dtype=np.float64))

        def backward_empty(g):
            return (np.zeros_like(x.data),)

        return record(out, (x,), backward_empty)
    # rank-by-rank max, vectorized over segments (reduceat pays per-segment
    # dispatch, which dominates when most segments hold a handful of rows)
    maxima = x.data[starts].copy()
    order = np.argsort(-counts, kind="stable")
    sorted_counts = counts[order]
    sorted_starts = starts[order]
    for step in range(1, int(sorted_counts[0])):
        n_active = int(np.searchsorted(-sorted_counts, -step, side="left"))
        ids = order[:n_active]
        maxima[ids] = np.maximum(maxima[ids], x.data[sorted_starts[:n_active] + step])
    out = Tensor(maxima)
    seg = _segment_ids(starts, counts)

    def backward(g):
        # first row per (segment, channel) attaining the max
        hit = x.data == maxima[seg]
        rows = np.where(hit, np.arange(x.data.shape[0])[:, None], x.data.shape[0])
        winner = np.minimum.reduceat(rows, starts, axis=0)
        gx = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(x.data.shape[1]), winner.shape)
        # (row, col) pairs are unique across segments, so fancy add is safe
        gx[winner, cols] += g
        return (gx,)

    return record(out, (x,), backward)


def binned_linear(
    values: Tensor,
    flat_bins: np.ndarray,
    n_rows: int,
    bins: int,
    weight: Tensor,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Linear layer over a bin-concatenated layout without materializing it.

    Row ``s`` of ``values`` [S, C] lives at slot ``flat_bins[s] = row*bins + bin``
    of a conceptual dense [n_rows, bins*C] block whose other slots are zero;
    the result is that block times ``weight`` [C_out, bins*C] (plus ``bias``):

        out[r] = sum_b values_at(r, b) @ weight[:, b*C:(b+1)*C].T + bias

    Skipping the dense intermediate makes the cost proportional to the
    occupied slots instead of ``n_rows * bins``.  ``flat_bins`` must be
    strictly increasing (canonical segment order), which also guarantees each
    slot appears once.
    """
    values = as_tensor(values)
    weight = as_tensor(weight)
    flat_bins = np.asarray(flat_bins, dtype=np.int64)
    if values.data.ndim != 2:
        raise ValueError("binned_linear expects [S, C] values")
    n_seg, channels = values.data.shape
    if flat_bins.shape != (n_seg,):
        raise ValueError("flat_bins must have one entry per values row")
    if n_seg and (flat_bins[0] < 0 or flat_bins[-1] >= n_rows * bins):
        raise ValueError("flat_bins out of range")
    if n_seg and np.any(np.diff(flat_bins) <= 0):
        raise ValueError("flat_bins must be strictly increasing")
    c_out = weight.data.shape[0]
    if weight.data.shape != (c_out, bins * channels):
        raise ValueError(
            f"weight shape {weight.data.shape} incompatible with {bins} bins of {channels}"
        )
    rows = flat_bins // bins
    bin_of = flat_bins - rows * bins
    # group rows by bin once; each bin is then a contiguous slice
    by_bin = np.argsort(bin_of, kind="stable")
    bounds = np.searchsorted(bin_of[by_bin], np.arange(bins + 1))
    sorted_rows = rows[by_bin]
    sorted_values = values.data[by_bin]

    out_data = np.zeros((n_rows, c_out))
    for b in range(bins):
        lo, hi = bounds[b], bounds[b + 1]
        if lo == hi:
            continue
        block = weight.data[:, b * channels : (b + 1) * channels]
        out_data[sorted_rows[lo:hi]] += sorted_values[lo:hi] @ block.T
    if bias is not None:
        out_data += bias.data
    out = Tensor(out_data)

    def backward(g):
        gv = np.empty_like(values.data)
        gw = np.zeros_like(weight.data)
        for b in range(bins):
            lo, hi = bounds[b], bounds[b + 1]
            if lo == hi:
                continue
            block = weight.data[:, b * channels : (b + 1) * channels]
            gr = g[sorted_rows[lo:hi]]
            gv[by_bin[lo:hi]] = gr @ block
            gw[:, b * channels : (b + 1) * channels] = gr.T @ sorted_values[lo:hi]
        grads = [gv, gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (values, weight) if bias is None else (values, weight, bias)
    return record(out, parents, backward)
