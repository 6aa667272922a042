"""The differentiable kernel: ops, layers, loss, optimizer, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgpfe import nd


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# linear


def test_linear_identity():
    linear = nd.Linear(3, 3, _rng())
    linear.weight.data[:] = np.eye(3)
    x = nd.Tensor(np.array([[1.0, -2.0, 3.5]]))
    assert np.array_equal(linear(x).data, x.data)


def test_linear_hand_sum():
    linear = nd.Linear(2, 1, _rng())
    linear.weight.data[:] = [[1.0, 1.0]]
    out = linear(nd.Tensor(np.array([[1.0, 2.0]])))
    assert np.array_equal(out.data, [[3.0]])


def test_linear_leading_dims_and_shape_check():
    linear = nd.Linear(4, 2, _rng(1))
    out = linear(nd.Tensor(_rng(2).normal(size=(3, 5, 4))))
    assert out.data.shape == (3, 5, 2)
    with pytest.raises(ValueError, match="trailing dim"):
        linear(nd.Tensor(np.zeros((3, 3))))


def test_linear_no_grad_matches_grad_path():
    linear = nd.Linear(6, 4, _rng(3))
    x = _rng(4).normal(size=(9, 6))
    with_tape = linear(nd.Tensor(x)).data
    with nd.no_grad():
        without = linear(nd.Tensor(x)).data
    assert np.array_equal(with_tape, without)


# ---------------------------------------------------------------------------
# conv1d


def test_conv1d_delta_kernel_identity():
    conv = nd.Conv1d(1, 1, kernel_size=3, rng=_rng())
    conv.kernel.data[:] = 0.0
    conv.kernel.data[0, 0, 1] = 1.0  # center tap
    x = nd.Tensor(_rng(5).normal(size=(8, 1)))
    assert np.allclose(conv(x).data, x.data, atol=0, rtol=0)


def test_conv1d_hand_convolution_with_zero_pad():
    conv = nd.Conv1d(1, 1, kernel_size=3, rng=_rng())
    conv.kernel.data[:] = 1.0
    x = nd.Tensor(np.ones((4, 1)))
    assert np.array_equal(conv(x).data[:, 0], [2.0, 3.0, 3.0, 2.0])


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ValueError, match="odd"):
        nd.Conv1d(1, 1, kernel_size=4, rng=_rng())
    with pytest.raises(ValueError, match="odd"):
        nd.conv1d(nd.Tensor(np.zeros((4, 1))), nd.Tensor(np.zeros((1, 1, 2))))


def test_conv1d_batched_matches_per_row():
    rng = _rng(6)
    conv = nd.Conv1d(2, 3, kernel_size=5, rng=rng, bias=True)
    x = rng.normal(size=(4, 10, 2))
    batched = conv(nd.Tensor(x)).data
    for i in range(4):
        single = conv(nd.Tensor(x[i])).data
        assert np.allclose(batched[i], single, atol=1e-15)


def test_conv1d_single_output_channel_matches_general_path():
    # the width-1 fast path must agree with the einsum path bit-for-bit
    rng = _rng(7)
    x = rng.normal(size=(3, 9, 2))
    kernel = rng.normal(size=(1, 2, 7))
    narrow = nd.conv1d(nd.Tensor(x), nd.Tensor(kernel)).data
    wide = nd.conv1d(nd.Tensor(x), nd.Tensor(np.vstack([kernel, kernel]))).data
    assert np.allclose(narrow[..., 0], wide[..., 0], atol=1e-12)


# ---------------------------------------------------------------------------
# reductions


def test_reduce_mean_example():
    x = nd.Tensor(np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]))
    assert np.array_equal(nd.reduce(x, axis=0, mode="mean").data, [2.0, 2.0, 2.0])


def test_reduce_max_example():
    x = nd.Tensor(np.array([[1.0, 2.0], [3.0, 0.0]]))
    assert np.array_equal(nd.reduce(x, axis=0, mode="max").data, [3.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reduce_invariant_under_permutation(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rng.integers(1, 12), 5))
    perm = rng.permutation(x.shape[0])
    for mode in ("mean", "max"):
        a = nd.reduce(nd.Tensor(x), axis=0, mode=mode).data
        b = nd.reduce(nd.Tensor(x[perm]), axis=0, mode=mode).data
        assert np.allclose(a, b, atol=1e-12)


def test_reduce_max_backward_first_argmax_on_ties():
    x = nd.Tensor(np.array([[2.0], [2.0], [1.0]]), requires_grad=True)
    out = nd.reduce(x, axis=0, mode="max")
    out.backward(np.ones_like(out.data))
    assert np.array_equal(x.grad[:, 0], [1.0, 0.0, 0.0])


def test_reduce_rejects_bad_axis_and_mode():
    x = nd.Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nd.reduce(x, axis=5, mode="mean")
    with pytest.raises(ValueError):
        nd.reduce(x, axis=0, mode="median")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def test_sigmoid_at_zero():
    assert nd.sigmoid(nd.Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]


def test_sigmoid_extreme_inputs_stay_finite():
    out = nd.sigmoid(nd.Tensor(np.array([-1e4, -50.0, 50.0, 1e4]))).data
    assert np.all(np.isfinite(out))
    assert np.all((out >= 0.0) & (out <= 1.0))


def test_ewmul_identity():
    x = _rng(8).normal(size=(4, 3))
    assert np.array_equal(nd.ewmul(nd.Tensor(x), nd.Tensor(np.ones((4, 3)))).data, x)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ewmul_broadcast_matches_explicit_expansion(seed):
    rng = np.random.default_rng(seed)
    n, h, c = (int(v) for v in rng.integers(1, 6, size=3))
    x = rng.normal(size=(n, h, c))
    for gate_shape in ((n, 1, c), (n, h, 1)):
        gate = rng.normal(size=gate_shape)
        via_broadcast = nd.ewmul(nd.Tensor(x), nd.Tensor(gate)).data
        explicit = nd.ewmul(nd.Tensor(x), nd.Tensor(np.broadcast_to(gate, x.shape).copy())).data
        assert np.array_equal(via_broadcast, explicit)


def test_reshape_concat_roundtrip():
    rng = _rng(9)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    joined = nd.concat([nd.Tensor(a), nd.Tensor(b)], axis=1)
    flat = nd.reshape(joined, (2, 10))
    back = nd.reshape(flat, (4, 5))
    assert np.array_equal(nd.slice_axis(back, 1, 0, 3).data, a)
    assert np.array_equal(nd.slice_axis(back, 1, 3, 5).data, b)


def test_where_selects_and_routes_gradient():
    cond = np.array([True, False, True])
    a = nd.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    b = nd.Tensor(np.array([10.0, 20.0, 30.0]), requires_grad=True)
    out = nd.where(cond, a, b)
    assert np.array_equal(out.data, [1.0, 20.0, 3.0])
    out.backward(np.ones(3))
    assert np.array_equal(a.grad, [1.0, 0.0, 1.0])
    assert np.array_equal(b.grad, [0.0, 1.0, 0.0])


def test_no_grad_blocks_tape():
    x = nd.Tensor(np.ones(3), requires_grad=True)
    with nd.no_grad():
        out = nd.mul(x, 2.0)
    assert out._parents is None  # nothing recorded


# ---------------------------------------------------------------------------
# segment ops


def _random_segments(rng, n_rows, c=4):
    cuts = np.sort(rng.choice(np.arange(1, n_rows), size=rng.integers(1, 6), replace=False))
    starts = np.concatenate([[0], cuts]).astype(np.int64)
    counts = np.diff(np.append(starts, n_rows)).astype(np.int64)
    return rng.normal(size=(n_rows, c)), starts, counts


def test_segment_ops_match_plain_loops():
    rng = _rng(10)
    for _ in range(10):
        x, starts, counts = _random_segments(rng, int(rng.integers(6, 30)))
        mean = nd.segment_mean(nd.Tensor(x), starts, counts).data
        total = nd.segment_sum(nd.Tensor(x), starts, counts).data
        mx = nd.segment_max(nd.Tensor(x), starts, counts).data
        for g, (s, n) in enumerate(zip(starts, counts)):
            block = x[s : s + n]
            assert np.allclose(total[g], block.sum(axis=0), atol=1e-12)
            assert np.allclose(mean[g], block.mean(axis=0), atol=1e-12)
            assert np.array_equal(mx[g], block.max(axis=0))


def test_sequential_segment_sum_is_left_to_right():
    # constructed so pairwise summation would give different low bits
    vals = np.array([[1e16], [1.0], [1.0], [-1e16]])
    starts, counts = np.array([0]), np.array([4])
    out = nd.sequential_segment_sum(vals, starts, counts)
    expected = ((1e16 + 1.0) + 1.0) + -1e16  # = 2.0 exactly in float64
    assert out[0, 0] == expected


def test_binned_linear_matches_dense_layout():
    rng = _rng(11)
    n_rows, bins, c, c_out = 5, 3, 4, 6
    # a strictly increasing subset of the n_rows * bins slots
    slots = np.sort(rng.choice(n_rows * bins, size=8, replace=False)).astype(np.int64)
    values = nd.Tensor(rng.normal(size=(8, c)), requires_grad=True)
    weight = nd.Tensor(rng.normal(size=(c_out, bins * c)), requires_grad=True)
    bias = nd.Tensor(rng.normal(size=c_out), requires_grad=True)

    compact = nd.binned_linear(values, slots, n_rows, bins, weight, bias)

    dense = nd.reshape(nd.scatter_rows(values, slots, n_rows * bins), (n_rows, bins * c))
    reference = nd.add(nd.matmul(dense, nd.Tensor(weight.data.T.copy())), bias)
    assert np.allclose(compact.data, reference.data, atol=1e-12)

    w = rng.normal(size=compact.data.shape)
    compact.backward(w)
    gv, gw, gb = values.grad.copy(), weight.grad.copy(), bias.grad.copy()
    assert np.allclose(gv, (w @ weight.data).reshape(n_rows, bins, c).reshape(n_rows * bins, c)[slots], atol=1e-12)
    assert gw.shape == weight.data.shape and gb.shape == bias.data.shape


def test_binned_linear_rejects_unsorted_slots():
    with pytest.raises(ValueError, match="strictly increasing"):
        nd.binned_linear(
            nd.Tensor(np.zeros((2, 3))),
            np.array([3, 1]),
            4,
            2,
            nd.Tensor(np.zeros((5, 6))),
        )


def test_scatter_rows_rejects_duplicates():
    with pytest.raises(ValueError, match="unique"):
        nd.scatter_rows(nd.Tensor(np.zeros((2, 3))), np.array([1, 1]), 4)


# ---------------------------------------------------------------------------
# focal loss


def test_focal_confident_correct_is_near_zero():
    p = nd.Tensor(np.full(4, 1.0 - 1e-6))
    y = np.ones(4)
    assert float(nd.focal_loss(p, y).data) < 1e-5


def test_focal_half_probability_closed_form():
    p = nd.Tensor(np.array([0.5]))
    y = np.ones(1)
    expected = 0.25 * 0.25 * math.log(2.0)  # alpha * (1-p)^gamma * -log(p)
    assert float(nd.focal_loss(p, y, alpha=0.25, gamma=2.0).data) == pytest.approx(
        expected, rel=1e-12
    )
    assert expected == pytest.approx(0.043322, abs=1e-6)


def test_focal_shape_mismatch():
    with pytest.raises(ValueError):
        nd.focal_loss(nd.Tensor(np.zeros(3)), np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0.05, 0.95),
    st.floats(0.05, 0.94),
    st.integers(0, 1),
)
def test_focal_moves_toward_label_decreases(p_far, gap, label):
    # a prediction strictly closer to the label scores a strictly lower loss
    y = np.array([float(label)])
    if label == 1:
        far, near = p_far * (1 - gap), p_far
    else:
        far, near = p_far + (1 - p_far) * gap, p_far
    loss_far = float(nd.focal_loss(nd.Tensor(np.array([far])), y).data)
    loss_near = float(nd.focal_loss(nd.Tensor(np.array([near])), y).data)
    assert loss_near < loss_far


# ---------------------------------------------------------------------------
# sgd


def test_sgd_zero_lr_keeps_values():
    p = nd.Parameter(np.array([1.0, 2.0]), name="p")
    p.grad = np.array([5.0, -5.0])
    nd.sgd_step([p], lr=0.0)
    assert np.array_equal(p.data, [1.0, 2.0])
    assert np.array_equal(p.grad, [0.0, 0.0])  # grads zeroed


def test_sgd_scalar_step():
    p = nd.Parameter(np.array([3.0]), name="p")
    p.grad = np.array([1.0])
    nd.sgd_step([p], lr=0.1)
    assert p.data[0] == pytest.approx(2.9, abs=1e-15)


def test_sgd_converges_on_quadratic():
    target = 1.7
    p = nd.Parameter(np.array([-4.0]), name="x")
    for _ in range(200):
        loss = nd.mean_all(nd.mul(nd.sub(p, target), nd.sub(p, target)))
        loss.backward()
        nd.sgd_step([p], lr=0.1)
    assert abs(p.data[0] - target) < 1e-3


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = _rng(12)
    params = [
        nd.Parameter(rng.normal(size=(3, 4)), name="a.weight"),
        nd.Parameter(rng.normal(size=4), name="a.bias"),
        nd.Parameter(rng.normal(size=(2, 3, 5)), name="b.kernel"),
    ]
    path = tmp_path / "params.ckpt"
    nd.save_checkpoint(params, path)
    state = nd.load_checkpoint(path)
    assert set(state) == {"a.weight", "a.bias", "b.kernel"}
    for p in params:
        assert np.array_equal(state[p.name], p.data)

    fresh = [nd.Parameter(np.zeros_like(p.data), name=p.name) for p in params]
    nd.restore_parameters(fresh, state)
    for p, q in zip(params, fresh):
        assert np.array_equal(p.data, q.data)


def test_checkpoint_rejects_duplicate_names(tmp_path):
    params = [nd.Parameter(np.zeros(2), name="w"), nd.Parameter(np.zeros(2), name="w")]
    with pytest.raises(Exception, match="duplicate"):
        nd.save_checkpoint(params, tmp_path / "dup.ckpt")


def test_restore_rejects_missing_extra_and_mismatched(tmp_path):
    from fgpfe.nd.checkpoint import CheckpointError

    p = nd.Parameter(np.zeros((2, 2)), name="w")
    nd.save_checkpoint([p], tmp_path / "one.ckpt")
    state = nd.load_checkpoint(tmp_path / "one.ckpt")
    with pytest.raises(CheckpointError):
        nd.restore_parameters([p, nd.Parameter(np.zeros(1), name="v")], state)
    with pytest.raises(CheckpointError):
        nd.restore_parameters([], state)
    with pytest.raises(CheckpointError):
        nd.restore_parameters([nd.Parameter(np.zeros(3), name="w")], state)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(Exception):
        nd.load_checkpoint(path)


# ---------------------------------------------------------------------------
# determinism / init


def test_seeded_init_is_reproducible():
    a = nd.Linear(8, 8, _rng(42))
    b = nd.Linear(8, 8, _rng(42))
    assert np.array_equal(a.weight.data, b.weight.data)


def test_uniform_init_within_fan_in_bound():
    w = nd.uniform_init(_rng(13), (64, 32), fan_in=32)
    bound = 1.0 / math.sqrt(32)
    assert np.all(np.abs(w) <= bound)


def test_backward_requires_scalar_without_cotangent():
    x = nd.Tensor(np.ones((2, 2)), requires_grad=True)
    out = nd.mul(x, 3.0)
    with pytest.raises(ValueError):
        out.backward()
    out.backward(np.ones((2, 2)))
    assert np.array_equal(x.grad, np.full((2, 2), 3.0))


def test_module_parameters_recurse():
    class Stack(nd.Module):
        def __init__(self):
            self.layers = [nd.Linear(2, 2, _rng(i), name=f"l{i}") for i in range(3)]
            self.head = nd.Linear(2, 1, _rng(9), name="head")

    params = Stack().parameters()
    names = [p.name for p in params]
    assert len(params) == 8  # 4 linears x (weight, bias)
    assert "l0.weight" in names and "head.bias" in names
