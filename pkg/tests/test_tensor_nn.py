# coding: utf-8
import threading

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from naelutils.definitions import (
    CompatibilityError,
    DegenerateBatchError,
    FormatError,
    GraphStateError,
    LabelError,
    ShapeError,
)
from naelutils.tensor_nn import (
    Adam,
    AdamState,
    BatchNorm,
    BatchNormState,
    FlopsReport,
    LayerSpec,
    Linear,
    Parameter,
    Tensor,
    adam_step,
    batchnorm,
    checkpoint_digest,
    dw_conv_forward,
    fc_forward,
    flops_of,
    gap,
    grad,
    is_grad_enabled,
    load_checkpoint,
    no_grad,
    pw_conv_forward,
    relu6,
    save_checkpoint,
    sc_conv_forward,
    softmax,
    softmax_xent,
)


def naive_sc_conv(x, w, stride, padding):
    n, c_in, h, width = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w))
    for b in range(n):
        for o in range(c_out):
            for i in range(out_h):
                for j in range(out_w):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def naive_dw_conv(x, w, stride, padding):
    n, channels, h, width = x.shape
    _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, channels, out_h, out_w))
    for b in range(n):
        for c in range(channels):
            for i in range(out_h):
                for j in range(out_w):
                    out[b, c, i, j] = np.sum(xp[b, c, i * stride : i * stride + kh, j * stride : j * stride + kw] * w[c])
    return out


def test_sc_conv_identity():
    x = np.random.default_rng(0).standard_normal((1, 1, 6, 6))
    out = sc_conv_forward(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert_array_equal(out.data, x)


def test_sc_conv_shape():
    out = sc_conv_forward(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((4, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 4, 4, 4)


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 1), (2, 1)])
def test_sc_conv_matches_naive_loop(stride, padding):
    rng = np.random.default_rng(stride + padding)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = sc_conv_forward(Tensor(x), Tensor(w), stride, padding)
    assert_allclose(out.data, naive_sc_conv(x, w, stride, padding), atol=1e-10)


def test_sc_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        sc_conv_forward(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((3, 1, 3, 3))))


def test_dw_conv():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 6, 6))
    assert_array_equal(dw_conv_forward(Tensor(x), Tensor(np.zeros((2, 3, 3))), 1, 1).data, 0)
    x[:, 1] = 0
    out = dw_conv_forward(Tensor(x), Tensor(rng.standard_normal((2, 3, 3))), 1, 1)
    assert_array_equal(out.data[:, 1], 0)
    w = rng.standard_normal((2, 3, 3))
    x = rng.standard_normal((2, 2, 7, 7))
    assert_allclose(dw_conv_forward(Tensor(x), Tensor(w), 2, 1).data, naive_dw_conv(x, w, 2, 1), atol=1e-10)
    with pytest.raises(ShapeError):
        dw_conv_forward(Tensor(x), Tensor(np.ones((3, 3, 3))))


def test_pw_conv():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 4))
    assert_allclose(pw_conv_forward(Tensor(x), Tensor(np.eye(3))).data, x)
    assert_allclose(pw_conv_forward(Tensor(x), Tensor(np.ones((1, 3)))).data[:, 0], x.sum(axis=1))
    w = rng.standard_normal((5, 3))
    assert_allclose(
        pw_conv_forward(Tensor(x), Tensor(w)).data,
        sc_conv_forward(Tensor(x), Tensor(w[:, :, None, None])).data,
        atol=1e-12,
    )
    with pytest.raises(ShapeError):
        pw_conv_forward(Tensor(x), Tensor(np.ones((5, 4))))


def test_batchnorm_train_statistics():
    x = np.random.default_rng(3).normal(2.0, 3.0, size=(8, 4, 5, 5))
    state = BatchNormState.fresh(4, np.float64)
    out = batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), state, "train").data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-4)
    assert np.all(state.running_mean != 0)
    affine = batchnorm(Tensor(x), Tensor(np.full(4, 2.0)), Tensor(np.full(4, 3.0)), state, "train").data
    assert_allclose(affine, 2 * out + 3, atol=1e-12)


def test_batchnorm_infer_closed_form():
    x = np.random.default_rng(4).standard_normal((3, 2, 4, 4))
    state = BatchNormState.fresh(2, np.float64)
    gamma, beta = np.array([1.5, -0.5]), np.array([0.25, 1.0])
    out = batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), state, "infer").data
    expected = gamma[None, :, None, None] * x / np.sqrt(1 + state.eps) + beta[None, :, None, None]
    assert_allclose(out, expected, atol=1e-12)


def test_batchnorm_single_sample_train():
    with pytest.raises(DegenerateBatchError):
        batchnorm(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState.fresh(2), "train")


def test_relu6():
    assert_array_equal(relu6(Tensor(np.array([-1.0, 7.0, 3.5]))).data, (0.0, 6.0, 3.5))


def test_fc_and_gap():
    x = np.random.default_rng(5).standard_normal(4)
    assert_allclose(fc_forward(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    assert_allclose(fc_forward(Tensor(np.array([2.0, 3.0])), Tensor(np.ones((1, 2))), Tensor(np.zeros(1))).data, (5.0,))
    w, b = np.random.default_rng(6).standard_normal((3, 4)), np.arange(3.0)
    naive = np.array([sum(w[o, i] * x[i] for i in range(4)) + b[o] for o in range(3)])
    assert_allclose(fc_forward(Tensor(x), Tensor(w), Tensor(b)).data, naive, atol=1e-12)
    with pytest.raises(ShapeError):
        fc_forward(Tensor(x), Tensor(np.ones((3, 5))), Tensor(np.zeros(3)))
    assert_allclose(gap(Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))).data, [[2.5]])
    assert_allclose(gap(Tensor(np.full((1, 2, 3, 3), 0.7))).data, [[0.7, 0.7]])


def test_softmax_xent():
    loss, probabilities = softmax_xent(Tensor(np.zeros(12)), 3)
    assert_allclose(loss.data, np.log(12))
    assert_allclose(probabilities.sum(), 1.0, atol=1e-9)
    loss, _ = softmax_xent(Tensor(np.array([1000.0, 0.0])), 0)
    assert np.isfinite(loss.data) and loss.data < 1e-12
    logits = np.random.default_rng(7).standard_normal((4, 5))
    labels = np.array([0, 4, 2, 2])
    loss, _ = softmax_xent(Tensor(logits), labels)
    reference = np.mean([np.log(np.sum(np.exp(row))) - row[label] for row, label in zip(logits, labels)])
    assert_allclose(loss.data, reference, atol=1e-10)
    with pytest.raises(LabelError):
        softmax_xent(Tensor(np.zeros(12)), 12)


def test_class_weighted_loss():
    logits = np.random.default_rng(8).standard_normal((3, 2))
    labels = np.array([0, 1, 1])
    loss, _ = softmax_xent(Tensor(logits), labels, class_weights=[2.0, 1.0])
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    picked = log_probs[np.arange(3), labels]
    assert_allclose(loss.data, -(2 * picked[0] + picked[1] + picked[2]) / 4, atol=1e-12)


def test_softmax_rows_sum_to_one():
    probabilities = softmax(np.random.default_rng(9).standard_normal((6, 12)) * 30)
    assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((probabilities >= 0) & (probabilities <= 1))


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_needs_graph():
    with pytest.raises(GraphStateError):
        Tensor(np.ones(1)).backward()
    with no_grad():
        y = Tensor(np.ones(1), requires_grad=True) * 2.0
    with pytest.raises(GraphStateError):
        y.backward()


def test_grad_leaves_every_grad_untouched():
    weight = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    x = Tensor(np.array([[1.0, -1.0]]), requires_grad=True)
    hidden = fc_forward(x, weight, Parameter(np.zeros(2)))
    out = (hidden * hidden).sum()
    dx, dhidden, dother = grad(out, [x, hidden, Tensor(np.ones(2), requires_grad=True)])
    assert_array_equal(dhidden, 2 * hidden.data)
    assert_array_equal(dx, 2 * hidden.data @ weight.data)
    assert dother is None
    assert x.grad is None and weight.grad is None and hidden.grad is None
    with pytest.raises(GraphStateError):
        grad(Tensor(np.ones(1)), [x])


def test_no_grad_is_local_to_a_thread():
    entered, release = threading.Event(), threading.Event()
    seen = {}

    def hold():
        with no_grad():
            entered.set()
            release.wait(5)
            seen["inside"] = is_grad_enabled()

    worker = threading.Thread(target=hold)
    worker.start()
    entered.wait(5)
    seen["main"] = is_grad_enabled()
    assert (Tensor(np.ones(1), requires_grad=True) * 2.0)._ctx is not None
    release.set()
    worker.join()
    assert seen == {"main": True, "inside": False}
    assert is_grad_enabled()


def test_unused_activation_gets_no_gradient():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    unused = Tensor(np.ones((2, 3)), requires_grad=True)
    (x * 2.0).sum().backward()
    assert unused.grad is None
    assert_array_equal(x.grad, 2.0)


@pytest.mark.parametrize("seed", range(20))
def test_convolution_gradients(gradcheck, seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    x = rng.standard_normal((2, 2, 5, 5))
    assert gradcheck(lambda a, k: sc_conv_forward(a, k, stride, 1), x, rng.standard_normal((3, 2, 3, 3))) < 1e-4
    assert gradcheck(lambda a, k: dw_conv_forward(a, k, stride, 1), x, rng.standard_normal((2, 3, 3))) < 1e-4
    assert gradcheck(pw_conv_forward, x, rng.standard_normal((4, 2))) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_dense_gradients(gradcheck, seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((3, 2, 3, 3))
    assert gradcheck(gap, x) < 1e-4
    # keep inputs away from the ReLU6 kinks
    y = rng.choice([-1.5, 1.0, 2.5, 4.0, 7.0], size=(4, 5)) + rng.uniform(-0.3, 0.3, size=(4, 5))
    assert gradcheck(relu6, y) < 1e-4
    assert gradcheck(fc_forward, rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)) < 1e-4
    labels = rng.integers(0, 6, size=4)
    assert gradcheck(lambda logits: softmax_xent(logits, labels)[0], rng.standard_normal((4, 6))) < 1e-4


@pytest.mark.parametrize("mode", ["train", "infer"])
@pytest.mark.parametrize("seed", range(20))
def test_batchnorm_gradients(gradcheck, mode, seed):
    rng = np.random.default_rng(200 + seed)
    state = BatchNormState.fresh(3, np.float64)
    state.running_mean[:] = rng.standard_normal(3)
    state.running_var[:] = rng.uniform(0.5, 2.0, 3)

    def build(x, gamma, beta):
        return batchnorm(x, gamma, beta, state, mode)

    error = gradcheck(build, rng.standard_normal((4, 3, 2, 2)), rng.standard_normal(3), rng.standard_normal(3))
    assert error < 1e-4


def test_adam_zero_gradient_keeps_parameters():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState())
    assert_array_equal(params["w"], (1.0, -2.0))


def test_adam_first_step():
    values = np.array([0.5, -0.25, 3.0])
    params = {"w": values.copy()}
    state = adam_step(params, {"w": np.array([0.1, -4.0, 2e-3])}, AdamState(lr=1e-2))
    delta = params["w"] - values
    assert state.step == 1
    assert_allclose(delta, -1e-2 * np.array([1, -1, 1]), rtol=1e-4)
    assert np.all(np.abs(delta) <= 1e-2 * (1 + 1e-6))
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(2)}, state)


def test_adam_is_deterministic():
    grads = {"w": np.array([0.3, -0.7])}
    first, second = {"w": np.array([1.0, 1.0])}, {"w": np.array([1.0, 1.0])}
    state_1, state_2 = AdamState(), AdamState()
    for _ in range(3):
        adam_step(first, grads, state_1)
        adam_step(second, grads, state_2)
    assert_array_equal(first["w"], second["w"])


def test_adam_reads_parameter_gradients():
    layer = Linear(3, 2, rng=0, dtype=np.float64)
    before = layer.weight.data.copy()
    optimizer = Adam(layer.named_parameters(), lr=0.1)
    loss, _ = softmax_xent(layer(Tensor(np.ones((2, 3)))), [0, 1])
    loss.backward()
    optimizer.step()
    assert not np.array_equal(layer.weight.data, before)
    optimizer.zero_grad()
    assert layer.weight.grad is None


def test_flops_of():
    assert flops_of(LayerSpec("sc_conv", 1, 16, (3, 3), stride=2, padding=1), 64, 64) == 589_824
    assert flops_of(LayerSpec("dw_conv", 16, 16, (3, 3), padding=1), 64, 64) == 589_824
    assert flops_of(LayerSpec("dw_conv", 16, 16, (3, 3), padding=1), 64, 64) + flops_of(
        LayerSpec("pw_conv", 16, 24), 64, 64
    ) == 589_824 + 1_572_864
    assert flops_of(LayerSpec("fc", 256, 12)) == 3_072
    for kind in ("batchnorm", "relu6", "gap", "softmax"):
        assert flops_of(LayerSpec(kind, 16, 16), 64, 64) == 0


@pytest.mark.parametrize("c_in", [1, 3, 16])
@pytest.mark.parametrize("c_out", [2, 8, 64])
@pytest.mark.parametrize("k", [3, 5])
@pytest.mark.parametrize("size", [4, 32])
def test_separable_convolution_is_cheaper(c_in, c_out, k, size):
    standard = flops_of(LayerSpec("sc_conv", c_in, c_out, (k, k)), size, size)
    separable = flops_of(LayerSpec("dw_conv", c_in, c_in, (k, k)), size, size) + flops_of(
        LayerSpec("pw_conv", c_in, c_out), size, size
    )
    assert separable < standard


def test_flops_report():
    layers = [
        ("conv", LayerSpec("sc_conv", 1, 16, (3, 3), 2, 1), 64, 64),
        ("bn", LayerSpec("batchnorm", 16, 16), 64, 64),
        ("fc", LayerSpec("fc", 256, 12), 1, 1),
    ]
    report = FlopsReport.concat([FlopsReport.from_layers("a", layers), FlopsReport.from_layers("b", layers[2:])])
    assert report.total() == 589_824 + 2 * 3_072
    assert report.total("b") == 3_072
    assert report.total(["a", "b"]) == report.total()
    totals = report.totals()
    assert totals["network"].to_list() == ["a", "b"]
    assert report.mflops == pytest.approx(0.595968)


def test_layer_spec_validation():
    with pytest.raises(ShapeError):
        LayerSpec("dw_conv", 4, 8, (3, 3))
    with pytest.raises(ShapeError):
        LayerSpec("pw_conv", 4, 8, (3, 3))


def test_module_state_dict():
    norm = BatchNorm(3, dtype=np.float64)
    assert set(norm.state_dict()) == {"gamma", "beta", "running_mean", "running_var"}
    norm.train()
    norm(Tensor(np.random.default_rng(0).standard_normal((4, 3))))
    other = BatchNorm(3, dtype=np.float64).load_state_dict(norm.state_dict())
    assert_array_equal(other.state.running_mean, norm.state.running_mean)
    with pytest.raises(CompatibilityError):
        BatchNorm(4).load_state_dict(norm.state_dict())


def test_checkpoint_round_trip(tmp_path):
    tensors = {"conv.weight": np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2), "bias": np.array([0.5], dtype=np.float32)}
    path = save_checkpoint(tensors, tmp_path / "net.ckpt")
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert_array_equal(loaded[name], tensors[name])
    digest = checkpoint_digest(path)
    assert len(digest) == 64
    assert checkpoint_digest(save_checkpoint(loaded, tmp_path / "again.ckpt")) == digest


def test_checkpoint_corruption(tmp_path):
    path = save_checkpoint({"w": np.ones((2, 2), dtype=np.float32)}, tmp_path / "net.ckpt")
    raw = path.read_bytes()
    path.write_bytes(b"X" + raw[1:])
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert info.value.offset == 0
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert info.value.offset == len(raw)


def test_parameters_require_grad():
    assert Parameter(np.zeros(2)).requires_grad
