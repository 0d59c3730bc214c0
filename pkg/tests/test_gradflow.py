import json
import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import grad_check
from sanerf import gradflow as gf


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# op values and errors


def test_exp_identity_case():
    x = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
    y = gf.exp(x)
    gf.backward(y)
    assert y.item() == 1.0
    assert x.grad.item() == 1.0


def test_matmul_identity(rng):
    v = torch.as_tensor(rng.standard_normal(3))
    assert torch.equal(gf.matmul(torch.eye(3, dtype=torch.float64), v), v)


@pytest.mark.parametrize(
    "op,args",
    [
        (gf.add, (torch.zeros(2, 3), torch.zeros(4))),
        (gf.mul, (torch.zeros(2, 3), torch.zeros(2, 2))),
        (gf.matmul, (torch.zeros(2, 3), torch.zeros(2, 3))),
        (gf.broadcast, (torch.zeros(2, 3), (4, 3, 2))),
    ],
)
def test_shape_mismatch_names_op(op, args):
    with pytest.raises(gf.ShapeError) as exc:
        op(*args)
    assert exc.value.op == op.__name__
    assert "incompatible shapes" in str(exc.value)


def test_concat_and_conv_shape_errors():
    with pytest.raises(gf.ShapeError, match="concat"):
        gf.concat([torch.zeros(2, 3), torch.zeros(3, 2)], dim=0)
    with pytest.raises(gf.ShapeError, match="conv2d"):
        gf.conv2d(torch.zeros(1, 3, 8, 8), torch.zeros(4, 2, 3, 3))
    with pytest.raises(gf.ShapeError, match="slice"):
        gf.slice(torch.zeros(3), 5)


def test_conv2d_stride2_output_extent():
    x = torch.zeros(3, 8, 8)
    w = torch.zeros(4, 3, 3, 3)
    assert gf.conv2d(x, w, torch.zeros(4), stride=2).shape == (4, 4, 4)


@pytest.mark.parametrize("size", [1, 2, 5, 7, 8, 13, 48, 64])
@pytest.mark.parametrize("k", [3, 5, 7])
def test_conv2d_ceil_division(size, k):
    y = gf.conv2d(torch.zeros(1, 2, size, size + 3), torch.zeros(3, 2, k, k), stride=2)
    assert y.shape[-2:] == (math.ceil(size / 2), math.ceil((size + 3) / 2))


def test_conv2d_matches_direct_loop(rng):
    # zero padding of k//2 in front, extra padding at the back only
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = gf.conv2d(torch.as_tensor(x), torch.as_tensor(w), torch.as_tensor(b), stride=2).numpy()
    xp = np.zeros((2, 7 + 3, 6 + 3))
    xp[:, 1:8, 1:7] = x
    ref = np.zeros((3, 4, 3))
    for o in range(3):
        for i in range(4):
            for j in range(3):
                ref[o, i, j] = np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_global_avg_pool_mean():
    x = torch.arange(24.0).reshape(2, 3, 4)
    np.testing.assert_allclose(gf.global_avg_pool(x).numpy(), x.numpy().mean(axis=(1, 2)))


# ---------------------------------------------------------------------------
# gradients against central differences (float64)

UNARY = [gf.exp, gf.sin, gf.cos, gf.softplus, gf.sigmoid]


@pytest.mark.parametrize("op", UNARY, ids=lambda f: f.__name__)
def test_unary_grad(op, rng):
    assert grad_check(op, rand(rng, 4, 3)) < 1e-4


def test_relu_grad_away_from_kink(rng):
    x = rand(rng, 5, 4)
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    assert grad_check(gf.relu, x) < 1e-4


def test_reciprocal_grad(rng):
    assert grad_check(gf.reciprocal, rand(rng, 6, lo=0.5, hi=2.0)) < 1e-4


def test_binary_grads_with_broadcasting(rng):
    assert grad_check(gf.add, rand(rng, 3, 4), rand(rng, 4)) < 1e-4
    assert grad_check(gf.mul, rand(rng, 3, 1), rand(rng, 1, 4)) < 1e-4
    assert grad_check(gf.matmul, rand(rng, 3, 5), rand(rng, 5, 2)) < 1e-4


def test_structural_op_grads(rng):
    assert grad_check(lambda a: gf.sum(a, dim=1), rand(rng, 3, 4)) < 1e-4
    assert grad_check(lambda a: gf.broadcast(a, (5, 4)), rand(rng, 1, 4)) < 1e-4
    assert grad_check(lambda a: gf.slice(a, (slice(1, 3), 0)), rand(rng, 4, 3)) < 1e-4
    assert grad_check(lambda a, b: gf.concat([a, b], dim=0), rand(rng, 2, 3), rand(rng, 1, 3)) < 1e-4


def test_conv_and_pool_grads(rng):
    fn = lambda x, w, b: gf.global_avg_pool(gf.conv2d(x, w, b, stride=2))
    assert grad_check(fn, rand(rng, 2, 5, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)) < 1e-4


def test_backward_scalar_examples():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    gf.backward(gf.mul(x, x))
    assert x.grad.item() == pytest.approx(6.0)
    v = torch.linspace(-2, 2, 7, dtype=torch.float64, requires_grad=True)
    gf.backward(gf.sum(gf.sin(v)))
    np.testing.assert_allclose(v.grad.numpy(), np.cos(v.detach().numpy()), atol=1e-15)


def test_backward_rejects_non_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(gf.GradflowError, match="scalar"):
        gf.backward(x * 2)


def test_mlp_grad_matches_finite_differences(rng):
    x = rng.standard_normal((6, 4))

    def mlp(w1, w2, w3):
        h = gf.softplus(gf.matmul(torch.as_tensor(x), w1))
        h = gf.sigmoid(gf.matmul(h, w2))
        return gf.sum(gf.matmul(h, w3))

    assert grad_check(mlp, rand(rng, 4, 8), rand(rng, 8, 5), rand(rng, 5, 1)) < 1e-4


def test_backward_fills_unreached_params_with_zeros():
    ps = gf.ParamStore(torch.float64)
    a = ps.add("a", [1.0, 2.0])
    ps.add("b", [3.0])
    gf.backward(gf.sum(gf.mul(a, a)), ps)
    np.testing.assert_array_equal(ps["b"].grad.numpy(), [0.0])
    np.testing.assert_array_equal(a.grad.numpy(), [2.0, 4.0])


# ---------------------------------------------------------------------------
# parameter store and Adam


def test_param_store_order_and_uniqueness():
    ps = gf.ParamStore()
    for n in ["z", "a", "m"]:
        ps.add(n, np.zeros(2))
    assert list(ps) == ["z", "a", "m"]
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(1))
    ps.set_trainable("a", False)
    assert [n for n, _ in ps.trainable()] == ["z", "m"]


def test_adam_zero_gradient_leaves_params():
    ps = gf.ParamStore(torch.float64)
    p = ps.add("p", [1.0, -2.0])
    p.grad = torch.zeros_like(p)
    before = p.detach().clone()
    gf.adam_step(ps)
    assert torch.equal(p.detach(), before)


def reference_adam(x0, grad, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_adam_quadratic_matches_reference_loop():
    ps = gf.ParamStore(torch.float64)
    x = ps.add("x", 0.0)
    for _ in range(500):
        gf.backward((x - 5.0) ** 2, ps)
        gf.adam_step(ps, lr=0.1)
    ref = reference_adam(0.0, lambda v: 2 * (v - 5.0), 0.1, 500)
    assert abs(x.item() - 5.0) < 1e-2
    assert x.item() == pytest.approx(ref, abs=1e-12)


def test_adam_defaults():
    import inspect

    sig = inspect.signature(gf.adam_step)
    assert sig.parameters["lr"].default == 5e-4
    assert sig.parameters["beta1"].default == 0.9
    assert sig.parameters["beta2"].default == 0.999


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_adam_non_finite_gradient_names_param(bad):
    ps = gf.ParamStore(torch.float64)
    ps.add("fine", [1.0]).grad = torch.tensor([1.0], dtype=torch.float64)
    ps.add("broken", [1.0, 2.0]).grad = torch.tensor([0.0, bad], dtype=torch.float64)
    with pytest.raises(gf.NonFiniteGradientError) as exc:
        gf.adam_step(ps)
    assert exc.value.name == "broken"
    assert ps.step == 0


def test_adam_moments_persist():
    ps = gf.ParamStore(torch.float64)
    p = ps.add("p", [0.0])
    p.grad = torch.tensor([2.0], dtype=torch.float64)
    gf.adam_step(ps)
    m, v = ps.moments("p")
    assert m.item() == pytest.approx(0.2)
    assert v.item() == pytest.approx(0.004)
    assert ps.step == 1


def test_lr_schedule_endpoints():
    assert gf.lr_at(0, 100, 5e-4, 5e-5) == pytest.approx(5e-4)
    assert gf.lr_at(100, 100, 5e-4, 5e-5) == pytest.approx(5e-5)
    assert gf.lr_at(50, 100, 5e-4, 5e-5) == pytest.approx(math.sqrt(5e-4 * 5e-5))


# ---------------------------------------------------------------------------
# checkpoints


def _store(rng):
    ps = gf.ParamStore(torch.float32)
    ps.add("layer.w", rng.standard_normal((3, 4)))
    ps.add("layer.b", rng.standard_normal(4))
    ps.add("frozen", rng.standard_normal(2), trainable=False)
    for n, p in ps.trainable():
        p.grad = torch.ones_like(p)
    gf.adam_step(ps)
    return ps


def test_checkpoint_roundtrip(tmp_path, rng):
    ps = _store(rng)
    path = tmp_path / "c.bin"
    gf.save_checkpoint(path, ps, {"note": "x", "nested": {"k": [1, 2]}})
    back, meta = gf.load_checkpoint(path)
    assert meta == {"note": "x", "nested": {"k": [1, 2]}}
    assert list(back) == list(ps)
    assert back.step == ps.step
    assert back.dtype == ps.dtype
    for n, p in ps.items():
        assert torch.equal(back[n], p.detach())
        assert back[n].requires_grad == p.requires_grad
    for n in ["layer.w", "layer.b"]:
        assert torch.equal(back.moments(n)[0], ps.moments(n)[0])
        assert torch.equal(back.moments(n)[1], ps.moments(n)[1])


def test_checkpoint_byte_layout(tmp_path, rng):
    ps = _store(rng)
    path = tmp_path / "c.bin"
    gf.save_checkpoint(path, ps)
    raw = path.read_bytes()
    assert raw[:8] == b"SNRFCKPT"
    (n,) = struct.unpack("<Q", raw[8:16])
    index = json.loads(raw[16 : 16 + n])
    entry = next(e for e in index["arrays"] if e["name"] == "param/layer.w")
    start = 16 + n + entry["offset"]
    arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype="<f4").reshape(entry["shape"])
    np.testing.assert_array_equal(arr, ps["layer.w"].detach().numpy())
    # identical stores give identical bytes
    gf.save_checkpoint(tmp_path / "d.bin", ps)
    assert (tmp_path / "d.bin").read_bytes() == raw


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(gf.GradflowError):
        gf.load_checkpoint(p)


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_add_mul_grad_property(r, c, seed):
    g = np.random.default_rng(seed)
    assert grad_check(lambda a, b: gf.mul(gf.add(a, b), b), rand(g, r, c), rand(g, c)) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_is_deterministic(seed):
    g = np.random.default_rng(seed)
    x = torch.as_tensor(g.standard_normal((2, 9, 11)))
    w = torch.as_tensor(g.standard_normal((4, 2, 5, 5)))
    a = gf.conv2d(x, w, stride=2)
    b = gf.conv2d(x.clone(), w.clone(), stride=2)
    assert torch.equal(a, b)
