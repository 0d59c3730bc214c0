import numpy as np
import pytest
import torch

from fdcheck import grad_check
from sanerf import gradflow as gf
from sanerf.posenet import KERNELS, PoseNet, PoseNetConfig

SMALL = (4, 4, 8, 8, 8, 8, 8)


def make_net(seed=0, dtype=torch.float64, ids=(), **kw):
    kw.setdefault("channels", SMALL)
    return PoseNet(gf.ParamStore(dtype), PoseNetConfig(**kw), np.random.default_rng(seed), ids)


def triple(rng, h, w):
    return [rng.random((h, w, 3)) for _ in range(3)]


def zero_final(net):
    net.params["pose.out.w"].data.zero_()
    net.params["pose.out.b"].data.zero_()


def test_spatial_sizes_128(rng):
    net = make_net(image_size=(128, 128))
    x = torch.cat([net.prepare(im) for im in triple(rng, 128, 128)])
    sizes = []
    for i in range(len(KERNELS)):
        x = gf.conv2d(x, net.params[f"pose.conv{i}.w"], net.params[f"pose.conv{i}.b"], stride=2)
        sizes.append(tuple(x.shape[-2:]))
    assert sizes == [(n, n) for n in (64, 32, 16, 8, 4, 2, 1)]


@pytest.mark.parametrize("hw", [(128, 128), (48, 64), (37, 53)])
def test_output_is_twelve_values(rng, hw):
    net = make_net(image_size=hw)
    out = net.forward(*triple(rng, *hw))
    assert out.shape == (2, 6)
    assert PoseNetConfig().out_channels == 12


def test_input_resized_to_network_resolution(rng):
    net = make_net(image_size=(24, 32))
    assert net.prepare(rng.random((48, 64, 3))).shape == (3, 24, 32)


def test_channel_mismatch(rng):
    net = make_net(image_size=(16, 16))
    a, b, _ = triple(rng, 16, 16)
    with pytest.raises(gf.ShapeError):
        net.forward(a, b, rng.random((16, 16, 4)))


def test_zeroed_final_layer_gives_identity(rng):
    net = make_net(image_size=(32, 32))
    zero_final(net)
    imgs = dict(zip([3, 5, 9], triple(rng, 32, 32)))
    poses = net.poses_for_triple((3, 5, 9), imgs)
    for rot, t in poses.values():
        assert torch.equal(rot, torch.eye(3, dtype=torch.float64))
        assert torch.equal(t, torch.zeros(3, dtype=torch.float64))


def test_reference_is_exact_identity(rng):
    net = make_net(image_size=(32, 32), final_init_scale=5.0)
    imgs = dict(zip([0, 1, 2], triple(rng, 32, 32)))
    poses = net.poses_for_triple((1, 0, 2), imgs)
    rot, t = poses[1]
    assert torch.equal(rot, torch.eye(3, dtype=torch.float64)) and not t.any()
    assert float(poses[0][1].detach().abs().sum()) > 0


def test_small_initial_poses(rng):
    net = make_net(image_size=(32, 32))
    out = net.forward(*triple(rng, 32, 32))
    assert 0 < float(out.detach().abs().max()) < 0.05


def test_translation_scale_applies_to_translation_only(rng):
    imgs = triple(rng, 32, 32)
    a = make_net(image_size=(32, 32), translation_scale=1.0).forward(*imgs)
    b = make_net(image_size=(32, 32), translation_scale=10.0).forward(*imgs)
    torch.testing.assert_close(b[:, :3], a[:, :3])
    torch.testing.assert_close(b[:, 3:], 10 * a[:, 3:])


def test_deterministic(rng):
    imgs = triple(rng, 32, 32)
    assert torch.equal(make_net(7, image_size=(32, 32)).forward(*imgs), make_net(7, image_size=(32, 32)).forward(*imgs))


def _forward_with(net, name, value, imgs):
    orig = net.params._params[name]
    net.params._params[name] = value
    try:
        return net.forward(*imgs)
    finally:
        net.params._params[name] = orig


def test_translation_gradient_wrt_conv_weight(rng):
    net = make_net(image_size=(16, 16), final_init_scale=1.0)
    imgs = [net.prepare(x) for x in triple(rng, 16, 16)]
    w0 = net.params["pose.conv3.w"].detach().numpy().copy()
    err = grad_check(lambda w: _forward_with(net, "pose.conv3.w", w, imgs)[:, 3:], w0, h=1e-6)
    assert err < 1e-3


def test_gradients_reach_every_parameter(rng):
    net = make_net(image_size=(32, 32), final_init_scale=1.0)
    imgs = dict(zip([0, 1, 2], triple(rng, 32, 32)))
    poses = net.poses_for_triple((0, 1, 2), imgs)
    loss = sum((r.sum() + t.sum()) for r, t in poses.values())
    gf.backward(loss, net.params)
    for name, p in net.params.trainable():
        assert p.grad is not None and float(p.grad.abs().sum()) > 0, name


def test_direct_mode(rng):
    net = make_net(image_size=(32, 32), mode="direct", ids=[0, 1, 2, 3])
    assert net.params.names() == [f"pose.direct.{i}" for i in range(4)]
    poses = net.poses_for_triple((0, 2, 3), {})
    assert torch.equal(poses[0][0], torch.eye(3, dtype=torch.float64))
    torch.testing.assert_close(poses[2][1], 0.1 * net.params["pose.direct.2"][3:])


def test_bad_config():
    with pytest.raises(ValueError):
        make_net(channels=(4, 4))
    with pytest.raises(ValueError):
        make_net(mode="mlp")


def test_config_roundtrip():
    cfg = PoseNetConfig(image_size=(48, 64), translation_scale=10.0)
    assert PoseNetConfig.from_dict(cfg.to_dict()) == cfg
