import numpy as np
import pytest
import torch

from ikl.kanet import KANet, ka_forward, predict, train_kanet
from ikl.model import IncrementalModel, snapshot_frozen
from oracles import analytic_gradient, batchnorm_eval_reference, central_difference, conv2d_reference, relative_error


def seeded_net(c=3, width=4, kernel=15, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    net = KANet(c, width, kernel).to(dtype)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for bn in (net.bn1, net.bn2):
            bn.running_mean.copy_(torch.rand(width, generator=g, dtype=dtype) * 0.2 - 0.1)
            bn.running_var.copy_(torch.rand(width, generator=g, dtype=dtype) + 0.5)
            bn.weight.copy_(torch.rand(width, generator=g, dtype=dtype) + 0.5)
            bn.bias.copy_(torch.rand(width, generator=g, dtype=dtype) * 0.2)
    return net.eval()


def inputs(c=3, h=8, w=8, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.rand(h, w, generator=g, dtype=dtype),
        torch.rand(h, w, generator=g, dtype=dtype),
        torch.randn(c, h, w, generator=g, dtype=dtype),
    )


def reference_forward(net: KANet, a, b, v) -> np.ndarray:
    a, b, v = a.numpy(), b.numpy(), v.numpy()
    x = np.concatenate([a[None] * v, b[None] * v], axis=0)
    pad = net.arch["kernel"] // 2
    for conv, bn in ((net.conv1, net.bn1), (net.conv2, net.bn2)):
        x = conv2d_reference(x, conv.weight.detach().numpy(), None, pad)
        x = batchnorm_eval_reference(
            x, bn.running_mean.numpy(), bn.running_var.numpy(), bn.weight.detach().numpy(), bn.bias.detach().numpy(), bn.eps
        )
        x = np.maximum(x, 0)
    return conv2d_reference(x, net.conv3.weight.detach().numpy(), net.conv3.bias.detach().numpy(), 0)


def test_shape_contract():
    net = KANet(64, 8).eval()
    a, b, v = torch.rand(32, 32), torch.rand(32, 32), torch.rand(64, 32, 32)
    assert ka_forward(net, a, b, v).shape == (1, 32, 32)
    assert net(a[None], b[None], v[None]).shape == (1, 1, 32, 32)


def test_spatial_mismatch_rejected():
    with pytest.raises(ValueError):
        ka_forward(KANet(4, 4), torch.rand(8, 8), torch.rand(8, 8), torch.rand(4, 8, 9))


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_reference(seed):
    net = seeded_net(seed=seed)
    a, b, v = inputs(seed=seed)
    with torch.no_grad():
        out = ka_forward(net, a, b, v).numpy()
    assert np.abs(out - reference_forward(net, a, b, v)).max() < 1e-5


def test_forward_matches_reference_float32():
    net = seeded_net(c=4, width=3, kernel=5, seed=9, dtype=torch.float32)
    a, b, v = inputs(c=4, h=10, w=7, seed=4, dtype=torch.float32)
    with torch.no_grad():
        out = ka_forward(net, a, b, v).numpy()
    assert np.abs(out - reference_forward(net, a, b, v)).max() < 1e-5


@pytest.mark.parametrize("trial", range(20))
def test_conv1_gradient_matches_finite_differences(trial):
    net = seeded_net(c=3, width=2, seed=trial)
    a, b, v = inputs(seed=100 + trial)
    w0 = net.conv1.weight.detach().clone()

    def f(w):
        out = torch.func.functional_call(net, {"conv1.weight": w}, (a[None], b[None], v[None]))
        return out.sum()

    # a central 3x3 patch of every kernel keeps the finite-difference loop short
    idx = (slice(None), slice(None), slice(6, 9), slice(6, 9))

    def f_sub(sub):
        w = w0.clone()
        w[idx] = sub
        return f(w)

    sub = w0[idx].clone()
    err = relative_error(analytic_gradient(f_sub, sub), central_difference(f_sub, sub))
    assert err < 1e-4


@pytest.mark.parametrize("trial", range(20))
def test_input_gradient_matches_finite_differences(trial):
    net = seeded_net(c=2, width=2, kernel=3, seed=trial)
    a, b, v = inputs(c=2, h=5, w=5, seed=300 + trial)
    f = lambda x: ka_forward(net, a, b, x).square().sum()
    assert relative_error(analytic_gradient(f, v), central_difference(f, v)) < 1e-4


def test_eval_mode_deterministic():
    net = seeded_net()
    a, b, v = inputs()
    assert torch.equal(ka_forward(net, a, b, v), ka_forward(net, a, b, v))


def test_zero_heatmaps_zero_gating():
    net = seeded_net()
    _, _, v = inputs()
    z = torch.zeros(8, 8, dtype=torch.float64)
    assert not KANet.gate(z, z, v).any()
    out = ka_forward(net, z, z, v)
    # output independent of the features once the gates are closed
    assert torch.equal(out, ka_forward(net, z, z, torch.randn_like(v)))


def synthetic_stage(n=64, c=4, seed=0):
    """Target heatmap is the product of the two source heatmaps, features random."""
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(n, 16, 16, generator=g)
    b = torch.rand(n, 16, 16, generator=g)
    v = torch.rand(n, c, 16, 16, generator=g)
    return a, b, v, (a * b)[:, None]


def test_training_reduces_loss_and_freezes():
    a, b, v, y = synthetic_stage()
    torch.manual_seed(0)
    net, log = train_kanet(KANet(4, 4, 5), a, b, v, y, epochs=20, lr=1e-2, seed=0)
    assert log.final < log.initial
    assert len(log.epoch_losses) == 20
    assert net.frozen and not any(p.requires_grad for p in net.parameters())
    with pytest.raises(RuntimeError):
        net.train()
    assert predict(net, a, b, v).shape == y.shape


def test_training_is_seeded():
    a, b, v, y = synthetic_stage(n=20)
    outs = []
    for _ in range(2):
        torch.manual_seed(1)
        net, log = train_kanet(KANet(4, 4, 5), a, b, v, y, epochs=3, seed=5)
        outs.append(predict(net, a, b, v))
    assert torch.equal(outs[0], outs[1])


def test_training_touches_only_kanet():
    old = snapshot_frozen(IncrementalModel([4], (64, 64), width=8, feature_channels=4))
    before = {k: t.clone() for k, t in old.state_dict().items()}
    x = torch.rand(12, 1, 64, 64)
    with torch.no_grad():
        v, h = old(x)
    a, b, y = h[:, 0], h[:, 1], h[:, 2:3]
    train_kanet(KANet(4, 4, 5), a, b, v, y, epochs=2, seed=0)
    for k, t in old.state_dict().items():
        assert torch.equal(t, before[k])


def test_training_rejects_empty_data():
    z = torch.zeros(0, 16, 16)
    with pytest.raises(ValueError):
        train_kanet(KANet(4, 4, 5), z, z, torch.zeros(0, 4, 16, 16), torch.zeros(0, 1, 16, 16), epochs=1)


def test_training_rejects_unknown_optimizer():
    a, b, v, y = synthetic_stage(n=4)
    with pytest.raises(ValueError):
        train_kanet(KANet(4, 4, 5), a, b, v, y, epochs=1, optimizer="rmsprop")
