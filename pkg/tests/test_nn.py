import numpy as np
import pytest

from relightbake import nn
from relightbake.geom import RngStream
from gradcheck import check_module, numeric, rel_err

TOL = 1e-4


def _x(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


LAYERS = {
    "linear": (lambda r: nn.Linear(5, 4, r), (4, 4, 5)),
    "conv1": (lambda r: nn.Conv2d(3, 4, 1, r), (2, 4, 4, 3)),
    "conv3": (lambda r: nn.Conv2d(3, 4, 3, r), (2, 4, 4, 3)),
    "instance_norm": (lambda r: nn.InstanceNorm(3), (2, 4, 4, 3)),
    "gelu": (lambda r: nn.GELU(), (4, 4)),
    "sigmoid": (lambda r: nn.Sigmoid(), (4, 4)),
    "upsample": (lambda r: nn.Upsample2x(), (1, 4, 4, 2)),
    "zero_insert": (lambda r: nn.ZeroInsert2x(), (1, 4, 4, 2)),
    "residual": (lambda r: nn.Residual(nn.conv_norm_act(3, 3, 3, r)), (1, 4, 4, 3)),
    "mlp": (lambda r: nn.MLP([3, 8, 8, 2], r), (4, 4, 3)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients(name):
    make, shape = LAYERS[name]
    m = make(RngStream(3))
    if isinstance(m, nn.InstanceNorm):
        m.scale.value = np.linspace(0.5, 1.5, 3).astype(np.float32)
        m.shift.value = np.linspace(-0.2, 0.2, 3).astype(np.float32)
        m.scale.grad = np.zeros_like(m.scale.value)
        m.shift.grad = np.zeros_like(m.shift.value)
    errs = check_module(m, _x(shape))
    assert max(errs.values()) < TOL, errs


def test_l1_and_bce_gradients():
    g = np.random.default_rng(1)
    pred = g.normal(size=(4, 4))
    target = g.normal(size=(4, 4))
    mask = (g.random((4, 4)) > 0.3).astype(np.float64)
    _, grad = nn.l1_loss(pred, target, mask)
    assert rel_err(grad.reshape(-1), numeric(lambda: nn.l1_loss(pred, target, mask)[0], pred)) < TOL
    y = (g.random((4, 4)) > 0.5).astype(np.float64)
    _, gb = nn.bce_logit_loss(pred, y, mask)
    assert rel_err(gb.reshape(-1), numeric(lambda: nn.bce_logit_loss(pred, y, mask)[0], pred)) < TOL


def test_loss_errors():
    with pytest.raises(ValueError):
        nn.l1_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        nn.bce_logit_loss(np.zeros(3), np.full(3, 0.5))


def test_bce_is_stable_for_large_logits():
    loss, grad = nn.bce_logit_loss(np.array([1e4, -1e4]), np.array([1.0, 0.0]))
    assert loss == 0.0 and np.all(np.isfinite(grad))


def test_shape_errors_name_the_layer():
    with pytest.raises(ValueError, match="conv2d"):
        nn.Conv2d(3, 4, 3, RngStream(0)).forward(np.zeros((1, 4, 4, 5), np.float32))
    with pytest.raises(ValueError):
        nn.Conv2d(3, 4, 5, RngStream(0))


def test_upsample_bilinear_values():
    x = np.array([0.0, 4.0])[None, :, None, None] * np.ones((1, 2, 1, 1))
    y = nn.upsample2x(x)[0, :, 0, 0]
    np.testing.assert_allclose(y, [0.0, 1.0, 3.0, 4.0])


def test_schedules():
    assert nn.cosine_lr(0, 100, 1.0) == 1.0
    assert nn.cosine_lr(100, 100, 1.0) == pytest.approx(0.0)
    assert nn.exp_decay_lr(100, 100, 1.0, 0.1) == pytest.approx(0.1)
    assert nn.exp_decay_lr(50, 100, 1.0, 0.01) == pytest.approx(0.1)


def test_adam_minimizes_quadratic():
    p = nn.Param(np.array([3.0, -2.0]))
    opt = nn.Adam([p], lr=0.1)
    for _ in range(300):
        p.grad[...] = 2 * p.value
        opt.step()
    assert np.all(np.abs(p.value) < 1e-2)


def test_adam_weight_decay_skips_flagged():
    a, b = nn.Param(np.ones(2)), nn.Param(np.ones(2), decay=False)
    opt = nn.Adam([a, b], lr=0.1, weight_decay=0.5)
    opt.step()
    assert np.all(a.value < 1.0) and np.all(b.value == 1.0)


def test_adam_rejects_nonfinite():
    p = nn.Param(np.ones(2))
    p.grad[0] = np.nan
    with pytest.raises(nn.NonFiniteError):
        nn.Adam([p]).step()


def test_checkpoint_round_trip(tmp_path):
    m = nn.MLP([3, 4, 2], RngStream(0))
    opt = nn.Adam(m.parameters())
    for p in m.parameters():
        p.grad[...] = 1.0
    opt.step()
    names = [n for n, _ in m.named_parameters()]
    tensors = dict(m.state_dict())
    tensors.update(opt.state(names))
    nn.save_checkpoint(tmp_path / "c.rbck", tensors, {"kind": "test"})
    loaded, meta = nn.load_checkpoint(tmp_path / "c.rbck")
    assert meta == {"kind": "test"}
    m2 = nn.MLP([3, 4, 2], RngStream(9))
    m2.load_state_dict(loaded)
    for (_, a), (_, b) in zip(m.named_parameters(), m2.named_parameters()):
        np.testing.assert_array_equal(a.value, b.value)
    opt2 = nn.Adam(m2.parameters())
    opt2.load_state(names, loaded)
    assert opt2.step_count == 1
    np.testing.assert_array_equal(opt2.m[0], opt.m[0])


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.rbck"
    bad.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        nn.load_checkpoint(bad)
    m = nn.MLP([3, 4, 2], RngStream(0))
    state = dict(m.state_dict())
    state["layers.0.weight"] = np.zeros((2, 2))
    with pytest.raises(ValueError, match="layers.0.weight"):
        m.load_state_dict(state)
    with pytest.raises(KeyError):
        m.load_state_dict({})
