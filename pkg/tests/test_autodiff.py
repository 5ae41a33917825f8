import time

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from oracles import grad_check
from softcorrect import autodiff as ad
from softcorrect.autodiff import Tensor
from softcorrect.errors import ShapeError

def away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


def test_elementwise_ops(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert grad_check(lambda x, y: ad.add(x, y), a, b) < 1e-4
    assert grad_check(lambda x, y: ad.mul(x, y), a, b) < 1e-4
    assert grad_check(lambda x, y: x - y, a, b) < 1e-4
    assert grad_check(lambda x: -x, a) < 1e-4
    assert grad_check(lambda x: ad.tanh(x), a) < 1e-4
    assert grad_check(lambda x: ad.relu(x), away_from_zero(rng, (3, 4))) < 1e-4
    assert grad_check(lambda x: ad.reshape(x, (12,)), a) < 1e-4


def test_broadcast_and_reductions(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    assert grad_check(lambda x, y: ad.mul(x, y), a, b) < 1e-4
    assert grad_check(lambda x: ad.reshape(ad.sum_all(x), (1,)), a) < 1e-4
    assert grad_check(lambda x: ad.reshape(ad.mean_all(x), (1,)), a) < 1e-4


@pytest.mark.parametrize("spatial", [(5, 4), (4, 3, 5)])
def test_conv_gradients(rng, spatial):
    nd = len(spatial)
    x = rng.normal(size=(2,) + spatial)
    w = rng.normal(size=(3, 2) + (3,) * nd)
    b = rng.normal(size=3)
    assert grad_check(lambda x_, w_, b_: ad.conv(x_, w_, b_), x, w, b) < 1e-4


@pytest.mark.parametrize("spatial", [(4, 6), (5, 3), (4, 3, 5)])
def test_pool_and_upsample_gradients(rng, spatial):
    # distinct values keep the argmax away from ties under perturbation
    x = rng.permutation(np.arange(2 * int(np.prod(spatial)), dtype=float)).reshape((2,) + spatial) * 0.1
    assert grad_check(lambda t: ad.maxpool(t), x) < 1e-4
    small = rng.normal(size=(2,) + tuple((s + 1) // 2 for s in spatial))
    assert grad_check(lambda t: ad.upsample(t, spatial), small) < 1e-4


def test_concat_tile_gather_gradients(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 3, 4))
    assert grad_check(lambda x, y: ad.concat([x, y]), a, b) < 1e-4
    v = rng.normal(size=3)
    assert grad_check(lambda t: ad.tile_channels(t, (2, 5)), v) < 1e-4
    idx = np.array([0, 5, 7, 11])
    assert grad_check(lambda t: ad.take_cells(t, idx), rng.normal(size=(3, 3, 4))) < 1e-4
    base = rng.normal(size=(6, 3))
    assert grad_check(lambda x, y: ad.index_add(x, np.array([1, 4]), y), base, rng.normal(size=(2, 3))) < 1e-4
    W = sp.random(7, 6, density=0.4, random_state=1, format="csr")
    assert grad_check(lambda t: ad.sparse_linear(W, t), base) < 1e-4


def test_chamfer_head_gradient(rng):
    pts = rng.normal(scale=3.0, size=(12, 3))
    obs = pts[rng.integers(0, 12, 20)] + rng.normal(scale=0.3, size=(20, 3))
    assert grad_check(lambda t: ad.reshape(ad.chamfer_loss(t, obs), (1,)), pts) < 1e-4


def test_concat_split_norms(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    g = rng.normal(size=(6, 3))
    ad.concat([a, b]).backward(g)
    assert np.array_equal(np.vstack([a.grad, b.grad]), g)
    assert np.sum(a.grad**2) + np.sum(b.grad**2) == pytest.approx(np.sum(g**2), rel=1e-15)


def test_conv_examples():
    x = np.random.default_rng(0).normal(size=(1, 4, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    assert np.array_equal(ad.conv(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data, x)
    out = ad.conv(Tensor(np.ones((1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3)))).data[0]
    assert out[2, 2, 2] == 27 and out[0, 0, 0] == 8 and out[0, 2, 2] == 18 and out[0, 0, 2] == 12


def test_conv_matches_torch(rng):
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    for spatial, fn in (((6, 5), F.conv2d), ((4, 5, 3), F.conv3d)):
        x = rng.normal(size=(3,) + spatial)
        w = rng.normal(size=(4, 3) + (3,) * len(spatial))
        ours = ad.conv(Tensor(x), Tensor(w)).data
        ref = fn(torch.tensor(x[None]), torch.tensor(w), padding=1).numpy()[0]
        np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_maxpool_examples():
    x = np.array([1.0, 3.0, 2.0, 2.0]).reshape(1, 4, 1)
    out = ad.maxpool(Tensor(x)).data
    assert out.ravel().tolist() == [3.0, 2.0]
    assert np.all(ad.maxpool(Tensor(np.full((2, 4, 6), 1.5))).data == 1.5)
    # ties route the gradient to the first element
    t = Tensor(x, requires_grad=True)
    ad.maxpool(t).backward(np.ones((1, 2, 1)))
    assert t.grad.ravel().tolist() == [0.0, 1.0, 1.0, 0.0]
    # odd sizes keep a partial window
    assert ad.maxpool(Tensor(np.arange(5.0).reshape(1, 5, 1))).data.ravel().tolist() == [1.0, 3.0, 4.0]


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 2, 5, 5))))
    with pytest.raises(ShapeError):
        ad.upsample(Tensor(np.zeros((1, 2, 2))), (7, 4))
    with pytest.raises(ad.NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.mul(Tensor([1e200]), Tensor([1e200]))


def test_adam_examples():
    p = [np.array([1.0, -2.0])]
    new, _ = ad.adam_step(p, [np.zeros(2)], None, lr=0.1)
    assert np.array_equal(new[0], p[0])
    g = np.array([0.3, -5.0])
    new, _ = ad.adam_step(p, [g], None, lr=0.01)
    step = new[0] - p[0]
    # at t=1 the update is -lr * g / (|g| + eps)
    np.testing.assert_allclose(step, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.all(np.sign(step) == -np.sign(g))


def test_adam_quadratic_converges():
    x = Tensor(np.array([5.0]), requires_grad=True)
    opt = ad.Adam([x], lr=0.1)
    for i in range(2000):
        opt.zero_grad()
        d = x - 2.0
        (d * d).backward(np.ones(1))
        opt.step()
        if abs(x.data[0] - 2.0) < 1e-6:
            break
    assert abs(x.data[0] - 2.0) < 1e-6 and i < 2000


def test_weight_roundtrip(tmp_path, rng):
    params = {"a.w": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=(5,)), "s": np.array(2.5)}
    ad.save_weights(tmp_path / "w.scnn", params)
    raw = (tmp_path / "w.scnn").read_bytes()
    assert raw.startswith(b"SCNN1")
    assert len(raw) == 5 + sum(4 + len(k) + 4 + 4 * v.ndim + 8 * v.size for k, v in params.items())
    back = ad.load_weights(tmp_path / "w.scnn")
    assert list(back) == list(params)
    for k in params:
        assert np.array_equal(back[k], params[k])
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        ad.load_weights(tmp_path / "bad")


@given(st.integers(0, 2**31))
def test_backward_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    grads = []
    for _ in range(2):
        W = Tensor(w, requires_grad=True)
        y = ad.maxpool(ad.relu(ad.conv(Tensor(x), W)))
        ad.sum_all(ad.tanh(y)).backward()
        grads.append(W.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_unet_chamfer_end_to_end():
    """Chamfer loss through the full 3D network on a 4x4x4 mesh, against finite differences."""
    from softcorrect import correction as C
    from softcorrect.mesh import GridMeshSpec, build_grid_mesh

    t0 = time.time()
    mesh = build_grid_mesh(GridMeshSpec((4, 4, 4), (12.0, 12.0, 12.0)))
    model = C.build(C.UNetConfig.for_mesh(mesh, 3), mesh.vertices, seed=2)
    rng = np.random.default_rng(5)
    pos = mesh.vertices + rng.normal(scale=0.3, size=mesh.vertices.shape)
    probe = np.array([6.0, 6.0, 17.0])
    obs = mesh.sampler(3, "top").sample(pos) + rng.normal(scale=0.4, size=(len(mesh.sampler(3, "top")), 3))
    loss = C.sample_loss(model, mesh, pos, probe, obs)
    loss.backward()
    w = model.params["enc1.0.w"]
    flat = np.argsort(-np.abs(w.grad.ravel()))[:6]
    eps = 1e-5
    for f in flat:
        i = np.unravel_index(f, w.shape)
        old = w.data[i]
        w.data[i] = old + eps
        hi = C.sample_loss(model, mesh, pos, probe, obs).item()
        w.data[i] = old - eps
        lo = C.sample_loss(model, mesh, pos, probe, obs).item()
        w.data[i] = old
        num = (hi - lo) / (2 * eps)
        assert abs(w.grad[i] - num) <= 1e-3 * abs(num)
    assert time.time() - t0 < 60


def test_adam_class_matches_functional(rng):
    data = [rng.normal(size=(4, 3)), rng.normal(size=5)]
    ts = [Tensor(d.copy(), requires_grad=True) for d in data]
    opt = ad.Adam(ts, lr=0.03)
    params, state = [d.copy() for d in data], None
    for _ in range(4):
        grads = [rng.normal(size=d.shape) for d in data]
        for t, g in zip(ts, grads):
            t.grad = g
        opt.step()
        params, state = ad.adam_step(params, grads, state, lr=0.03)
    for t, p in zip(ts, params):
        assert np.array_equal(t.data, p)
