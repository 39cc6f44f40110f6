import numpy as np
import pytest

from hiermem import numcore as nc
from hiermem import refcheck as rc


def fd_check(build, params, rel=1e-6, h=1e-5):
    """Analytic grads of scalar build(tensors) vs central differences."""
    tensors = [nc.Tensor(p.copy(), requires_grad=True, dtype=np.float64) for p in params]
    with nc.Tape() as tape:
        loss = build(tensors)
    nc.backward(tape, loss)

    def f(ps):
        ts = [nc.Tensor(p, dtype=np.float64) for p in ps]
        return float(build(ts).data)

    ref = rc.oracle_grad(f, [p.copy() for p in params], h=h).value
    for t, r in zip(tensors, ref):
        denom = max(np.abs(r).max(), 1e-8)
        assert t.grad is not None
        assert np.abs(t.grad - r).max() / denom < rel, np.abs(t.grad - r).max() / denom


rng = np.random.default_rng(7)


def test_add_mul_broadcast_grads():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    fd_check(lambda ts: nc.sumall(nc.mul(nc.add(ts[0], ts[1]), ts[0])), [a, b])


def test_matmul_grads_both_orientations():
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(5, 2))
    fd_check(lambda ts: nc.sumall(nc.matmul(ts[0], ts[1])), [a, b])
    bt = rng.normal(size=(2, 5))
    fd_check(lambda ts: nc.sumall(nc.matmul(ts[0], ts[1], transpose_b=True)), [a, bt])


def test_silu_softmax_rmsnorm_grads():
    x = rng.normal(size=(2, 6))
    g = rng.normal(size=(6,)) + 1.0
    fd_check(lambda ts: nc.sumall(nc.silu(ts[0])), [x])
    fd_check(lambda ts: nc.sumall(nc.mul(nc.softmax(ts[0]), ts[0])), [x])
    fd_check(lambda ts: nc.sumall(nc.rms_norm(ts[0], ts[1])), [x, g])


def test_attention_grads_with_mask():
    q = rng.normal(size=(1, 2, 4, 8))
    k = rng.normal(size=(1, 2, 4, 8))
    v = rng.normal(size=(1, 2, 4, 8))
    mask = np.triu(np.full((4, 4), -np.inf), k=1)
    fd_check(lambda ts: nc.sumall(nc.attention(ts[0], ts[1], ts[2], mask=mask)), [q, k, v], rel=1e-5)


def test_rope_grads_and_norm_preservation():
    x = rng.normal(size=(1, 2, 5, 8))
    pos = np.arange(5)
    fd_check(lambda ts: nc.sumall(nc.mul(nc.rope(ts[0], pos, 100.0), ts[0])), [x])
    # rotations preserve the norm of every pair
    out = nc.rope(nc.Tensor(x), pos, 100.0)
    assert np.allclose(np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1))


def test_cross_entropy_matches_manual_and_weights():
    logits = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=5)
    w = np.array([1, 1, 0, 1, 0], dtype=np.float64)
    fd_check(lambda ts: nc.cross_entropy(ts[0], targets, w), [logits])
    t = nc.Tensor(logits)
    loss = nc.cross_entropy(t, targets, w)
    z = logits - logits.max(axis=1, keepdims=True)
    nll = np.log(np.exp(z).sum(axis=1)) - z[np.arange(5), targets]
    assert np.isclose(float(loss.data), (nll * w).sum() / w.sum())
    with pytest.raises(nc.ShapeError):
        nc.cross_entropy(t, targets, np.zeros(5))


def test_embedding_scatter_grad():
    table = rng.normal(size=(6, 3))
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    t = nc.Tensor(table, requires_grad=True)
    with nc.Tape() as tape:
        loss = nc.sumall(nc.mul(nc.embedding(t, ids), nc.Tensor(np.ones((2, 3, 3)))))
    nc.backward(tape, loss)
    expect = np.zeros_like(table)
    np.add.at(expect, ids.reshape(-1), np.ones((6, 3)))
    assert np.allclose(t.grad, expect)


def test_concat_split_reshape_transpose_roundtrip_grads():
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 5))

    def build(ts):
        c = nc.concat([ts[0], ts[1]], axis=-1)
        p1, p2 = nc.split(c, [3, 5], axis=-1)
        r = nc.reshape(nc.transpose(p2, (1, 0)), (10,))
        return nc.add(nc.sumall(nc.mul(p1, p1)), nc.sumall(r))

    fd_check(build, [a, b])


def test_frozen_operand_skips_gradient():
    w = nc.Tensor(rng.normal(size=(4, 4)))  # requires_grad False
    x = nc.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    with nc.Tape() as tape:
        loss = nc.sumall(nc.matmul(x, w))
    nc.backward(tape, loss)
    assert w.grad is None
    assert x.grad is not None


def test_zero_dim_float64_result_is_not_downcast():
    # numpy scalars coming out of 0-d arithmetic must keep their dtype
    a = nc.Tensor(np.float64(2.0))
    out = nc.add(a, a)
    assert out.dtype == np.float64
    assert nc.Tensor(np.float64(1.5)).dtype == np.float64


def test_clip_global_norm_scales_in_place():
    g1 = np.array([3.0, 0.0])
    g2 = np.array([0.0, 4.0])
    norm = nc.clip_global_norm([g1, g2], 1.0)
    assert np.isclose(norm, 5.0)
    assert np.isclose(np.sqrt(np.sum(g1**2) + np.sum(g2**2)), 1.0)
    # under the limit: untouched
    g = np.array([0.3])
    assert np.isclose(nc.clip_global_norm([g], 1.0), 0.3)
    assert g[0] == 0.3


def test_shape_errors_are_loud():
    with pytest.raises(nc.ShapeError):
        nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((4, 2))))
    with pytest.raises(nc.ShapeError):
        nc.cross_entropy(nc.Tensor(np.ones((2, 3))), np.array([0, 3]))


def test_composite_f64_pipeline_close_to_fd():
    # a small end-to-end graph touching most ops at once
    x = rng.normal(size=(2, 4, 8))
    w = rng.normal(size=(8, 8))
    gain = np.ones(8)

    def build(ts):
        h = nc.rms_norm(ts[0], ts[2])
        h = nc.matmul(h, ts[1])
        h = nc.silu(h)
        return nc.sumall(nc.mul(h, h))

    fd_check(build, [x, w, gain], rel=1e-5)
