import numpy as np
import pytest

from pcrdiff.exceptions import (
    CheckpointVersionMismatch,
    ConfigError,
    EmptyCloud,
    MissingGradient,
    NonDeterministicLoss,
    ShapeMismatch,
)
from pcrdiff.nnkit import (
    Mlp,
    ParamStore,
    adam_step,
    decode_checkpoint,
    dense,
    dense_backward,
    encode_checkpoint,
    grad_check,
    load_checkpoint,
    maxpool_points,
    maxpool_points_backward,
    save_checkpoint,
    sinusoidal_embedding,
)


def test_dense_backward_matches_finite_differences(rng):
    x = rng.normal(size=(2, 5, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    upstream = rng.normal(size=(2, 5, 3))
    _, cache = dense(x, w, b)
    gx, gw, gb = dense_backward(upstream, cache)
    h = 1e-4

    def loss(x_, w_, b_):
        return float(np.sum(dense(x_, w_, b_)[0] * upstream))

    bumped = w.copy()
    bumped[1, 2] += h
    lowered = w.copy()
    lowered[1, 2] -= h
    assert gw[1, 2] == pytest.approx((loss(x, bumped, b) - loss(x, lowered, b)) / (2 * h))
    xb = x.copy()
    xb[1, 3, 0] += h
    xl = x.copy()
    xl[1, 3, 0] -= h
    assert gx[1, 3, 0] == pytest.approx((loss(xb, w, b) - loss(xl, w, b)) / (2 * h))
    np.testing.assert_allclose(gb, upstream.sum(axis=(0, 1)))


def test_dense_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        dense(rng.normal(size=(3, 4)), rng.normal(size=(5, 2)), np.zeros(2))


def test_maxpool_ties_go_to_first_point():
    x = np.array([[1.0, 5.0], [1.0, 2.0], [0.0, 5.0]])
    pooled, cache = maxpool_points(x)
    np.testing.assert_array_equal(pooled, [1.0, 5.0])
    grad = maxpool_points_backward(np.array([2.0, 3.0]), cache)
    np.testing.assert_array_equal(grad, [[2.0, 3.0], [0.0, 0.0], [0.0, 0.0]])


def test_maxpool_batched_and_empty(rng):
    x = rng.normal(size=(3, 6, 4))
    pooled, cache = maxpool_points(x)
    np.testing.assert_array_equal(pooled, x.max(axis=1))
    assert maxpool_points_backward(np.ones((3, 4)), cache).sum() == 12.0
    with pytest.raises(EmptyCloud):
        maxpool_points(np.zeros((0, 4)))


def test_sinusoidal_embedding_shape_and_zero_step():
    emb = sinusoidal_embedding([0, 5, 10], 8)
    assert emb.shape == (3, 8)
    np.testing.assert_array_equal(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert not np.allclose(emb[1], emb[2])
    assert sinusoidal_embedding(3, 5).shape == (1, 5)


def test_param_store_bookkeeping():
    store = ParamStore()
    store.add("a", np.zeros((2, 3)))
    store.add("b", np.zeros(3))
    assert "a" in store
    assert store.names() == ["a", "b"]
    assert store.size() == 9
    with pytest.raises(ConfigError):
        store.add("a", np.zeros(1))
    store.accumulate("b", np.ones(3))
    store.accumulate("b", np.ones(3))
    np.testing.assert_array_equal(store.grads["b"], [2.0, 2.0, 2.0])
    with pytest.raises(ShapeMismatch):
        store.accumulate("b", np.ones(4))
    store.zero_grad()
    assert store.grads == {}


def test_adam_converges_on_quadratic_bowl():
    store = ParamStore()
    store.add("w", np.array([1.0]))
    for _ in range(500):
        store.zero_grad()
        store.accumulate("w", 2.0 * store["w"])
        adam_step(store, lr=0.01)
    assert abs(store["w"][0]) < 0.1
    assert store.step == 500


def test_adam_requires_every_gradient():
    store = ParamStore()
    store.add("w", np.ones(2))
    store.add("v", np.ones(2))
    store.accumulate("w", np.ones(2))
    with pytest.raises(MissingGradient):
        adam_step(store)


def test_mlp_grad_check(rng):
    store = ParamStore()
    mlp = Mlp(store, "mlp", (3, 6, 5, 2), rng, final_relu=False)
    x = rng.normal(size=(7, 3))
    extra = rng.normal(size=6)
    target = rng.normal(size=(7, 2))

    def closure(*, backward: bool) -> float:
        out, tape = mlp.forward(x, inject={0: extra})
        diff = out - target
        if backward:
            store.zero_grad()
            mlp.backward(2.0 * diff, tape)
        return float(np.sum(diff**2))

    result = grad_check(closure, store, 1e-6)
    assert result.checked + result.skipped == store.size()
    assert result.max_rel_error < 1e-5


def test_grad_check_flags_scaled_gradients(rng):
    store = ParamStore()
    mlp = Mlp(store, "mlp", (3, 6, 2), rng, final_relu=False)
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 2))

    def closure(*, backward: bool) -> float:
        out, tape = mlp.forward(x)
        diff = out - target
        if backward:
            store.zero_grad()
            mlp.backward(2.0 * diff, tape)
            store.scale_grads(1.1)
        return float(np.sum(diff**2))

    result = grad_check(closure, store, 1e-6)
    assert result.max_rel_error > 1e-2


def test_grad_check_detects_nondeterminism():
    store = ParamStore()
    store.add("w", np.ones(1))
    calls = iter(range(10))

    def closure(*, backward: bool) -> float:
        if backward:
            store.zero_grad()
            store.accumulate("w", np.ones(1))
        return float(next(calls))

    with pytest.raises(NonDeterministicLoss):
        grad_check(closure, store)


def test_grad_check_requires_gradients():
    store = ParamStore()
    store.add("w", np.ones(1))

    def closure(*, backward: bool) -> float:
        return float(store["w"][0] ** 2)

    with pytest.raises(MissingGradient):
        grad_check(closure, store)


def test_checkpoint_roundtrip(tmp_path, rng):
    store = ParamStore()
    store.add("layer.0.weight", rng.normal(size=(3, 4)))
    store.add("layer.0.bias", rng.normal(size=4))
    path = tmp_path / "model.pcrd"
    save_checkpoint(path, store)
    loaded = load_checkpoint(path)
    assert list(loaded) == ["layer.0.weight", "layer.0.bias"]
    for name in store:
        assert loaded[name].dtype == np.float32
        assert loaded[name].tobytes() == store[name].astype("<f4").tobytes()

    fresh = ParamStore()
    fresh.add("layer.0.weight", np.zeros((3, 4)))
    fresh.add("layer.0.bias", np.zeros(4))
    fresh.load(loaded)
    np.testing.assert_allclose(fresh["layer.0.bias"], store["layer.0.bias"], rtol=1e-6)
    again = tmp_path / "again.pcrd"
    save_checkpoint(again, fresh)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_blobs(rng):
    blob = encode_checkpoint({"w": rng.normal(size=(2, 2))})
    with pytest.raises(CheckpointVersionMismatch):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointVersionMismatch):
        decode_checkpoint(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CheckpointVersionMismatch):
        decode_checkpoint(blob[:-3])


def test_param_store_load_checks_names_and_shapes():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ShapeMismatch):
        store.load({"v": np.zeros(2)})
    with pytest.raises(ShapeMismatch):
        store.load({"w": np.zeros(3)})
