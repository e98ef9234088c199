"""
Tests for ausculta.autograd and ausculta.nn_core: op gradients, the encoder/projector/
bilinear stack, finite-difference gradient checks, Adam and ABCP checkpoints.
"""
from __future__ import annotations

import numpy as np
import pytest

# --- Acceptance constants ---
GRADCHECK_H = 1e-3
GRADCHECK_MAX_REL = 1e-4
GRADCHECK_SEEDS = range(5)
# gradient entries below this magnitude are compared on an absolute scale
GRADCHECK_FLOOR = 1e-4
LR0 = 1e-4
LR_DECAY = 0.99


def _small_model(encoder: str = "conv"):
    from ausculta.config import ModelDims
    from ausculta.nn_core import ContrastiveModel

    return ContrastiveModel(ModelDims(encoder=encoder, d_e=6, d_p=4, channels=(2, 3)), n_mels=16)


def _pair_loss(model, anchors, positives):
    from ausculta.autograd import Tensor, cross_entropy

    def loss_fn(p):
        sims = model.similarity(p, Tensor(anchors), Tensor(positives))
        return cross_entropy(sims, np.arange(len(anchors)))

    return loss_fn


# --- autograd ops ---

def test_broadcast_add_and_mean_gradients():
    from ausculta.autograd import Tensor, mean

    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    mean(a + b).backward()
    assert np.allclose(a.grad, 1 / 12)
    assert np.allclose(b.grad, 3 / 12)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    from ausculta.autograd import Tensor, cross_entropy

    z = rng.normal(size=(3, 5))
    t = np.array([0, 4, 2])
    logits = Tensor(z, requires_grad=True)
    loss = cross_entropy(logits, t)
    loss.backward()
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = p.copy()
    expected[np.arange(3), t] -= 1.0
    assert np.allclose(logits.grad, expected / 3, atol=1e-12)
    assert loss.item() == pytest.approx(-np.mean(np.log(p[np.arange(3), t])), abs=1e-12)


def test_bce_with_logits_is_stable_for_large_inputs():
    from ausculta.autograd import Tensor, binary_cross_entropy_with_logits

    loss = binary_cross_entropy_with_logits(Tensor(np.array([[800.0, -800.0]])), np.array([[1.0, 0.0]]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_conv2d_output_shape(rng):
    from ausculta.autograd import Tensor, conv2d

    out = conv2d(Tensor(rng.normal(size=(2, 1, 9, 16))), Tensor(rng.normal(size=(4, 1, 3, 3))), Tensor(np.zeros(4)))
    assert out.shape == (2, 4, 5, 8)


def test_conv2d_matches_direct_sum(rng):
    from ausculta.autograd import Tensor, conv2d

    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # output (o, 1, 2) reads padded rows 2..4, cols 4..6
    direct = np.sum(xp[0, :, 2:5, 4:7] * w[1]) + b[1]
    assert out[0, 1, 1, 2] == pytest.approx(direct, abs=1e-12)


def test_non_finite_activation_raises():
    from ausculta.autograd import Tensor, matmul
    from ausculta.errors import NonFiniteActivation

    with pytest.raises(NonFiniteActivation):
        matmul(Tensor(np.array([[np.inf]])), Tensor(np.array([[1.0]])))


def test_matmul_shape_mismatch():
    from ausculta.autograd import Tensor, matmul
    from ausculta.errors import DimMismatch

    with pytest.raises(DimMismatch):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# --- model stack ---

def test_encode_pools_over_time_only(rng):
    from ausculta.config import ModelDims
    from ausculta.nn_core import ContrastiveModel, encode

    params = ContrastiveModel(ModelDims(d_e=12, d_p=5, channels=(2, 4))).init(seed=0)
    short = encode(params, rng.random((10, 64)))
    long = encode(params, rng.random((40, 64)))
    assert short.shape == (12,)
    assert long.shape == (12,)
    assert encode(params, rng.random((3, 25, 64))).shape == (3, 12)


def test_init_is_seeded_and_w_starts_scaled_identity():
    from ausculta.nn_core import W_INIT_SCALE

    model = _small_model()
    a, b = model.init(seed=3), model.init(seed=3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.allclose(a["bilinear.W"], W_INIT_SCALE * np.eye(4))
    assert a["projector.weight"].dtype == np.float32


def test_from_params_rebuilds_dims():
    from ausculta.nn_core import ContrastiveModel

    params = _small_model().init(seed=0)
    dims = ContrastiveModel.from_params(params).dims
    assert (dims.encoder, dims.d_e, dims.d_p, dims.channels) == ("conv", 6, 4, (2, 3))
    mel = _small_model("melpool").init(seed=0)
    assert ContrastiveModel.from_params(mel).dims.encoder == "melpool"


@pytest.mark.parametrize("encoder", ["conv", "melpool"])
def test_check_feature_bands(encoder):
    from ausculta.errors import ConfigError
    from ausculta.nn_core import check_feature_bands

    params = _small_model(encoder).init(seed=0)
    check_feature_bands(params, 16)
    with pytest.raises(ConfigError, match="mel band"):
        check_feature_bands(params, 64)


def test_bilinear_similarity_and_dims():
    from ausculta.errors import DimMismatch
    from ausculta.nn_core import bilinear_similarity

    W = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert bilinear_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0]), W) == 2.0
    with pytest.raises(DimMismatch):
        bilinear_similarity(np.ones(3), np.ones(2), W)


def test_project_dim_mismatch():
    from ausculta.errors import DimMismatch
    from ausculta.nn_core import project

    params = _small_model().init(seed=0)
    assert project(params, np.ones(6)).shape == (4,)
    with pytest.raises(DimMismatch):
        project(params, np.ones(5))


# --- gradient check ---

@pytest.mark.parametrize("seed", GRADCHECK_SEEDS)
def test_gradient_check_conv_stack(seed):
    from ausculta.nn_core import gradient_check

    model = _small_model()
    data = np.random.default_rng(100 + seed)
    loss_fn = _pair_loss(model, data.random((4, 8, 16)), data.random((4, 8, 16)))
    result = gradient_check(loss_fn, model.init(seed, dtype=np.float64), h=GRADCHECK_H, atol=GRADCHECK_FLOOR)
    assert set(result.per_tensor) == set(model.init(seed))
    assert result.n_checked > result.n_skipped_kinks
    assert result.max_rel_error < GRADCHECK_MAX_REL, result.per_tensor


def test_gradient_check_melpool_stack():
    from ausculta.nn_core import gradient_check

    model = _small_model("melpool")
    data = np.random.default_rng(7)
    loss_fn = _pair_loss(model, data.random((3, 6, 16)), data.random((3, 6, 16)))
    result = gradient_check(loss_fn, model.init(7, dtype=np.float64), h=GRADCHECK_H, atol=GRADCHECK_FLOOR)
    assert result.max_rel_error < GRADCHECK_MAX_REL, result.per_tensor


def test_gradient_check_flags_a_wrong_gradient():
    from ausculta.autograd import Tensor, _node
    from ausculta.nn_core import gradient_check

    def loss_fn(p):
        x = p["x"]

        def backward(g):
            x._accumulate(g * 3.0 * x.data)  # true derivative of x^3 is 3x^2

        return _node(np.asarray(np.sum(x.data ** 3)), (x,), backward, "cube")

    result = gradient_check(loss_fn, {"x": np.array([2.0])})
    assert result.max_rel_error > 0.4


# --- Adam ---

def test_adam_first_step_moves_by_lr():
    from ausculta.nn_core import AdamState, adam_step

    params = {"x": np.array([1.0, -2.0])}
    adam_step(AdamState(), params, {"x": np.array([0.5, -3.0])}, lr=0.1)
    assert params["x"] == pytest.approx([0.9, -1.9], abs=1e-6)


def test_adam_rejects_shape_mismatch():
    from ausculta.errors import DimMismatch
    from ausculta.nn_core import AdamState, adam_step

    with pytest.raises(DimMismatch):
        adam_step(AdamState(), {"x": np.zeros(2)}, {"x": np.zeros(3)}, lr=0.1)


def test_adam_minimises_quadratic():
    from ausculta.nn_core import AdamState, adam_step

    params = {"x": np.array([3.0, -1.5])}
    state = AdamState()
    for _ in range(500):
        adam_step(state, params, {"x": 2 * params["x"]}, lr=0.05)
    assert np.all(np.abs(params["x"]) < 0.05)


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_single_adam_step_decreases_batch_loss(lr):
    from ausculta.nn_core import AdamState, adam_step, bind, collect_grads

    model = _small_model()
    data = np.random.default_rng(11)
    loss_fn = _pair_loss(model, data.random((4, 8, 16)), data.random((4, 8, 16)))
    params = model.init(11, dtype=np.float64)
    bound = bind(params)
    before = loss_fn(bound)
    before.backward()
    adam_step(AdamState(), params, collect_grads(bound), lr)
    after = loss_fn(bind(params, requires_grad=False))
    assert after.item() < before.item()


def test_lr_schedule():
    from ausculta.nn_core import lr_at_epoch

    assert lr_at_epoch(LR0, LR_DECAY, 0) == LR0
    assert lr_at_epoch(LR0, LR_DECAY, 1) == pytest.approx(9.9e-5, rel=1e-12)
    assert lr_at_epoch(LR0, LR_DECAY, 63) == pytest.approx(5.31e-5, abs=5e-8)


# --- checkpoints ---

def test_checkpoint_round_trip_bytes(tmp_path):
    from ausculta.nn_core import load_checkpoint, save_checkpoint

    params = _small_model().init(seed=2)
    first = save_checkpoint(tmp_path / "a.abcp", params)
    back = load_checkpoint(first)
    assert list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    second = save_checkpoint(tmp_path / "b.abcp", back)
    assert first.read_bytes() == second.read_bytes()


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\x00"])
def test_checkpoint_rejects_corruption(tmp_path, mutate):
    from ausculta.errors import MalformedContainer
    from ausculta.nn_core import load_checkpoint, save_checkpoint

    path = save_checkpoint(tmp_path / "a.abcp", _small_model().init(seed=0))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(MalformedContainer):
        load_checkpoint(path)
