import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eatac import autodiff as ad
from eatac.network import (Architecture, Model, NormLayer, SubNetworkMask, adaptable_parameters,
                           predict, sample_subnetwork)
from conftest import TINY


def _numpy_norm(x, layer, stats):
    if layer.mode == "layer-norm":
        mu, var = x.mean(1, keepdims=True), x.var(1, keepdims=True)
    elif stats == "running":
        mu, var = layer.running_mean, layer.running_var
    else:
        mu, var = x.mean(0), x.var(0)
    return (x - mu) / np.sqrt(var + layer.eps) * layer.gamma.data + layer.beta.data


def head_of_stem(model, x, stats):
    """Logits with every residual block skipped, computed with plain numpy."""
    if model.input_norm is not None:
        x = _numpy_norm(x, model.input_norm, stats)
    h = x @ model.stem.weight.data + model.stem.bias.data
    h = np.maximum(_numpy_norm(h, model.stem_norm, stats), 0.0)
    return _numpy_norm(h, model.head_norm, stats) @ model.head.weight.data + model.head.bias.data


def test_logits_shape(tiny_model, rng):
    assert predict(tiny_model, rng.normal(size=(7, 5))).shape == (7, 3)


def test_input_width_mismatch_raises(tiny_model):
    with pytest.raises(ad.ShapeError):
        predict(tiny_model, np.ones((4, 6)))


def test_mask_length_mismatch_raises(tiny_model):
    with pytest.raises(ValueError):
        predict(tiny_model, np.ones((4, 5)), mask=SubNetworkMask((True,)))


@pytest.mark.parametrize("stats", ["running", "batch"])
def test_all_keep_mask_is_bit_exact(tiny_model, rng, stats):
    x = rng.normal(size=(8, 5))
    full = predict(tiny_model, x, stats=stats).data
    kept = predict(tiny_model, x, mask=SubNetworkMask.all_keep(3), stats=stats).data
    assert np.array_equal(full, kept)


@pytest.mark.parametrize("stats", ["running", "batch"])
def test_all_drop_mask_is_head_of_stem(tiny_model, rng, stats):
    x = rng.normal(size=(8, 5))
    dropped = predict(tiny_model, x, mask=SubNetworkMask((False,) * 3), stats=stats).data
    np.testing.assert_allclose(dropped, head_of_stem(tiny_model, x, stats), rtol=1e-12, atol=1e-12)


def test_dropped_block_is_identity(tiny_model, rng):
    """Dropping block i equals running the model whose block i returns its input."""
    x = rng.normal(size=(6, 5))
    masked = predict(tiny_model, x, mask=SubNetworkMask((True, False, True))).data
    twin = tiny_model.copy()
    twin.blocks[1].fc2.weight.data[:] = 0.0
    twin.blocks[1].fc2.bias.data[:] = 0.0
    np.testing.assert_allclose(predict(twin, x).data, masked, rtol=1e-13, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 63))
def test_layer_norm_rows_are_batch_independent(seed, row):
    model = Model(Architecture(input_dim=5, num_classes=3, width=8, num_blocks=3, norm="layer-norm"), seed=seed)
    x = np.random.default_rng(seed).normal(size=(64, 5))
    mask = sample_subnetwork(model, 0.3, seed)
    batch = predict(model, x, mask=mask, stats="batch").data
    single = predict(model, x[row:row + 1], mask=mask, stats="batch").data
    np.testing.assert_allclose(single[0], batch[row], rtol=1e-12, atol=1e-12)


def test_p_drop_zero_keeps_everything(tiny_model):
    for seed in range(20):
        assert all(sample_subnetwork(tiny_model, 0.0, seed).keep)


def test_kept_fraction_monte_carlo():
    model = Model(Architecture(input_dim=4, num_classes=2, width=4, num_blocks=8))
    rng = np.random.default_rng(0)
    fractions = [sample_subnetwork(model, 0.2, rng).kept_fraction for _ in range(10_000)]
    assert abs(np.mean(fractions) - 0.8) <= 0.01


def test_same_seed_same_mask(tiny_model):
    assert sample_subnetwork(tiny_model, 0.5, 42) == sample_subnetwork(tiny_model, 0.5, 42)


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_p_drop_out_of_range_raises(tiny_model, p):
    with pytest.raises(ValueError):
        sample_subnetwork(tiny_model, p, 0)


def test_adaptable_parameter_count():
    model = Model(Architecture(width=32, num_blocks=2, input_norm=False))
    params = adaptable_parameters(model)
    assert len(model.norm_layers()) == 4
    assert len(params) == 8
    assert sum(p.data.size for p in params) == 256


def test_adaptable_order_is_stable():
    a, b = Model(TINY, seed=1), Model(TINY, seed=2)
    assert a.adaptable_names() == b.adaptable_names()
    assert [p.shape for p in adaptable_parameters(a)] == [p.shape for p in adaptable_parameters(b)]


def test_adaptable_set_is_all_norm_affines(tiny_model):
    params = adaptable_parameters(tiny_model)
    expected = [t for _, layer in tiny_model.norm_layers() for t in (layer.gamma, layer.beta)]
    assert len(params) == len(expected) and all(p is q for p, q in zip(params, expected))
    linear = {id(p) for name, p in tiny_model.named_parameters() if name.endswith(("weight", "bias"))}
    assert not linear & {id(p) for p in params}


def test_frozen_parameters_untouched_by_update(tiny_model, rng):
    frozen = {n: p.data.copy() for n, p in tiny_model.named_parameters()
              if n not in tiny_model.adaptable_names()}
    with tiny_model.trainable("adaptable"):
        logits = predict(tiny_model, rng.normal(size=(8, 5)), stats="batch")
        loss = ad.mean(ad.entropy(ad.softmax(logits)))
        found = ad.backward(loss)
    for name, p in tiny_model.named_parameters():
        if p in found:
            p.data = p.data - 0.1 * found[p]
    for name, p in tiny_model.named_parameters():
        if name in frozen:
            assert np.array_equal(p.data, frozen[name])
    assert any(not np.array_equal(p.data, np.ones_like(p.data)) for p in adaptable_parameters(tiny_model))


def test_trainable_context_restores_flags(tiny_model):
    tiny_model.set_trainable("none")
    with tiny_model.trainable("all"):
        assert all(p.requires_grad for _, p in tiny_model.named_parameters())
    assert not any(p.requires_grad for _, p in tiny_model.named_parameters())


def _captured_pre_affine(model, x, eps=None):
    outs = []
    for _, layer in model.norm_layers():
        if eps is not None:
            layer.eps = eps
        layer.capture = []
    predict(model, x, stats="batch")
    for _, layer in model.norm_layers():
        a, layer.capture = layer.capture[0], None
        outs.append((a, ad.normalize(ad.Tensor(a), axis=0, eps=layer.eps).data))
    return outs


def test_batch_mode_pre_affine_is_standardized(trained, rng):
    ds, model, _ = trained
    model = model.copy()
    x = ds.test.x[:64] * 1.7 + 0.5
    for raw, xhat in _captured_pre_affine(model, x, eps=1e-12):
        assert np.max(np.abs(xhat.mean(axis=0))) < 1e-6
        assert np.max(np.abs(xhat.var(axis=0) - 1.0)) < 1e-6


def test_batch_mode_variance_with_default_eps(trained):
    """With eps in the denominator the standardized variance is exactly v / (v + eps)."""
    ds, model, _ = trained
    for raw, xhat in _captured_pre_affine(model.copy(), ds.test.x[:64]):
        v = raw.var(axis=0)
        assert np.max(np.abs(xhat.mean(axis=0))) < 1e-6
        np.testing.assert_allclose(xhat.var(axis=0), v / (v + 1e-5), rtol=1e-9)


def test_masked_prediction_mutates_nothing(trained, rng):
    _, model, _ = trained
    before = model.state_dict()
    for seed in range(5):
        predict(model, rng.normal(size=(16, 32)), mask=sample_subnetwork(model, 0.4, seed), stats="batch")
    after = model.state_dict()
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_train_mode_updates_running_stats_only_there(rng):
    layer = NormLayer(4)
    x = ad.Tensor(rng.normal(size=(10, 4)) + 3.0)
    layer(x, "batch")
    assert np.array_equal(layer.running_mean, np.zeros(4))
    layer(x, "train")
    assert np.all(layer.running_mean > 0.2)


def test_state_dict_round_trip(tiny_model, rng):
    clone = Model(TINY, seed=99)
    clone.load_state_dict(tiny_model.state_dict())
    x = rng.normal(size=(4, 5))
    assert np.array_equal(predict(clone, x).data, predict(tiny_model, x).data)


def test_unknown_norm_mode_raises():
    with pytest.raises(ValueError):
        NormLayer(3, mode="group-norm")
