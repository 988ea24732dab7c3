import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramat import numerics as nx
from ramat.model import (ConfigError, ModelConfig, cast_params, decode_masked, embed, encode,
                         forward_head, init_params, masked_mse, patchify, pooled_features,
                         pretrain_loss, reservoir_states, sample_mask, sinusoidal_positions,
                         unpatchify)
from ramat.numerics import ContractError, NumericError, Tensor
from ramat.train import OptimState, adamw_step


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(window_length=10, patch_length=4)
    with pytest.raises(ConfigError):
        ModelConfig(window_length=8, patch_length=8)
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(head="classification", num_classes=1)
    assert ModelConfig().mask_ratio == 0.3


def test_patchify_shapes_and_order():
    w = np.arange(16, dtype=np.float32).reshape(8, 2)
    p = patchify(w, 4)
    assert p.shape == (2, 8)
    # time-major: first timestep's two channels come first
    np.testing.assert_array_equal(p[0], [0, 1, 2, 3, 4, 5, 6, 7])
    same = patchify(np.tile([[1.5, -2.0]], (8, 1)), 4)
    np.testing.assert_array_equal(same[0], same[1])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_patchify_roundtrip_is_lossless(P, L, K, seed):
    w = np.random.default_rng(seed).normal(size=(3, P * L, K)).astype(np.float32)
    assert unpatchify(patchify(w, L), K).tobytes() == w.tobytes()


def test_mask_forcing_and_determinism():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = sample_mask(5, 0.0, rng)
        assert m.sum() == 1
    high = sample_mask(4, 0.999999, np.random.default_rng(1), batch=50)
    assert (high.sum(axis=1) == 3).all()
    a = sample_mask(10, 0.3, np.random.default_rng(9), batch=20)
    b = sample_mask(10, 0.3, np.random.default_rng(9), batch=20)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ContractError):
        sample_mask(1, 0.3, rng)


def test_positions_table():
    pos = sinusoidal_positions(5, 8)
    np.testing.assert_array_equal(pos[0, 0::2], 0.0)
    np.testing.assert_array_equal(pos[0, 1::2], 1.0)
    assert pos[3, 0] == pytest.approx(np.sin(3.0))
    assert pos[3, 3] == pytest.approx(np.cos(3.0 / 10000 ** (2 / 8)))


def _windows(config, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, config.window_length, config.num_channels)).astype(np.float32)


def test_embed_mask_token_keeps_position(tiny_config, tiny_spec, tiny_params):
    w = _windows(tiny_config, batch=1)
    mask = np.array([[True, True, False, True]])
    states = reservoir_states(tiny_spec, patchify(w, 4), mask)
    tokens = embed(tiny_params, states, mask).data[0]
    pos = sinusoidal_positions(4, 8)
    tok = tiny_params["mask_token"].data
    for i in (0, 1, 3):
        np.testing.assert_allclose(tokens[i], tok + pos[i], rtol=1e-6, atol=1e-7)
        assert not np.allclose(tokens[2], tokens[i])


def _masked_content_changes_loss(config, spec, params):
    rng = np.random.default_rng(5)
    w = _windows(config, batch=3, seed=1)
    mask = np.array([[True, False, False, False],
                     [False, True, False, True],
                     [False, False, True, False]])
    patches = patchify(w, config.patch_length)
    noisy = np.where(mask[..., None], rng.normal(size=patches.shape) * 5, patches)
    altered = noisy.reshape(w.shape).astype(np.float32)
    base = pretrain_loss(params, spec, config, w, mask).data.tobytes()
    # same targets, different encoder input in masked patches
    other = pretrain_loss(params, spec, config, altered, mask, targets=w).data.tobytes()
    return base != other


def test_masked_content_invariance_with_flag_on(tiny_config, tiny_spec, tiny_params):
    import dataclasses

    on = dataclasses.replace(tiny_config, zero_masked_reservoir_input=True)
    assert not _masked_content_changes_loss(on, tiny_spec, tiny_params)


def test_masked_content_leaks_with_flag_off(tiny_config, tiny_spec, tiny_params):
    assert _masked_content_changes_loss(tiny_config, tiny_spec, tiny_params)


def test_encoder_with_no_layers_is_identity(tiny_params):
    cfg = ModelConfig(window_length=16, patch_length=4, num_channels=2, embed_dim=8,
                      num_heads=2, num_layers=0, ffn_dim=16)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 8)))
    assert encode(tiny_params, x, cfg).data.tobytes() == x.data.tobytes()


def test_attention_rows_are_stochastic(tiny_config, tiny_params):
    keep = []
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4, 8)))
    encode(tiny_params, x, tiny_config, keep_attention=keep)
    assert len(keep) == tiny_config.num_layers
    for w in keep:
        assert w.shape == (3, 2, 4, 4)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_encoder_is_permutation_equivariant(tiny_config, tiny_params):
    x = np.random.default_rng(2).normal(size=(1, 4, 8))
    perm = [2, 0, 3, 1]
    out = encode(tiny_params, Tensor(x), tiny_config).data
    out_p = encode(tiny_params, Tensor(x[:, perm]), tiny_config).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-5)


def test_encoder_reports_layer_on_nan(tiny_config, tiny_params):
    bad = dict(tiny_params)
    bad["blocks.0.ffn.b2"] = Tensor(np.full(8, np.inf))
    with pytest.raises(NumericError, match="layer 0"):
        encode(bad, Tensor(np.zeros((1, 4, 8))), tiny_config)


def test_decoder_examples(tiny_config, tiny_params):
    ctx = Tensor(np.random.default_rng(3).normal(size=(2, 4, 8)))
    mask = np.array([[True, True, True, False], [False, True, False, False]])
    out = decode_masked(tiny_params, ctx, mask)
    assert out.shape == (4, tiny_config.patch_dim)
    zero = dict(tiny_params)
    zero["decoder.weight"] = Tensor(np.zeros((8, tiny_config.patch_dim)))
    zero["decoder.bias"] = Tensor(np.arange(tiny_config.patch_dim, dtype=np.float32))
    out = decode_masked(zero, ctx, mask).data
    np.testing.assert_array_equal(out, np.broadcast_to(zero["decoder.bias"].data, out.shape))
    with pytest.raises(ContractError):
        decode_masked(tiny_params, ctx, np.zeros((2, 4), bool))


def test_masked_mse_examples():
    patches = np.random.default_rng(4).normal(size=(2, 4, 6)).astype(np.float32)
    mask = np.array([[True, False, True, False], [False, False, False, True]])
    exact = Tensor(patches[mask])
    assert masked_mse(exact, patches, mask).item() == 0.0
    shifted = Tensor(patches[mask] + 1)
    assert masked_mse(shifted, patches, mask).item() == pytest.approx(1.0, abs=1e-6)
    changed = patches.copy()
    changed[0, 1] += 100.0  # visible
    recon = Tensor(patches[mask] * 0.5)
    assert masked_mse(recon, changed, mask).item() == masked_mse(recon, patches, mask).item()


def test_forward_head_examples(tiny_config, tiny_spec, tiny_params):
    import dataclasses

    w = _windows(tiny_config, batch=3)
    zero = dict(tiny_params)
    zero["head.weight"] = Tensor(np.zeros((8, 2)))
    zero["head.bias"] = Tensor([0.25, -1.5])
    out = forward_head(zero, tiny_spec, tiny_config, w).data
    np.testing.assert_array_equal(out, np.tile([0.25, -1.5], (3, 1)).astype(np.float32))

    cls = dataclasses.replace(tiny_config, head="classification", num_classes=2)
    sym = dict(tiny_params)
    sym["head.weight"] = Tensor(np.zeros((8, 2)))
    sym["head.bias"] = Tensor([0.7, 0.7])
    np.testing.assert_allclose(forward_head(sym, tiny_spec, cls, w).data, 0.5, atol=1e-7)

    pooled = pooled_features(tiny_params, tiny_spec, tiny_config, w).data
    states = reservoir_states(tiny_spec, patchify(w, 4))
    tokens = encode(tiny_params, embed(tiny_params, states, None), tiny_config).data
    np.testing.assert_allclose(pooled, tokens.astype(np.float64).mean(axis=1), atol=1e-6)


def test_mask_token_receives_gradient(tiny_config, tiny_spec, tiny_params):
    w = _windows(tiny_config)
    mask = np.array([[False, True, False, False], [False, False, False, True]])
    with nx.Tape() as tape:
        loss = pretrain_loss(tiny_params, tiny_spec, tiny_config, w, mask)
    nx.backward(loss, tape)
    assert np.abs(tiny_params["mask_token"].grad).sum() > 0
    # reservoir arrays are plain numpy, never tape leaves
    assert all(leaf.name in tiny_params for leaf in tape.leaves())


@pytest.mark.parametrize("layers", [0, 2])
def test_shape_contract(layers):
    cfg = ModelConfig(window_length=24, patch_length=6, num_channels=3, embed_dim=12,
                      num_heads=3, num_layers=layers, ffn_dim=8)
    from ramat.reservoir import ReservoirConfig, build_reservoir

    spec = build_reservoir(ReservoirConfig(reservoir_size=40), cfg.patch_dim, seed=1)
    params = init_params(cfg, 40, np.random.default_rng(0))
    w = _windows(cfg, batch=2)
    tokens = embed(params, reservoir_states(spec, patchify(w, 6)), None)
    assert tokens.shape == (2, 4, 12)
    assert encode(params, tokens, cfg).shape == (2, 4, 12)
    mask = np.array([[True, False, False, True], [False, True, False, False]])
    assert decode_masked(params, encode(params, tokens, cfg), mask).shape == (3, 18)


def test_overfits_single_window(tiny_config, tiny_spec):
    params = init_params(tiny_config, 16, np.random.default_rng(1))
    w = _windows(tiny_config, batch=1, seed=3)
    mask = np.array([[False, True, False, True]])
    trainable = [n for n in params if not n.startswith("head.")]
    opt = OptimState.create(params, trainable, weight_decay=0.0)
    loss = None
    for _ in range(200):
        for t in params.values():
            t.zero_grad()
        with nx.Tape() as tape:
            loss = pretrain_loss(params, tiny_spec, tiny_config, w, mask)
        nx.backward(loss, tape)
        params = adamw_step(params, {n: params[n].grad for n in trainable}, opt, 1e-2)
    final = pretrain_loss(params, tiny_spec, tiny_config, w, mask).item()
    assert final < 1e-2


def test_cast_params_changes_dtype(tiny_params):
    p64 = cast_params(tiny_params, np.float64)
    assert all(t.dtype == np.float64 for t in p64.values())
    assert all(t.requires_grad for t in p64.values())
