from __future__ import annotations

import numpy as np
import pytest

from simreweight import autodiff as ad
from simreweight import gradcheck as gc
from simreweight.errors import ConfigError, ShapeMismatch
from simreweight.model import (Batch, MSTNet, ModelConfig, analytic_param_count,
                               positional_encoding)
from simreweight.simulator import rng_stream

from conftest import small_model_config


def random_batch(cfg: ModelConfig, rng, B: int = 3) -> Batch:
    L = cfg.L_in + cfg.L_out
    return Batch(x=rng.standard_normal((B, cfg.n_tasks, cfg.L_in, cfg.patch_cells)),
                 y=rng.standard_normal((B, cfg.n_tasks, cfg.L_out)),
                 hour=rng.integers(0, cfg.hours_per_day, (B, L)),
                 dow=rng.integers(0, 7, (B, L)))


@pytest.mark.parametrize("kw", [
    {}, {"use_interaction": False}, {"use_spatial": False}, {"tasks": [2]},
    {"n_enc_layers": 2, "n_dec_layers": 2, "cnn_kernel": 1},
])
def test_param_count_matches_closed_form(kw):
    cfg = ModelConfig(**kw)
    params = MSTNet(cfg).init_params(np.random.default_rng(0))
    assert len(params) == analytic_param_count(cfg)
    assert sum(int(np.prod(s)) for _, s in params.index.values()) == len(params)


@pytest.mark.parametrize("kw", [{}, {"use_interaction": False}, {"use_spatial": False},
                                {"tasks": [1]}])
def test_forward_shapes(kw):
    cfg = small_model_config(**kw)
    model = MSTNet(cfg)
    p = model.init_params(np.random.default_rng(1)).tensors()
    out = model.forward(p, random_batch(cfg, np.random.default_rng(2)))
    T = cfg.n_tasks
    assert out.Y.shape == (T, 3, cfg.L_out)
    assert out.H_enc.shape == (T, 3, cfg.L_in, cfg.d_model)
    assert out.H_tilde.shape == (T, 3, 1, cfg.d_model)
    assert (out.H_s is None) == (not cfg.use_spatial)
    assert np.all(np.isfinite(out.Y.data))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(cnn_kernel=2).validate()
    with pytest.raises(ConfigError):
        ModelConfig(tasks=[0, 0]).validate()


def test_embedding_is_positional_encoding_for_zero_inputs():
    cfg = small_model_config()
    model = MSTNet(cfg)
    p = model.init_params(np.random.default_rng(0)).tensors()
    for name in ("enc_embed.value_w", "enc_embed.value_b", "enc_embed.hour", "enc_embed.dow"):
        p[name] = ad.Tensor(np.zeros(p[name].shape))
    batch = random_batch(cfg, np.random.default_rng(0), B=2)
    R = model.embed(p, "enc", np.zeros_like(batch.x_tasks), batch.hour[:, :cfg.L_in],
                    batch.dow[:, :cfg.L_in])
    pe = positional_encoding(cfg.L_in, cfg.d_model)
    np.testing.assert_allclose(R.data, np.broadcast_to(pe, R.shape), rtol=0, atol=0)
    assert np.all(pe[0, 0::2] == 0.0)


def test_embedding_is_local_in_time():
    cfg = small_model_config()
    model = MSTNet(cfg)
    p = model.init_params(np.random.default_rng(0)).tensors()
    batch = random_batch(cfg, np.random.default_rng(0), B=1)
    x = batch.x_tasks
    x2 = x.copy()
    x2[:, :, 5] += 1.0
    h, d = batch.hour[:, :cfg.L_in], batch.dow[:, :cfg.L_in]
    diff = np.abs(model.embed(p, "enc", x2, h, d).data - model.embed(p, "enc", x, h, d).data)
    changed = np.nonzero(diff.max(axis=(0, 1, 3)))[0]
    assert changed.tolist() == [5]


def test_embed_rejects_wrong_window():
    cfg = small_model_config()
    model = MSTNet(cfg)
    p = model.init_params(np.random.default_rng(0)).tensors()
    batch = random_batch(cfg, np.random.default_rng(0), B=1)
    with pytest.raises(ShapeMismatch):
        model.embed(p, "enc", batch.x_tasks[:, :, :5], batch.hour[:, :5], batch.dow[:, :5])


def test_spatial_encoder_ignores_swapping_identical_cells():
    cfg = small_model_config()
    model = MSTNet(cfg)
    p = model.init_params(np.random.default_rng(0)).tensors()
    rng = np.random.default_rng(1)
    grid = rng.standard_normal((3, 2, cfg.L_in, 3, 3))
    grid[..., 0, 2] = grid[..., 2, 1]
    swapped = grid.copy()
    swapped[..., 0, 2], swapped[..., 2, 1] = grid[..., 2, 1], grid[..., 0, 2]
    np.testing.assert_array_equal(model.spatial_encode(p, grid).data,
                                  model.spatial_encode(p, swapped).data)


def test_spatial_and_interaction_gradients_match_finite_differences():
    cfg = gc.tiny_model_config()
    model = MSTNet(cfg)
    params = model.init_params(np.random.default_rng(4))
    rng = np.random.default_rng(5)
    grid = rng.standard_normal((3, 2, cfg.L_in, 3, 3))
    H_enc = rng.standard_normal((3, 2, cfg.L_in, cfg.d_model))
    arrays = params.arrays()

    def spatial(t):
        p = dict(arrays, **t)
        hs = model.spatial_encode(p, grid)
        return ad.tsum(ad.mul(hs, hs))

    def interaction(t):
        p = dict(arrays, **t)
        ht = model.interact(p, model.spatial_encode(p, grid), ad.Tensor(H_enc))
        return ad.tsum(ad.mul(ht, ht))

    assert gc.check(spatial, {"spatial.conv_w": arrays["spatial.conv_w"]}) <= 1e-4
    inter = {k: v for k, v in arrays.items() if k.startswith("inter.")}
    assert gc.check(interaction, inter) <= 1e-4


def test_interaction_swaps_with_tasks():
    cfg = small_model_config()
    model = MSTNet(cfg)
    params = model.init_params(np.random.default_rng(2))
    p = params.tensors()
    rng = np.random.default_rng(3)
    H_s = rng.standard_normal((3, 2, 1, cfg.d_model))
    H_enc = rng.standard_normal((3, 2, cfg.L_in, cfg.d_model))
    perm = [1, 0, 2]
    p_swapped = dict(p)
    for name in p:
        if name.startswith("inter.mlp"):
            p_swapped[name] = ad.Tensor(p[name].data[perm])
    base = model.interact(p, ad.Tensor(H_s), ad.Tensor(H_enc)).data
    swapped = model.interact(p_swapped, ad.Tensor(H_s[perm]), ad.Tensor(H_enc[perm])).data
    np.testing.assert_allclose(swapped, base[perm], rtol=0, atol=1e-12)


def test_interaction_with_zero_attention_is_layer_norm_of_tokens():
    cfg = small_model_config(use_spatial=False)
    model = MSTNet(cfg)
    p = model.init_params(np.random.default_rng(2)).tensors()
    for name in list(p):
        if name.startswith("inter.t_attn"):
            p[name] = ad.Tensor(np.zeros(p[name].shape))
    H_enc = np.random.default_rng(3).standard_normal((3, 2, cfg.L_in, cfg.d_model))
    tokens = H_enc.mean(axis=2).swapaxes(0, 1)  # [B, T, d]
    ln = ad.layer_norm(tokens).data.swapaxes(0, 1)[:, :, None, :]
    ident = {k: v for k, v in p.items()}
    out = model.interact(ident, None, ad.Tensor(H_enc)).data
    expected = ad.linear(ad.relu(ad.linear(ln, p["inter.mlp.w1"], p["inter.mlp.b1"])),
                         p["inter.mlp.w2"], p["inter.mlp.b2"]).data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def _decoder_setup(seed: int):
    cfg = small_model_config()
    model = MSTNet(cfg)
    rng = rng_stream(seed, 99)
    p = model.init_params(rng).tensors()
    L_dec = cfg.L_token + cfg.L_out
    R = rng.standard_normal((3, 2, L_dec, cfg.d_model))
    memory = ad.Tensor(rng.standard_normal((3, 2, cfg.L_in, cfg.d_model)))
    return cfg, model, p, R, memory, rng


def test_decoder_output_shape():
    cfg, model, p, R, memory, _ = _decoder_setup(0)
    assert model.decode(p, ad.Tensor(R), memory).shape == (3, 2, cfg.L_out)


def test_decoder_causality():
    cfg, model, p, R, memory, rng = _decoder_setup(1)
    base = model.decode(p, ad.Tensor(R), memory).data
    for t in range(cfg.L_token, cfg.L_token + cfg.L_out):
        R2 = R.copy()
        R2[:, :, t] += rng.standard_normal(R2[:, :, t].shape)
        out = model.decode(p, ad.Tensor(R2), memory).data
        first = t - cfg.L_token
        np.testing.assert_allclose(out[..., :first], base[..., :first], rtol=0, atol=1e-12)
        assert np.abs(out[..., first] - base[..., first]).max() > 0


def test_forward_is_deterministic_without_dropout():
    cfg = small_model_config(dropout_rate=0.3)
    model = MSTNet(cfg)
    params = model.init_params(np.random.default_rng(0))
    batch = random_batch(cfg, np.random.default_rng(1))
    assert np.array_equal(model.predict(params, batch), model.predict(params, batch))


def test_task_losses_are_mean_squared_error():
    pred = np.array([[[1.0, 2.0], [0.0, 0.0]]])
    target = np.zeros((1, 2, 2))
    np.testing.assert_allclose(MSTNet.task_losses(pred, target).data, [[2.5, 0.0]])


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    result = gc.check_model_loss(seed, n_coords=1)
    assert result.passed, result.max_rel_error
