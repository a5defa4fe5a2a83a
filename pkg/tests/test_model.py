import math

import numpy as np
import pytest

from seulab.model import (
    DiffuserConfig,
    ToyDiffuser,
    attention,
    build_weights,
    conv2d,
    ffn,
    silu,
    weight_shapes,
)

from conftest import assert_images_equal


# -- reference oracles, written independently of the implementation ------------


def reference_attention(x, context, wq, wk, wv, wo, heads):
    t, d = x.shape
    s, _ = context.shape
    dh = d // heads
    q = x @ wq
    k = context @ wk
    v = context @ wv
    out = np.zeros((t, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(t):
            scores = np.array([q[i, sl] @ k[j, sl] for j in range(s)]) / math.sqrt(dh)
            scores -= scores.max()
            weights = np.exp(scores)
            weights /= weights.sum()
            out[i, sl] = sum(weights[j] * v[j, sl] for j in range(s))
    return out @ wo


def reference_ffn(x, w1, w2):
    hidden = x @ w1
    activated = hidden / (1.0 + np.exp(-hidden))
    return activated @ w2


def test_attention_matches_bruteforce_reference():
    rng = np.random.default_rng(123)
    for heads in (1, 2):
        x = rng.standard_normal((5, 4))
        context = rng.standard_normal((3, 6))
        wq = rng.standard_normal((4, 4))
        wk = rng.standard_normal((6, 4))
        wv = rng.standard_normal((6, 4))
        wo = rng.standard_normal((4, 4))
        got = attention(x, context, wq, wk, wv, wo, heads=heads)
        want = reference_attention(x, context, wq, wk, wv, wo, heads)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_attention_single_token_identity():
    x = np.array([[0.3, -1.2]])
    eye = np.eye(2)
    out = attention(x, x, eye, eye, eye, eye, heads=1)
    np.testing.assert_allclose(out, x, rtol=0, atol=0)


def test_attention_zero_value_matrix_gives_zero():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 4))
    out = attention(x, x, np.eye(4), np.eye(4), np.zeros((4, 4)), np.eye(4), heads=2)
    assert np.array_equal(out, np.zeros((4, 4)))


def test_attention_dimension_mismatch():
    x = np.zeros((2, 4))
    with pytest.raises(ValueError):
        attention(x, np.zeros((2, 3)), np.eye(4), np.eye(4), np.eye(4), np.eye(4))
    with pytest.raises(ValueError):
        attention(x, x, np.eye(3), np.eye(4), np.eye(4), np.eye(4))


def test_ffn_matches_reference_and_shape():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((6, 4))
    w1 = rng.standard_normal((4, 8))
    w2 = rng.standard_normal((8, 4))
    got = ffn(x, w1, w2)
    np.testing.assert_allclose(got, reference_ffn(x, w1, w2), rtol=1e-12)
    assert got.shape == x.shape


def test_ffn_zero_first_layer_gives_zero():
    x = np.ones((3, 4))
    assert np.array_equal(ffn(x, np.zeros((4, 8)), np.ones((8, 4))), np.zeros((3, 4)))


def test_ffn_shape_mismatch():
    with pytest.raises(ValueError):
        ffn(np.zeros((2, 4)), np.zeros((3, 8)), np.zeros((8, 4)))


def test_silu_reference_values():
    xs = np.array([-3.0, -0.5, 0.0, 0.5, 3.0])
    expected = np.array([x / (1.0 + math.exp(-x)) for x in xs])
    np.testing.assert_allclose(silu(xs.copy()), expected, rtol=1e-15)
    edge = silu(np.array([np.inf, -np.inf, np.nan, -1e6]))
    assert edge[0] == np.inf
    assert edge[1] == 0.0
    assert math.isnan(edge[2])
    assert edge[3] == 0.0


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(77)
    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    got = conv2d(x, k)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    want = np.zeros((3, 5, 5))
    for co in range(3):
        for i in range(5):
            for j in range(5):
                want[co, i, j] = np.sum(k[co] * xp[:, i:i + 3, j:j + 3])
    np.testing.assert_allclose(got, want, rtol=1e-12)
    # A strided same-padded conv equals the dense conv subsampled.
    strided = conv2d(x[:, :4, :4], k, stride=2)
    assert strided.shape == (3, 2, 2)
    np.testing.assert_allclose(strided, conv2d(x[:, :4, :4], k)[:, ::2, ::2], rtol=1e-12)


# -- prompt embedding ------------------------------------------------------------


def test_embed_prompt_deterministic(tiny_model):
    a = tiny_model.embed_prompt("a parked sports car")
    b = tiny_model.embed_prompt("a parked sports car")
    assert np.array_equal(a, b)
    assert a.shape == (tiny_model.config.text_length, tiny_model.config.embed_width)


def test_embed_prompt_distinct_prompts_differ(tiny_model):
    a = tiny_model.embed_prompt("a parked sports car")
    b = tiny_model.embed_prompt("blue beach umbrellas")
    assert not np.array_equal(a, b)


def test_embed_prompt_empty_is_all_pad(tiny_model):
    e = tiny_model.embed_prompt("")
    for row in e:
        assert np.array_equal(row, e[0])
    # A one-word prompt shares the pad rows beyond its first.
    one = tiny_model.embed_prompt("car")
    assert np.array_equal(one[1:], e[1:])
    assert not np.array_equal(one[0], e[0])


def test_embed_prompt_shared_words_share_rows(tiny_model):
    a = tiny_model.embed_prompt("red car")
    b = tiny_model.embed_prompt("red boat")
    assert np.array_equal(a[0], b[0])
    assert not np.array_equal(a[1], b[1])


def test_embed_prompt_truncates(tiny_model):
    m = tiny_model.config.text_length
    long_prompt = " ".join(f"w{i}" for i in range(m + 5))
    trimmed = " ".join(f"w{i}" for i in range(m))
    assert np.array_equal(
        tiny_model.embed_prompt(long_prompt), tiny_model.embed_prompt(trimmed)
    )


# -- structure: residual bypass ---------------------------------------------------


def zeroed_transformer_weights(model, store):
    weights = model.load_tensors(store)
    for name in model.config.transformer_tensor_names():
        weights[name] = np.zeros_like(weights[name])
    return weights


def test_zeroed_transformers_reduce_to_resnet_path(tiny_model, tiny_store):
    """With all transformer weights zero, the down path must equal a
    hand-composed ResNets-plus-samplers pipeline built from the public ops."""
    cfg = tiny_model.config
    weights = zeroed_transformer_weights(tiny_model, tiny_store)
    text = tiny_model.embed_prompt("anything")
    latent = tiny_model.initial_latent()

    trace = {}
    tiny_model.unet_forward(latent, text, weights, t=0, trace=trace)

    def resnet(x, prefix):
        h = conv2d(x, weights[f"{prefix}.conv1"])
        h = conv2d(silu(h), weights[f"{prefix}.conv2"])
        base = x
        if f"{prefix}.proj" in weights:
            base = conv2d(x, weights[f"{prefix}.proj"])
        return base + h

    x = conv2d(latent, weights["in.conv"]) + tiny_model._time_signal(0)
    for level in range(cfg.num_levels):
        for r in range(cfg.resnet_count("down", level)):
            x = resnet(x, f"down.{level}.res{r}")
        assert np.array_equal(trace[f"down.{level}.out"], x)
        if level < cfg.num_levels - 1:
            x = conv2d(x, weights[f"down.{level}.down.conv"], stride=2)


def test_zeroing_one_sublayer_equals_removing_it(tiny_model, tiny_store):
    cfg = tiny_model.config
    weights = tiny_model.load_tensors(tiny_store)
    text = tiny_model.embed_prompt("a prompt")
    latent = tiny_model.initial_latent()
    baseline = tiny_model.unet_forward(latent, text, weights, t=0)

    # Zero the whole CA sublayer of one transformer: its residual branch
    # must contribute exactly zero, like deleting the sublayer.
    for leaf in ("wq", "wk", "wv", "wo"):
        weights[f"down.0.t1.ca.{leaf}"] = np.zeros_like(weights[f"down.0.t1.ca.{leaf}"])
    removed = tiny_model.unet_forward(latent, text, weights, t=0)
    assert not np.array_equal(baseline, removed)

    c = cfg.channels[0]
    x = np.arange(c * 4, dtype=np.float64).reshape(4, c) / (c * 4.0)
    zero = np.zeros((c, c))
    out = attention(x, text, zero, np.zeros((cfg.embed_width, c)),
                    np.zeros((cfg.embed_width, c)), zero, heads=cfg.heads)
    assert np.array_equal(out, np.zeros_like(x))


# -- structure: propagation locality ----------------------------------------------


def traced_forward(model, store, keys=None):
    trace = {}
    text = model.embed_prompt("locality probe")
    model.unet_forward(model.initial_latent(), text, store, t=1, trace=trace)
    return trace


def test_up_block_corruption_leaves_down_and_mid_untouched(default_model, default_store):
    clean = traced_forward(default_model, default_store)
    view = default_store.flip("up.1.t0.sa.wv", 5, 14)
    corrupted = traced_forward(default_model, view)
    for key in clean:
        if key.startswith(("down.", "skip.", "mid.")):
            assert np.array_equal(clean[key], corrupted[key]), key
    assert not np.array_equal(clean["up.1.out"], corrupted["up.1.out"])


def test_level0_down_corruption_reaches_skip_and_deeper_blocks(default_model, default_store):
    clean = traced_forward(default_model, default_store)
    view = default_store.flip("down.0.t0.sa.wv", 3, 14)
    corrupted = traced_forward(default_model, view)
    assert np.array_equal(clean["down.0.in"], corrupted["down.0.in"])
    for key in ("skip.0", "down.1.in", "down.1.out", "down.2.in", "mid.in",
                "mid.out", "up.2.in", "up.1.in", "up.0.in"):
        assert not np.array_equal(clean[key], corrupted[key]), key


def test_deeper_down_corruption_spares_shallower_activations(default_model, default_store):
    clean = traced_forward(default_model, default_store)
    view = default_store.flip("down.1.t0.ca.wv", 2, 14)
    corrupted = traced_forward(default_model, view)
    for key in ("down.0.in", "down.0.out", "skip.0", "down.1.in"):
        assert np.array_equal(clean[key], corrupted[key]), key
    for key in ("down.1.out", "skip.1", "mid.in"):
        assert not np.array_equal(clean[key], corrupted[key]), key


# -- decoder -----------------------------------------------------------------------


def test_decode_zero_latent_is_constant(tiny_model):
    cfg = tiny_model.config
    img = tiny_model.decode_latent(
        np.zeros((cfg.latent_channels, cfg.latent_size, cfg.latent_size))
    )
    assert img.shape == (3, cfg.image_size, cfg.image_size)
    assert np.all(img == 0.5)


def test_decode_single_pixel_footprint(tiny_model):
    cfg = tiny_model.config
    scale = cfg.image_size // cfg.latent_size
    base = np.zeros((cfg.latent_channels, cfg.latent_size, cfg.latent_size))
    poked = base.copy()
    poked[1, 2, 5] = 0.75
    diff = np.abs(tiny_model.decode_latent(poked) - tiny_model.decode_latent(base))
    changed = np.argwhere(diff.max(axis=0) > 0)
    assert changed.size > 0
    rows = changed[:, 0]
    cols = changed[:, 1]
    assert rows.min() >= 2 * scale and rows.max() < 3 * scale
    assert cols.min() >= 5 * scale and cols.max() < 6 * scale


def test_decode_clamps_non_finite(tiny_model):
    cfg = tiny_model.config
    latent = np.zeros((cfg.latent_channels, cfg.latent_size, cfg.latent_size))
    latent[0, 0, 0] = np.inf
    latent[1, 1, 1] = -np.inf
    latent[2, 2, 2] = np.nan
    img = tiny_model.decode_latent(latent)
    assert np.isfinite(img).all()
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_decode_bounds_on_wild_latents(tiny_model):
    cfg = tiny_model.config
    rng = np.random.default_rng(3)
    latent = rng.standard_normal((cfg.latent_channels, cfg.latent_size, cfg.latent_size)) * 1e6
    img = tiny_model.decode_latent(latent)
    assert img.min() >= 0.0 and img.max() <= 1.0


# -- end-to-end determinism ---------------------------------------------------------


def test_generate_deterministic_across_instances(tiny_config):
    a = ToyDiffuser(tiny_config).generate("a parked sports car", build_weights(tiny_config))
    b = ToyDiffuser(tiny_config).generate("a parked sports car", build_weights(tiny_config))
    assert_images_equal(a, b)


def test_generate_depends_on_prompt_and_seed(tiny_model, tiny_store, tiny_config):
    a = tiny_model.generate("a parked sports car", tiny_store)
    b = tiny_model.generate("blue beach umbrellas", tiny_store)
    assert not np.array_equal(a, b)
    other_cfg = DiffuserConfig(**{**tiny_config.__dict__, "seed": tiny_config.seed + 1})
    c = ToyDiffuser(other_cfg).generate("a parked sports car", build_weights(other_cfg))
    assert not np.array_equal(a, c)


def test_flip_then_flip_back_restores_baseline(tiny_model, tiny_store):
    baseline = tiny_model.generate("a parked sports car", tiny_store)
    view = tiny_store.flip("down.0.t0.sa.wv", 4, 14)
    corrupted = tiny_model.generate("a parked sports car", view)
    assert not np.array_equal(baseline, corrupted)
    restored = view.flip("down.0.t0.sa.wv", 4, 14)
    assert_images_equal(baseline, tiny_model.generate("a parked sports car", restored))


def test_denoise_zero_steps_returns_initial(tiny_config, tiny_store):
    cfg = DiffuserConfig(**{**tiny_config.__dict__, "steps": 0})
    model = ToyDiffuser(cfg)
    initial = model.initial_latent()
    out = model.denoise_loop(initial, model.embed_prompt("x"), tiny_store)
    assert np.array_equal(out, initial)


def test_error_free_pipeline_is_finite(tiny_model, tiny_store):
    trace = {}
    text = tiny_model.embed_prompt("a parked sports car")
    latent = tiny_model.initial_latent()
    weights = tiny_model.load_tensors(tiny_store)
    for t in range(tiny_model.config.steps):
        estimate = tiny_model.unet_forward(latent, text, weights, t, trace=trace)
        assert np.isfinite(estimate).all()
        for key, value in trace.items():
            assert np.isfinite(value).all(), key
        latent = latent - tiny_model._schedule[t] * estimate
    result = tiny_model.run("a parked sports car", tiny_store)
    assert not result.non_finite
    assert np.isfinite(result.image).all()


def test_initial_latent_is_prompt_independent(tiny_model):
    assert np.array_equal(tiny_model.initial_latent(), tiny_model.initial_latent())


def test_weight_shapes_match_store(default_config, default_store):
    shapes = weight_shapes(default_config)
    assert set(shapes) == set(default_store.names())
    for name, shape in shapes.items():
        assert default_store.entry(name).shape == shape
    total = sum(default_store.element_count(n)
                for n in default_config.transformer_tensor_names())
    assert total >= 100_000


def test_config_validation():
    with pytest.raises(ValueError):
        DiffuserConfig(latent_size=64, image_size=64)
    with pytest.raises(ValueError):
        DiffuserConfig(latent_size=16, image_size=65)
    with pytest.raises(ValueError):
        DiffuserConfig(channels=(16,))
    with pytest.raises(ValueError):
        DiffuserConfig(channels=(15, 30, 60))
    with pytest.raises(ValueError):
        DiffuserConfig(latent_size=4, image_size=16, channels=(8, 16, 32, 64))
