import math

import numpy as np
import pytest

from windvr import numerics as nx
from windvr.numerics import Tensor, grad_check
from windvr.rope_attention import (BlockConfig, ModelConfig, RoPEConfig, VelocityModel, backbone_forward,
                                   default_axis_split, discriminator_forward, grid_positions, init_params,
                                   load_checkpoint, params_checksum, rope_rotate, save_checkpoint,
                                   transformer_block, window_attention, windowed_attention_core)
from windvr.window_geometry import GridShape, Window, WindowLayout, WindowSize, partition

from _helpers import busy_params, swap_param, tiny_config


def dense_attention(q, k, v):
    """Plain numpy softmax attention on (n, dh) arrays, same arithmetic order as the model."""
    s = (q @ k.T) * (1.0 / math.sqrt(q.shape[-1]))
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)) @ v


def windowed_oracle(q, k, v, layout):
    """Loop over windows and heads; gather, attend densely, scatter."""
    b, n, h, dh = q.shape
    out = np.zeros((b, n, h * dh))
    g = layout.grid
    for win in layout.windows:
        ids = [(t * g.d_h + y) * g.d_w + x
               for t in range(win.start[0], win.start[0] + win.extent[0])
               for y in range(win.start[1], win.start[1] + win.extent[1])
               for x in range(win.start[2], win.start[2] + win.extent[2])]
        for bi in range(b):
            for hi in range(h):
                out[bi, ids, hi * dh:(hi + 1) * dh] = dense_attention(q[bi, ids, hi], k[bi, ids, hi], v[bi, ids, hi])
    return out


def qkv(seed, b=2, n=16, h=2, dh=4):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((b, n, h, dh)) for _ in range(3)]


# ---------------------------------------------------------------- rope

def test_default_axis_split():
    assert default_axis_split(16) == (4, 6, 6)
    assert default_axis_split(8) == (2, 2, 4)
    assert sum(default_axis_split(32)) == 32


def test_rope_config_validation():
    with pytest.raises(ValueError):
        RoPEConfig(8, (3, 3, 2))
    with pytest.raises(ValueError):
        RoPEConfig(7)
    with pytest.raises(ValueError):
        RoPEConfig(8, (2, 2, 2))


def test_band_frequencies_strictly_decreasing():
    for band in RoPEConfig(32).band_frequencies():
        assert np.all(np.diff(band) < 0)


def test_rope_zero_position_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 3, 16))
    out = rope_rotate(Tensor(x), np.zeros((1, 3), dtype=int), RoPEConfig(16))
    assert np.array_equal(out.data, x)


def test_rope_isometry_and_relative_scores():
    cfg = RoPEConfig(16)
    rng = np.random.default_rng(1)
    for _ in range(50):
        q, k = rng.standard_normal((2, 1, 1, 16))
        p = rng.integers(0, 50, size=(2, 3))
        s = rng.integers(0, 50, size=3)
        rq = rope_rotate(Tensor(q), p[:1], cfg).data
        assert abs(np.linalg.norm(rq) - np.linalg.norm(q)) <= 1e-12 * np.linalg.norm(q)
        a = np.sum(rope_rotate(Tensor(q), p[:1], cfg).data * rope_rotate(Tensor(k), p[1:], cfg).data)
        b = np.sum(rope_rotate(Tensor(q), p[:1] + s, cfg).data * rope_rotate(Tensor(k), p[1:] + s, cfg).data)
        assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_rope_gradient():
    pos = grid_positions(GridShape(1, 2, 2))
    w = np.random.default_rng(3).standard_normal((4, 2, 8))
    assert grad_check(lambda x: (rope_rotate(x, pos, RoPEConfig(8)) * Tensor(w)).sum(),
                      np.random.default_rng(4).standard_normal((4, 2, 8))).passed


def test_rope_shape_errors():
    with pytest.raises(nx.ShapeError):
        rope_rotate(Tensor(np.ones((4, 2, 8))), np.zeros((3, 3)), RoPEConfig(8))
    with pytest.raises(nx.ShapeError):
        rope_rotate(Tensor(np.ones((4, 2, 6))), np.zeros((4, 3)), RoPEConfig(8))


# ---------------------------------------------------------------- attention

def test_two_window_core_bitwise_equals_dense_oracle():
    grid = GridShape(1, 4, 4)
    layout = partition(grid, WindowSize(1, 4, 2))
    assert len(layout.windows) == 2
    q, k, v = qkv(5)
    out = windowed_attention_core(Tensor(q), Tensor(k), Tensor(v), layout).data
    assert out.tobytes() == windowed_oracle(q, k, v, layout).tobytes()


def test_mixed_extent_windows_match_oracle():
    grid = GridShape(1, 4, 5)
    layout = partition(grid, WindowSize(1, 3, 2))  # extents 3x2, 3x1, 1x2, 1x1
    q, k, v = qkv(6, n=20)
    out = windowed_attention_core(Tensor(q), Tensor(k), Tensor(v), layout).data
    assert out.tobytes() == windowed_oracle(q, k, v, layout).tobytes()


def test_single_window_equals_full_attention():
    grid = GridShape(1, 4, 4)
    layout = partition(grid, WindowSize(1, 4, 4))
    q, k, v = qkv(7)
    out = windowed_attention_core(Tensor(q), Tensor(k), Tensor(v), layout).data
    full = np.concatenate([dense_attention(q[0, :, h], k[0, :, h], v[0, :, h]) for h in range(2)], axis=-1)
    assert out[0].tobytes() == full.tobytes()


def _attn_weights(d=8, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.standard_normal(s) * 0.4) for s in [(d, 3 * d), (3 * d,), (d, d), (d,)]]


def test_window_locality():
    grid = GridShape(1, 4, 4)
    layout = partition(grid, WindowSize(1, 2, 2))
    x = np.random.default_rng(8).standard_normal((16, 8))
    w = _attn_weights()
    base = window_attention(Tensor(x), layout, RoPEConfig(4), *w, num_heads=2).data
    x2 = x.copy()
    x2[0] += 1.0  # token 0 lives in window 0 (rows 0-1, cols 0-1)
    out = window_attention(Tensor(x2), layout, RoPEConfig(4), *w, num_heads=2).data
    in_w0 = np.zeros(16, dtype=bool)
    in_w0[[0, 1, 4, 5]] = True
    assert np.array_equal(out[~in_w0], base[~in_w0])
    assert not np.array_equal(out[in_w0], base[in_w0])


def test_window_attention_errors():
    layout = partition(GridShape(1, 4, 4), WindowSize(1, 2, 2))
    with pytest.raises(nx.ShapeError):
        window_attention(Tensor(np.ones((15, 8))), layout, RoPEConfig(4), *_attn_weights(), num_heads=2)


def test_window_attention_gradient():
    layout = partition(GridShape(1, 2, 3), WindowSize(1, 2, 2))
    w = _attn_weights(seed=1)
    r = np.random.default_rng(2).standard_normal((6, 8))
    f = lambda x: (window_attention(x, layout, RoPEConfig(4), *w, num_heads=2) * Tensor(r)).sum()  # noqa: E731
    assert grad_check(f, np.random.default_rng(3).standard_normal((6, 8))).passed


# ---------------------------------------------------------------- blocks and backbone

def test_zero_modulation_block_is_identity():
    cfg = tiny_config()
    p = init_params(cfg, 0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 8)))
    c = Tensor(np.random.default_rng(1).standard_normal((2, 8)))
    out = transformer_block(p, "blocks.0.", x, c, partition(GridShape(1, 2, 2), WindowSize(1, 1, 2)), cfg)
    assert np.array_equal(out.data, x.data)


def test_block_gradient_check():
    cfg = tiny_config()
    p = busy_params(cfg)
    layout = partition(GridShape(1, 2, 2), WindowSize(1, 1, 2))
    c = Tensor(np.random.default_rng(1).standard_normal((1, 8)))
    r = np.random.default_rng(2).standard_normal((1, 4, 8))
    f = lambda x: (transformer_block(p, "blocks.0.", x, c, layout, cfg) * Tensor(r)).sum()  # noqa: E731
    assert grad_check(f, np.random.default_rng(3).standard_normal((1, 4, 8))).passed
    g = lambda w: (transformer_block(swap_param(p, "blocks.0.mod.w", w), "blocks.0.", Tensor(r), c, layout,  # noqa: E731
                                     cfg) * Tensor(r)).sum()
    assert grad_check(g, p["blocks.0.mod.w"].data).passed


def test_stacked_blocks_commute_with_window_swaps():
    """Swapping the contents of two equal windows swaps the output (relative RoPE)."""
    cfg = tiny_config()
    p = busy_params(cfg)
    grid = GridShape(1, 4, 4)
    layout = partition(grid, WindowSize(1, 2, 2))
    a = np.array([0, 1, 4, 5])
    b = np.array([10, 11, 14, 15])
    perm = np.arange(16)
    perm[a], perm[b] = b, a
    x = np.random.default_rng(4).standard_normal((1, 16, 8))
    c = Tensor(np.random.default_rng(5).standard_normal((1, 8)))

    def run(inp):
        h = Tensor(inp)
        for i in range(2):
            h = transformer_block(p, f"blocks.{i}.", h, c, layout, cfg)
        return h.data

    out, out_perm = run(x), run(x[:, perm])
    assert np.max(np.abs(out[:, perm] - out_perm)) <= 1e-10


def test_tap_blocks_and_shapes():
    assert BlockConfig(num_blocks=6).tap_blocks() == [3, 5, 6]
    cfg = tiny_config()
    p = busy_params(cfg)
    grid = GridShape(1, 4, 4)
    lat = np.random.default_rng(0).standard_normal((2, 16, 3))
    res = backbone_forward(p, cfg, lat, np.array([0.3, 0.9]), lat * 0.5, cfg.window.layout(grid))
    assert res["velocity"].shape == lat.shape
    assert len(res["taps"]) == len(cfg.block.tap_fractions)
    with pytest.raises(nx.ShapeError):
        backbone_forward(p, cfg, lat, 0.5, lat[:, :8], cfg.window.layout(grid))
    with pytest.raises(nx.ShapeError):
        backbone_forward(p, cfg, lat[:, :8], 0.5, lat[:, :8], cfg.window.layout(grid))


def test_backbone_deterministic_and_condition_sensitive():
    cfg = tiny_config()
    p = busy_params(cfg)
    grid = GridShape(1, 4, 4)
    lat = np.random.default_rng(0).standard_normal((1, 16, 3))
    m = VelocityModel(p, cfg)
    a, b = m(lat, 0.5, lat, grid).data, m(lat, 0.5, lat, grid).data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, m(lat, 0.5, lat, grid, cond=False).data)


def test_backbone_gradient_1x4x4():
    cfg = tiny_config()
    p = busy_params(cfg)
    layout = cfg.window.layout(GridShape(1, 4, 4))
    rng = np.random.default_rng(9)
    lq, r = rng.standard_normal((1, 16, 3)), rng.standard_normal((1, 16, 3))
    f = lambda x: (backbone_forward(p, cfg, x, 0.4, Tensor(lq), layout)["velocity"] * Tensor(r)).sum()  # noqa: E731
    assert grad_check(f, rng.standard_normal((1, 16, 3))).passed
    lat = Tensor(rng.standard_normal((1, 16, 3)))
    g = lambda w: (backbone_forward(swap_param(p, "blocks.1.qkv.w", w), cfg, lat, 0.4, Tensor(lq),  # noqa: E731
                                    layout)["velocity"] * Tensor(r)).sum()
    assert grad_check(g, p["blocks.1.qkv.w"].data).passed


def test_discriminator_logits_and_taps():
    cfg = tiny_config()
    p = busy_params(cfg, heads=True)
    layout = cfg.window.layout(GridShape(1, 4, 4))
    x = np.random.default_rng(0).standard_normal((3, 16, 3))
    logits, taps = discriminator_forward(p, cfg, Tensor(x), Tensor(x), layout)
    assert logits.shape == (3,) and len(taps) == 3
    # per-sample independence: batch position does not matter
    one, _ = discriminator_forward(p, cfg, Tensor(x[1:2]), Tensor(x[1:2]), layout)
    assert abs(one.data[0] - logits.data[1]) < 1e-12


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(BlockConfig(16, 2, num_blocks=2))
    p = init_params(cfg, 3)
    save_checkpoint(tmp_path / "ck", p, cfg, step=7, stage="teacher")
    q, cfg2, man = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and man["step"] == 7 and man["stage"] == "teacher"
    assert params_checksum(q) == params_checksum(p)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_custom_layout_is_honoured():
    cfg = tiny_config()
    p = busy_params(cfg)
    grid = GridShape(1, 2, 2)
    one = WindowLayout(grid, WindowSize(1, 2, 2), (Window((0, 0, 0), (1, 2, 2)),))
    lat = np.random.default_rng(0).standard_normal((1, 4, 3))
    m = VelocityModel(p, cfg)
    assert not np.array_equal(m(lat, 0.5, lat, grid, layout=one).data, m(lat, 0.5, lat, grid).data)
