"""Windowed self-attention with 3D rotary embeddings and the shared backbone.

The backbone is a small adaLN transformer: timestep and auxiliary condition
embeddings modulate every block; the low-quality clip enters by channel
concatenation with the noisy latent. It serves both as the velocity model
(generator / teacher / student) and, with logit heads on top of its tapped
hidden states, as the discriminator.

Parameters live in plain ``dict[str, Tensor]`` maps so that freezing a
model is just passing tensors that do not require gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .window_geometry import GridShape, WindowLayout, WindowPolicy, index_maps


# ---------------------------------------------------------------- rotary embedding

def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    pairs = head_dim // 2
    base, rem = divmod(pairs, 3)
    return (2 * base, 2 * (base + (rem >= 2)), 2 * (base + (rem >= 1)))


@dataclass(frozen=True)
class RoPEConfig:
    head_dim: int
    axis_split: tuple[int, int, int] | None = None
    base_freq: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"RoPEConfig: head_dim must be even and positive, got {self.head_dim}")
        split = self.axis_split or default_axis_split(self.head_dim)
        if any(d % 2 for d in split) or any(d < 0 for d in split):
            raise ValueError(f"RoPEConfig: every band width must be even, got {split}")
        if sum(split) != self.head_dim:
            raise ValueError(f"RoPEConfig: bands {split} do not sum to head_dim {self.head_dim}")
        object.__setattr__(self, "axis_split", tuple(split))

    def band_frequencies(self) -> list[np.ndarray]:
        return [self.base_freq ** (-np.arange(0, d, 2, dtype=np.float64) / d) for d in self.axis_split]


def grid_positions(grid: GridShape) -> np.ndarray:
    t, h, w = np.meshgrid(np.arange(grid.d_t), np.arange(grid.d_h), np.arange(grid.d_w), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)


def rope_angles(positions: np.ndarray, cfg: RoPEConfig) -> np.ndarray:
    """Rotation angle per (token, pair): band k of axis a uses pos_a * theta_k."""
    positions = np.asarray(positions, dtype=np.float64)
    parts = [positions[:, a:a + 1] * freqs[None, :] for a, freqs in enumerate(cfg.band_frequencies())]
    return np.concatenate(parts, axis=1)


@lru_cache(maxsize=64)
def _grid_tables(grid: GridShape, cfg: RoPEConfig) -> tuple[np.ndarray, np.ndarray]:
    ang = rope_angles(grid_positions(grid), cfg)
    return np.cos(ang), np.sin(ang)


def _rotate_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _rope_apply(qk: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    # qk: (..., tokens, heads, head_dim); tables: (tokens, head_dim/2)
    c, s = cos[:, None, :], sin[:, None, :]
    return nx.record("rope", (qk,), _rotate_np(qk.data, c, s), lambda g: (_rotate_np(g, c, -s),))


def rope_rotate(qk: Tensor, positions: np.ndarray, cfg: RoPEConfig) -> Tensor:
    """Rotate consecutive channel pairs of ``qk[..., tokens, heads, head_dim]`` by position."""
    if qk.shape[-1] != cfg.head_dim:
        raise nx.ShapeError(f"rope_rotate: head_dim {qk.shape[-1]} != config {cfg.head_dim}")
    ang = rope_angles(positions, cfg)
    if ang.shape[0] != qk.shape[-3]:
        raise nx.ShapeError(f"rope_rotate: {ang.shape[0]} positions for {qk.shape[-3]} tokens")
    return _rope_apply(qk, np.cos(ang), np.sin(ang))


# ---------------------------------------------------------------- window attention

@dataclass(frozen=True)
class _WindowPlan:
    order: np.ndarray       # token ids, windows grouped by extent
    inverse: np.ndarray
    groups: tuple[tuple[int, int, int], ...]  # (offset, n_windows, window_volume)


@lru_cache(maxsize=128)
def window_plan(layout: WindowLayout) -> _WindowPlan:
    maps = index_maps(layout)
    by_extent: dict[tuple[int, int, int], list[int]] = {}
    for k, win in enumerate(layout.windows):
        by_extent.setdefault(win.extent, []).append(k)
    chunks, groups, pos = [], [], 0
    for extent, ks in by_extent.items():
        vol = extent[0] * extent[1] * extent[2]
        for k in ks:
            chunks.append(maps.order[maps.offsets[k]:maps.offsets[k] + vol])
        groups.append((pos, len(ks), vol))
        pos += len(ks) * vol
    order = np.concatenate(chunks)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return _WindowPlan(order, inverse, tuple(groups))


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    # (..., heads, n, dh) -> (..., heads, n, dh)
    scores = nx.scale(q @ k.transpose(_swap_last(k.ndim)), 1.0 / math.sqrt(q.shape[-1]))
    return nx.softmax(scores) @ v


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def windowed_attention_core(q: Tensor, k: Tensor, v: Tensor, layout: WindowLayout) -> Tensor:
    """Per-window softmax attention on already-projected (B, N, H, dh) tensors."""
    b, n, h, dh = q.shape
    if n != layout.grid.volume:
        raise nx.ShapeError(f"window_attention: {n} tokens but layout grid has {layout.grid.volume}")
    plan = window_plan(layout)
    qw, kw, vw = (nx.take(t, plan.order, axis=1) for t in (q, k, v))
    outs = []
    for off, g, vol in plan.groups:
        sl = (slice(None), slice(off, off + g * vol))
        parts = [t[sl].reshape(b, g, vol, h, dh).transpose(0, 1, 3, 2, 4) for t in (qw, kw, vw)]
        o = _attend(*parts).transpose(0, 1, 3, 2, 4).reshape(b, g * vol, h * dh)
        outs.append(o)
    merged = outs[0] if len(outs) == 1 else nx.concat(outs, axis=1)
    return nx.take(merged, plan.inverse, axis=1)


def qkv_project(x: Tensor, wqkv: Tensor, bqkv: Tensor, num_heads: int, layout: WindowLayout,
                rope: RoPEConfig) -> tuple[Tensor, Tensor, Tensor]:
    b, n, d = x.shape
    dh = d // num_heads
    qkv = nx.linear(x, wqkv, bqkv).reshape(b, n, 3, num_heads, dh)
    q, k, v = (qkv[:, :, i] for i in range(3))
    cos, sin = _grid_tables(layout.grid, rope)
    return _rope_apply(q, cos, sin), _rope_apply(k, cos, sin), v


def window_attention(x: Tensor, layout: WindowLayout, rope: RoPEConfig, wqkv: Tensor, bqkv: Tensor,
                     wo: Tensor, bo: Tensor, num_heads: int) -> Tensor:
    """Multi-head self-attention restricted to the windows of ``layout``.

    ``x`` is (B, N, D) or (N, D) over the row-major token grid. Queries and keys
    are rotated with global grid coordinates before windows are gathered.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.shape[1] != layout.grid.volume:
        raise nx.ShapeError(f"window_attention: {x.shape[1]} tokens but layout grid has {layout.grid.volume}")
    q, k, v = qkv_project(x, wqkv, bqkv, num_heads, layout, rope)
    out = nx.linear(windowed_attention_core(q, k, v, layout), wo, bo)
    return out.reshape(*out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------- backbone

@dataclass(frozen=True)
class BlockConfig:
    model_dim: int = 64
    num_heads: int = 4
    mlp_ratio: int = 2
    num_blocks: int = 6
    tap_fractions: tuple[float, ...] = (16 / 36, 26 / 36, 36 / 36)

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not all(0 < f <= 1 for f in self.tap_fractions):
            raise ValueError(f"tap fractions must lie in (0, 1], got {self.tap_fractions}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def tap_blocks(self) -> list[int]:
        """1-based block indices whose outputs are tapped."""
        return [max(1, math.ceil(f * self.num_blocks - 1e-9)) for f in self.tap_fractions]


@dataclass(frozen=True)
class ModelConfig:
    block: BlockConfig = field(default_factory=BlockConfig)
    patch: int = 4
    image_channels: int = 3
    rope_base: float = 10000.0
    window: WindowPolicy = field(default_factory=WindowPolicy)

    @property
    def token_channels(self) -> int:
        return self.image_channels * self.patch * self.patch

    @property
    def rope(self) -> RoPEConfig:
        return RoPEConfig(self.block.head_dim, base_freq=self.rope_base)

    def to_json(self) -> dict:
        d = {"block": asdict(self.block), "patch": self.patch, "image_channels": self.image_channels,
             "rope_base": self.rope_base, "window": self.window.to_json()}
        d["block"]["tap_fractions"] = list(self.block.tap_fractions)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        blk = dict(d["block"])
        blk["tap_fractions"] = tuple(blk["tap_fractions"])
        return cls(block=BlockConfig(**blk), patch=d["patch"], image_channels=d["image_channels"],
                   rope_base=d["rope_base"], window=WindowPolicy.from_json(d["window"]))


Params = dict[str, Tensor]


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Velocity-model parameters. Modulation, output head and skip start at zero."""
    rng = np.random.default_rng(seed)
    d, c = cfg.block.model_dim, cfg.token_channels
    hidden = d * cfg.block.mlp_ratio
    p: dict[str, np.ndarray] = {
        "embed.w": _dense(rng, 2 * c, d),
        "embed.b": np.zeros(d),
        "time.w1": _dense(rng, d, d),
        "time.b1": np.zeros(d),
        "time.w2": _dense(rng, d, d),
        "time.b2": np.zeros(d),
        "cond.on": rng.normal(0.0, 0.02, d),
        "cond.null": rng.normal(0.0, 0.02, d),
        "final.mod.w": np.zeros((d, 2 * d)),
        "final.mod.b": np.zeros(2 * d),
        "head.w": np.zeros((d, c)),
        "head.b": np.zeros(c),
        "skip.w": np.zeros((2 * c, c)),
    }
    for i in range(cfg.block.num_blocks):
        pre = f"blocks.{i}."
        p[pre + "mod.w"] = np.zeros((d, 6 * d))
        p[pre + "mod.b"] = np.zeros(6 * d)
        p[pre + "qkv.w"] = _dense(rng, d, 3 * d)
        p[pre + "qkv.b"] = np.zeros(3 * d)
        p[pre + "proj.w"] = _dense(rng, d, d)
        p[pre + "proj.b"] = np.zeros(d)
        p[pre + "mlp.w1"] = _dense(rng, d, hidden)
        p[pre + "mlp.b1"] = np.zeros(hidden)
        p[pre + "mlp.w2"] = _dense(rng, hidden, d)
        p[pre + "mlp.b2"] = np.zeros(d)
    return {k: Tensor(v, name=k) for k, v in p.items()}


def timestep_features(tau: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of the integer-scale timestep 1000*tau."""
    t = 1000.0 * np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs[None, :]
    feats = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((feats.shape[0], 1))], axis=1)
    return feats


def modulate(h: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    """h * (1 + scale) + shift with (B, D) modulation broadcast over tokens."""
    hd, sh, sc = h.data, shift.data[:, None, :], scale_.data[:, None, :]
    if shift.shape != (h.shape[0], h.shape[2]) or scale_.shape != shift.shape:
        raise nx.ShapeError(f"modulate: {h.shape} with shift {shift.shape} and scale {scale_.shape}")

    def vjp(g):
        return g * (1.0 + sc), g.sum(axis=1), (g * hd).sum(axis=1)

    return nx.record("modulate", (h, shift, scale_), hd * (1.0 + sc) + sh, vjp)


def gated_residual(x: Tensor, gate: Tensor, y: Tensor) -> Tensor:
    """x + gate * y with a (B, D) gate broadcast over tokens."""
    if x.shape != y.shape or gate.shape != (x.shape[0], x.shape[2]):
        raise nx.ShapeError(f"gated_residual: {x.shape}, gate {gate.shape}, branch {y.shape}")
    gd, yd = gate.data[:, None, :], y.data

    def vjp(g):
        return g, (g * yd).sum(axis=1), g * gd

    return nx.record("gated_residual", (x, gate, y), x.data + gd * yd, vjp)


def transformer_block(params: Params, prefix: str, x: Tensor, c: Tensor, layout: WindowLayout,
                      cfg: ModelConfig) -> Tensor:
    """One adaLN block: gated window attention then gated MLP, both residual.

    ``c`` is the (B, D) sum of timestep and condition embeddings.
    """
    b, n, d = x.shape
    if c.shape != (b, d):
        raise nx.ShapeError(f"transformer_block: embedding shape {c.shape}, expected {(b, d)}")
    mod = nx.linear(nx.silu(c), params[prefix + "mod.w"], params[prefix + "mod.b"])
    sh1, sc1, g1, sh2, sc2, g2 = (mod[:, i * d:(i + 1) * d] for i in range(6))
    h = modulate(nx.layer_norm(x), sh1, sc1)
    a = window_attention(h, layout, cfg.rope, params[prefix + "qkv.w"], params[prefix + "qkv.b"],
                         params[prefix + "proj.w"], params[prefix + "proj.b"], cfg.block.num_heads)
    x = gated_residual(x, g1, a)
    h = modulate(nx.layer_norm(x), sh2, sc2)
    m = nx.linear(nx.gelu(nx.linear(h, params[prefix + "mlp.w1"], params[prefix + "mlp.b1"])),
                  params[prefix + "mlp.w2"], params[prefix + "mlp.b2"])
    return gated_residual(x, g2, m)


def condition_embedding(params: Params, tau, cond_mask, batch: int, dim: int) -> Tensor:
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (batch,))
    temb = Tensor(timestep_features(tau, dim))
    temb = nx.linear(nx.silu(nx.linear(temb, params["time.w1"], params["time.b1"])),
                     params["time.w2"], params["time.b2"])
    if cond_mask is None:
        cond_mask = np.ones(batch, dtype=bool)
    sel = np.where(np.broadcast_to(np.asarray(cond_mask, dtype=bool), (batch,)), 0, 1)
    table = nx.concat([params["cond.on"].reshape(1, dim), params["cond.null"].reshape(1, dim)], axis=0)
    return temb + nx.take(table, sel, axis=0)


def backbone_forward(params: Params, cfg: ModelConfig, latent: Tensor, tau, lq_cond: Tensor,
                     layout: WindowLayout, cond_mask=None, need_velocity: bool = True) -> dict:
    """Run the backbone on token tensors of shape (B, N, C).

    Returns ``{"velocity": (B, N, C) or None, "taps": [(B, N, D), ...]}`` with one
    tap per configured fraction, taken at the output of the tapped block.
    ``cond_mask`` selects the learned condition (True) or the dropped/null one.
    """
    latent, lq_cond = nx.as_tensor(latent), nx.as_tensor(lq_cond)
    if latent.shape != lq_cond.shape:
        raise nx.ShapeError(f"backbone_forward: latent {latent.shape} vs condition {lq_cond.shape}")
    b, n, ch = latent.shape
    if n != layout.grid.volume or ch != cfg.token_channels:
        raise nx.ShapeError(f"backbone_forward: latent {latent.shape} does not match grid "
                            f"{layout.grid.as_tuple()} with {cfg.token_channels} channels")
    d = cfg.block.model_dim
    inp = nx.concat([latent, lq_cond], axis=-1)
    x = nx.linear(inp, params["embed.w"], params["embed.b"])
    c = condition_embedding(params, tau, cond_mask, b, d)
    taps_at = cfg.block.tap_blocks()
    last = cfg.block.num_blocks if need_velocity else max(taps_at)
    taps = {}
    for i in range(last):
        x = transformer_block(params, f"blocks.{i}.", x, c, layout, cfg)
        if i + 1 in taps_at:
            taps[i + 1] = x
    velocity = None
    if need_velocity:
        fm = nx.linear(nx.silu(c), params["final.mod.w"], params["final.mod.b"])
        h = modulate(nx.layer_norm(x), fm[:, :d], fm[:, d:])
        velocity = nx.linear(h, params["head.w"], params["head.b"]) + nx.matmul(inp, params["skip.w"])
    return {"velocity": velocity, "taps": [taps[k] for k in taps_at]}


# ---------------------------------------------------------------- discriminator heads

def init_logit_heads(cfg: ModelConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    d = cfg.block.model_dim
    out = {}
    for j in range(len(cfg.block.tap_fractions)):
        out[f"heads.{j}.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, 1)), name=f"heads.{j}.w")
        out[f"heads.{j}.b"] = Tensor(np.zeros(1), name=f"heads.{j}.b")
    return out


def discriminator_forward(params: Params, cfg: ModelConfig, x: Tensor, lq_cond: Tensor,
                          layout: WindowLayout, cond_mask=None) -> tuple[Tensor, list[Tensor]]:
    """Logit per sample (sum over taps of mean-pool + linear) and the tap features.

    Clean-domain inputs: the timestep embedding is fixed at tau = 0.
    """
    out = backbone_forward(params, cfg, x, 0.0, lq_cond, layout, cond_mask, need_velocity=False)
    logits = None
    for j, tap in enumerate(out["taps"]):
        pooled = tap.mean(axis=1)
        lj = nx.linear(pooled, params[f"heads.{j}.w"], params[f"heads.{j}.b"]).reshape(tap.shape[0])
        logits = lj if logits is None else logits + lj
    return logits, out["taps"]


# ---------------------------------------------------------------- parameter utilities

def trainable(params: Params) -> Params:
    return {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}


def frozen(params: Params) -> Params:
    return {k: Tensor(v.data, name=k) if v.requires_grad else v for k, v in params.items()}


def check_params(params: Params, cfg: ModelConfig, extra: Params | None = None) -> None:
    """Raise ValueError unless ``params`` has exactly the tensors ``cfg`` expects (plus ``extra``)."""
    expected = {k: v.shape for k, v in init_params(cfg, 0).items()}
    expected.update({k: v.shape for k, v in (extra or {}).items()})
    missing, unknown = set(expected) - set(params), set(params) - set(expected)
    if missing or unknown:
        raise ValueError(f"checkpoint incompatible with config: missing {sorted(missing)[:5]}, "
                         f"unexpected {sorted(unknown)[:5]}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ValueError(f"checkpoint incompatible with config: {k} has shape {params[k].shape}, expected {shape}")


def params_checksum(params: Params) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: Params, config: ModelConfig, step: int = 0, stage: str = "",
                    extra: dict | None = None) -> None:
    """Directory of ``<name>.wvt`` tensors plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, t in params.items():
        nx.save_tensor(path / f"{name}.wvt", t)
    manifest = {"config": config.to_json(), "step": step, "stage": stage,
                "tensors": sorted(params), **(extra or {})}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    manifest = json.loads(manifest_path.read_text())
    params = {name: nx.load_tensor(path / f"{name}.wvt") for name in manifest["tensors"]}
    for name, t in params.items():
        t.name = name
    return params, ModelConfig.from_json(manifest["config"]), manifest


@dataclass
class VelocityModel:
    """A parameter map bound to its config; calls return velocities as Tensors."""

    params: Params
    config: ModelConfig

    def layout(self, grid: GridShape, train: bool = True) -> WindowLayout:
        return self.config.window.layout(grid, train)

    def __call__(self, x, tau, lq, grid: GridShape, cond=True, train: bool = True,
                 layout: WindowLayout | None = None) -> Tensor:
        layout = layout or self.layout(grid, train)
        x, lq = nx.as_tensor(x), nx.as_tensor(lq)
        b = x.shape[0]
        mask = np.broadcast_to(np.asarray(cond, dtype=bool), (b,))
        return backbone_forward(self.params, self.config, x, tau, lq, layout, mask)["velocity"]

    def velocity_fn(self, lq, grid: GridShape, train: bool = False, layout: WindowLayout | None = None):
        """Adapter to the sampler's ``f(x, tau, conditional) -> ndarray`` interface."""
        layout = layout or self.layout(grid, train)
        lq_t = nx.as_tensor(lq)

        def f(x, tau, conditional):
            b = x.shape[0]
            tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,))
            return self(x, tau, lq_t, grid, np.full(b, conditional), layout=layout).data

        return f

    def with_params(self, params: Params) -> "VelocityModel":
        return VelocityModel(params, self.config)
