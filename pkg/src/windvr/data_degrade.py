"""Procedural HQ clips, a x4 degradation pipeline, and seeded LQ/HQ batch streams.

Clips are float arrays shaped (frames, height, width, 3) with values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .window_geometry import GridShape

CLIP_MAGIC = b"WVC1"


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def check_clip(clip: np.ndarray) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4 or clip.shape[-1] != 3 or min(clip.shape) < 1:
        raise ValueError(f"clip must be (frames, h, w, 3), got {clip.shape}")
    if clip.min() < 0 or clip.max() > 1:
        raise ValueError("clip values must lie in [0, 1]")
    return clip


# ---------------------------------------------------------------- synthesis

def _texture(rng, h, w, frames, n_waves=6):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((frames, h, w))
    for _ in range(n_waves):
        freq = rng.uniform(0.02, 0.18)  # cycles per pixel; kept well below Nyquist
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        drift = rng.uniform(-0.3, 0.3)
        amp = rng.uniform(0.01, 0.04)
        proj = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
        for f in range(frames):
            out[f] += amp * np.sin(proj + phase + drift * f)
    return out


def synth_video(seed: int, frames: int, h: int, w: int) -> np.ndarray:
    """Moving soft-edged shapes over a colour gradient with drifting band-limited texture."""
    if h % 4 or w % 4:
        raise ValueError(f"synth_video: extents must be divisible by 4, got {(h, w)}")
    if frames < 1:
        raise ValueError("synth_video: frames must be >= 1")
    rng = _rng(seed, 0x5EED)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    c0, c1 = rng.uniform(0.2, 0.8, 3), rng.uniform(0.2, 0.8, 3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (xx * np.cos(theta) + yy * np.sin(theta))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    base = c0[None, None, :] * (1 - ramp[..., None]) + c1[None, None, :] * ramp[..., None]
    clip = np.repeat(base[None], frames, axis=0)
    clip = clip + _texture(rng, h, w, frames)[..., None] * rng.uniform(0.5, 1.5, 3)[None, None, None, :]

    scale = min(h, w)
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.1, 0.9, 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        vy, vx = rng.uniform(-1.5, 1.5, 2)
        r = rng.uniform(0.08, 0.3) * scale
        aspect = rng.uniform(0.5, 2.0)
        is_disc = rng.random() < 0.5
        softness = rng.uniform(0.6, 1.5)
        for f in range(frames):
            dy, dx = yy - (cy + vy * f), xx - (cx + vx * f)
            if is_disc:
                dist = np.sqrt((dy * aspect) ** 2 + (dx / aspect) ** 2) - r
            else:
                dist = np.maximum(np.abs(dy) * aspect, np.abs(dx) / aspect) - r
            alpha = 1.0 / (1.0 + np.exp(np.clip(dist / softness, -50, 50)))
            clip[f] = clip[f] * (1 - alpha[..., None]) + color * alpha[..., None]
    return np.clip(clip, 0.0, 1.0)


# ---------------------------------------------------------------- degradation

@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: tuple[float, float] = (0.2, 1.2)
    noise_sigma: tuple[float, float] = (0.0, 0.02)
    quant_levels: tuple[int, int] = (64, 256)  # (0, 0) disables quantization
    scale: int = 4

    @classmethod
    def identity(cls, scale: int = 4) -> "DegradationParams":
        return cls((0.0, 0.0), (0.0, 0.0), (0, 0), scale)


def area_downsample(clip: np.ndarray, factor: int) -> np.ndarray:
    t, h, w, c = clip.shape
    if h % factor or w % factor:
        raise ValueError(f"area_downsample: {(h, w)} not divisible by {factor}")
    return clip.reshape(t, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def upsample_nearest(clip: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(clip, factor, axis=-3), factor, axis=-2)


def draw_degradation(params: DegradationParams, seed: int) -> dict:
    rng = _rng(seed, 0xDE6)
    lo, hi = params.quant_levels
    return {
        "blur_sigma": float(rng.uniform(*params.blur_sigma)),
        "noise_sigma": float(rng.uniform(*params.noise_sigma)),
        "quant_levels": int(rng.integers(lo, hi + 1)) if hi > 0 else 0,
        "noise_seed": int(rng.integers(0, 2**31)),
    }


def apply_degradation(hq: np.ndarray, scale: int, blur_sigma: float, noise_sigma: float,
                      quant_levels: int, noise_seed: int) -> np.ndarray:
    """blur -> area downsample -> additive noise -> uniform quantization -> clamp."""
    x = np.asarray(hq, dtype=np.float64)
    if blur_sigma > 0:
        x = gaussian_filter(x, sigma=(0, blur_sigma, blur_sigma, 0), mode="reflect")
    x = area_downsample(x, scale)
    if noise_sigma > 0:
        x = x + noise_sigma * np.random.default_rng(noise_seed).standard_normal(x.shape)
    if quant_levels > 1:
        x = np.round(np.clip(x, 0.0, 1.0) * (quant_levels - 1)) / (quant_levels - 1)
    return np.clip(x, 0.0, 1.0)


def degrade(hq: np.ndarray, params: DegradationParams, seed: int) -> np.ndarray:
    hq = check_clip(hq)
    return apply_degradation(hq, params.scale, **draw_degradation(params, seed))


# ---------------------------------------------------------------- tokens

def patchify(clip: np.ndarray, patch: int) -> np.ndarray:
    """(..., T, H, W, C) -> (..., T*(H/p)*(W/p), C*p*p), tokens row-major over (t, h, w)."""
    *lead, t, h, w, c = clip.shape
    if h % patch or w % patch:
        raise ValueError(f"patchify: {(h, w)} not divisible by patch {patch}")
    x = clip.reshape(*lead, t, h // patch, patch, w // patch, patch, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    return x.reshape(*lead, t * (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, grid: GridShape, patch: int, channels: int = 3) -> np.ndarray:
    *lead, n, _ = tokens.shape
    t, gh, gw = grid.as_tuple()
    x = tokens.reshape(*lead, t, gh, gw, patch, patch, channels)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 1, k + 3, k + 2, k + 4, k + 5)
    return x.reshape(*lead, t, gh * patch, gw * patch, channels)


def token_grid(hq_shape: Sequence[int], patch: int) -> GridShape:
    t, h, w = hq_shape[-4], hq_shape[-3], hq_shape[-2]
    return GridShape(t, h // patch, w // patch)


def lq_tokens(lq: np.ndarray, scale: int, patch: int) -> np.ndarray:
    """Nearest-upsample the LQ clip to HQ size and patchify it like the latent."""
    return patchify(upsample_nearest(lq, scale), patch)


# ---------------------------------------------------------------- streams

@dataclass(frozen=True)
class StreamConfig:
    batch_size: int = 2
    grids: tuple[tuple[int, int], ...] = ((16, 16), (8, 32), (32, 8))  # token (h, w)
    patch: int = 4
    curriculum: tuple[tuple[int, int], ...] = ((0, 1),)  # (start_iter, frames)
    degradation: DegradationParams = field(default_factory=DegradationParams)

    def __post_init__(self):
        if not self.curriculum or self.curriculum[0][0] != 0:
            raise ValueError("curriculum must start at iteration 0")
        starts = [s for s, _ in self.curriculum]
        frames = [f for _, f in self.curriculum]
        if starts != sorted(starts):
            raise ValueError(f"curriculum start iterations must be increasing, got {starts}")
        if frames != sorted(frames) or frames[0] < 1:
            raise ValueError(f"curriculum frame counts must be non-decreasing and >= 1, got {frames}")

    def frames_at(self, iteration: int) -> int:
        frames = self.curriculum[0][1]
        for start, f in self.curriculum:
            if iteration >= start:
                frames = f
        return frames


def make_pair(seed: int, frames: int, h: int, w: int, params: DegradationParams) -> tuple[np.ndarray, np.ndarray]:
    hq = synth_video(seed, frames, h, w)
    return degrade(hq, params, seed), hq


def stream_grid(config: StreamConfig, seed: int, iteration: int) -> tuple[GridShape, np.random.Generator]:
    """Token grid of batch ``iteration`` plus the generator that then draws its item seeds."""
    rng = _rng(seed, iteration, 0xBA7C)
    gh, gw = config.grids[int(rng.integers(len(config.grids)))]
    return GridShape(config.frames_at(iteration), gh, gw), rng


def pair_stream(config: StreamConfig, seed: int, start: int = 0) -> Iterator[dict]:
    """Infinite seeded stream of {"lq", "hq", "grid", "iteration"} batches.

    Each batch has one token-grid shape drawn uniformly from ``config.grids``
    and the curriculum's frame count for its iteration index.
    """
    i = start
    while True:
        grid, rng = stream_grid(config, seed, i)
        h, w = grid.d_h * config.patch, grid.d_w * config.patch
        item_seeds = rng.integers(0, 2**31, size=config.batch_size)
        pairs = [make_pair(int(s), grid.d_t, h, w, config.degradation) for s in item_seeds]
        yield {
            "lq": np.stack([p[0] for p in pairs]),
            "hq": np.stack([p[1] for p in pairs]),
            "grid": grid,
            "iteration": i,
        }
        i += 1


def eval_set(seed: int, count: int, frames: int, h: int, w: int,
             params: DegradationParams | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    params = params or DegradationParams()
    return [make_pair(int(seed) * 100003 + k, frames, h, w, params) for k in range(count)]


# ---------------------------------------------------------------- clip files

def clip_to_bytes(clip: np.ndarray) -> bytes:
    clip = check_clip(clip)
    header = CLIP_MAGIC + struct.pack("<4Q", *clip.shape)
    return header + np.ascontiguousarray(clip, dtype="<f4").tobytes()


def clip_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != CLIP_MAGIC:
        raise ValueError("not a WVC1 clip file")
    shape = struct.unpack_from("<4Q", buf, 4)
    n = int(np.prod(shape))
    if len(buf) != 36 + 4 * n:
        raise ValueError(f"clip payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=36).reshape(shape).astype(np.float64)


def save_clip(path, clip: np.ndarray) -> None:
    Path(path).write_bytes(clip_to_bytes(clip))


def load_clip(path) -> np.ndarray:
    return clip_from_bytes(Path(path).read_bytes())
