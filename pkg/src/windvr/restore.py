"""Clip-level restoration and evaluation on top of a velocity model."""

from __future__ import annotations

import time

import numpy as np

from .data_degrade import lq_tokens, token_grid, unpatchify
from .flow import SamplerConfig, euler_sample
from .metrics import MetricReport
from .rope_attention import VelocityModel
from .window_geometry import WindowLayout


def restore_clip(model: VelocityModel, lq: np.ndarray, sampler: SamplerConfig, scale: int = 4,
                 train_layout: bool = False, layout: WindowLayout | None = None) -> np.ndarray:
    """Upscale one (T, h, w, 3) LQ clip by ``scale``; output is clamped to [0, 1]."""
    return restore_batch(model, lq[None], sampler, scale, train_layout, layout)[0]


def restore_batch(model: VelocityModel, lq: np.ndarray, sampler: SamplerConfig, scale: int = 4,
                  train_layout: bool = False, layout: WindowLayout | None = None) -> np.ndarray:
    p = model.config.patch
    b, t, h, w, c = lq.shape
    grid = token_grid((t, h * scale, w * scale, c), p)
    cond = lq_tokens(lq, scale, p)
    eps = np.random.default_rng(sampler.seed).standard_normal(cond.shape)
    x0 = euler_sample(model.velocity_fn(cond, grid, train_layout, layout), eps, sampler)
    return np.clip(unpatchify(x0, grid, p), 0.0, 1.0)


def layout_for(model: VelocityModel, hq_shape, train: bool = False) -> WindowLayout:
    return model.layout(token_grid(hq_shape, model.config.patch), train)


def evaluate(model: VelocityModel, pairs, sampler: SamplerConfig, scale: int = 4,
             boundary: bool = False, train_layout: bool = False) -> MetricReport:
    """PSNR/SSIM (and optionally seam scores) over a list of (lq, hq) pairs.

    Pair k is sampled with seed ``sampler.seed + k``.
    """
    report = MetricReport()
    start = time.perf_counter()
    for k, (lq, hq) in enumerate(pairs):
        s = SamplerConfig(sampler.steps, sampler.cfg_scale, sampler.seed + k)
        pred = restore_clip(model, lq, s, scale, train_layout)
        lay = layout_for(model, hq.shape, train_layout) if boundary else None
        report.add(pred, hq, lay, model.config.patch)
    report.runtime_s = time.perf_counter() - start
    return report
