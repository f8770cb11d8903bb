"""Shared fixtures-as-functions for the test suite."""

import numpy as np

from windvr.numerics import Tensor
from windvr.rope_attention import BlockConfig, ModelConfig, init_logit_heads, init_params
from windvr.window_geometry import WindowCounts, WindowPolicy


def tiny_config(dim=8, heads=2, blocks=2, patch=1, counts=(1, 2, 2)) -> ModelConfig:
    return ModelConfig(BlockConfig(dim, heads, mlp_ratio=2, num_blocks=blocks), patch=patch,
                       window=WindowPolicy("adaptive", WindowCounts(*counts)))


def busy_params(cfg: ModelConfig, seed: int = 0, scale: float = 0.3, heads: bool = False) -> dict:
    """Parameters with every zero-initialized tensor replaced by small noise."""
    p = init_params(cfg, seed)
    if heads:
        p.update(init_logit_heads(cfg, seed + 1))
    rng = np.random.default_rng(seed + 2)
    return {k: Tensor(v.data + scale * rng.standard_normal(v.shape), name=k) for k, v in p.items()}


def swap_param(params: dict, name: str, t: Tensor) -> dict:
    out = dict(params)
    out[name] = t
    return out
