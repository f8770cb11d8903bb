"""Adversarial post-training of the one-step generator.

The generator is the distilled backbone evaluated at tau = 1: it maps
(noise, LQ) to a velocity and returns x_hat = eps - v. The discriminator is
the pre-distillation backbone read at tau = 0 on clean samples, with pooled
linear logit heads on its tap features. Updates alternate 1:1, discriminator
first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .data_degrade import DegradationParams, StreamConfig, eval_set, pair_stream
from .distill import batch_tokens
from .flow import SamplerConfig
from .losses import (LossWeights, feature_matching, l1_loss, nonsat_d_loss, nonsat_g_loss,
                     penalty_from_logits, rpgan_d_loss, rpgan_g_loss)
from .numerics import Tensor
from .optim import AdamW, grads_by_name
from .restore import evaluate
from .rope_attention import (ModelConfig, Params, VelocityModel, backbone_forward, discriminator_forward,
                             check_params, frozen, init_logit_heads, params_checksum, save_checkpoint,
                             trainable)
from .runlog import MetricsLog

log = logging.getLogger(__name__)

G_TERMS = ("g/l1", "g/fm", "g/gan")
D_TERMS = ("d/gan", "d/r1", "d/r2")


class TrainingAbort(FloatingPointError):
    """Non-finite loss; ``checkpoint`` points at the last good checkpoint (or None)."""

    def __init__(self, msg: str, checkpoint: str | None = None):
        super().__init__(f"{msg} (last good checkpoint: {checkpoint})")
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    curriculum: tuple[tuple[int, int], ...] = ((0, 1),)
    batch_size: int = 1
    iters: int = 1000
    seed: int = 0
    eval_every: int = 250
    eval_count: int = 8
    eval_hw: tuple[int, int] = (64, 64)
    # unscaled: at 1e-4 or 1e-5 the toy adversarial game diverges within a few hundred steps
    lr_g: float = 1e-6
    lr_d: float = 1e-6
    grids: tuple[tuple[int, int], ...] = ((16, 16), (8, 32), (32, 8))
    checkpoint_every: int = 0
    degradation: DegradationParams = field(default_factory=DegradationParams)

    def __post_init__(self):
        if self.curriculum[0][1] != 1:
            raise ValueError("curriculum must start from single frames")
        if self.iters < 1 or self.batch_size < 1:
            raise ValueError("iters and batch_size must be positive")
        self.stream_config()  # validates the curriculum

    def stream_config(self, patch: int = 4) -> StreamConfig:
        return StreamConfig(self.batch_size, tuple(map(tuple, self.grids)), patch, tuple(map(tuple, self.curriculum)),
                            self.degradation)

    def to_json(self) -> dict:
        w = self.weights
        return {
            "weights": {k: getattr(w, k) for k in w.__dataclass_fields__},
            "curriculum": [list(c) for c in self.curriculum], "batch_size": self.batch_size,
            "iters": self.iters, "seed": self.seed, "eval_every": self.eval_every,
            "eval_count": self.eval_count, "eval_hw": list(self.eval_hw), "lr_g": self.lr_g,
            "lr_d": self.lr_d, "grids": [list(g) for g in self.grids],
            "checkpoint_every": self.checkpoint_every,
            "degradation": {k: list(v) if isinstance(v, tuple) else v
                            for k, v in vars(self.degradation).items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        for key in ("curriculum", "grids"):
            if key in d:
                d[key] = tuple(tuple(x) for x in d[key])
        if "degradation" in d:
            d["degradation"] = DegradationParams(**{k: tuple(v) if isinstance(v, list) else v
                                                    for k, v in d["degradation"].items()})
        if "eval_hw" in d:
            d["eval_hw"] = tuple(d["eval_hw"])
        return cls(**d)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def init_discriminator(pre_distill: Params, cfg: ModelConfig, seed: int) -> Params:
    """Backbone weights from the pre-distillation model plus fresh logit heads."""
    return {**{k: Tensor(v.data, name=k) for k, v in pre_distill.items()}, **init_logit_heads(cfg, seed)}


def check_compatible(G: Params, D: Params, cfg: ModelConfig) -> None:
    check_params(G, cfg)
    check_params(D, cfg, extra=init_logit_heads(cfg, 0))


def generate(G: Params, cfg: ModelConfig, eps, lq, layout) -> Tensor:
    """One-step sample x_hat = eps - v(eps, tau=1, LQ)."""
    eps = nx.as_tensor(eps)
    v = backbone_forward(G, cfg, eps, 1.0, lq, layout)["velocity"]
    return eps - v


def _weighted(parts: dict[str, tuple[float, Tensor | None]]) -> tuple[Tensor | None, dict[str, float]]:
    total, logged = None, {}
    for name, (w, term) in parts.items():
        if term is None or w == 0:
            logged[name] = 0.0
            continue
        wt = nx.scale(term, w)
        logged[name] = wt.item()
        total = wt if total is None else total + wt
    return total, logged


def _check_total(total: Tensor | None, logged: dict, label: str, it: int, ckpt: str | None) -> float:
    value = 0.0 if total is None else total.item()
    bad = [k for k, v in logged.items() if not np.isfinite(v)]
    if not np.isfinite(value) or bad:
        raise TrainingAbort(f"{label}: non-finite loss at iteration {it} ({bad or 'total'})", ckpt)
    return value


@dataclass
class StepResult:
    losses: dict[str, float]
    params: Params


def generator_step(batch: dict, G: Params, D: Params, cfg: ModelConfig, w: LossWeights, opt: AdamW,
                   rng: np.random.Generator, it: int = 0, last_ckpt: str | None = None) -> StepResult:
    """One optimizer step on G against a frozen D."""
    D = frozen(D)
    d_sum = params_checksum(D)
    x0, lq = batch_tokens(batch, cfg.patch)
    b = x0.shape[0]
    layout = cfg.window.layout(batch["grid"], True)
    eps = rng.standard_normal(x0.shape)
    mask = np.ones(2 * b, dtype=bool)
    Gt = trainable(G)
    need_d = w.fm != 0 or w.gan != 0
    with nx.GradTape() as tape:
        x_hat = generate(Gt, cfg, eps, lq, layout)
        parts = {"g/l1": (w.l1, l1_loss(x_hat, x0) if w.l1 else None), "g/fm": (w.fm, None), "g/gan": (w.gan, None)}
        if need_d:
            logits, taps = discriminator_forward(D, cfg, nx.concat([x_hat, Tensor(x0)], axis=0),
                                                 Tensor(np.concatenate([lq, lq])), layout, mask)
            fake, real = logits[:b], logits[b:]
            if w.fm:
                parts["g/fm"] = (w.fm, feature_matching([t[:b] for t in taps], [t[b:] for t in taps]))
            if w.gan:
                g = rpgan_g_loss(real, fake) if w.gan_kind == "rpgan" else nonsat_g_loss(fake)
                parts["g/gan"] = (w.gan, g)
        total, logged = _weighted(parts)
        logged["g/total"] = _check_total(total, logged, "generator", it, last_ckpt)
        grads = tape.backward(total) if total is not None and total.requires_grad else {}
    if grads:
        G = frozen(opt.step(Gt, grads_by_name(Gt, grads)))
    if params_checksum(D) != d_sum:
        raise RuntimeError("generator_step modified the discriminator")
    return StepResult(logged, G)


def discriminator_step(batch: dict, G: Params, D: Params, cfg: ModelConfig, w: LossWeights, opt: AdamW,
                       rng: np.random.Generator, it: int = 0, last_ckpt: str | None = None) -> StepResult:
    """One optimizer step on D; G is frozen and only produces x_hat."""
    G = frozen(G)
    g_sum = params_checksum(G)
    x0, lq = batch_tokens(batch, cfg.patch)
    b = x0.shape[0]
    layout = cfg.window.layout(batch["grid"], True)
    x_hat = generate(G, cfg, rng.standard_normal(x0.shape), lq, layout).data
    parts = [x0, x0 + w.sigma_rel * float(np.std(x0)) * rng.standard_normal(x0.shape), x_hat]
    if w.r2:
        parts.append(x_hat + w.sigma_rel * float(np.std(x_hat)) * rng.standard_normal(x0.shape))
    n = len(parts)
    Dt = trainable(D)
    with nx.GradTape() as tape:
        logits, _ = discriminator_forward(Dt, cfg, Tensor(np.concatenate(parts)), Tensor(np.concatenate([lq] * n)),
                                          layout, np.ones(n * b, dtype=bool))
        real, real_p, fake = logits[:b], logits[b:2 * b], logits[2 * b:3 * b]
        adv = rpgan_d_loss(real, fake) if w.gan_kind == "rpgan" else nonsat_d_loss(real, fake)
        r2 = penalty_from_logits(fake, logits[3 * b:]) if w.r2 else None
        total, logged = _weighted({"d/gan": (w.gan_d, adv), "d/r1": (w.r1, penalty_from_logits(real, real_p)),
                                   "d/r2": (w.r2, r2)})
        logged["d/total"] = _check_total(total, logged, "discriminator", it, last_ckpt)
        grads = tape.backward(total) if total is not None else {}
    if grads:
        D = frozen(opt.step(Dt, grads_by_name(Dt, grads)))
    if params_checksum(G) != g_sum:
        raise RuntimeError("discriminator_step modified the generator")
    return StepResult(logged, D)


@dataclass
class AptResult:
    G: Params
    D: Params
    metrics: MetricsLog
    evals: dict[int, dict] = field(default_factory=dict)


def eval_generator(G: Params, cfg: ModelConfig, pairs, seed: int) -> dict:
    rep = evaluate(VelocityModel(G, cfg), pairs, SamplerConfig(1, 1.0, seed))
    s = rep.summary()
    return {"psnr": s["mean_psnr"], "ssim": s["mean_ssim"], "l1": s["mean_l1"]}


def train_apt(config: TrainConfig, G_init: Params, D_init: Params, cfg: ModelConfig, out_dir=None,
              metrics: MetricsLog | None = None, stream: Iterator[dict] | None = None) -> AptResult:
    """Alternate discriminator and generator steps, with periodic evaluation and checkpoints."""
    check_compatible(G_init, D_init, cfg)
    out_dir = Path(out_dir) if out_dir else None
    if metrics is None:
        metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None, stage="apt")
    G, D = frozen(G_init), frozen(D_init)
    opt_g, opt_d = AdamW(lr=config.lr_g), AdamW(lr=config.lr_d)
    stream = stream if stream is not None else pair_stream(config.stream_config(cfg.patch), config.seed)
    h, wd = config.eval_hw
    pairs = eval_set(config.seed + 424242, config.eval_count, 1, h, wd, config.degradation)
    result = AptResult(G, D, metrics)
    last_ckpt = None

    def run_eval(step):
        ev = eval_generator(G, cfg, pairs, config.seed)
        result.evals[step] = ev
        metrics.log_many(step, {f"eval/{k}": v for k, v in ev.items()})

    if config.eval_every:
        run_eval(0)
    for it in range(config.iters):
        try:
            batch = next(stream)
        except StopIteration:
            raise RuntimeError(f"train_apt: data stream exhausted at iteration {it}") from None
        try:
            d_res = discriminator_step(batch, G, D, cfg, config.weights, opt_d, _rng(config.seed, it, 0xD), it,
                                       last_ckpt)
            D = d_res.params
            g_res = generator_step(batch, G, D, cfg, config.weights, opt_g, _rng(config.seed, it, 0x6), it, last_ckpt)
        except nx.NonFiniteError as e:
            raise TrainingAbort(f"non-finite value at iteration {it}: {e}", last_ckpt) from e
        G = g_res.params
        metrics.log_many(it + 1, {**d_res.losses, **g_res.losses})
        if config.eval_every and (it + 1) % config.eval_every == 0:
            run_eval(it + 1)
        if out_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            last_ckpt = str(out_dir / f"step{it + 1:06d}")
            save_checkpoint(Path(last_ckpt) / "G", G, cfg, it + 1, "apt-generator")
            save_checkpoint(Path(last_ckpt) / "D", D, cfg, it + 1, "apt-discriminator")
    if out_dir:
        save_checkpoint(out_dir / "G", G, cfg, config.iters, "apt-generator", {"train": config.to_json()})
        save_checkpoint(out_dir / "D", D, cfg, config.iters, "apt-discriminator")
    result.G, result.D = G, D
    return result


def with_weights(config: TrainConfig, weights: LossWeights, **kw) -> TrainConfig:
    return replace(config, weights=weights, **kw)
