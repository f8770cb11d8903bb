"""Teacher pretraining and progressive distillation down to a one-step student.

Each stage trains a student to cover, in one Euler step, the interval the
teacher covers in two; the student of one stage teaches the next.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data_degrade import StreamConfig, lq_tokens, pair_stream, patchify
from .flow import NoiseSchedule, guided_velocity, interpolate, velocity_target
from .losses import mse_loss
from .optim import AdamW, grads_by_name
from .rope_attention import (ModelConfig, Params, VelocityModel, check_params, frozen, init_params, params_checksum,
                             trainable)
from .runlog import MetricsLog

log = logging.getLogger(__name__)


def batch_tokens(batch: dict, patch: int, scale: int = 4) -> tuple[np.ndarray, np.ndarray]:
    return patchify(batch["hq"], patch), lq_tokens(batch["lq"], scale, patch)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# ---------------------------------------------------------------- teacher

@dataclass(frozen=True)
class TeacherConfig:
    iters: int = 1500
    lr: float = 1e-3
    cond_dropout: float = 0.1
    warmup: int = 50


def _check_patch(model_cfg: ModelConfig, stream_cfg: StreamConfig) -> None:
    if model_cfg.patch != stream_cfg.patch:
        raise ValueError(f"model patch {model_cfg.patch} does not match data stream patch {stream_cfg.patch}")


def train_teacher(model_cfg: ModelConfig, stream_cfg: StreamConfig, tcfg: TeacherConfig, seed: int,
                  metrics: MetricsLog | None = None, init: Params | None = None) -> Params:
    """Flow-matching pretraining with condition dropout (so CFG has an unconditional branch)."""
    _check_patch(model_cfg, stream_cfg)
    params = trainable(init if init is not None else init_params(model_cfg, seed))
    opt = AdamW(lr=tcfg.lr)
    schedule = NoiseSchedule()
    stream = pair_stream(stream_cfg, seed)
    for it in range(tcfg.iters):
        batch = next(stream)
        rng = _rng(seed, it, 0x7EAC)
        x0, lq = batch_tokens(batch, model_cfg.patch, stream_cfg.degradation.scale)
        b = x0.shape[0]
        eps = rng.standard_normal(x0.shape)
        tau = schedule.sample(rng, b)
        cond = rng.random(b) >= tcfg.cond_dropout
        x_t = interpolate(x0, eps, tau).data
        target = velocity_target(x0, eps)
        model = VelocityModel(params, model_cfg)
        with nx.GradTape() as tape:
            loss = mse_loss(model(x_t, tau, lq, batch["grid"], cond), target)
        grads = grads_by_name(params, tape.backward(loss))
        opt.lr = tcfg.lr * min(1.0, (it + 1) / tcfg.warmup)
        params = opt.step(params, grads)
        if metrics is not None:
            metrics.log(it, "teacher/mse", loss.item())
    return frozen(params)


# ---------------------------------------------------------------- distillation

def teacher_cfg_scale(steps_from: int, guided_steps: int = 64, scale: float = 7.5) -> float:
    """Guidance used by the teacher: ``scale`` for the guided_steps-step teacher, 1.0 otherwise."""
    return scale if steps_from == guided_steps else 1.0


@dataclass(frozen=True)
class DistillSchedule:
    stage_steps: tuple[int, ...] = (64, 32, 16, 8, 4, 2, 1)
    iters_per_stage: int = 500
    lr: float = 1e-4  # 1e-6 scaled up 100x for the toy model
    guided_steps: int = 64
    guided_scale: float = 7.5
    probe_batches: int = 2
    check_every: int = 50

    def __post_init__(self):
        for a, b in zip(self.stage_steps, self.stage_steps[1:]):
            if a != 2 * b:
                raise ValueError(f"distillation stride must be 2, got {a} -> {b}")

    @property
    def stages(self) -> list[tuple[int, int]]:
        return list(zip(self.stage_steps, self.stage_steps[1:]))


@dataclass
class StageResult:
    steps_from: int
    steps_to: int
    student: Params
    trace: list[float] = field(default_factory=list)
    initial_mse: float = float("nan")
    final_mse: float = float("nan")
    teacher_cfg: float = 1.0


def two_step_target(teacher, x_a, tau_a, tau_c, cfg_scale: float = 1.0) -> np.ndarray:
    """Velocity whose single Euler step from x_a lands where two teacher half-steps land.

    ``teacher(x, tau, conditional)`` returns a velocity array; ``tau_a``/``tau_c``
    are scalars or per-sample arrays.
    """
    x_a = np.asarray(x_a, dtype=np.float64)
    tau_a = np.asarray(tau_a, dtype=np.float64)
    tau_c = np.asarray(tau_c, dtype=np.float64)
    if np.any(tau_a <= tau_c):
        raise ValueError("two_step_target: need tau_a > tau_c")
    tau_b = 0.5 * (tau_a + tau_c)

    def col(t):
        return t.reshape(t.shape + (1,) * (x_a.ndim - t.ndim)) if t.ndim else t

    x_b = x_a - col(tau_a - tau_b) * guided_velocity(teacher, x_a, tau_a, cfg_scale)
    x_c = x_b - col(tau_b - tau_c) * guided_velocity(teacher, x_b, tau_b, cfg_scale)
    return (x_a - x_c) / col(tau_a - tau_c)


def _stage_inputs(batch, model_cfg, scale, steps_to, rng):
    x0, lq = batch_tokens(batch, model_cfg.patch, scale)
    b = x0.shape[0]
    eps = rng.standard_normal(x0.shape)
    tau_a = rng.integers(1, steps_to + 1, size=b) / steps_to
    tau_c = tau_a - 1.0 / steps_to
    x_a = interpolate(x0, eps, tau_a).data
    return x_a, lq, tau_a, tau_c


def _teacher_fn(teacher: VelocityModel, lq, grid):
    def f(x, tau, conditional):
        b = x.shape[0]
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,))
        return teacher(x, tau, lq, grid, np.full(b, conditional)).data
    return f


def distill_stage(teacher: Params, student: Params, model_cfg: ModelConfig, stream_cfg: StreamConfig,
                  steps_from: int, steps_to: int, iters: int, seed: int, lr: float = 1e-4,
                  cfg_scale: float | None = None, probe_batches: int = 2, check_every: int = 50,
                  metrics: MetricsLog | None = None) -> StageResult:
    """Train ``student`` so one of its Euler steps matches two teacher steps (velocity MSE)."""
    if steps_from != 2 * steps_to:
        raise ValueError(f"distill_stage: {steps_from} -> {steps_to} is not a stride-2 stage")
    _check_patch(model_cfg, stream_cfg)
    cfg_scale = teacher_cfg_scale(steps_from) if cfg_scale is None else cfg_scale
    scale = stream_cfg.degradation.scale
    teacher_model = VelocityModel(frozen(teacher), model_cfg)
    before = params_checksum(teacher_model.params)

    probe_stream = pair_stream(stream_cfg, seed + 7919)
    probes = []
    for k in range(probe_batches):
        batch = next(probe_stream)
        x_a, lq, tau_a, tau_c = _stage_inputs(batch, model_cfg, scale, steps_to, _rng(seed, k, 0x9B0E))
        target = two_step_target(_teacher_fn(teacher_model, lq, batch["grid"]), x_a, tau_a, tau_c, cfg_scale)
        probes.append((x_a, lq, tau_a, batch["grid"], target))

    def probe_mse(params):
        model = VelocityModel(frozen(params), model_cfg)
        vals = [float(np.mean((model(x, t, lq, g).data - tgt) ** 2)) for x, lq, t, g, tgt in probes]
        return float(np.mean(vals))

    params = trainable(student)
    result = StageResult(steps_from, steps_to, student, teacher_cfg=cfg_scale)
    result.initial_mse = probe_mse(params)
    opt = AdamW(lr=lr)
    stream = pair_stream(stream_cfg, seed)
    for it in range(iters):
        batch = next(stream)
        rng = _rng(seed, it, 0xD157)
        x_a, lq, tau_a, tau_c = _stage_inputs(batch, model_cfg, scale, steps_to, rng)
        target = two_step_target(_teacher_fn(teacher_model, lq, batch["grid"]), x_a, tau_a, tau_c, cfg_scale)
        if check_every and it % check_every == 0:
            landed = x_a - (tau_a - tau_c)[:, None, None] * target
            _check_reproduction(teacher_model, x_a, lq, batch["grid"], tau_a, tau_c, cfg_scale, landed)
        with nx.GradTape() as tape:
            loss = mse_loss(VelocityModel(params, model_cfg)(x_a, tau_a, lq, batch["grid"]), target)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"distill {steps_from}->{steps_to}: non-finite loss at iteration {it}")
        params = opt.step(params, grads_by_name(params, tape.backward(loss)))
        result.trace.append(value)
        if metrics is not None:
            metrics.log(it, f"distill/{steps_from}->{steps_to}/mse", value)
    if params_checksum(teacher_model.params) != before:
        raise RuntimeError("distill_stage: teacher parameters changed")
    result.student = frozen(params)
    result.final_mse = probe_mse(params)
    log.info("stage %d->%d: probe mse %.5f -> %.5f", steps_from, steps_to, result.initial_mse, result.final_mse)
    return result


def _check_reproduction(teacher, x_a, lq, grid, tau_a, tau_c, cfg_scale, landed, tol=1e-10):
    """Spot-check that one Euler step with the target lands on the teacher's two-step endpoint."""
    f = _teacher_fn(teacher, lq, grid)
    tau_b = 0.5 * (tau_a + tau_c)
    x_b = x_a - (tau_a - tau_b)[:, None, None] * guided_velocity(f, x_a, tau_a, cfg_scale)
    x_c = x_b - (tau_b - tau_c)[:, None, None] * guided_velocity(f, x_b, tau_b, cfg_scale)
    err = float(np.max(np.abs(landed - x_c)))
    if err > tol * max(1.0, float(np.max(np.abs(x_c)))):
        raise RuntimeError(f"two-step target does not reproduce the teacher endpoint (err {err:.3e})")


def run_progressive(teacher: Params, model_cfg: ModelConfig, stream_cfg: StreamConfig,
                    schedule: DistillSchedule, seed: int, metrics: MetricsLog | None = None,
                    on_stage=None) -> tuple[Params, list[StageResult]]:
    """Chain stride-2 stages; each stage's student starts from (and then replaces) its teacher."""
    check_params(teacher, model_cfg)
    current = frozen(teacher)
    results = []
    for k, (s_from, s_to) in enumerate(schedule.stages):
        cfg_scale = teacher_cfg_scale(s_from, schedule.guided_steps, schedule.guided_scale)
        res = distill_stage(current, current, model_cfg, stream_cfg, s_from, s_to, schedule.iters_per_stage,
                            seed + 1000 * (k + 1), schedule.lr, cfg_scale, schedule.probe_batches,
                            schedule.check_every, metrics)
        results.append(res)
        if on_stage is not None:
            on_stage(res)
        current = res.student
    return current, results
