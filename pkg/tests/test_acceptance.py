"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

Criteria 7, 8 and 10 share one teacher, one distillation chain and one
adversarial run through session fixtures. Everything is seeded.
"""

import time

import numpy as np
import pytest

import conftest
from windvr.apt_trainer import D_TERMS, G_TERMS, TrainConfig, generator_step, init_discriminator, train_apt
from windvr.data_degrade import DegradationParams, StreamConfig, eval_set, pair_stream
from windvr.distill import DistillSchedule, TeacherConfig, run_progressive, train_teacher
from windvr.flow import SamplerConfig, euler_sample, interpolate, to_sample, velocity_target
from windvr.losses import (LossWeights, approx_r, feature_matching, l1_loss, nonsat_d_loss, nonsat_g_loss,
                           rpgan_d_loss, rpgan_g_loss)
from windvr.numerics import Tensor, grad_check
from windvr.optim import AdamW
from windvr.restore import evaluate
from windvr.rope_attention import (BlockConfig, ModelConfig, RoPEConfig, VelocityModel, backbone_forward,
                                   discriminator_forward, init_params, rope_rotate, windowed_attention_core)
from windvr.window_geometry import (GridShape, WindowCounts, WindowPolicy, WindowSize, partition,
                                    proxy_resolution, test_window_size as window_size_at_test,
                                    training_window_size)

from _helpers import busy_params, swap_param, tiny_config
from test_numerics import OPS, rand
from test_rope_attention import dense_attention, windowed_oracle
from test_window_geometry import check_layout

SOFTPLUS_M3 = 0.048587351573742059  # softplus(-3), 50-digit mpmath value rounded to double


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.VERDICTS.append(line)
    print(line)


# ---------------------------------------------------------------- 1. window-size arithmetic

def test_c1_window_size_worked_values():
    t0 = time.perf_counter()
    sizes = [
        training_window_size(GridShape(1, 45, 1), WindowCounts(1, 3, 1)).as_tuple() == (1, 15, 1),
        training_window_size(GridShape(1, 1, 80), WindowCounts(1, 1, 3)).as_tuple() == (1, 1, 27),
        training_window_size(GridShape(100, 1, 1), WindowCounts(1, 1, 1)).as_tuple() == (30, 1, 1),
    ]
    proxies = [proxy_resolution(GridShape(1, *hw)) == exp
               for hw, exp in (((135, 240), (45, 80)), ((100, 100), (60, 60)), ((90, 160), (45, 80)))]
    tests = window_size_at_test(GridShape(1, 135, 240), WindowCounts(1, 3, 3)).as_tuple() == (1, 15, 27)
    dt = time.perf_counter() - t0
    ok = all(sizes) and all(proxies) and tests and dt < 1
    verdict(1, ok, f"sizes {sizes}, proxies {proxies}, {dt:.3f}s")
    assert ok


# ---------------------------------------------------------------- 2. partition soundness

def test_c2_partition_soundness_10k():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 10_000
    for _ in range(n):
        grid = GridShape(int(rng.integers(1, 9)), int(rng.integers(1, 49)), int(rng.integers(1, 49)))
        counts = WindowCounts(*(int(c) for c in rng.integers(1, 6, size=3)))
        check_layout(grid, training_window_size(grid, counts))
    dt = time.perf_counter() - t0
    verdict(2, dt < 30, f"{n} random (grid, counts) pairs sound, {dt:.1f}s")
    assert dt < 30


# ---------------------------------------------------------------- 3. attention oracle

def test_c3_window_attention_oracle_bitwise():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cases = 0
    for h in range(1, 5):
        for w in range(1, 5):
            grid = GridShape(1, h, w)
            for sh in range(1, h + 1):
                for sw in range(1, w + 1):
                    layout = partition(grid, WindowSize(1, sh, sw))
                    q, k, v = (rng.standard_normal((2, h * w, 2, 4)) for _ in range(3))
                    out = windowed_attention_core(Tensor(q), Tensor(k), Tensor(v), layout).data
                    assert out.tobytes() == windowed_oracle(q, k, v, layout).tobytes(), (h, w, sh, sw)
                    if sh == h and sw == w:
                        full = np.concatenate([dense_attention(q[0, :, i], k[0, :, i], v[0, :, i])
                                               for i in range(2)], axis=-1)
                        assert out[0].tobytes() == full.tobytes()
                    cases += 1
    dt = time.perf_counter() - t0
    verdict(3, dt < 10, f"{cases} layouts on grids up to 1x4x4 bitwise equal to the dense oracle, {dt:.2f}s")
    assert dt < 10


# ---------------------------------------------------------------- 4. RoPE

def test_c4_rope_isometry_and_relative_invariance():
    t0 = time.perf_counter()
    cfg = RoPEConfig(16)
    rng = np.random.default_rng(4)
    iso, rel = 0.0, 0.0
    for _ in range(1000):
        q, k = rng.standard_normal((2, 1, 1, 16))
        p = rng.integers(0, 200, size=(2, 3))
        s = rng.integers(-100, 100, size=3)
        rq = rope_rotate(Tensor(q), p[:1], cfg).data
        iso = max(iso, abs(np.linalg.norm(rq) - np.linalg.norm(q)) / np.linalg.norm(q))
        a = np.sum(rq * rope_rotate(Tensor(k), p[1:], cfg).data)
        b = np.sum(rope_rotate(Tensor(q), p[:1] + s, cfg).data * rope_rotate(Tensor(k), p[1:] + s, cfg).data)
        rel = max(rel, abs(a - b) / max(abs(a), 1e-300))
    dt = time.perf_counter() - t0
    ok = iso <= 1e-12 and rel <= 1e-9 and dt < 10
    verdict(4, ok, f"isometry err {iso:.2e}, shift err {rel:.2e} over 1000 samples, {dt:.2f}s")
    assert ok


# ---------------------------------------------------------------- 5. gradients

def _loss_checks():
    cfg = tiny_config()
    p = busy_params(cfg, heads=True)
    layout = cfg.window.layout(GridShape(1, 4, 4))
    rng = np.random.default_rng(5)
    lq = Tensor(rng.standard_normal((2, 16, 3)))
    real = rng.standard_normal((2, 16, 3))
    x = rng.standard_normal((2, 16, 3))
    noise = rng.standard_normal((2, 16, 3))

    def D(t):
        return discriminator_forward(p, cfg, t, lq, layout)

    rl, rt = D(Tensor(real))
    rl = rl.detach()
    y = rng.standard_normal(x.shape)
    return {
        "l1": lambda t: l1_loss(t, y),
        "rpgan_d": lambda t: rpgan_d_loss(rl, D(t)[0]),
        "rpgan_g": lambda t: rpgan_g_loss(rl, D(t)[0]),
        "nonsat_d": lambda t: nonsat_d_loss(rl, D(t)[0]),
        "nonsat_g": lambda t: nonsat_g_loss(D(t)[0]),
        "aR1_aR2": lambda t: approx_r(lambda z: D(z)[0], t, 0.05, noise=noise),
        "feature_matching": lambda t: feature_matching(D(t)[1], rt),
    }, x


def _backbone_checks():
    cfg = tiny_config(blocks=2)
    p = busy_params(cfg)
    layout = cfg.window.layout(GridShape(1, 4, 4))
    rng = np.random.default_rng(6)
    lq, r = Tensor(rng.standard_normal((1, 16, 3))), Tensor(rng.standard_normal((1, 16, 3)))
    lat = Tensor(rng.standard_normal((1, 16, 3)))
    checks = {"backbone_latent": (lambda x: (backbone_forward(p, cfg, x, 0.4, lq, layout)["velocity"] * r).sum(),
                                  lat.data)}
    for name in ("embed.w", "blocks.0.qkv.w", "blocks.1.mlp.w1", "blocks.0.mod.w", "head.w", "skip.w"):
        checks[f"backbone_{name}"] = (
            lambda w, name=name: (backbone_forward(swap_param(p, name, w), cfg, lat, 0.4, lq, layout)["velocity"]
                                  * r).sum(), p[name].data)
    return checks


def test_c5_gradient_integrity():
    t0 = time.perf_counter()
    failed = []
    for name, (f, shape) in OPS.items():
        x = rand(shape, 3)
        x[np.abs(x) < 0.05] += 0.1
        if not grad_check(f, x, step=1e-5 if name != "abs" else 1e-6, tol=1e-4).passed:
            failed.append(name)
    losses, x = _loss_checks()
    for name, f in losses.items():
        if not grad_check(f, x, step=1e-5, tol=1e-4).passed:
            failed.append(name)
    for name, (f, x0) in _backbone_checks().items():
        if not grad_check(f, x0, step=1e-5, tol=1e-4).passed:
            failed.append(name)
    dt = time.perf_counter() - t0
    n = len(OPS) + len(losses) + 7
    ok = not failed and dt < 120
    note = f" (failed: {', '.join(failed)})" if failed else ""
    verdict(5, ok, f"{n - len(failed)}/{n} grad checks pass at tol 1e-4{note}, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6. flow exactness

def test_c6_flow_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    # dyadic values: every product and sum below is exact in float64
    x0 = rng.integers(-2**20, 2**20, size=(4, 32, 3)) / 2**10
    eps = rng.integers(-2**20, 2**20, size=(4, 32, 3)) / 2**10
    taus = rng.integers(0, 2**10 + 1, size=64) / 2**10
    v = velocity_target(x0, eps)
    inverts = all(np.array_equal(to_sample(interpolate(x0, eps, t), v, t).data, x0) for t in taus)
    step = euler_sample(lambda x, tau, c: v.data, eps, SamplerConfig(1))
    bitwise = np.array_equal(step, x0)
    err = abs(rpgan_d_loss([2.0], [-1.0]).item() - SOFTPLUS_M3)
    dt = time.perf_counter() - t0
    ok = inverts and bitwise and err <= 1e-12 and dt < 5
    verdict(6, ok, f"inverse exact {inverts}, one-step Euler bitwise {bitwise}, rpgan_d err {err:.1e}, {dt:.2f}s")
    assert ok


# ---------------------------------------------------------------- shared toy-scale pipeline

TOY = ModelConfig()  # model_dim 64, 6 blocks, patch 4
TOY_STREAM = StreamConfig(batch_size=2, grids=((16, 16),))
EVAL_PAIRS = dict(seed=777, count=8, frames=1, h=64, w=64)


@pytest.fixture(scope="session")
def toy_teacher():
    t0 = time.perf_counter()
    params = train_teacher(TOY, TOY_STREAM, TeacherConfig(), seed=1)
    return params, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_distill(toy_teacher):
    teacher, _ = toy_teacher
    t0 = time.perf_counter()
    student, stages = run_progressive(teacher, TOY, TOY_STREAM, DistillSchedule(), seed=2)
    return student, stages, time.perf_counter() - t0


APT_ITERS = 2000
COMPARE_AT = 1000


def apt_config(weights, iters, eval_every):
    return TrainConfig(weights=weights, batch_size=1, iters=iters, seed=3, eval_every=eval_every,
                       eval_count=8, eval_hw=(64, 64), grids=((16, 16),))


@pytest.fixture(scope="session")
def toy_apt(toy_teacher, toy_distill):
    teacher, _ = toy_teacher
    student = toy_distill[0]
    D = init_discriminator(teacher, TOY, seed=4)
    t0 = time.perf_counter()
    full = train_apt(apt_config(LossWeights.final_model(), APT_ITERS, 250), student, D, TOY)
    t_full = time.perf_counter() - t0
    t0 = time.perf_counter()
    vanilla = train_apt(apt_config(LossWeights.nonsat_r1(), COMPARE_AT, 500), student, D, TOY)
    return full, vanilla, t_full, time.perf_counter() - t0


# ---------------------------------------------------------------- 7. progressive distillation

def test_c7_progressive_distillation(toy_teacher, toy_distill):
    teacher, t_teacher = toy_teacher
    student, stages, t_distill = toy_distill
    pairs = eval_set(EVAL_PAIRS["seed"], EVAL_PAIRS["count"], EVAL_PAIRS["frames"], EVAL_PAIRS["h"], EVAL_PAIRS["w"])
    t0 = time.perf_counter()
    p_teacher = evaluate(VelocityModel(teacher, TOY), pairs, SamplerConfig(64, 7.5, 0)).summary()["mean_psnr"]
    p_student = evaluate(VelocityModel(student, TOY), pairs, SamplerConfig(1, 1.0, 0)).summary()["mean_psnr"]
    total = t_teacher + t_distill + time.perf_counter() - t0
    monotone = all(s.final_mse <= s.initial_mse for s in stages)
    gap = p_student - p_teacher
    ok = len(stages) == 6 and monotone and abs(gap) <= 1.5 and total < 30 * 60
    mses = ", ".join(f"{s.steps_from}->{s.steps_to} {s.initial_mse:.4f}->{s.final_mse:.5f}" for s in stages)
    verdict(7, ok, f"student {p_student:.2f} dB vs 64-step teacher {p_teacher:.2f} dB (gap {gap:+.2f}); "
                   f"stage mse {mses}; {total / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 8. adversarial post-training

def test_c8_apt_improvement(toy_apt, toy_distill):
    # The learning rate is constant and data and noise are keyed by iteration, so G at
    # COMPARE_AT inside the long run is bitwise the final G of a COMPARE_AT-iteration run.
    full, vanilla, t_full, t_vanilla = toy_apt
    distill_only = full.evals[0]
    after = full.evals[COMPARE_AT]
    psnr_ok = after["psnr"] >= distill_only["psnr"]
    l1_full, l1_vanilla = full.evals[COMPARE_AT]["l1"], vanilla.evals[COMPARE_AT]["l1"]
    l1_ok = l1_full <= l1_vanilla
    total = t_full + t_vanilla
    ok = psnr_ok and l1_ok and total < 45 * 60
    verdict(8, ok, f"PSNR distill-only {distill_only['psnr']:.2f} -> distill+APT {after['psnr']:.2f} dB at "
                   f"{COMPARE_AT} iters ({full.evals[APT_ITERS]['psnr']:.2f} dB at {APT_ITERS}); eval L1 at "
                   f"{COMPARE_AT} iters: full suite {l1_full:.4f} vs nonsat+R1 {l1_vanilla:.4f}; {total / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 9. adaptive vs fixed windows

# Both models are trained as one-step L1 restorers on the 45x80-token proxy task
# with the default degradation. On that grid fixed 30x30 windows truncate to 15-
# and 20-wide remnants, while the adaptive policy picks 15x27 from the proxy.
C9_GRIDS = ((45, 80),)
C9_TEST_HW = (180, 320)  # pixels, a 45x80 token grid at patch 4
C9_ITERS = 600
C9_DEGRADATION = DegradationParams()


def _train_window_model(policy: WindowPolicy):
    cfg = ModelConfig(BlockConfig(32, 2, num_blocks=2), window=policy)
    params = init_params(cfg, 0)
    opt = AdamW(lr=2e-3)
    stream = pair_stream(StreamConfig(batch_size=1, grids=C9_GRIDS, degradation=C9_DEGRADATION), 5)
    weights = LossWeights(l1=1.0, fm=0.0, gan=0.0)
    for it in range(C9_ITERS):
        params = generator_step(next(stream), params, {}, cfg, weights, opt, np.random.default_rng(it)).params
    return VelocityModel(params, cfg)


def test_c9_adaptive_window_ablation():
    t0 = time.perf_counter()
    adaptive = WindowPolicy("adaptive", WindowCounts(1, 3, 3), (45, 80))
    fixed = WindowPolicy("fixed", fixed_size=WindowSize(1, 30, 30))
    test_grid = GridShape(1, C9_TEST_HW[0] // 4, C9_TEST_HW[1] // 4)
    assert adaptive.size_for(test_grid, train=False).as_tuple() == (1, 15, 27)
    pairs = eval_set(777, 10, 1, *C9_TEST_HW, C9_DEGRADATION)
    scores = {}
    for name, policy in (("adaptive", adaptive), ("fixed", fixed)):
        report = evaluate(_train_window_model(policy), pairs, SamplerConfig(1, 1.0, 0), boundary=True)
        scores[name] = np.array(report.summary()["boundary_artifact_score"])
    wins = int(np.sum(scores["adaptive"] <= scores["fixed"]))
    dt = time.perf_counter() - t0
    ok = wins >= 8 and dt < 20 * 60
    verdict(9, ok, f"adaptive <= fixed on {wins}/10 clips (mean score {scores['adaptive'].mean():.3f} vs "
                   f"{scores['fixed'].mean():.3f}); {dt / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 10. stability

def test_c10_stability(toy_apt):
    full = toy_apt[0]
    log = full.metrics
    bad = log.non_finite()
    worst = 0.0
    for prefix, names in (("g", G_TERMS), ("d", D_TERMS)):
        totals = np.array(log.series(f"{prefix}/total"))
        parts = np.array([log.series(n) for n in names]).sum(axis=0)
        assert totals.size == APT_ITERS
        worst = max(worst, float(np.max(np.abs(parts - totals))))
    ok = not bad and worst <= 1e-10
    verdict(10, ok, f"{APT_ITERS} iterations, {len(log.records)} logged values, {len(bad)} non-finite, "
                    f"max |sum(components) - total| {worst:.1e}")
    assert ok
