"""Full-reference quality metrics and the window-seam score."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .window_geometry import WindowLayout

PSNR_CAP = 100.0


def _same_shape(a, b, op):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _same_shape(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    n = g.size
    h, w = img.shape[:2]
    rows = sum(g[k] * img[k:h - n + 1 + k] for k in range(n))
    return sum(g[k] * rows[:, k:w - n + 1 + k] for k in range(n))


def ssim_frame(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
               k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM of one (H, W[, C]) frame pair; channels are averaged."""
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"ssim: frame {a.shape[:2]} smaller than window {window}")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03) -> float:
    """SSIM averaged over frames for (T, H, W, C) clips (a single (H, W, C) frame also works)."""
    a, b = _same_shape(a, b, "ssim")
    if a.ndim == 3:
        a, b = a[None], b[None]
    return float(np.mean([ssim_frame(fa, fb, window, k1=k1, k2=k2) for fa, fb in zip(a, b)]))


def _seam_indices(starts: list[int], patch: int) -> np.ndarray:
    """Difference indices straddling window starts: diff i compares pixel i and i+1."""
    return np.asarray([s * patch - 1 for s in starts if s > 0], dtype=np.intp)


def boundary_artifact_score(frame, layout: WindowLayout, patch: int = 1) -> float:
    """Mean |finite difference| across window seams over the same statistic elsewhere.

    ``frame`` is (H, W[, C]) in pixels; the layout lives on the token grid and
    each token covers ``patch`` x ``patch`` pixels. With patch > 1 the reference
    positions are the other token edges, so per-token output structure does
    not masquerade as a seam. Around 1.0 means no seam signature.
    """
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        f = f[..., None]
    h_starts, w_starts = layout.axis_starts(1), layout.axis_starts(2)
    if len(h_starts) <= 1 and len(w_starts) <= 1:
        return 1.0
    dy = np.abs(np.diff(f, axis=0)).mean(axis=(1, 2))  # one value per row gap
    dx = np.abs(np.diff(f, axis=1)).mean(axis=(0, 2))  # one value per column gap

    def split(diffs: np.ndarray, starts: list[int]) -> tuple[np.ndarray, np.ndarray]:
        seam = np.zeros(diffs.size, dtype=bool)
        idx = _seam_indices(starts, patch)
        seam[idx[idx < diffs.size]] = True
        ref = ~seam
        if patch > 1:
            edges = np.zeros(diffs.size, dtype=bool)
            edges[patch - 1::patch] = True
            if np.any(edges & ~seam):
                ref = edges & ~seam
        return seam, ref

    sy, ry = split(dy, h_starts)
    sx, rx = split(dx, w_starts)
    # weight by the number of pixels each gap spans so rows and columns pool fairly
    w_row, w_col = f.shape[1], f.shape[0]
    seam_sum = dy[sy].sum() * w_row + dx[sx].sum() * w_col
    seam_n = sy.sum() * w_row + sx.sum() * w_col
    ref_sum = dy[ry].sum() * w_row + dx[rx].sum() * w_col
    ref_n = ry.sum() * w_row + rx.sum() * w_col
    if seam_n == 0:
        return 1.0
    seam_mean = seam_sum / seam_n
    ref_mean = ref_sum / ref_n if ref_n else 0.0
    if ref_mean == 0:
        return 1.0 if seam_mean == 0 else math.inf
    return float(seam_mean / ref_mean)


def clip_boundary_score(clip, layout: WindowLayout, patch: int = 1) -> float:
    """Per-frame seam scores averaged over a (T, H, W, C) clip; temporal seams are ignored."""
    return float(np.mean([boundary_artifact_score(fr, layout, patch) for fr in np.asarray(clip)]))


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    boundary_artifact_score: list[float] = field(default_factory=list)
    l1: list[float] = field(default_factory=list)
    runtime_s: float = 0.0

    def add(self, pred, ref, layout: WindowLayout | None = None, patch: int = 1) -> None:
        self.psnr.append(psnr(pred, ref))
        self.ssim.append(ssim(pred, ref))
        self.l1.append(float(np.mean(np.abs(np.asarray(pred) - np.asarray(ref)))))
        if layout is not None:
            self.boundary_artifact_score.append(clip_boundary_score(pred, layout, patch))

    def summary(self) -> dict:
        def avg(v):
            return float(np.mean(v)) if v else None

        out = asdict(self)
        out["mean_psnr"] = avg(self.psnr)
        out["mean_ssim"] = avg(self.ssim)
        out["mean_boundary_artifact_score"] = avg(self.boundary_artifact_score)
        out["mean_l1"] = avg(self.l1)
        return out
