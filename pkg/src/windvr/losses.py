"""Generator and discriminator objectives for adversarial post-training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    fm: float = 1.0
    gan: float = 1.0
    gan_d: float = 1.0
    r1: float = 1000.0
    r2: float = 1000.0
    sigma_rel: float = 0.01  # perturbation std relative to the batch std of the input
    gan_kind: str = "rpgan"  # or "nonsat"

    def __post_init__(self):
        if self.gan_kind not in ("rpgan", "nonsat"):
            raise ValueError(f"unknown GAN loss {self.gan_kind!r}")
        if self.sigma_rel <= 0:
            raise ValueError("sigma_rel must be positive")

    @classmethod
    def final_model(cls) -> "LossWeights":
        return cls(l1=0.1, fm=0.1)

    @classmethod
    def nonsat_r1(cls) -> "LossWeights":
        """The vanilla baseline: non-saturating GAN loss with approximated R1 only."""
        return cls(l1=0.0, fm=0.0, r2=0.0, gan_kind="nonsat")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise nx.ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(pred, target) -> Tensor:
    pred, target = nx.as_tensor(pred), nx.as_tensor(target)
    _same_shape("l1_loss", pred, target)
    return nx.abs_(pred - target).mean()


def mse_loss(pred, target) -> Tensor:
    pred, target = nx.as_tensor(pred), nx.as_tensor(target)
    _same_shape("mse_loss", pred, target)
    return nx.square(pred - target).mean()


def rpgan_d_loss(real_logit, fake_logit) -> Tensor:
    """mean softplus(-(real - fake)) over matched pairs."""
    real_logit, fake_logit = nx.as_tensor(real_logit), nx.as_tensor(fake_logit)
    _same_shape("rpgan_d_loss", real_logit, fake_logit)
    return nx.softplus(fake_logit - real_logit).mean()


def rpgan_g_loss(real_logit, fake_logit) -> Tensor:
    real_logit, fake_logit = nx.as_tensor(real_logit), nx.as_tensor(fake_logit)
    _same_shape("rpgan_g_loss", real_logit, fake_logit)
    return nx.softplus(real_logit - fake_logit).mean()


def nonsat_d_loss(real_logit, fake_logit) -> Tensor:
    real_logit, fake_logit = nx.as_tensor(real_logit), nx.as_tensor(fake_logit)
    _same_shape("nonsat_d_loss", real_logit, fake_logit)
    return (nx.softplus(-real_logit) + nx.softplus(fake_logit)).mean()


def nonsat_g_loss(fake_logit) -> Tensor:
    return nx.softplus(-nx.as_tensor(fake_logit)).mean()


def approx_r(D: Callable[[Tensor], Tensor], x, sigma: float, noise=None,
             rng: np.random.Generator | None = None) -> Tensor:
    """Finite-perturbation gradient penalty: mean_b (D(x)_b - D(x + sigma * n)_b)^2.

    On real data this is the approximated R1 term, on generated data the
    approximated R2 term. ``D`` maps a batch to one logit per sample; any
    condition is bound inside it. Pass ``noise`` to freeze the perturbation.
    """
    if not sigma > 0:
        raise ValueError(f"approx_r: sigma must be positive, got {sigma}")
    x = nx.as_tensor(x)
    if noise is None:
        if rng is None:
            raise ValueError("approx_r: need either noise or a seeded rng")
        noise = rng.standard_normal(x.shape)
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise)
    if noise.shape != x.shape:
        raise nx.ShapeError(f"approx_r: noise {noise.shape} vs input {x.shape}")
    diff = D(x) - D(x + Tensor(sigma * noise))
    return nx.square(diff).mean()


def penalty_from_logits(clean: Tensor, perturbed: Tensor) -> Tensor:
    """approx_r when both logit batches were computed in one joint forward."""
    _same_shape("approx_r", clean, perturbed)
    return nx.square(clean - perturbed).mean()


def feature_matching(taps_fake: Sequence[Tensor], taps_real: Sequence[Tensor]) -> Tensor:
    """Mean over taps of the mean absolute feature difference; real taps are detached."""
    if len(taps_fake) != len(taps_real) or not taps_fake:
        raise nx.ShapeError(f"feature_matching: {len(taps_fake)} fake taps vs {len(taps_real)} real taps")
    total = None
    for f, r in zip(taps_fake, taps_real):
        _same_shape("feature_matching", f, r)
        term = nx.abs_(f - r.detach()).mean()
        total = term if total is None else total + term
    return nx.scale(total, 1.0 / len(taps_fake))
