"""Reconstruction, region-priority and gaze losses, and their per-condition sum.

All image inputs are ``(N, C, H, W)`` (a single ``(C, H, W)`` image is
promoted). Losses reduce to a scalar by averaging over the batch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


class Condition(str, enum.Enum):
    BASELINE = "Baseline"
    EM = "Em"
    GAZE = "Gaze"
    GAZE_FINETUNE = "GazeFinetune"
    EM_GAZE = "EmGaze"

    def terms(self, phase: int) -> tuple[bool, bool]:
        """``(em_enabled, gaze_enabled)`` for training phase 1 or 2."""
        if self is Condition.BASELINE:
            return False, False
        if self is Condition.EM:
            return True, False
        if self is Condition.GAZE:
            return False, True
        if self is Condition.GAZE_FINETUNE:
            return False, phase == 2
        return True, True


@dataclass(frozen=True)
class SSIMConfig:
    window_size: int = 11
    window: str = "gaussian"
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"SSIM window size must be odd and >= 3, got {self.window_size}")
        if self.window not in ("gaussian", "uniform"):
            raise ValueError(f"unknown SSIM window {self.window!r}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def kernel(self) -> np.ndarray:
        n = self.window_size
        if self.window == "uniform":
            return np.full(n, 1.0 / n)
        t = np.arange(n) - (n - 1) / 2
        k = np.exp(-(t ** 2) / (2 * self.sigma ** 2))
        return k / k.sum()

    def for_size(self, size: int) -> "SSIMConfig":
        """Small images fall back to a 5x5 uniform window."""
        if size < 16 and self.window_size > 5:
            return SSIMConfig(5, "uniform", self.sigma, self.k1, self.k2, self.data_range)
        return self


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    lambda_em: float = 300.0
    alpha: float = 3.0
    beta: float = 30.0
    em_enabled: bool = False
    gaze_enabled: bool = False
    theta_detached: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_em", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _batched(x) -> Tensor:
    x = tc.as_tensor(x)
    return tc.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise tc.ShapeError(f"{op}: image shapes differ: {a.shape} vs {b.shape}")


def ssim_map(y, y_hat, cfg: SSIMConfig = SSIMConfig()) -> Tensor:
    """Per-window SSIM values, shape ``(N, C, H - n + 1, W - n + 1)``."""
    y, y_hat = _batched(y), _batched(y_hat)
    _same_shape(y, y_hat, "ssim")
    cfg = cfg.for_size(min(y.shape[-2:]))
    if min(y.shape[-2:]) < cfg.window_size:
        raise tc.ShapeError(f"ssim: image {y.shape[-2:]} smaller than {cfg.window_size}x{cfg.window_size} window")
    k = cfg.kernel()
    mu_y = tc.window_mean(y, k)
    mu_h = tc.window_mean(y_hat, k)
    var_y = tc.window_mean(tc.square(y), k) - tc.square(mu_y)
    var_h = tc.window_mean(tc.square(y_hat), k) - tc.square(mu_h)
    cov = tc.window_mean(y * y_hat, k) - mu_y * mu_h
    num = (2.0 * mu_y * mu_h + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (tc.square(mu_y) + tc.square(mu_h) + cfg.c1) * (var_y + var_h + cfg.c2)
    return num / den


def ssim(y, y_hat, cfg: SSIMConfig = SSIMConfig(), reduction: str = "mean") -> Tensor:
    """Mean SSIM over windows and channels (per image when ``reduction='none'``)."""
    m = ssim_map(y, y_hat, cfg)
    return tc.mean(m) if reduction == "mean" else tc.mean(m, axis=(1, 2, 3))


def dssim(y, y_hat, cfg: SSIMConfig = SSIMConfig(), reduction: str = "mean") -> Tensor:
    return (1.0 - ssim(y, y_hat, cfg, reduction)) * 0.5


def mse(y, y_hat, reduction: str = "mean") -> Tensor:
    y, y_hat = _batched(y), _batched(y_hat)
    _same_shape(y, y_hat, "mse")
    sq = tc.square(y_hat - y)
    return tc.mean(sq) if reduction == "mean" else tc.mean(sq, axis=(1, 2, 3))


def core_loss(y, y_hat, mask, mask_hat, w: LossWeights, cfg: SSIMConfig = SSIMConfig()) -> Tensor:
    """Weighted DSSIM + MSE on the image plus MSE between true and predicted face masks."""
    return (w.lambda1 * dssim(y, y_hat, cfg) + w.lambda2 * mse(y, y_hat)
            + w.lambda3 * mse(mask, mask_hat))


def em_loss(y, y_hat, mask_em, w: LossWeights) -> Tensor:
    """Eyes-and-mouth priority: mean absolute error of the masked images."""
    y, y_hat, m = _batched(y), _batched(y_hat), _batched(mask_em)
    _same_shape(y, y_hat, "em_loss")
    return w.lambda_em * tc.mean(tc.abs_(y * m - y_hat * m))


def gaze_vector(mu, phi) -> tuple[Tensor, Tensor, Tensor]:
    """Pitch/yaw pair to Cartesian components (x, y, z)."""
    s = tc.sin(phi)
    return s * tc.cos(mu), s * tc.sin(mu), tc.cos(phi)


def angle_between(mu1, phi1, mu2, phi2) -> Tensor:
    """Angle in radians between two gaze directions (elementwise over batches)."""
    x1, y1, z1 = gaze_vector(tc.as_tensor(mu1), tc.as_tensor(phi1))
    x2, y2, z2 = gaze_vector(tc.as_tensor(mu2), tc.as_tensor(phi2))
    dot = x1 * x2 + y1 * y2 + z1 * z2
    # sqrt(|V1|^2 |V2|^2) == |V1| |V2|, and is exactly |V|^2 for identical vectors
    sq1 = tc.square(x1) + tc.square(y1) + tc.square(z1)
    sq2 = tc.square(x2) + tc.square(y2) + tc.square(z2)
    return tc.arccos(dot / tc.sqrt(sq1 * sq2))


def gaze_angle_error(g1, g2) -> float:
    """Angle in radians between two ``GazeAngles`` (or ``(mu, phi)`` pairs)."""
    mu1, phi1 = (g1.mu, g1.phi) if hasattr(g1, "mu") else g1
    mu2, phi2 = (g2.mu, g2.phi) if hasattr(g2, "mu") else g2
    with tc.no_grad():
        return angle_between(mu1, phi1, mu2, phi2).item()


def gaze_loss(y, y_hat, mask_eyes, expert, w: LossWeights, cfg: SSIMConfig = SSIMConfig(),
              target_gaze=None, return_theta: bool = False):
    """Eye-region DSSIM + MSE, scaled per image by the expert's gaze disagreement.

    ``expert`` maps an image batch to ``(mu, phi)`` tensors; it does its own
    preprocessing. ``target_gaze`` may carry precomputed expert outputs for
    ``y`` as an ``(N, 2)`` array.
    """
    y, y_hat, m = _batched(y), _batched(y_hat), _batched(mask_eyes)
    _same_shape(y, y_hat, "gaze_loss")
    if target_gaze is None:
        with tc.no_grad():
            mu_t, phi_t = expert.forward_tensor(y.detach())
    else:
        tg = np.asarray(target_gaze, dtype=np.float64).reshape(-1, 2)
        mu_t, phi_t = Tensor(tg[:, 0]), Tensor(tg[:, 1])
    if w.theta_detached:
        with tc.no_grad():
            mu_h, phi_h = expert.forward_tensor(y_hat.detach())
    else:
        mu_h, phi_h = expert.forward_tensor(y_hat)
    theta = angle_between(mu_t.detach(), phi_t.detach(), mu_h, phi_h)
    if w.theta_detached:
        theta = theta.detach()
    ym, hm = y * m, y_hat * m
    pixel = w.alpha * dssim(ym, hm, cfg, reduction="none") + w.beta * mse(ym, hm, reduction="none")
    loss = tc.mean(theta * pixel)
    return (loss, theta) if return_theta else loss


@dataclass
class LossTerms:
    """Per-branch loss components; absent terms are logged as zero."""

    core: Tensor
    em: Tensor | None = None
    gaze: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def total(self) -> Tensor:
        out = self.core
        if self.em is not None:
            out = out + self.em
        if self.gaze is not None:
            out = out + self.gaze
        return out

    def log_values(self) -> dict:
        return {"core": self.core.item(),
                "em": 0.0 if self.em is None else self.em.item(),
                "gaze": 0.0 if self.gaze is None else self.gaze.item()}


def branch_terms(y, y_hat, mask_face, mask_hat, mask_em, mask_eyes, w: LossWeights,
                 cfg: SSIMConfig = SSIMConfig(), expert=None, target_gaze=None) -> LossTerms:
    """Loss components for one reconstruction branch under ``w``'s flags."""
    terms = LossTerms(core=core_loss(y, y_hat, mask_face, mask_hat, w, cfg))
    if w.em_enabled:
        terms.em = em_loss(y, y_hat, mask_em, w)
    if w.gaze_enabled:
        if expert is None:
            raise ValueError("gaze loss enabled but no gaze expert supplied")
        terms.gaze = gaze_loss(y, y_hat, mask_eyes, expert, w, cfg, target_gaze=target_gaze)
    return terms


def total_loss(condition: Condition, phase: int, branches: list, base: LossWeights = LossWeights(),
               cfg: SSIMConfig = SSIMConfig(), expert=None) -> tuple[Tensor, list]:
    """Sum of per-branch losses for ``condition`` in ``phase`` (1 or 2).

    Each branch is a dict with keys ``y, y_hat, mask_face, mask_hat, mask_em,
    mask_eyes`` and optionally ``target_gaze``. Returns the scalar and the
    per-branch :class:`LossTerms`.
    """
    em_on, gaze_on = Condition(condition).terms(phase)
    w = weights_for(base, em_on, gaze_on)
    all_terms = []
    total = None
    for b in branches:
        t = branch_terms(b["y"], b["y_hat"], b["mask_face"], b["mask_hat"], b["mask_em"], b["mask_eyes"],
                         w, cfg, expert=expert, target_gaze=b.get("target_gaze"))
        all_terms.append(t)
        total = t.total() if total is None else total + t.total()
    return total, all_terms


def weights_for(base: LossWeights, em_enabled: bool, gaze_enabled: bool) -> LossWeights:
    return LossWeights(base.lambda1, base.lambda2, base.lambda3, base.lambda_em, base.alpha, base.beta,
                       em_enabled, gaze_enabled, base.theta_detached)


def degrees(rad) -> float:
    return rad * 180.0 / math.pi
