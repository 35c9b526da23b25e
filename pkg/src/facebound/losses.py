"""Training objectives for both stages.

All reductions are element means, so the default weights do not depend on
resolution or embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # conditional regression, stage 1
    alpha1: float = 0.01  # feature threshold
    alpha2: float = 50.0  # multi-scale pixel
    alpha3: float = 0.02  # identity preserving
    margin_m: float = 7.0

    def __post_init__(self):
        for name in ("lambda1", "alpha1", "alpha2", "alpha3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if not self.margin_m > 0:
            raise ConfigError("margin_m must be positive")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_boundary_loss(b_hat: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(b_hat, b, "pixel_boundary_loss")
    return (b_hat - b).abs().mean()


def conditional_regression_loss(p_hat, p_r, e_hat, e_r) -> torch.Tensor:
    """MSE over pose dims plus MSE over expression dims."""
    _same_shape(p_hat, p_r, "pose regression")
    _same_shape(e_hat, e_r, "expression regression")
    if p_hat.shape[-1] != 3 or e_hat.shape[-1] != 17:
        raise ContractError(f"expected pose/expression widths 3/17, got {p_hat.shape[-1]}/{e_hat.shape[-1]}")
    return F.mse_loss(p_hat, p_r) + F.mse_loss(e_hat, e_r)


def feature_threshold_loss(f_i: torch.Tensor, f_p: torch.Tensor, m: float) -> torch.Tensor:
    """Hinge ``max(0, ||f_i - f_p||^2 - m)``, averaged over any leading batch dims."""
    if not m > 0:
        raise ConfigError(f"threshold margin must be positive, got {m}")
    _same_shape(f_i, f_p, "feature_threshold_loss")
    sq = (f_i - f_p).pow(2).sum(dim=-1)
    return torch.clamp(sq - m, min=0.0).mean()


def multiscale_pixel_loss(i_hat: torch.Tensor, i: torch.Tensor, scales=(1, 2, 4)) -> torch.Tensor:
    """Sum over the image pyramid of per-scale mean absolute error.

    Inputs are ``N x C x H x W``; coarser scales come from average pooling.
    """
    _same_shape(i_hat, i, "multiscale_pixel_loss")
    h, w = i.shape[-2:]
    if h % max(scales) or w % max(scales):
        raise ContractError(f"resolution {h}x{w} not divisible by {max(scales)}")
    total = i_hat.new_zeros(())
    for s in scales:
        a = F.avg_pool2d(i_hat, s) if s > 1 else i_hat
        b = F.avg_pool2d(i, s) if s > 1 else i
        total = total + (a - b).abs().mean()
    return total


def _check_maps(maps, what):
    for m in maps:
        if torch.isnan(m).any() or m.min() < 0 or m.max() > 1:
            raise ContractError(f"{what} realness map outside [0, 1]")


def adversarial_losses(real_maps, fake_maps) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and (non-saturating) generator terms over all scales.

    Each term is the patch mean within a scale, then averaged over scales.
    Logs are clamped at ``LOG_EPS``.
    """
    if len(real_maps) != len(fake_maps) or not real_maps:
        raise ContractError("need matching non-empty lists of realness maps")
    for r, f in zip(real_maps, fake_maps):
        _same_shape(r, f, "adversarial_losses")
    _check_maps(real_maps, "real")
    _check_maps(fake_maps, "fake")
    d_terms, g_terms = [], []
    for r, f in zip(real_maps, fake_maps):
        log_real = torch.log(r.clamp(min=LOG_EPS))
        log_not_fake = torch.log((1.0 - f).clamp(min=LOG_EPS))
        d_terms.append(-(log_real + log_not_fake).mean())
        g_terms.append(-torch.log(f.clamp(min=LOG_EPS)).mean())
    return torch.stack(d_terms).mean(), torch.stack(g_terms).mean()


def identity_preserving_loss(feat_hat, feat_ref) -> torch.Tensor:
    """MSE on pooled features plus MSE on fc features; ``feat_ref`` is a constant."""
    (pool_hat, fc_hat), (pool_ref, fc_ref) = feat_hat, feat_ref
    _same_shape(pool_hat, pool_ref, "identity pool features")
    _same_shape(fc_hat, fc_ref, "identity fc features")
    return F.mse_loss(pool_hat, pool_ref.detach()) + F.mse_loss(fc_hat, fc_ref.detach())


def stage1_total(pix, reg, w: LossWeights = LossWeights()):
    return pix + w.lambda1 * reg


def stage2_total(adv_g, thr, pixmul, ip, w: LossWeights = LossWeights()):
    return adv_g + w.alpha1 * thr + w.alpha2 * pixmul + w.alpha3 * ip
