"""Soft dice, weighted dice loss (WDL) and the weighting-factor curve G(x, y).

    dsc = 2 (sum(gt*pred) + S/2) / (sum(gt^2) + sum(pred^2) + S)
    WDL = (1 - dsc)^beta * (-dsc),    with 0^0 := 1

The numpy functions are the reference implementation (and carry the analytic
gradient); :class:`WeightedDiceLoss` is the torch module used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_SMOOTH = 1e-4


@dataclass(frozen=True)
class LossParams:
    beta: float = 1.0
    smooth_S: float = DEFAULT_SMOOTH

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.smooth_S <= 0:
            raise ValueError(f"smooth_S must be positive, got {self.smooth_S}")


def _pair(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    return gt, pred


def soft_dice(gt, pred, S: float = DEFAULT_SMOOTH) -> float:
    gt, pred = _pair(gt, pred)
    inter = float(np.sum(gt * pred))
    denom = float(np.sum(gt * gt) + np.sum(pred * pred))
    return 2.0 * (inter + S / 2.0) / (denom + S)


def _weight(one_minus: float, beta: float) -> float:
    # 0**0 is 1 in Python already; clip guards rounding just above dsc = 1
    return max(one_minus, 0.0) ** beta


def wdl(gt, pred, p: LossParams = LossParams()) -> float:
    d = soft_dice(gt, pred, p.smooth_S)
    return _weight(1.0 - d, p.beta) * -d


def wdl_gradient(gt, pred, p: LossParams = LossParams()) -> np.ndarray:
    """Analytic d WDL / d pred, same shape as ``pred``.

    d dsc/d pred_i = 2 (gt_i - dsc * pred_i) / (sum gt^2 + sum pred^2 + S)
    d WDL/d dsc    = beta (1-dsc)^(beta-1) dsc - (1-dsc)^beta

    For 0 < beta < 1 the first term diverges at dsc = 1 while d dsc/d pred
    vanishes there; ``1 - dsc`` is floored at 1e-12 to keep the product finite.
    """
    gt, pred = _pair(gt, pred)
    S = p.smooth_S
    denom = float(np.sum(gt * gt) + np.sum(pred * pred)) + S
    d = 2.0 * (float(np.sum(gt * pred)) + S / 2.0) / denom
    ddsc = 2.0 * (gt - d * pred) / denom
    one_minus = max(1.0 - d, 0.0)
    if p.beta == 0.0:
        dwdl = -1.0
    else:
        dwdl = p.beta * max(one_minus, 1e-12) ** (p.beta - 1.0) * d - one_minus**p.beta
    return dwdl * ddsc


def weight_factor_G(x, y):
    """G(x, y) = -(1 - x)^y for x in [0, 1]; accepts scalars or arrays."""
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any((x_arr < 0) | (x_arr > 1)):
        raise ValueError("x must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        g = -np.power(1.0 - x_arr, np.asarray(y, dtype=np.float64))
    return float(g) if g.ndim == 0 else g


def figure4_grid(n_x: int = 101, ys=None) -> np.ndarray:
    """Rows of (x, y, G) over an ``n_x``-point x grid and the given exponents."""
    if ys is None:
        ys = np.round(np.arange(1, 11) / 10, 10)
    xs = np.linspace(0.0, 1.0, n_x)
    rows = [(x, y, weight_factor_G(x, y)) for y in ys for x in xs]
    return np.array(rows, dtype=np.float64)


def soft_dice_torch(gt: torch.Tensor, pred: torch.Tensor, S: float = DEFAULT_SMOOTH) -> torch.Tensor:
    inter = (gt * pred).sum()
    denom = (gt * gt).sum() + (pred * pred).sum()
    return 2.0 * (inter + S / 2.0) / (denom + S)


class WeightedDiceLoss(torch.nn.Module):
    """WDL on the foreground probability channel of a (N, C, ...) softmax output."""

    def __init__(self, params: LossParams = LossParams(), fg_channel: int = 1):
        super().__init__()
        self.params = params
        self.fg_channel = fg_channel

    def forward(self, probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        pred = probs[:, self.fg_channel]
        gt = target.to(pred.dtype)
        d = soft_dice_torch(gt, pred, self.params.smooth_S)
        if self.params.beta == 0.0:
            return -d
        one_minus = torch.clamp(1.0 - d, min=1e-12)
        return one_minus**self.params.beta * -d
