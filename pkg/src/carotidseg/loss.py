"""Soft Dice loss and the SDL / DDL / TDL / ATDL training objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch

from .net import derive_cvw

DICE_EPS = 1e-6


class LossMode(str, Enum):
    SDL = "SDL"
    DDL = "DDL"
    TDL = "TDL"
    ATDL = "ATDL"


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"negative loss weight in {self}")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


UNIFORM = LossWeights(1 / 3, 1 / 3, 1 - 2 / 3)


@dataclass(frozen=True)
class ScheduleState:
    epoch: int
    total_epochs: int
    adaptive_param_a: float = 0.5

    def __post_init__(self):
        if not 0 <= self.epoch < self.total_epochs:
            raise ValueError(f"epoch {self.epoch} outside [0, {self.total_epochs})")
        if self.adaptive_param_a <= 0:
            raise ValueError("adaptive parameter a must be > 0")

    @property
    def adaptive(self) -> bool:
        """False during the uniform first half [0, ceil(E/2))."""
        return self.epoch >= math.ceil(self.total_epochs / 2)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Per-sample soft Dice loss 1 - (2 sum(y*p) + eps) / (sum(y) + sum(p) + eps).

    Leading dimensions beyond the last two are treated as the batch; a plain
    2D map yields a scalar.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum(dim=(-2, -1))
    total = pred.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def atdl_weights(loss_mab: float, loss_lib: float, a: float = 0.5) -> LossWeights:
    if a <= 0:
        raise ValueError("a must be > 0")
    alpha = loss_mab / (3.0 * (1.0 + a * (1.0 - loss_mab)))
    beta = loss_lib / (3.0 * (1.0 + a * (1.0 - loss_lib)))
    return LossWeights(alpha, beta, 1.0 - alpha - beta)


def component_losses(pred: torch.Tensor, mab: torch.Tensor, lib: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-mean Dice losses for MAB, LIB and the derived vessel wall.

    `pred` has shape (..., 2, H, W); masks (..., H, W).
    """
    mab = mab.to(pred.dtype)
    lib = lib.to(pred.dtype)
    p_mab, p_lib = pred[..., 0, :, :], pred[..., 1, :, :]
    p_cvw = derive_cvw(p_mab, p_lib)
    y_cvw = mab * (1.0 - lib)
    return (dice_loss(p_mab, mab).mean(), dice_loss(p_lib, lib).mean(),
            dice_loss(p_cvw, y_cvw).mean())


def weights_for(mode: LossMode | str, state: Optional[ScheduleState] = None,
                l_mab: Optional[float] = None, l_lib: Optional[float] = None
                ) -> Optional[LossWeights]:
    """Loss weights for a mode; None for SDL, which has no weighted sum."""
    mode = LossMode(mode)
    if mode is LossMode.SDL:
        return None
    if mode is LossMode.DDL:
        return LossWeights(0.5, 0.5, 0.0)
    if mode is LossMode.TDL:
        return UNIFORM
    if state is None:
        raise ValueError("ATDL needs a schedule state")
    if not state.adaptive:
        return UNIFORM
    return atdl_weights(float(l_mab), float(l_lib), state.adaptive_param_a)


def objective(pred: torch.Tensor, mab: torch.Tensor, lib: torch.Tensor, mode: LossMode | str,
              state: Optional[ScheduleState] = None, weights: Optional[LossWeights] = None
              ) -> tuple[torch.Tensor, dict]:
    """Training loss for `mode` plus a dict of detached components and weights.

    SDL returns L_MAB + L_LIB: with two parameter-disjoint networks each one
    receives exactly its own boundary's gradient. ATDL weights come from the
    detached batch losses, so no gradient flows through them. `weights`
    overrides the mode's weights (e.g. ATDL weights fixed per epoch).
    """
    mode = LossMode(mode)
    l_mab, l_lib, l_cvw = component_losses(pred, mab, lib)
    info = {"l_mab": float(l_mab.detach()), "l_lib": float(l_lib.detach()),
            "l_cvw": float(l_cvw.detach())}
    if mode is LossMode.SDL:
        info.update(alpha=math.nan, beta=math.nan, gamma=math.nan)
        return l_mab + l_lib, info
    w = weights or weights_for(mode, state, info["l_mab"], info["l_lib"])
    info.update(alpha=w.alpha, beta=w.beta, gamma=w.gamma)
    total = w.alpha * l_mab + w.beta * l_lib
    if w.gamma:
        total = total + w.gamma * l_cvw
    return total, info
