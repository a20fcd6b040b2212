"""Training losses on logits: stable BCE, soft Dice, and their unweighted sum.

The soft Dice form carries a smoothing constant so that empty targets (common
in 2D slice training) keep the loss finite and its gradient bounded.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1.0


def _check_pair(logits, targets):
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=logits.dtype, device=logits.device)
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return logits, targets


def bce_loss(logits, targets) -> torch.Tensor:
    """Mean binary cross-entropy from logits; overflow-free for any |logit|."""
    logits, targets = _check_pair(logits, targets)
    return F.binary_cross_entropy_with_logits(logits, targets)


def dice_loss(logits, targets, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - soft Dice over sigmoid probabilities, smoothed; lies in [0, 1]."""
    logits, targets = _check_pair(logits, targets)
    p = torch.sigmoid(logits)
    inter = (p * targets).sum()
    denom = p.sum() + targets.sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def combined_loss(logits, targets, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Unweighted BCE + Dice (coefficients exactly 1 and 1)."""
    return bce_loss(logits, targets) + dice_loss(logits, targets, smooth)


LOSS_FUNCTIONS = {
    "bce": bce_loss,
    "dice": dice_loss,
    "bce_plus_dice": combined_loss,
}


def get_loss(name: str):
    try:
        return LOSS_FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(LOSS_FUNCTIONS)}") from None
