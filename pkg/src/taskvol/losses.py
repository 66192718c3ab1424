"""Training losses and the mixed-batch routing rule.

Classification items train through binary cross-entropy on the CLS logit;
segmentation items train through a focal loss on the per-token patch
logits, scaled by a constant factor to keep its magnitude useful.  A batch
may mix both kinds: each item contributes through exactly one head, and the
batch loss is the mean of the per-item losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import SchemaError
from .maskpatch import PatchTarget

FOCAL_SCALE = 10.0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def bce_with_logits(logit: Tensor, y: float) -> Tensor:
    """Stable binary cross-entropy from a logit: softplus(x) - x*y."""
    y = float(y)
    if y not in (0.0, 1.0):
        raise SchemaError(f"binary target must be 0 or 1, got {y}")
    return logit.softplus() - logit * y


def focal_loss(seg_logits: Tensor, target: PatchTarget | np.ndarray,
               alpha: float | None = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA,
               scale: float = FOCAL_SCALE) -> Tensor:
    """Focal loss over all patch entries, mean-reduced then scaled.

    Per entry with logit x and target t in {0,1}, writing s = 2t - 1 and
    z = x*s the loss is alpha_t * sigmoid(-z)^gamma * softplus(-z), which
    is the familiar -alpha_t (1-p_t)^gamma log(p_t) in stable form.
    alpha=None removes the class weighting.
    """
    values = target.values if isinstance(target, PatchTarget) else target
    values = np.asarray(values)
    if values.shape != seg_logits.shape:
        raise SchemaError(
            f"target shape {values.shape} != logits {seg_logits.shape}")
    sign = (2.0 * values.astype(seg_logits.data.dtype) - 1.0)
    z = seg_logits * sign
    modulator = (-z).sigmoid() ** gamma if gamma != 0 else 1.0
    loss = (-z).softplus() * modulator
    if alpha is not None:
        alpha_t = np.where(values > 0, alpha, 1.0 - alpha) \
            .astype(seg_logits.data.dtype)
        loss = loss * alpha_t
    return loss.mean() * scale


@dataclass(frozen=True)
class BatchItemTarget:
    """Supervision for one batch item; exactly one target field is set."""

    kind: str  # "classification" or "segmentation"
    y: int | None = None
    patch_target: PatchTarget | None = None

    def __post_init__(self):
        if self.kind == "classification":
            if self.y is None or self.patch_target is not None:
                raise SchemaError("classification items carry y only")
        elif self.kind == "segmentation":
            if self.patch_target is None or self.y is not None:
                raise SchemaError("segmentation items carry patch_target only")
        else:
            raise SchemaError(f"unknown batch item kind {self.kind!r}")


def item_loss(outputs: tuple[Tensor, Tensor], target: BatchItemTarget) -> Tensor:
    cls_logit, seg_logits = outputs
    if target.kind == "classification":
        return bce_with_logits(cls_logit, target.y)
    return focal_loss(seg_logits, target.patch_target)


def batch_loss(outputs: list[tuple[Tensor, Tensor]],
               targets: list[BatchItemTarget]) -> Tensor:
    """Mean over items, each routed to exactly one head."""
    if len(outputs) != len(targets):
        raise SchemaError(
            f"{len(outputs)} outputs vs {len(targets)} targets")
    if not targets:
        raise SchemaError("empty batch")
    total = item_loss(outputs[0], targets[0])
    for out, tgt in zip(outputs[1:], targets[1:]):
        total = total + item_loss(out, tgt)
    return total * (1.0 / len(targets))
