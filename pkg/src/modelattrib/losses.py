"""Loss terms of the training objective and the pseudo-unseen mixing operator.

The composite objective is

    total = cls + a1 * fine + a2 * coarse + a3 * unseen + a4 * replay

where ``cls`` is softmax cross-entropy on the current batch, ``fine`` and
``coarse`` align batch prototypes with their anchors while penalizing
anchor non-orthogonality, ``replay`` is cross-entropy on re-encoded memory
features, and ``unseen`` hinges the max-softmax confidence of convex latent
mixes above a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from modelattrib.diffcore import (
    LinearClassifier,
    ProjectionHead,
    Tensor,
    add,
    constant,
    cross_entropy_mean,
    gram_identity_penalty,
    leaf,
    max_softmax_hinge_mean,
    mul,
    mul_array,
    scale_shift,
    take_rows,
    tsum,
)
from modelattrib.hierarchy import AnchorSet, PrototypeSet

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "loss_cls",
    "loss_fine",
    "loss_coarse",
    "fine_alignment",
    "coarse_alignment",
    "loss_replay",
    "mix_pseudo_unseen",
    "mix_latent_pairs",
    "loss_unseen",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Non-negative coefficients of the regularizer terms."""

    alpha1: float = 0.2
    alpha2: float = 0.5
    alpha3: float = 0.5
    alpha4: float = 1.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Unweighted parts plus the weighted total, for per-step logging."""

    cls: float
    l1: float
    l2: float
    lu: float
    replay: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "cls": self.cls,
            "l1": self.l1,
            "l2": self.l2,
            "lu": self.lu,
            "replay": self.replay,
            "total": self.total,
        }


def loss_cls(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between predicted logits and labels."""
    return cross_entropy_mean(logits, labels)


def fine_alignment(protos: PrototypeSet, anchors: AnchorSet) -> Tensor:
    """Sum over present classes of (1 - <prototype, anchor>)."""
    if protos.classes and max(protos.classes) >= anchors.n_classes:
        raise ValueError("prototype class without an anchor")
    rows = take_rows(leaf(anchors.fine), np.asarray(protos.classes, dtype=np.intp))
    s = tsum(mul(protos.fine_matrix, rows))
    return scale_shift(s, -1.0, float(len(protos.classes)))


def loss_fine(protos: PrototypeSet, anchors: AnchorSet) -> Tensor:
    """Class-anchor alignment over the batch plus the anchor orthogonality penalty.

    The alignment sum covers only classes present in the batch; the
    Frobenius penalty always covers every anchor.
    """
    return add(fine_alignment(protos, anchors), gram_identity_penalty(leaf(anchors.fine)))


def coarse_alignment(protos: PrototypeSet, anchors: AnchorSet) -> Tensor:
    if protos.families and max(protos.families) >= anchors.n_families:
        raise ValueError("family prototype without an anchor")
    rows = take_rows(leaf(anchors.coarse), np.asarray(protos.families, dtype=np.intp))
    s = tsum(mul(protos.coarse_matrix, rows))
    return scale_shift(s, -1.0, float(len(protos.families)))


def loss_coarse(protos: PrototypeSet, anchors: AnchorSet) -> Tensor:
    """Family-anchor alignment plus the coarse orthogonality penalty."""
    return add(coarse_alignment(protos, anchors), gram_identity_penalty(leaf(anchors.coarse)))


def loss_replay(
    features: np.ndarray,
    labels: np.ndarray,
    head: ProjectionHead,
    clf: LinearClassifier,
) -> Tensor:
    """Cross-entropy on memory features re-encoded through the current head.

    Returns an exact zero on an empty batch (no history yet); the driver is
    responsible for never passing an empty batch once the bank is populated.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        return constant(0.0)
    return cross_entropy_mean(clf.forward(head.forward(features)), labels)


def mix_pseudo_unseen(
    z1: Tensor | np.ndarray,
    z2: Tensor | np.ndarray,
    beta: float,
    class_ids: tuple[int, int] | None = None,
) -> Tensor | np.ndarray:
    """Convex combination beta * z1 + (1 - beta) * z2 of two latents.

    The pair must come from distinct classes; pass ``class_ids`` to enforce
    that here, otherwise the sampler guarantees it.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if class_ids is not None and class_ids[0] == class_ids[1]:
        raise ValueError("pseudo-unseen mixing requires a cross-class pair")
    if isinstance(z1, Tensor) or isinstance(z2, Tensor):
        t1 = z1 if isinstance(z1, Tensor) else constant(z1)
        t2 = z2 if isinstance(z2, Tensor) else constant(z2)
        return add(scale_shift(t1, beta), scale_shift(t2, 1.0 - beta))
    return beta * np.asarray(z1, dtype=np.float64) + (1.0 - beta) * np.asarray(
        z2, dtype=np.float64
    )


def mix_latent_pairs(
    latents: Tensor, idx_a: np.ndarray, idx_b: np.ndarray, betas: np.ndarray
) -> Tensor:
    """Row-wise convex mixes of latent pairs, on the tape."""
    betas = np.asarray(betas, dtype=np.float64)[:, None]
    za = mul_array(take_rows(latents, idx_a), betas)
    zb = mul_array(take_rows(latents, idx_b), 1.0 - betas)
    return add(za, zb)


def loss_unseen(pseudo_logits: Tensor, tau: float) -> Tensor:
    """Mean hinge on the max-softmax confidence of pseudo-unseen samples."""
    n_classes = pseudo_logits.value.shape[1]
    if not (1.0 / n_classes < tau < 1.0):
        raise ValueError(f"tau must lie in (1/{n_classes}, 1), got {tau}")
    return max_softmax_hinge_mean(pseudo_logits, tau)


def _part(value: Tensor | float, name: str) -> Tensor:
    t = value if isinstance(value, Tensor) else constant(float(value))
    if not np.isfinite(t.value):
        raise FloatingPointError(f"loss term {name!r} is not finite: {t.value}")
    return t


def total_loss(
    cls: Tensor | float,
    l1: Tensor | float,
    l2: Tensor | float,
    lu: Tensor | float,
    replay: Tensor | float,
    weights: LossWeights,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the five terms plus a float breakdown for logging."""
    parts = {
        "cls": _part(cls, "cls"),
        "l1": _part(l1, "l1"),
        "l2": _part(l2, "l2"),
        "lu": _part(lu, "lu"),
        "replay": _part(replay, "replay"),
    }
    total = parts["cls"]
    for name, alpha in (
        ("l1", weights.alpha1),
        ("l2", weights.alpha2),
        ("lu", weights.alpha3),
        ("replay", weights.alpha4),
    ):
        total = add(total, scale_shift(parts[name], alpha))
    breakdown = LossBreakdown(
        cls=float(parts["cls"].value),
        l1=float(parts["l1"].value),
        l2=float(parts["l2"].value),
        lu=float(parts["lu"].value),
        replay=float(parts["replay"].value),
        total=float(total.value),
    )
    return total, breakdown
