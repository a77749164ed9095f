"""Continual open-set attribution of generated images to their source models.

The engine consumes fixed feature vectors from a frozen image encoder and
learns, over a temporally ordered stream of tasks, to attribute each feature
to the generative model that produced it.  A two-level taxonomy (families of
models) shapes the latent space through learnable orthogonal anchors, a
budgeted memory bank replays old-class features, convex mixes of latents act
as pseudo-unseen samples, and a max-softmax threshold rejects inputs from
generators never seen in training.
"""

from modelattrib.diffcore import (
    Adam,
    GradCheckReport,
    LinearClassifier,
    Parameter,
    ProjectionHead,
    Tensor,
    adam_step,
    grad_check,
)
from modelattrib.hierarchy import AnchorSet, PrototypeSet, Taxonomy
from modelattrib.losses import LossBreakdown, LossWeights
from modelattrib.memory_bank import MemoryBank
from modelattrib.protocol import MetricRecord, ProtocolState, TaskStream, TrainConfig

__all__ = [
    "Adam",
    "AnchorSet",
    "GradCheckReport",
    "LinearClassifier",
    "LossBreakdown",
    "LossWeights",
    "MemoryBank",
    "MetricRecord",
    "Parameter",
    "ProjectionHead",
    "PrototypeSet",
    "ProtocolState",
    "TaskStream",
    "Taxonomy",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "grad_check",
]
