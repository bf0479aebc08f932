"""Training objective: BCE, prototype contrastive loss, distillation and pseudo-feature loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, l1_distance, l2_normalize, log_softmax, masked_log_softmax, matmul
from .autodiff.ops import bce_with_logits
from .autodiff.tensor import ShapeError, get_dtype

KD_TEMPERATURE = 2.0


@dataclass
class LossWeights:
    alpha: float
    mu: float
    delta: float = 0.5
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def for_task(cls, num_new: int, num_incremental_seen: int, tau: float = 0.1, delta: float = 0.5):
        """Schedule for task t >= 1.

        ``num_new`` is |C_t|; ``num_incremental_seen`` is the number of classes
        seen up to and including task t.
        """
        if num_new < 1 or num_incremental_seen < num_new:
            raise ValueError("need 1 <= num_new <= num_incremental_seen")
        return cls(
            alpha=num_incremental_seen / num_new,
            mu=num_incremental_seen / 20,
            delta=delta,
            tau=tau,
        )


def one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ValueError(f"label outside the {width} seen classes")
    out = np.zeros((labels.shape[0], width), dtype=get_dtype())
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of every logit against one-hot targets."""
    return bce_with_logits(logits, one_hot(labels, logits.shape[-1]).astype(logits.dtype))


def _supcon_sum(sim: Tensor, labels: np.ndarray) -> Tensor:
    n = sim.shape[0]
    contrast = ~np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & contrast
    counts = positives.sum(axis=1)
    weights = np.where(counts[:, None] > 0, positives / np.maximum(counts, 1)[:, None], 0.0)
    logp = masked_log_softmax(sim, contrast)
    return -(logp * Tensor(weights, dtype=sim.dtype)).sum()


def pcl(
    features: Tensor,
    labels: np.ndarray,
    prototypes: np.ndarray | None,
    prototype_labels: np.ndarray | None,
    tau: float = 0.1,
    normalize: bool = True,
    reduction: str = "mean",
) -> Tensor:
    """Prototype contrastive loss.

    First term: supervised contrastive loss with every batch feature as an
    anchor, contrasted against all other batch features. Second term: the
    same with prototypes joined to both the anchor and contrast sets.
    Positives share a label; anchors without positives contribute zero.
    Prototypes are constants. With ``reduction="mean"`` each term is
    divided by its anchor count.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = features.shape[0]
    if n < 2:
        raise ShapeError("contrastive loss needs at least two samples")
    labels = np.asarray(labels, dtype=np.int64)
    zn = l2_normalize(features) if normalize else features
    inv_tau = 1.0 / tau
    term_a = _supcon_sum(matmul(zn, zn.swapaxes(0, 1)) * inv_tau, labels)

    if prototypes is not None and len(prototypes):
        p = np.asarray(prototypes, dtype=features.dtype)
        if normalize:
            p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
        joint = concat([zn, Tensor(p, dtype=features.dtype)], axis=0)
        joint_labels = np.concatenate([labels, np.asarray(prototype_labels, dtype=np.int64)])
    else:
        joint, joint_labels = zn, labels
    term_b = _supcon_sum(matmul(joint, joint.swapaxes(0, 1)) * inv_tau, joint_labels)

    if reduction == "mean":
        return term_a * (1.0 / n) + term_b * (1.0 / joint.shape[0])
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return term_a + term_b


def logit_distillation(old_logits: np.ndarray, new_logits: Tensor, temperature: float = KD_TEMPERATURE) -> Tensor:
    """T^2-scaled KL(old || new) of temperature-softened distributions, batch mean."""
    old = np.asarray(old_logits, dtype=new_logits.dtype)
    if old.shape != new_logits.shape:
        raise ShapeError(f"old logits {old.shape} vs new {new_logits.shape}")
    shifted = old / temperature
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    log_q = log_softmax(new_logits * (1.0 / temperature), axis=-1)
    n = old.shape[0]
    entropy_term = float((p * log_p).sum())
    cross = (log_q * Tensor(p, dtype=new_logits.dtype)).sum()
    return (cross * -1.0 + entropy_term) * (temperature**2 / n)


def feature_distillation(old_features: np.ndarray, new_features: Tensor) -> Tensor:
    return l1_distance(new_features, Tensor(np.asarray(old_features), dtype=new_features.dtype))


def kd_losses(old_features, old_logits, new_features: Tensor, new_logits: Tensor, temperature=KD_TEMPERATURE):
    """(logit distillation, feature distillation); logits restricted to old classes by the caller."""
    return (
        logit_distillation(old_logits, new_logits, temperature),
        feature_distillation(old_features, new_features),
    )


def ipf_loss(pseudo_features: np.ndarray, pseudo_labels: np.ndarray, classify, num_old_classes: int) -> Tensor:
    """Classification loss of the classifier on detached pseudo-features of old classes."""
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    if len(pseudo_labels) == 0:
        return Tensor(0.0)
    if pseudo_labels.max() >= num_old_classes or pseudo_labels.min() < 0:
        raise ValueError("pseudo-feature labels must be old classes")
    logits = classify(Tensor(np.asarray(pseudo_features), dtype=get_dtype()))
    return classification_loss(logits, pseudo_labels)


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """bce + alpha * (ld + fd) + mu * ipf + delta * pcl; absent parts count as zero."""
    out = parts["bce"]
    if "ld" in parts:
        out = out + parts["ld"] * weights.alpha
    if "fd" in parts:
        out = out + parts["fd"] * weights.alpha
    if "ipf" in parts:
        out = out + parts["ipf"] * weights.mu
    if "pcl" in parts:
        out = out + parts["pcl"] * weights.delta
    return out
