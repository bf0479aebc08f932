"""Finite-difference checks of every loss term and the total objective (float64)."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, finite_diff_check, matmul, precision
from .losses import (
    LossWeights,
    classification_loss,
    feature_distillation,
    ipf_loss,
    logit_distillation,
    pcl,
    total_loss,
)

TOLERANCE = 1e-4


def run_suite(seed: int = 0, batch: int = 6, dim: int = 12, n_old: int = 3, n_new: int = 2) -> dict[str, float]:
    """Max relative error per loss on a small random instance.

    A linear "encoder" ``z = x @ E`` and a linear classifier ``W, b`` stand in
    for the network so gradients reach real parameters through each term.
    """
    rng = np.random.default_rng(seed)
    width = n_old + n_new
    with precision("float64"):
        x = Tensor(rng.normal(size=(batch, dim)))
        enc = Tensor(rng.normal(size=(dim, dim)) / np.sqrt(dim), requires_grad=True)
        w = Tensor(rng.normal(size=(dim, width)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=width) * 0.1, requires_grad=True)
        labels = rng.integers(n_old, width, size=batch)
        labels[:2] = [n_old, n_old + 1 if n_new > 1 else n_old]
        protos = rng.normal(size=(n_old, dim))
        proto_ids = np.arange(n_old)
        # offsets keep every |old - new| well away from the L1 kink
        old_feat = rng.normal(size=(batch, dim)) + np.sign(rng.normal(size=(batch, dim))) * 3.0
        old_logits = rng.normal(size=(batch, n_old))
        pseudo = rng.normal(size=(batch, dim))
        pseudo_labels = rng.integers(0, n_old, size=batch)

        def classify(z):
            return matmul(z, w) + b

        def feats():
            return matmul(x, enc)

        terms = {
            "bce": lambda: classification_loss(classify(feats()), labels),
            "pcl": lambda: pcl(feats(), labels, protos, proto_ids, tau=0.5),
            "ld": lambda: logit_distillation(old_logits, classify(feats())[:, :n_old]),
            "fd": lambda: feature_distillation(old_feat, feats()),
            "ipf": lambda: ipf_loss(pseudo, pseudo_labels, classify, n_old),
        }
        weights = LossWeights.for_task(n_new, width)

        def total():
            z = feats()
            logits = classify(z)
            parts = {
                "bce": classification_loss(logits, labels),
                "ld": logit_distillation(old_logits, logits[:, :n_old]),
                "fd": feature_distillation(old_feat, z),
                "ipf": ipf_loss(pseudo, pseudo_labels, classify, n_old),
                "pcl": pcl(z, labels, protos, proto_ids, tau=0.5),
            }
            return total_loss(parts, weights)

        terms["total"] = total
        return {name: finite_diff_check(fn, [enc, w, b]) for name, fn in terms.items()}
