"""Expansion and lossless absorption of ex-fusion branches."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff.tensor import ShapeError
from .model import SITES, IncrementalViT, SABlock


def lambda_for(num_new_classes: int) -> float:
    """Branch scale for a task that adds ``num_new_classes`` classes."""
    if num_new_classes < 1:
        raise ValueError("a task must add at least one class")
    return num_new_classes / 10


@dataclass
class AbsorptionPlan:
    task: int
    scale: float
    sites: list[tuple[int, str, Tensor]] = field(default_factory=list)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("absorption scale must be positive")


def freeze_backbone(model: IncrementalViT, task: int) -> IncrementalViT:
    if task < 1:
        raise ValueError("the backbone is trained freely on the base task; freeze from task 1 on")
    for t in model.backbone_params().values():
        t.requires_grad = False
    return model


def unfreeze_backbone(model: IncrementalViT) -> IncrementalViT:
    for t in model.backbone_params().values():
        t.requires_grad = True
    return model


def expand(model: IncrementalViT, task: int, num_new_classes: int) -> AbsorptionPlan:
    """Attach zero-initialized trainable branches to every incremental site."""
    scale = lambda_for(num_new_classes)
    plan = AbsorptionPlan(task, scale)
    for i in model.incremental_blocks():
        blk = model.blocks[i]
        for site in SITES:
            host = blk.params[SABlock.SITE_WEIGHT[site]]
            psi = Tensor(np.zeros(host.shape, dtype=host.dtype), requires_grad=True, dtype=host.dtype)
            blk.attach(site, psi)
            plan.sites.append((i, site, psi))
    model.exfusion_scale = scale
    return plan


def absorb_linear(weight: np.ndarray, psi: np.ndarray, scale: float) -> np.ndarray:
    """``weight + scale * psi`` evaluated in float64, cast back to ``weight``'s dtype."""
    weight, psi = np.asarray(weight), np.asarray(psi)
    if weight.shape != psi.shape:
        raise ShapeError(f"cannot absorb branch {psi.shape} into weight {weight.shape}")
    fused = weight.astype(np.float64) + np.float64(scale) * psi.astype(np.float64)
    return fused.astype(weight.dtype)


def absorb_mhsa(block: SABlock, scale: float) -> SABlock:
    """Fold the projection branch of ``block`` into its projection weight.

    Q/K/V weights are left untouched; a branch anywhere else in the
    attention module is rejected.
    """
    unknown = set(block.exfusion) - set(SITES)
    if unknown:
        raise ValueError(f"branch attached to unsupported attention site(s): {sorted(unknown)}")
    psi = block.exfusion.pop("proj", None)
    if psi is None:
        raise ValueError("no branch attached to the projection layer")
    w = block.params["attn.proj.weight"]
    w.data = absorb_linear(w.data, psi.data, scale)
    return block


def zero_pad_kernel(psi: np.ndarray, size: int = 3) -> np.ndarray:
    """Embed a (out, in, 1, 1) kernel at the center of a (out, in, size, size) kernel."""
    if psi.ndim != 4 or psi.shape[2:] != (1, 1):
        raise ShapeError(f"expected a 1x1 kernel stack, got {psi.shape}")
    out = np.zeros(psi.shape[:2] + (size, size), dtype=psi.dtype)
    out[:, :, size // 2, size // 2] = psi[:, :, 0, 0]
    return out


def absorb_conv(w3: np.ndarray, psi1: np.ndarray, scale: float) -> np.ndarray:
    """Fold a 1x1 branch into a 3x3 stride-1 pad-1 convolution kernel."""
    if w3.ndim != 4 or w3.shape[2:] != (3, 3):
        raise ShapeError(f"expected a 3x3 kernel stack, got {w3.shape}")
    if psi1.shape[:2] != w3.shape[:2]:
        raise ShapeError(f"channel mismatch: {psi1.shape[:2]} vs {w3.shape[:2]}")
    return absorb_linear(w3, zero_pad_kernel(psi1), scale)


def conv2d(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 cross-correlation. x: (N, C_in, H, W); w: (C_out, C_in, k, k)."""
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h = xp.shape[2] - k + 1
    wd = xp.shape[3] - k + 1
    out = np.zeros((x.shape[0], w.shape[0], h, wd), dtype=np.result_type(x, w))
    for di in range(k):
        for dj in range(k):
            out += np.einsum("nchw,oc->nohw", xp[:, :, di : di + h, dj : dj + wd], w[:, :, di, dj])
    return out


def plan_from_model(model: IncrementalViT, task: int) -> AbsorptionPlan:
    """Plan covering every branch currently attached to ``model``."""
    plan = AbsorptionPlan(task, model.exfusion_scale)
    for i, blk in enumerate(model.blocks):
        for site in SITES:
            if site in blk.exfusion:
                plan.sites.append((i, site, blk.exfusion[site]))
    return plan


def absorb_all(model: IncrementalViT, plan: AbsorptionPlan) -> IncrementalViT:
    """Fold every branch in ``plan`` into its host and empty the branch set."""
    attached = {(i, s) for i, b in enumerate(model.blocks) for s in b.exfusion}
    planned = {(i, s) for i, s, _ in plan.sites}
    if attached != planned:
        raise ValueError(f"plan/model mismatch: planned={sorted(planned)} attached={sorted(attached)}")
    for i, site, psi in plan.sites:
        blk = model.blocks[i]
        if blk.exfusion[site] is not psi:
            raise ValueError(f"plan branch at block {i}/{site} is not the attached one")
    for i in sorted({i for i, _, _ in plan.sites}):
        blk = model.blocks[i]
        if "proj" in blk.exfusion:
            absorb_mhsa(blk, plan.scale)
        for site in ("fc1", "fc2"):
            psi = blk.exfusion.pop(site, None)
            if psi is not None:
                w = blk.params[SABlock.SITE_WEIGHT[site]]
                w.data = absorb_linear(w.data, psi.data, plan.scale)
    model.exfusion_scale = 0.0
    return model


def verify_equivalence(expanded: IncrementalViT, absorbed: IncrementalViT, images: np.ndarray) -> float:
    """Max absolute logit difference between two models on ``images``."""
    with no_grad():
        _, la = expanded(images)
        _, lb = absorbed(images)
    if la.shape != lb.shape:
        raise ShapeError(f"logit shapes differ: {la.shape} vs {lb.shape}")
    return float(np.max(np.abs(la.data.astype(np.float64) - lb.data.astype(np.float64))))
