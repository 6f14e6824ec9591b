"""Reconstruction, classification, subject and MMD losses and their weighted objective."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

from .kernels import KernelBank, multi_domain_mmd

logger = logging.getLogger(__name__)


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_cls: float = 5.0
    lambda_rec: float = 5.0
    lambda_mmd: float = 1.0
    lambda_d: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise LossError(f"{k} must be >= 0, got {v}")


@dataclass
class LossBreakdown:
    rec: float
    cls: float
    dom: float
    mmd: float
    objective: float


def _reduce(per_item: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_item.mean()
    if reduction == "sum":
        return per_item.sum()
    raise LossError(f"unknown reduction {reduction!r}")


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Mean squared error; ``reduction='sum'`` gives the plain squared L2 norm."""
    if x.shape != x_hat.shape:
        raise LossError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    sq = (x_hat - x) ** 2
    return sq.mean() if reduction == "mean" else _reduce(sq.reshape(-1), reduction)


def _cross_entropy(logits: torch.Tensor, target: torch.Tensor, what: str, reduction: str) -> torch.Tensor:
    target = torch.as_tensor(target, dtype=torch.long)
    n_out = logits.shape[-1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_out):
        raise LossError(f"{what} label out of range [0, {n_out})")
    return _reduce(-torch.log_softmax(logits, dim=-1).gather(1, target[:, None]).squeeze(1), reduction)


def class_loss(logits: torch.Tensor, y, reduction: str = "mean") -> torch.Tensor:
    return _cross_entropy(logits, y, "activity", reduction)


def domain_loss(subj_logits: torch.Tensor, s, reduction: str = "mean") -> torch.Tensor:
    return _cross_entropy(subj_logits, s, "subject", reduction)


def uniform_domain_loss(subj_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against the uniform subject distribution (optional surrogate for Q)."""
    return -torch.log_softmax(subj_logits, dim=-1).mean()


def mmd_loss(embeddings_by_subject: Mapping[int, Optional[torch.Tensor]], bank: KernelBank) -> torch.Tensor:
    """Multi-domain MMD over per-subject pooled embeddings; absent subjects are skipped."""
    present, skipped = [], []
    for sid, e in embeddings_by_subject.items():
        if e is None or e.shape[0] == 0:
            skipped.append(sid)
        else:
            present.append(e)
    if skipped:
        logger.warning("mmd_loss: no windows for subject(s) %s in this batch; skipped", skipped)
    if not present:
        raise LossError("mmd_loss: no subject has any windows")
    return multi_domain_mmd(present, bank)


def split_by_subject(pooled: torch.Tensor, s: torch.Tensor) -> dict[int, torch.Tensor]:
    return {int(k): pooled[s == k] for k in torch.unique(s).tolist()}


def combined_objective(
    parts: Mapping[str, float | torch.Tensor] | LossBreakdown, w: LossWeights
):
    """Weighted objective ``cls*l_cls + rec*l_rec + mmd*l_mmd - d*l_d``.

    With tensor parts the objective is returned as a tensor (for backprop);
    with plain numbers a :class:`LossBreakdown` is returned.
    """
    if isinstance(parts, LossBreakdown):
        parts = asdict(parts)
    vals = {k: parts[k] for k in ("rec", "cls", "dom", "mmd")}
    for k, v in vals.items():
        f = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(f):
            raise LossError(f"loss term {k!r} is not finite ({f})")
    obj = (w.lambda_cls * vals["cls"] + w.lambda_rec * vals["rec"]
           + w.lambda_mmd * vals["mmd"] - w.lambda_d * vals["dom"])
    if any(torch.is_tensor(v) for v in vals.values()):
        return obj
    return LossBreakdown(rec=float(vals["rec"]), cls=float(vals["cls"]), dom=float(vals["dom"]),
                         mmd=float(vals["mmd"]), objective=float(obj))


def breakdown(rec, cls, dom, mmd, w: LossWeights) -> LossBreakdown:
    """Detach tensor parts and build a :class:`LossBreakdown` for logging."""
    f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)  # noqa: E731
    return combined_objective({"rec": f(rec), "cls": f(cls), "dom": f(dom), "mmd": f(mmd)}, w)
