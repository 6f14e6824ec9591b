"""Gaussian kernels, multi-kernel banks and (multi-domain) MMD.

Every function accepts numpy arrays, torch tensors or :class:`EmbeddingBatch`.
Torch inputs stay on the autograd graph and a tensor is returned; anything
else is evaluated in float64 and returned as numpy / Python floats.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DEFAULT_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelBank:
    """Bandwidths ``sigma_u`` and convex weights ``beta_u`` of a multi-kernel."""

    bandwidths: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        bw = tuple(float(b) for b in np.atleast_1d(self.bandwidths))
        w = tuple(float(b) for b in np.atleast_1d(self.weights))
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "weights", w)
        if len(bw) < 1 or len(bw) != len(w):
            raise KernelError(f"need m >= 1 matching bandwidths/weights, got {len(bw)}/{len(w)}")
        if any(not (b > 0 and math.isfinite(b)) for b in bw):
            raise KernelError(f"bandwidths must be positive and finite: {bw}")
        if any(x < 0 for x in w):
            raise KernelError(f"weights must be non-negative: {w}")
        if abs(sum(w) - 1.0) > 1e-12:
            raise KernelError(f"weights must sum to 1, got {sum(w)!r}")

    @property
    def m(self) -> int:
        return len(self.bandwidths)

    @classmethod
    def uniform(cls, bandwidths: Sequence[float]) -> "KernelBank":
        m = len(bandwidths)
        return cls(tuple(bandwidths), tuple([1.0 / m] * m))

    @classmethod
    def single(cls, sigma: float) -> "KernelBank":
        return cls((sigma,), (1.0,))


@dataclass
class EmbeddingBatch:
    """Embedding vectors ``[count, dim]`` produced for one subject."""

    vectors: object
    subject_id: int = -1

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2:
            raise KernelError(f"embedding batch must be 2-D [count, dim], got shape {tuple(v.shape)}")
        if v.shape[0] < 1:
            raise KernelError(f"subject {self.subject_id}: empty embedding batch")
        finite = torch.isfinite(v).all() if torch.is_tensor(v) else np.isfinite(v).all()
        if not bool(finite):
            raise KernelError(f"subject {self.subject_id}: non-finite embedding entries")


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, EmbeddingBatch):
        x = x.vectors
    if torch.is_tensor(x):
        return x, True
    t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 1:
        t = t[:, None]
    return t, False


def _finish(t: torch.Tensor, keep_tensor: bool):
    if keep_tensor:
        return t
    t = t.detach()
    return t.item() if t.ndim == 0 else t.numpy()


def sq_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise squared Euclidean distances, clamped at zero."""
    if a.shape[1] != b.shape[1]:
        raise KernelError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return d.clamp_min(0.0)


def _mk_from_sq(d: torch.Tensor, bank: KernelBank) -> torch.Tensor:
    k = torch.zeros_like(d)
    for sigma, beta in zip(bank.bandwidths, bank.weights):
        if beta:
            k = k + beta * torch.exp(-d / (2.0 * sigma * sigma))
    return k


def gaussian_kernel_matrix(A, B, sigma: float):
    """``K[i, j] = exp(-||a_i - b_j||^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise KernelError(f"sigma must be positive, got {sigma}")
    a, ta = _as_tensor(A)
    b, tb = _as_tensor(B)
    return _finish(torch.exp(-sq_distances(a, b) / (2.0 * sigma * sigma)), ta or tb)


def mk_kernel_matrix(A, B, bank: KernelBank):
    """Convex combination of Gaussian kernel matrices."""
    a, ta = _as_tensor(A)
    b, tb = _as_tensor(B)
    return _finish(_mk_from_sq(sq_distances(a, b), bank), ta or tb)


def mmd2(E_s, E_t, bank: KernelBank):
    """Biased (V-statistic) squared MMD between two embedding sets, clamped at 0."""
    s, ts = _as_tensor(E_s)
    t, tt = _as_tensor(E_t)
    if s.shape[0] == 0 or t.shape[0] == 0:
        raise KernelError("mmd2 needs two non-empty batches")
    if s.shape[1] != t.shape[1]:
        raise KernelError(f"dimension mismatch: {s.shape[1]} vs {t.shape[1]}")
    k_ss = _mk_from_sq(sq_distances(s, s), bank).mean()
    k_tt = _mk_from_sq(sq_distances(t, t), bank).mean()
    k_st = _mk_from_sq(sq_distances(s, t), bank).mean()
    return _finish((k_ss + k_tt - 2.0 * k_st).clamp_min(0.0), ts or tt)


def pairwise_mmd2(batches: Sequence, bank: KernelBank):
    """Matrix of squared MMD between every pair of embedding sets.

    One kernel matrix over the concatenation; block means give every term.
    """
    if len(batches) == 0:
        raise KernelError("need at least one embedding batch")
    tensors, flags = zip(*(_as_tensor(b) for b in batches))
    dims = {t.shape[1] for t in tensors}
    if len(dims) != 1:
        raise KernelError(f"embedding dims differ across batches: {sorted(dims)}")
    if any(t.shape[0] == 0 for t in tensors):
        raise KernelError("empty embedding batch")
    common = tensors[0].dtype
    for t in tensors[1:]:
        common = torch.promote_types(common, t.dtype)
    allv = torch.cat([t.to(common) for t in tensors])
    K = _mk_from_sq(sq_distances(allv, allv), bank)
    sizes = [t.shape[0] for t in tensors]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    n = len(sizes)
    rows = []
    for i in range(n):
        row_block = K[bounds[i]:bounds[i + 1]]
        rows.append(torch.stack([row_block[:, bounds[j]:bounds[j + 1]].mean() for j in range(n)]))
    means = torch.stack(rows)
    diag = torch.diagonal(means)
    out = (diag[:, None] + diag[None, :] - 2.0 * means).clamp_min(0.0)
    # exact zeros on the diagonal, regardless of rounding
    out = out * (1.0 - torch.eye(n, dtype=out.dtype))
    return _finish(out, any(flags))


def multi_domain_mmd(batches: Sequence, bank: KernelBank):
    """Average squared MMD over all ordered subject pairs, diagonal included.

    Equals ``2 / K^2 * sum_{i<j} MMD^2(E_i, E_j)`` for ``K`` subjects.
    """
    P = pairwise_mmd2(batches, bank)
    n = P.shape[0]
    total = P.sum() / (n * n)
    if torch.is_tensor(P):
        return total
    return float(total)


def median_heuristic_bank(sample, factors: Sequence[float] = DEFAULT_FACTORS) -> KernelBank:
    """Uniform-weight bank whose bandwidths scale the median pairwise distance."""
    x, _ = _as_tensor(sample)
    x = x.detach().to(torch.float64)
    if x.shape[0] < 2:
        raise KernelError("median heuristic needs at least 2 vectors")
    d = sq_distances(x, x).sqrt()
    iu = torch.triu_indices(x.shape[0], x.shape[0], offset=1)
    dists = d[iu[0], iu[1]]
    base = float(np.median(dists.numpy()))
    if not base > 0 or not math.isfinite(base):
        logger.warning("median pairwise distance is %s; falling back to sigma_base = 1", base)
        base = 1.0
    return KernelBank.uniform([f * base for f in factors])
