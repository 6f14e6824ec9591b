"""Three-stage adversarial training with per-stage freezing.

Stage 1 pretrains the encoder-decoder on reconstruction. Stage 2 adds the
activity classifier and warms up the subject discriminator. Stage 3 freezes
the reconstructor and trains the feature extractor against the
discriminator with the multi-subject MMD regularizer, optionally with
unlabeled windows of a held-out target subject.
"""

from __future__ import annotations

import base64
import csv
import dataclasses
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import nets as nets_mod
from .datapipe.types import WindowedDataset
from .kernels import DEFAULT_FACTORS, median_heuristic_bank
from .losses import (
    LossWeights,
    breakdown,
    class_loss,
    domain_loss,
    mmd_loss,
    recon_loss,
    split_by_subject,
    uniform_domain_loss,
)
from .nets import ModelConfig, Network, pad_windows, padded_length, state_hash

logger = logging.getLogger(__name__)

VARIANTS = ("proposed", "no_adv", "only_supervised", "no_mmd", "one_stage")
DEFAULT_BATCH_SIZES = {"opportunity": 500, "pamap2": 200, "mocapaci": 128, "mhealth": 200, "synthetic": 64}
HISTORY_FIELDS = ("iteration", "stage", "rec", "cls", "dom", "mmd", "objective")


class TrainingError(RuntimeError):
    pass


class FreezeViolation(TrainingError):
    pass


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr_c: float = 5e-5
    lr_q: float = 5e-5
    lr_p: float = 1e-4
    lr_d: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 200
    # explicit iteration counts win; otherwise epochs * ceil(n / batch_size)
    stage1_iters: Optional[int] = None
    stage2_iters: Optional[int] = None
    stage3_iters: Optional[int] = None
    stage1_epochs: float = 30
    stage2_epochs: float = 60
    stage3_epochs: float = 60
    seed: int = 0
    variant: str = "proposed"
    reduction: str = "mean"
    adv_surrogate: bool = False
    kernel_factors: tuple = DEFAULT_FACTORS
    freeze_check_every: int = 100
    track_d_step: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.kernel_factors = tuple(float(f) for f in self.kernel_factors)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for k in ("lr_c", "lr_q", "lr_p", "lr_d", "adam_eps"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be > 0")
        for k in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, k) < 1:
                raise ValueError(f"{k} must lie in (0, 1)")
        for k in ("stage1_iters", "stage2_iters", "stage3_iters"):
            v = getattr(self, k)
            if v is not None and v < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_factors"] = list(self.kernel_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config fields: {sorted(extra)}")
        return cls(**d)

    def effective_weights(self) -> LossWeights:
        if self.variant == "no_mmd":
            return dataclasses.replace(self.weights, lambda_mmd=0.0)
        if self.variant == "no_adv":
            return dataclasses.replace(self.weights, lambda_d=0.0)
        return self.weights


# --- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(handle: torch.nn.Module, grads: dict, lr: float, beta1: float, beta2: float,
              eps: float = 1e-8, state: Optional[AdamState] = None) -> AdamState:
    """One bias-corrected Adam update of ``handle``'s parameters, in place.

    ``grads`` maps parameter names to gradients; parameters without a
    gradient (``None`` or absent) are left alone.
    """
    state = state if state is not None else AdamState()
    params = dict(handle.named_parameters())
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    with torch.no_grad():
        for name, g in grads.items():
            if g is None:
                continue
            p = params[name]
            m = state.m.get(name)
            if m is None:
                m = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            state.m[name] = m
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# --- batch sampling ----------------------------------------------------------

class StratifiedSampler:
    """Epoch-wise sampling without replacement, stratified by subject.

    Every epoch shuffles each subject's windows and deals them across
    ``ceil(n / batch_size)`` batches, so each window appears exactly once per
    epoch and every batch carries a proportional share of every subject.
    """

    def __init__(self, groups: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.groups = np.asarray(groups)
        if len(self.groups) == 0:
            raise ValueError("cannot sample from an empty set")
        self.batch_size = int(batch_size)
        self.rng = rng
        self.n_batches = max(1, math.ceil(len(self.groups) / self.batch_size))
        self._members = [np.flatnonzero(self.groups == g) for g in np.unique(self.groups)]
        self._epoch: list[np.ndarray] = []
        self._pos = 0
        self._epoch_rng_state = None

    def _new_epoch(self) -> None:
        self._epoch_rng_state = self.rng.bit_generator.state
        chunks = [np.array_split(self.rng.permutation(m), self.n_batches) for m in self._members]
        self._epoch = [np.concatenate([c[b] for c in chunks]) for b in range(self.n_batches)]
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos >= len(self._epoch):
            self._new_epoch()
        b = self._epoch[self._pos]
        self._pos += 1
        return b

    def state_dict(self) -> dict:
        return {"epoch_rng_state": self._epoch_rng_state, "pos": self._pos,
                "rng_state": self.rng.bit_generator.state}

    def load_state_dict(self, d: dict) -> None:
        if d["epoch_rng_state"] is not None:
            self.rng.bit_generator.state = d["epoch_rng_state"]
            self._new_epoch()
            self._pos = d["pos"]
        self.rng.bit_generator.state = d["rng_state"]


# --- training state ----------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    model_cfg: ModelConfig
    nets: dict
    optim: dict
    stages: list
    subject_index: dict
    target_class: Optional[int]
    n_w_orig: int
    stage_idx: int = 0
    iteration: int = 0
    global_iter: int = 0
    history: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    events: list = field(default_factory=list)
    sampler: Optional[StratifiedSampler] = None
    target_sampler: Optional[StratifiedSampler] = None

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def current_stage(self) -> Optional[str]:
        return self.stages[self.stage_idx][0] if self.stage_idx < len(self.stages) else None

    @property
    def finished(self) -> bool:
        return self.stage_idx >= len(self.stages)

    def hashes(self) -> dict:
        return {r: state_hash(n) for r, n in self.nets.items()}


@dataclass
class _Data:
    X: torch.Tensor
    Y: torch.Tensor
    S: torch.Tensor  # discriminator class indices


def resolve_model_config(arch, dataset: WindowedDataset, n_subjects_out: int) -> ModelConfig:
    """Fill data-dependent sizes into an architecture spec (dict, ModelConfig or None)."""
    if isinstance(arch, ModelConfig):
        arch = arch.to_dict()
    arch = dict(arch or {})
    for k in ("n_c", "n_w", "n_a", "n_subjects_out"):
        arch.pop(k, None)
    return ModelConfig(n_c=dataset.n_c, n_w=padded_length(dataset.n_w), n_a=dataset.n_a,
                       n_subjects_out=max(1, n_subjects_out), **arch)


def _stage_plan(cfg: TrainConfig, n: int) -> list:
    per_epoch = math.ceil(n / cfg.batch_size)

    def iters(explicit, epochs):
        return int(explicit) if explicit is not None else int(round(epochs * per_epoch))

    s1 = iters(cfg.stage1_iters, cfg.stage1_epochs)
    s2 = iters(cfg.stage2_iters, cfg.stage2_epochs)
    s3 = iters(cfg.stage3_iters, cfg.stage3_epochs)
    if cfg.variant == "no_adv":
        return [["stage1", s1], ["stage2", s2]]
    if cfg.variant == "one_stage":
        return [["joint", s1 + s2 + s3]]
    return [["stage1", s1], ["stage2", s2], ["stage3", s3]]


FROZEN = {"stage1": ("C", "D"), "stage2": (), "stage3": ("P",), "joint": ()}
LEARNING_RATES = {"Q": "lr_q", "P": "lr_p", "C": "lr_c", "D": "lr_d"}


def _to_tensor(ds: WindowedDataset, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(pad_windows(ds.X)).to(dtype)


def init_state(cfg: TrainConfig, dataset: WindowedDataset, target: Optional[WindowedDataset] = None,
               model_cfg=None) -> TrainState:
    """Seed everything, build the networks the variant needs, and plan the stages."""
    if dataset.n == 0:
        raise TrainingError("training set is empty")
    variant = cfg.variant
    has_target = target is not None and target.n > 0
    if variant in ("proposed", "no_mmd", "one_stage") and not has_target:
        if variant == "proposed":
            logger.warning("no target windows; running 'proposed' as 'only_supervised'")
            cfg = dataclasses.replace(cfg, variant="only_supervised")
            variant = cfg.variant
    use_target = has_target and variant in ("proposed", "no_mmd", "one_stage")
    if use_target:
        overlap = set(target.subject_ids) & set(dataset.subject_ids)
        if overlap:
            raise TrainingError(f"target subjects {sorted(overlap)} also appear in the training set")

    subject_index = {s: i for i, s in enumerate(dataset.subject_ids)}
    target_class = len(subject_index) if use_target else None
    n_out = len(subject_index) + (1 if use_target else 0)

    torch.manual_seed(cfg.seed)
    mcfg = resolve_model_config(model_cfg, dataset, n_out)
    roles = ["Q", "P", "C"] + ([] if variant == "no_adv" else ["D"])
    dtype = cfg.torch_dtype
    built = {r: nets_mod.BUILDERS[r](mcfg).to(dtype) for r in roles}
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(
        cfg=cfg, model_cfg=mcfg, nets=built, optim={r: AdamState() for r in roles},
        stages=_stage_plan(cfg, dataset.n), subject_index=subject_index, target_class=target_class,
        n_w_orig=dataset.n_w,
    )
    state.sampler = StratifiedSampler(dataset.S, cfg.batch_size, rng)
    if use_target:
        state.target_sampler = StratifiedSampler(np.zeros(target.n, dtype=int), cfg.batch_size,
                                                 np.random.default_rng([cfg.seed, 1]))
    if variant == "one_stage":
        state.events.append({"iteration": 0, "event": "stage_marker", "stage": "joint"})
    return state


def _prepare(state: TrainState, dataset: WindowedDataset, target: Optional[WindowedDataset]):
    dtype = state.cfg.torch_dtype
    src = _Data(_to_tensor(dataset, dtype), torch.from_numpy(dataset.Y),
                torch.tensor([state.subject_index[int(s)] for s in dataset.S], dtype=torch.long))
    tgt = None
    if state.target_sampler is not None and target is not None:
        tgt = _Data(_to_tensor(target, dtype), torch.from_numpy(target.Y),
                    torch.full((target.n,), state.target_class, dtype=torch.long))
    return src, tgt


# --- one iteration of each stage -----------------------------------------------

def _grads(loss: torch.Tensor, net: Network, retain: bool = True) -> dict:
    names, params = zip(*net.named_parameters())
    g = torch.autograd.grad(loss, params, retain_graph=retain, allow_unused=True)
    return dict(zip(names, g))


def _update(state: TrainState, role: str, grads: dict) -> None:
    c = state.cfg
    try:
        adam_step(state.nets[role], grads, getattr(c, LEARNING_RATES[role]), c.adam_beta1,
                  c.adam_beta2, c.adam_eps, state.optim[role])
    except TrainingError as exc:
        raise TrainingError(f"iteration {state.global_iter}, network {role}: {exc}") from exc
    for name, p in state.nets[role].named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingError(
                f"iteration {state.global_iter}: parameter {role}.{name} became non-finite"
            )


def _recon(state: TrainState, P: Network, emb, x: torch.Tensor) -> torch.Tensor:
    n = state.n_w_orig
    return recon_loss(x[..., :n], P(emb)[..., :n], state.cfg.reduction)


def _mmd_term(state: TrainState, pooled: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    bank = median_heuristic_bank(pooled.detach(), state.cfg.kernel_factors)
    return mmd_loss(split_by_subject(pooled, s), bank)


def _probe_d_loss(D: Network, feats: torch.Tensor, s: torch.Tensor, rng_state: torch.Tensor) -> float:
    """D's training-mode loss on a batch under the dropout masks drawn from ``rng_state``.

    Batch-norm running statistics and the global RNG are restored afterwards.
    """
    buffers = {k: v.clone() for k, v in D.named_buffers()}
    outer = torch.get_rng_state()
    torch.set_rng_state(rng_state)
    with torch.no_grad():
        val = float(domain_loss(D(feats), s))
    torch.set_rng_state(outer)
    for k, v in D.named_buffers():
        v.copy_(buffers[k])
    return val


def _d_step(state: TrainState, feats: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    D = state.nets["D"]
    track = state.cfg.track_d_step
    rng = torch.get_rng_state() if track else None
    before = _probe_d_loss(D, feats, s, rng) if track else None
    loss = domain_loss(D(feats), s, state.cfg.reduction)
    _update(state, "D", _grads(loss, D, retain=False))
    if track:
        state.diagnostics.append({"iteration": state.global_iter, "stage": state.current_stage,
                                  "d_loss_before": before, "d_loss_after": _probe_d_loss(D, feats, s, rng)})
    return loss.detach()


def _stage1_iteration(state: TrainState, src: _Data, tgt) -> dict:
    Q, P = state.nets["Q"], state.nets["P"]
    Q.train(), P.train()
    x = src.X[state.sampler.next_batch()]
    rec = _recon(state, P, Q(x), x)
    gp, gq = _grads(rec, P), _grads(rec, Q, retain=False)
    _update(state, "P", gp)
    _update(state, "Q", gq)
    return {"rec": rec, "cls": 0.0, "dom": 0.0, "mmd": 0.0}


def _stage2_iteration(state: TrainState, src: _Data, tgt) -> dict:
    Q, P, C = state.nets["Q"], state.nets["P"], state.nets["C"]
    D = state.nets.get("D")
    w = state.cfg.weights
    for n in state.nets.values():
        n.train()
    idx = state.sampler.next_batch()
    x, y, s = src.X[idx], src.Y[idx], src.S[idx]
    emb = Q(x)
    dom = _d_step(state, emb.features.detach(), s) if D is not None else 0.0
    rec = _recon(state, P, emb, x)
    cls = class_loss(C(emb), y, state.cfg.reduction)
    step2 = w.lambda_cls * cls + w.lambda_rec * rec
    gp, gc, gq = _grads(step2, P), _grads(step2, C), _grads(step2, Q, retain=False)
    _update(state, "P", gp)
    _update(state, "C", gc)
    _update(state, "Q", gq)
    return {"rec": rec, "cls": cls, "dom": dom, "mmd": 0.0}


def _adversarial_term(state: TrainState, subj_logits: torch.Tensor, s: torch.Tensor):
    """Q's adversarial contribution and the plain domain loss for logging."""
    dom = domain_loss(subj_logits, s, state.cfg.reduction)
    if state.cfg.adv_surrogate:
        return uniform_domain_loss(subj_logits), dom
    return -dom, dom


def _stage3_iteration(state: TrainState, src: _Data, tgt: Optional[_Data], train_p: bool = False) -> dict:
    Q, P, C, D = (state.nets[r] for r in ("Q", "P", "C", "D"))
    w = state.cfg.effective_weights()
    use_mmd = state.cfg.variant != "no_mmd" and w.lambda_mmd > 0
    Q.train(), C.train(), D.train()
    P.train(train_p)

    # (a) labeled source batch
    idx = state.sampler.next_batch()
    x, y, s = src.X[idx], src.Y[idx], src.S[idx]
    emb = Q(x)
    _d_step(state, emb.features.detach(), s)
    adv, dom = _adversarial_term(state, D(emb), s)
    cls = class_loss(C(emb), y, state.cfg.reduction)
    rec = _recon(state, P, emb, x)
    mmd = _mmd_term(state, emb.pooled, s) if use_mmd else torch.zeros((), dtype=x.dtype)
    obj = w.lambda_cls * cls + w.lambda_rec * rec + w.lambda_mmd * mmd + w.lambda_d * adv
    grads = {"C": _grads(obj, C), "Q": _grads(obj, Q, retain=train_p)}
    if train_p:
        grads["P"] = _grads(obj, P, retain=False)
    for role, g in grads.items():
        _update(state, role, g)
    out = {"rec": rec, "cls": cls, "dom": dom, "mmd": mmd}

    # (b) union with an unlabeled target batch
    if tgt is not None and state.target_sampler is not None:
        xt = tgt.X[state.target_sampler.next_batch()]
        x2 = torch.cat([x, xt])
        s2 = torch.cat([s, torch.full((xt.shape[0],), state.target_class, dtype=torch.long)])
        emb2 = Q(x2)
        _d_step(state, emb2.features.detach(), s2)
        adv2, _ = _adversarial_term(state, D(emb2), s2)
        loss_t = w.lambda_d * adv2
        if use_mmd:
            loss_t = loss_t + w.lambda_mmd * _mmd_term(state, emb2.pooled, s2)
        _update(state, "Q", _grads(loss_t, Q, retain=False))
    return out


def _joint_iteration(state: TrainState, src: _Data, tgt) -> dict:
    return _stage3_iteration(state, src, tgt, train_p=True)


STEP_FUNCTIONS = {"stage1": _stage1_iteration, "stage2": _stage2_iteration,
                  "stage3": _stage3_iteration, "joint": _joint_iteration}


# --- stage driver ------------------------------------------------------------

def _check_frozen(state: TrainState, reference: dict, stage: str) -> None:
    for role, h in reference.items():
        if state_hash(state.nets[role]) != h:
            raise FreezeViolation(
                f"{role} changed during {stage} at iteration {state.global_iter} although it is frozen"
            )


def _run_stage(state: TrainState, stage: str, src: _Data, tgt, callback=None) -> TrainState:
    if state.current_stage != stage:
        raise TrainingError(f"expected to be at {stage}, state is at {state.current_stage}")
    n_iters = state.stages[state.stage_idx][1]
    step = STEP_FUNCTIONS[stage]
    frozen = {r: state_hash(state.nets[r]) for r in FROZEN[stage] if r in state.nets}
    if state.iteration == 0:
        state.events.append({"iteration": state.global_iter, "event": "stage_start", "stage": stage})
    every = max(1, state.cfg.freeze_check_every)
    while state.iteration < n_iters:
        parts = step(state, src, tgt)
        bd = breakdown(parts["rec"], parts["cls"], parts["dom"], parts["mmd"], state.cfg.effective_weights())
        state.history.append({"iteration": state.global_iter, "stage": stage, **asdict(bd)})
        if not all(math.isfinite(v) for v in asdict(bd).values()):
            raise TrainingError(f"non-finite loss at iteration {state.global_iter}: {bd}")
        state.iteration += 1
        state.global_iter += 1
        if state.iteration % every == 0:
            _check_frozen(state, frozen, stage)
        if callback is not None:
            callback(state)
    _check_frozen(state, frozen, stage)
    state.events.append({"iteration": state.global_iter, "event": "stage_end", "stage": stage})
    state.stage_idx += 1
    state.iteration = 0
    return state


def stage1_pretrain(state: TrainState, dataset: WindowedDataset, callback=None) -> TrainState:
    src, tgt = _prepare(state, dataset, None)
    return _run_stage(state, "stage1", src, tgt, callback)


def stage2_supervised(state: TrainState, dataset: WindowedDataset, callback=None) -> TrainState:
    src, tgt = _prepare(state, dataset, None)
    return _run_stage(state, "stage2", src, tgt, callback)


def stage3_adversarial(state: TrainState, dataset: WindowedDataset,
                       target_unlabeled: Optional[WindowedDataset] = None, callback=None) -> TrainState:
    src, tgt = _prepare(state, dataset, target_unlabeled if state.variant != "only_supervised" else None)
    return _run_stage(state, "stage3", src, tgt, callback)


def run_variant(cfg: TrainConfig, dataset: WindowedDataset, target: Optional[WindowedDataset] = None,
                model_cfg=None, state: Optional[TrainState] = None,
                callback: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Train one ablation variant from scratch, or continue ``state`` where it stopped.

    ``target`` holds the held-out subject's windows; only its inputs are used.
    """
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}")
    if target is not None:
        target = WindowedDataset(target.X, np.zeros(target.n, dtype=np.int64), target.S,
                                 target.n_a, target.subject_ids)  # labels never reach training
    if state is None:
        state = init_state(cfg, dataset, target, model_cfg)
    src, tgt = _prepare(state, dataset, target)
    while not state.finished:
        stage = state.current_stage
        use_tgt = tgt if stage in ("stage3", "joint") and state.variant != "only_supervised" else None
        _run_stage(state, stage, src, use_tgt, callback)
    return state


# --- inference helpers -------------------------------------------------------

@torch.no_grad()
def embed(state: TrainState, X: np.ndarray, batch_size: int = 512) -> nets_mod.EmbeddingMap:
    Q = state.nets["Q"]
    Q.eval()
    xs = torch.from_numpy(pad_windows(np.asarray(X, dtype=np.float32))).to(state.cfg.torch_dtype)
    feats = [Q(xs[i:i + batch_size]).features for i in range(0, len(xs), batch_size)]
    return nets_mod.EmbeddingMap(torch.cat(feats))


@torch.no_grad()
def predict(state: TrainState, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    C = state.nets["C"]
    C.eval()
    emb = embed(state, X, batch_size)
    out = [C(emb.features[i:i + batch_size]).argmax(-1) for i in range(0, len(emb.features), batch_size)]
    return torch.cat(out).numpy()


# --- persistence -------------------------------------------------------------

def write_history_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HISTORY_FIELDS)
        for h in history:
            wr.writerow([h["iteration"], h["stage"]] + [repr(float(h[k])) for k in HISTORY_FIELDS[2:]])


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iteration": int(r["iteration"]), "stage": r["stage"],
             **{k: float(r[k]) for k in HISTORY_FIELDS[2:]}} for r in rows]


def _save_optim(st: AdamState, path) -> None:
    with zipfile.ZipFile(path, "w") as zf:
        nets_mod._write_entry(zf, "t.json", json.dumps({"t": st.t}).encode())
        for kind, d in (("m", st.m), ("v", st.v)):
            for k in sorted(d):
                buf = io.BytesIO()
                np.save(buf, d[k].detach().cpu().numpy(), allow_pickle=False)
                nets_mod._write_entry(zf, f"{kind}/{k}.npy", buf.getvalue())


def _load_optim(path, dtype) -> AdamState:
    st = AdamState()
    with zipfile.ZipFile(path) as zf:
        st.t = json.loads(zf.read("t.json"))["t"]
        for name in zf.namelist():
            if name.endswith(".npy"):
                kind, key = name.split("/", 1)
                arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                getattr(st, kind)[key[:-4]] = torch.from_numpy(arr.copy()).to(dtype)
    return st


def save_checkpoint(state: TrainState, out_dir) -> Path:
    """Write manifest, per-network archives, optimizer moments and loss history."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for role, net in state.nets.items():
        nets_mod.save_network(net, out / f"{role}.npz")
        _save_optim(state.optim[role], out / f"adam_{role}.npz")
    write_history_csv(state.history, out / "loss_history.csv")
    rng = base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()
    manifest = {
        "train_config": state.cfg.to_dict(),
        "model_config": state.model_cfg.to_dict(),
        "networks": sorted(state.nets),
        "stages": state.stages,
        "stage_idx": state.stage_idx,
        "stage": state.current_stage or "done",
        "iteration": state.iteration,
        "global_iter": state.global_iter,
        "subject_index": {str(k): v for k, v in state.subject_index.items()},
        "target_class": state.target_class,
        "n_w_orig": state.n_w_orig,
        "metrics": state.history[-1] if state.history else {},
        "events": state.events,
        "rng": {
            "torch": rng,
            "sampler": state.sampler.state_dict() if state.sampler else None,
            "target_sampler": state.target_sampler.state_dict() if state.target_sampler else None,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_jsonable))
    return out


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def load_checkpoint(ckpt_dir, dataset: WindowedDataset, target: Optional[WindowedDataset] = None) -> TrainState:
    """Rebuild a :class:`TrainState` that continues exactly where the checkpoint stopped."""
    d = Path(ckpt_dir)
    m = json.loads((d / "manifest.json").read_text())
    cfg = TrainConfig.from_dict(m["train_config"])
    mcfg = ModelConfig(**m["model_config"])
    nets = {}
    for role in m["networks"]:
        net, _ = nets_mod.load_network(d / f"{role}.npz", expected_role=role)
        nets[role] = net.to(cfg.torch_dtype)
    state = TrainState(
        cfg=cfg, model_cfg=mcfg, nets=nets,
        optim={r: _load_optim(d / f"adam_{r}.npz", cfg.torch_dtype) for r in nets},
        stages=[list(s) for s in m["stages"]],
        subject_index={int(k): v for k, v in m["subject_index"].items()},
        target_class=m["target_class"], n_w_orig=m["n_w_orig"],
        stage_idx=m["stage_idx"], iteration=m["iteration"], global_iter=m["global_iter"],
        history=read_history_csv(d / "loss_history.csv"), events=m["events"],
    )
    if set(state.subject_index) != set(dataset.subject_ids):
        raise TrainingError("checkpoint subject set differs from the dataset's")
    state.sampler = StratifiedSampler(dataset.S, cfg.batch_size, np.random.default_rng(cfg.seed))
    state.sampler.load_state_dict(m["rng"]["sampler"])
    if m["rng"]["target_sampler"] is not None:
        if target is None or target.n == 0:
            raise TrainingError("checkpoint was trained with target windows; pass the same target set")
        state.target_sampler = StratifiedSampler(np.zeros(target.n, dtype=int), cfg.batch_size,
                                                 np.random.default_rng([cfg.seed, 1]))
        state.target_sampler.load_state_dict(m["rng"]["target_sampler"])
    raw = base64.b64decode(m["rng"]["torch"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    return state

