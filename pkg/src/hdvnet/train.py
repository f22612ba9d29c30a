"""Two-stage training.

Stage one fits the backbone through the four per-state classifiers with the
squared-state weighted loss. Stage two locks the backbone and fits only the
gated final classifier.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import nncore as nn
from .density import DensityProfile, StateThresholds, density_profile, inherent_state
from .errors import AbsentClass, ContractError, DivergenceError, TargetTooLarge, ZeroSupervision
from .model import HDVNet, SphereInput, prepare_input
from .spatial import build_index, query
from .subsample import preprocess_indices

LOSS_COEFFS = (1.0, 4.0, 9.0, 16.0)


@dataclass
class TrainConfig:
    epochs: int = 4
    batches_per_epoch: int = 25
    batch_size: int = 2
    sphere_point_count: Optional[int] = None  # defaults to N_1
    learning_rate: float = 1e-2
    lr_decay: float = 0.95
    seed: int = 0
    class_weights: str = "inverse_frequency"

    def __post_init__(self):
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, batches_per_epoch >= 1, batch_size >= 1")
        if self.class_weights not in ("none", "inverse_frequency"):
            raise ValueError(f"unknown class weight mode {self.class_weights!r}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** epoch

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    losses: np.ndarray  # L_1..L_4
    counts: np.ndarray  # masked points per classifier
    total: nn.Tensor

    @property
    def total_value(self) -> float:
        return float(self.total.data)


@dataclass
class Scene:
    """A labelled cloud with its densities and inherent states."""

    cloud: object
    rho: np.ndarray
    groups: np.ndarray
    states: np.ndarray
    kept: Optional[np.ndarray] = None  # indices into the cloud before preprocessing

    @classmethod
    def build(cls, cloud, thresholds: StateThresholds, profile: Optional[DensityProfile] = None,
              preprocess: bool = False):
        """Densities are measured on the cloud as given; ``preprocess`` then thins it."""
        if profile is None:
            profile = density_profile(cloud, k=thresholds.k_used, jitter=True,
                                      delta_max=thresholds.delta_max)
        keep = (preprocess_indices(cloud, profile.group, thresholds.t[0], thresholds.delta_max)
                if preprocess else np.arange(cloud.n))
        return cls(cloud=cloud.subset(keep), rho=profile.rho[keep], groups=profile.group[keep],
                   states=inherent_state(profile.rho[keep], thresholds), kept=keep)

    @property
    def n(self):
        return self.cloud.n


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def state_mask(states, a: int) -> np.ndarray:
    """Points supervised by classifier ``a``; state 5 counts as state 4."""
    return np.minimum(np.asarray(states), 4) <= a


def class_weights(labels, class_count: int, mode: str = "inverse_frequency") -> np.ndarray:
    if mode == "none":
        return np.ones(class_count)
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)[:class_count]
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise AbsentClass(f"classes {missing} never appear in the training labels")
    inv = counts.sum() / counts.astype(np.float64)
    return inv / inv.mean()


def combined_loss(logits: Sequence[nn.Tensor], labels: Sequence[np.ndarray],
                  masks: Sequence[np.ndarray], weights=None) -> LossReport:
    if len(logits) != 4 or len(labels) != 4 or len(masks) != 4:
        raise ContractError("combined loss needs all four classifier outputs")
    counts = np.array([int(np.count_nonzero(m)) for m in masks])
    if counts.sum() == 0:
        raise ZeroSupervision("no point passes any state mask")
    terms = [nn.softmax_xent(lg, y, weights, m) for lg, y, m in zip(logits, labels, masks)]
    total = terms[0] * LOSS_COEFFS[0]
    for c, t in zip(LOSS_COEFFS[1:], terms[1:]):
        total = total + t * c
    return LossReport(losses=np.array([float(t.data) for t in terms]), counts=counts, total=total)


def backbone_loss(model: HDVNet, inp: SphereInput, weights=None) -> LossReport:
    logits = model.training_logits(inp)
    masks = [state_mask(inp.states[a], a + 1) for a in range(4)]
    return combined_loss(logits, inp.labels[:4], masks, weights)


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[nn.Tensor], lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.locked or p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

class SphereSampler:
    """Draws sphere centres uniformly from points not yet covered this epoch."""

    def __init__(self, scenes: Sequence[Scene], n1: int, rng):
        for s in scenes:
            if s.n < n1:
                raise TargetTooLarge(f"scene with {s.n} points cannot host a {n1}-point sphere")
        self.scenes = list(scenes)
        self.n1 = n1
        self.rng = rng
        self.indexes = [build_index(s.cloud.xyz) for s in self.scenes]
        self.reset()

    def reset(self):
        self.uncovered = [np.ones(s.n, dtype=bool) for s in self.scenes]

    def draw(self):
        left = np.array([u.sum() for u in self.uncovered], dtype=np.float64)
        if left.sum() == 0:
            self.reset()
            left = np.array([u.size for u in self.uncovered], dtype=np.float64)
        pick = int(self.rng.integers(left.sum()))
        si = int(np.searchsorted(np.cumsum(left), pick, side="right"))
        candidates = np.flatnonzero(self.uncovered[si])
        centre = int(candidates[pick - int(left[:si].sum())])
        members, _ = query(self.indexes[si], self.scenes[si].cloud.xyz[centre], self.n1)
        members = np.sort(members[0])
        self.uncovered[si][members] = False
        return si, centre, members


def rho_statistics(scenes: Sequence[Scene]):
    logs = np.log10(np.concatenate([s.rho for s in scenes]))
    std = float(logs.std())
    return float(logs.mean()), std if std > 0 else 1.0


def sphere_input(model: HDVNet, scene: Scene, centre: int, members, seed: int) -> SphereInput:
    return prepare_input(scene.cloud, scene.rho, scene.states, members, model.cfg,
                         rho_stats=(model.rho_mean, model.rho_std), groups=scene.groups,
                         seed=seed, centre=scene.cloud.xyz[centre])


def _labels_of(scenes):
    out = []
    for s in scenes:
        if s.cloud.labels is None:
            raise ContractError("training scenes need labels")
        out.append(s.cloud.labels)
    return np.concatenate(out)


# --------------------------------------------------------------------------
# loops
# --------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)
    path: Optional[str] = None

    def __post_init__(self):
        if self.path:
            open(self.path, "w").close()

    def append(self, record: dict):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _run(model, scenes, tcfg: TrainConfig, params, loss_fn, log: TrainLog, stage: str):
    if tcfg.sphere_point_count not in (None, model.cfg.counts[0]):
        raise ContractError("sphere_point_count must equal N_1")
    rng = np.random.default_rng(tcfg.seed)
    sampler = SphereSampler(scenes, model.cfg.counts[0], rng)
    opt = Adam(params, lr=tcfg.learning_rate)
    weights = class_weights(_labels_of(scenes), model.cfg.class_count, tcfg.class_weights)
    step = 0
    for epoch in range(tcfg.epochs):
        opt.lr = tcfg.lr_at(epoch)
        sampler.reset()
        for _ in range(tcfg.batches_per_epoch):
            opt.zero_grad()
            parts = []
            for _ in range(tcfg.batch_size):
                si, centre, members = sampler.draw()
                inp = sphere_input(model, scenes[si], centre, members, int(rng.integers(2 ** 31)))
                parts.append(loss_fn(inp, weights))
            total = parts[0][0]
            for p in parts[1:]:
                total = total + p[0]
            total = total * (1.0 / len(parts))
            value = float(total.data)
            if not math.isfinite(value):
                raise DivergenceError(f"{stage}: non-finite loss at step {step} (epoch {epoch}); "
                                      f"lr={opt.lr:g}")
            total.backward()
            opt.step()
            record = {"stage": stage, "step": step, "epoch": epoch, "lr": opt.lr, "L_total": value}
            per = np.mean([p[1] for p in parts], axis=0) if parts[0][1] is not None else None
            if per is not None:
                for a in range(4):
                    record[f"L_{a + 1}"] = float(per[a])
            log.append(record)
            step += 1
    return log


def train_backbone(model: HDVNet, scenes: Sequence[Scene], tcfg: TrainConfig,
                   log_path: Optional[str] = None) -> TrainLog:
    """Adam on everything but the final classifier; returns the per-step log."""
    model.rho_mean, model.rho_std = rho_statistics(scenes)
    params = [p for _, p in model.backbone_parameters()]
    log = TrainLog(path=log_path)

    def loss_fn(inp, weights):
        rep = backbone_loss(model, inp, weights)
        return rep.total, rep.losses

    _run(model, scenes, tcfg, params, loss_fn, log, "backbone")
    model.stages.append("backbone")
    return log


def final_loss(model: HDVNet, inp: SphereInput, weights=None) -> nn.Tensor:
    return nn.softmax_xent(model.final_logits(inp), inp.labels[0], weights)


def finetune_final(model: HDVNet, scenes: Sequence[Scene], tcfg: TrainConfig,
                   log_path: Optional[str] = None, fco: bool = False) -> TrainLog:
    """Fit the final classifier on a locked backbone.

    With ``fco`` the backbone is trained jointly from scratch through the final
    classifier alone, skipping stage one.
    """
    if fco:
        model.rho_mean, model.rho_std = rho_statistics(scenes)
        params = model.parameters()
    else:
        if "backbone" not in model.stages:
            raise ContractError("fine-tuning needs a trained backbone checkpoint")
        model.lock_backbone()
        params = model.final.parameters()
    log = TrainLog(path=log_path)

    def loss_fn(inp, weights):
        return final_loss(model, inp, weights), None

    _run(model, scenes, tcfg, params, loss_fn, log, "fco" if fco else "finetune")
    model.stages.append("fco" if fco else "finetune")
    return log
