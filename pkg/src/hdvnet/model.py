"""The density-assigned segmentation network.

Encoder: five DB blocks on the nested pyramid, each appending one feature
subsection. Decoder: nearest-copy upsampling merged with encoder skips.
Heads: one small classifier per decoder level (used for training and TCO
inference) and a gated final classifier over all decoder levels.

Point coordinates are not density-assigned; their embeddings always join the
last (sparsest) subsection so every output may read them.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nncore as nn
from .errors import AssignmentError, ContractError, ShapeError
from .nncore import DC, DMLP, FC, MLP, Module, Tensor

RAW_DIMS = 7  # x, y, z, r, g, b, standardised log10 density
POS_DIMS = 10  # centre xyz, neighbour xyz, offset, distance


@dataclass
class HdvConfig:
    E: Tuple[int, ...] = (16, 16, 32, 64, 128)
    H: Optional[Tuple[int, ...]] = None
    k_neighbors: int = 16
    class_count: int = 3
    counts: Tuple[int, ...] = (1024, 256, 64, 16, 8)
    use_elfa: bool = True
    feature_allocation: str = "full"  # "full", "none" or "limited"
    a_max: int = 5
    raw_width: int = 16
    pos_width: int = 16
    head_hidden: int = 32
    classifier_mode: str = "standard"  # or "dtc"

    def __post_init__(self):
        self.E = tuple(int(e) for e in self.E)
        if self.H is None:
            self.H = tuple(int(math.ceil(e / 2)) for e in self.E)
        self.H = tuple(int(h) for h in self.H)
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.E) != 5 or len(self.H) != 5 or len(self.counts) != 5:
            raise ValueError("E, H and counts need five entries")
        if any(e <= 0 for e in self.E) or any(h <= 0 for h in self.H):
            raise ValueError("subsection widths must be positive")
        if any(h > e for h, e in zip(self.H, self.E)):
            raise ValueError("hidden widths may not exceed E")
        if self.feature_allocation not in ("full", "none", "limited"):
            raise ValueError(f"unknown feature_allocation {self.feature_allocation!r}")
        if not 1 <= self.a_max <= 5:
            raise ValueError("a_max must lie in 1..5")
        if self.classifier_mode not in ("standard", "dtc"):
            raise ValueError(f"unknown classifier_mode {self.classifier_mode!r}")

    @property
    def allocation(self) -> str:
        return "none" if self.feature_allocation == "none" else "full"

    def layout(self, a: int, widths: Optional[Sequence[int]] = None) -> Tuple[int, ...]:
        """Subsection widths of a feature vector holding ``a`` assignments."""
        widths = self.E if widths is None else widths
        if a <= 0:
            return ()
        if self.feature_allocation != "limited" or a <= self.a_max:
            return tuple(widths[:a])
        return tuple(widths[:self.a_max - 1]) + (sum(widths[self.a_max - 1:a]),)

    def hidden(self, a: int) -> Tuple[int, ...]:
        return self.layout(a, self.H)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HdvConfig":
        d = dict(d)
        for key in ("E", "H", "counts"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# --------------------------------------------------------------------------
# local aggregation
# --------------------------------------------------------------------------

def position_features(xyz: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Relative position encoding input of shape (N, K, 10)."""
    centre = np.broadcast_to(xyz[:, None, :], nbr.shape + (3,))
    neigh = xyz[nbr]
    offset = centre - neigh
    dist = np.sqrt((offset ** 2).sum(axis=-1, keepdims=True))
    return np.concatenate([centre, neigh, offset, dist], axis=-1)


class LFA(Module):
    """Neighbour aggregation with attention pooling over the K neighbours."""

    def __init__(self, layout: Sequence[int], pos_width: int, rng, allocation="full"):
        self.layout = tuple(layout)
        self.stack_layout = self.layout[:-1] + (self.layout[-1] + pos_width,)
        self.pos_mlp = MLP(POS_DIMS, pos_width, rng)
        self.score = DC(self.stack_layout, self.stack_layout, rng, allocation)
        self.mix = DMLP(self.stack_layout, self.layout, rng, allocation)

    def stack(self, features: Tensor, xyz: np.ndarray, nbr: np.ndarray) -> Tensor:
        nn.check_layout(features, self.layout)
        pos = self.pos_mlp(Tensor(position_features(xyz, nbr)))
        return nn.concat([nn.gather_rows(features, nbr), pos], axis=-1)

    def pool(self, stacked: Tensor) -> Tensor:
        weights = nn.softmax(self.score(stacked), axis=1)
        return (stacked * weights).sum(axis=1)

    def __call__(self, features, xyz, nbr, states=None, current_d=None):
        return self.mix(self.pool(self.stack(features, xyz, nbr)))


class ELFA(LFA):
    """LFA plus a mean over only the neighbours that exist at the current state."""

    def __init__(self, layout, pos_width, rng, allocation="full"):
        super().__init__(layout, pos_width, rng, allocation)
        n = len(self.layout)
        self.merged_layout = tuple(self.layout[j] + self.stack_layout[j] for j in range(n))
        self.gate = DC(self.merged_layout, self.merged_layout, rng, allocation)
        self.out = DMLP(self.merged_layout, self.layout, rng, allocation)

    def __call__(self, features, xyz, nbr, states=None, current_d=None):
        if states is None or current_d is None:
            raise ContractError("ELFA needs per-point states and the current state")
        nf = self.stack(features, xyz, nbr)
        exists = (np.asarray(states)[nbr] <= current_d).astype(np.float64)
        count = exists.sum(axis=1, keepdims=True)
        nf_exists = (nf * Tensor(exists[..., None])).sum(axis=1) * Tensor(1.0 / np.maximum(count, 1.0))
        nf_orig = self.mix(self.pool(nf))
        merged, layout = nn.merge_subsections([nf_orig, nf_exists],
                                              [self.layout, self.stack_layout], len(self.layout))
        gated = nn.attention_score(merged, self.gate, layout)
        return self.out(gated)


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------

class DBBlock(Module):
    """Encoder block ``a``: re-embeds raw points and appends subsection ``a``."""

    def __init__(self, a: int, cfg: HdvConfig, rng):
        self.a = a
        self.in_layout = cfg.layout(a - 1) + (cfg.raw_width,)
        self.hid_layout = cfg.hidden(a)
        self.out_layout = cfg.layout(a)
        self.raw_mlp = MLP(RAW_DIMS, cfg.raw_width, rng)
        self.reduce = DMLP(self.in_layout, self.hid_layout, rng, cfg.allocation)
        agg = ELFA if cfg.use_elfa else LFA
        self.lfa = [agg(self.hid_layout, cfg.pos_width, rng, cfg.allocation) for _ in range(2)]
        self.expand = DMLP(self.hid_layout, self.out_layout, rng, cfg.allocation)

    def __call__(self, features: Optional[Tensor], raw, xyz, nbr, states=None) -> Tensor:
        expected = sum(self.in_layout) - self.in_layout[-1]
        have = 0 if features is None else features.shape[-1]
        if have != expected:
            raise AssignmentError(f"DB_{self.a} expects {expected} input features, got {have}")
        r = self.raw_mlp(raw if isinstance(raw, Tensor) else Tensor(raw))
        x = r if features is None else nn.concat([features, r], axis=-1)
        h = self.reduce(x)
        y = h
        for agg in self.lfa:
            y = agg(y, xyz, nbr, states, self.a)
        return self.expand(h + y)


class UpsampleBlock(Module):
    """Copy coarse features to their nearest fine point, merge with the skip."""

    def __init__(self, a: int, cfg: HdvConfig, rng):
        self.a = a
        self.coarse_layout = cfg.layout(a + 1)
        self.skip_layout = cfg.layout(a)
        n = len(self.skip_layout)
        merged = [0] * n
        for layout in (self.coarse_layout, self.skip_layout):
            for j, w in enumerate(layout):
                merged[min(j, n - 1)] += w
        self.merged_layout = tuple(merged)
        self.merge = DMLP(self.merged_layout, self.skip_layout, rng, cfg.allocation)

    def __call__(self, coarse: Tensor, up_map, skip: Tensor) -> Tensor:
        if up_map is None:
            raise ContractError("upsampling needs the fine-to-coarse index map")
        up_map = np.asarray(up_map)
        if up_map.shape[0] != skip.shape[0]:
            raise ShapeError("up map length does not match skip features")
        copied = nn.gather_rows(coarse, up_map)
        merged, _ = nn.merge_subsections([copied, skip], [self.coarse_layout, self.skip_layout],
                                         len(self.skip_layout))
        return self.merge(merged)


class TrainingClassifier(Module):
    """``dmlp -> dc -> fc``; the last layer maps to class logits."""

    def __init__(self, a: int, cfg: HdvConfig, rng):
        self.a = a
        self.layout = cfg.layout(a)
        self.hid = cfg.hidden(a)
        self.mode = cfg.classifier_mode
        self.mlp = DMLP(self.layout, self.hid, rng, cfg.allocation)
        self.dc = DC(self.hid, self.hid, rng, cfg.allocation)
        read = self.hid[-1] if self.mode == "dtc" else sum(self.hid)
        self.logits = FC(read, cfg.class_count, rng)

    def __call__(self, features: Tensor) -> Tensor:
        h = self.dc(self.mlp(features))
        if self.mode == "dtc":
            h = h[..., sum(self.hid[:-1]):]
        return self.logits(h)


class FinalClassifier(Module):
    """Per-point gates from existence flags and density scale each decoder level."""

    def __init__(self, cfg: HdvConfig, rng):
        self.widths = [sum(cfg.layout(a)) for a in range(1, 5)]
        self.att_mlp = MLP(4, 16, rng)
        self.att_fc = FC(16, 4, rng)
        self.head = MLP(sum(self.widths), cfg.head_hidden, rng)
        self.logits = FC(cfg.head_hidden, cfg.class_count, rng)

    def gates(self, exist_flags, rho_std) -> Tensor:
        inp = np.concatenate([np.asarray(exist_flags, dtype=np.float64),
                              np.asarray(rho_std, dtype=np.float64)[:, None]], axis=1)
        return nn.softplus(self.att_fc(self.att_mlp(Tensor(inp))))

    def __call__(self, lifted: Sequence[Tensor], exist_flags, rho_std) -> Tensor:
        if len(lifted) != 4:
            raise ShapeError("final classifier needs four feature levels")
        for f, w in zip(lifted, self.widths):
            if f.shape[-1] != w:
                raise ShapeError(f"expected width {w}, got {f.shape[-1]}")
        g = self.gates(exist_flags, rho_std)
        parts = [f * g[:, a:a + 1] for a, f in enumerate(lifted)]
        return self.logits(self.head(nn.concat(parts, axis=-1)))


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass
class SphereInput:
    """Everything one forward pass needs, per pyramid level (0-based lists)."""

    xyz: List[np.ndarray]
    raw: List[np.ndarray]
    nbr: List[np.ndarray]
    states: List[np.ndarray]
    down: List[np.ndarray]
    up: List[np.ndarray]
    lift: List[np.ndarray]
    labels: Optional[List[np.ndarray]] = None
    exist_flags: Optional[np.ndarray] = None
    rho_std: Optional[np.ndarray] = None
    source: Optional[np.ndarray] = None  # P^(1) indices into the source cloud


class HDVNet(Module):
    def __init__(self, cfg: HdvConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = [DBBlock(a, cfg, rng) for a in range(1, 6)]
        self.decoder = [UpsampleBlock(a, cfg, rng) for a in range(1, 5)]
        self.classifiers = [TrainingClassifier(a, cfg, rng) for a in range(1, 5)]
        self.final = FinalClassifier(cfg, rng)
        self.rho_mean = 0.0
        self.rho_std = 1.0
        self.stages: List[str] = []  # completed training stages

    def backbone_modules(self) -> List[Module]:
        return list(self.encoder) + list(self.decoder) + list(self.classifiers)

    def lock_backbone(self):
        for m in self.backbone_modules():
            m.lock()

    def backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("final.")]

    def features(self, inp: SphereInput) -> List[Tensor]:
        """Decoder outputs ``F^(1)..F^(4)`` (index 0..3) plus the bottleneck at index 4."""
        enc = []
        f = None
        for a, block in enumerate(self.encoder):
            if a > 0:
                f = nn.gather_rows(f, inp.down[a - 1])
            f = block(f, inp.raw[a], inp.xyz[a], inp.nbr[a], inp.states[a])
            enc.append(f)
        dec = [None] * 5
        dec[4] = enc[4]
        for a in range(3, -1, -1):
            dec[a] = self.decoder[a](dec[a + 1], inp.up[a], enc[a])
        return dec

    def training_logits(self, inp: SphereInput, dec=None) -> List[Tensor]:
        dec = self.features(inp) if dec is None else dec
        return [g(dec[a]) for a, g in enumerate(self.classifiers)]

    def final_logits(self, inp: SphereInput, dec=None) -> Tensor:
        dec = self.features(inp) if dec is None else dec
        lifted = [nn.gather_rows(dec[a], inp.lift[a]) for a in range(4)]
        return self.final(lifted, inp.exist_flags, inp.rho_std)

    def tco_logits(self, inp: SphereInput, dec=None) -> Tensor:
        """Route each P^(1) point to the classifier of its own state (I^(5) uses g_4)."""
        logits = self.training_logits(inp, dec)
        route = np.clip(inp.states[0], 1, 4) - 1
        out = np.zeros((inp.xyz[0].shape[0], self.cfg.class_count))
        for a in range(4):
            rows = np.flatnonzero(route == a)
            if rows.size:
                out[rows] = logits[a].data[inp.lift[a][rows]]
        return Tensor(out)

    def count_parameters(self, backbone_only=False) -> int:
        if backbone_only:
            return sum(p.size for _, p in self.backbone_parameters())
        return self.num_parameters()

    def meta(self) -> dict:
        return {"config": self.cfg.to_dict(), "rho_mean": self.rho_mean, "rho_std": self.rho_std,
                "stages": list(self.stages)}

    def save(self, path, extra: Optional[dict] = None) -> str:
        meta = self.meta()
        meta.update(extra or {})
        return nn.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "HDVNet":
        arrays, locked, meta = nn.load_checkpoint(path)
        model = cls(HdvConfig.from_dict(meta["config"]))
        nn.load_into(model, arrays, locked)
        model.rho_mean = meta.get("rho_mean", 0.0)
        model.rho_std = meta.get("rho_std", 1.0)
        model.stages = list(meta.get("stages", []))
        return model


# --------------------------------------------------------------------------
# input preparation
# --------------------------------------------------------------------------

def standardise_rho(rho, mean, std):
    return (np.log10(np.asarray(rho, dtype=np.float64)) - mean) / std


def prepare_input(cloud, rho, states, members, cfg: HdvConfig, rho_stats=(0.0, 1.0),
                  groups=None, seed=0, centre=None) -> SphereInput:
    """Build the pyramid for ``cloud[members]`` and all per-level arrays.

    ``members`` must hold exactly ``N_1`` indices. Coordinates are centred on
    ``centre`` (default: the members' mean).
    """
    from .density import assign_groups, group_thresholds
    from .spatial import build_index, nearest
    from .subsample import build_pyramid

    members = np.asarray(members, dtype=np.int64)
    if members.shape[0] != cfg.counts[0]:
        raise ShapeError(f"sphere needs {cfg.counts[0]} points, got {members.shape[0]}")
    sub = cloud.subset(members)
    rho = np.asarray(rho)[members]
    states = np.asarray(states)[members]
    if groups is None:
        groups = assign_groups(rho, group_thresholds())
    else:
        groups = np.asarray(groups)[members]
    pyr = build_pyramid(sub, groups, cfg.counts, k=cfg.k_neighbors, seed=seed)
    centre = sub.xyz.mean(axis=0) if centre is None else np.asarray(centre)
    rs = standardise_rho(rho, *rho_stats)
    raw_all = np.concatenate([sub.xyz - centre, sub.rgb, rs[:, None]], axis=1)

    xyz, raw, nbr, st, labels = [], [], [], [], []
    for d in range(5):
        idx = pyr.source_indices(d)
        xyz.append(sub.xyz[idx] - centre)
        raw.append(raw_all[idx])
        nbr.append(pyr.neighbors[d].indices)
        st.append(states[idx])
        if sub.labels is not None:
            labels.append(sub.labels[idx])
    lift = [np.arange(cfg.counts[0])]
    for d in range(1, 4):
        lift.append(nearest(build_index(xyz[d]), xyz[0]))
    s1 = st[0]
    exist = np.stack([(s1 <= d) for d in (1, 2, 3)], axis=1).astype(np.float64)
    return SphereInput(xyz=xyz, raw=raw, nbr=nbr, states=st, down=pyr.down, up=pyr.up,
                       lift=lift, labels=labels or None, exist_flags=exist,
                       rho_std=rs[pyr.source_indices(0)], source=members[pyr.base])
