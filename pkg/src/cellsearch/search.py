"""Progressive search: staged bilevel training, skip dropout decay, space pruning."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .data import DatasetSplits, minibatches, search_split
from .exceptions import ConfigError, NonFiniteError, SearchSpaceError
from .genotype import AlphaSnapshot, save_snapshot
from .ops import OP_KINDS, op_index
from .optim import SGD, Adam, clip_grad_norm, cosine_lr
from .supernet import CELL_TYPES, CandidateTable, SearchNetwork, full_candidates
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("stage", "epoch", "phase", "train_loss", "val_loss",
                  "skip_dropout_rate", "lr_w", "lr_alpha")


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class StageSpec:
    depth: int
    op_budget: int
    epochs: int
    warm_epochs: int
    init_skip_dropout: float = 0.0


@dataclass(frozen=True)
class StagePlan:
    stages: Tuple[StageSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages))
        if not self.stages:
            raise ConfigError("a plan needs at least one stage")
        if self.stages[0].op_budget != len(OP_KINDS):
            raise ConfigError(f"the first stage must search the full space of {len(OP_KINDS)} candidates")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.depth <= a.depth:
                raise ConfigError(f"stage depths must strictly increase ({a.depth} -> {b.depth})")
            if b.op_budget >= a.op_budget:
                raise ConfigError(f"op budgets must strictly decrease ({a.op_budget} -> {b.op_budget})")
        for s in self.stages:
            if s.op_budget < 1 or s.epochs < 1:
                raise ConfigError("op_budget and epochs must be positive")
            if not 0 <= s.warm_epochs < s.epochs:
                raise ConfigError(f"warm_epochs must lie in [0, epochs), got {s.warm_epochs}/{s.epochs}")
            if not 0.0 <= s.init_skip_dropout <= 1.0:
                raise ConfigError(f"init_skip_dropout must lie in [0, 1], got {s.init_skip_dropout}")

    @classmethod
    def desk(cls, dropout: Sequence[float] = (0.0, 0.4, 0.7), epochs: int = 12,
             warm_epochs: int = 4) -> "StagePlan":
        return cls.from_lists((5, 8, 11), (8, 5, 3), dropout, epochs, warm_epochs)

    @classmethod
    def full_scale(cls, dropout: Sequence[float] = (0.0, 0.4, 0.7)) -> "StagePlan":
        return cls.from_lists((5, 11, 17), (8, 5, 3), dropout, 25, 10)

    @classmethod
    def from_lists(cls, depths, budgets, dropout, epochs, warm_epochs) -> "StagePlan":
        if not len(depths) == len(budgets) == len(dropout):
            raise ConfigError("depths, budgets and dropout rates need one entry per stage")
        return cls(tuple(StageSpec(d, o, epochs, warm_epochs, float(p))
                         for d, o, p in zip(depths, budgets, dropout)))

    def to_dict(self) -> Dict:
        return {"stages": [asdict(s) for s in self.stages]}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class OptimizerConfig:
    alpha_lr: float = 6e-4
    alpha_betas: Tuple[float, float] = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    weight_lr: float = 0.025
    weight_lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "alpha_betas", tuple(self.alpha_betas))
        if min(self.alpha_lr, self.weight_lr, self.grad_clip) <= 0 or self.batch_size < 1:
            raise ConfigError("learning rates, grad_clip and batch_size must be positive")
        if not 0 <= self.weight_lr_min <= self.weight_lr:
            raise ConfigError("weight_lr_min must lie in [0, weight_lr]")
        if min(self.alpha_weight_decay, self.weight_decay, self.momentum) < 0:
            raise ConfigError("weight decays and momentum must be non-negative")


@dataclass(frozen=True)
class NetworkConfig:
    """Search-network geometry shared by every stage."""

    init_channels: int = 8
    n_intermediate: int = 4
    stem_multiplier: int = 3
    skip_dropout_in_reduction: bool = True


def dropout_schedule(init_rate: float, epoch: int, total_epochs: int) -> float:
    """Linear decay from ``init_rate`` at epoch 0 to ``init_rate / total_epochs`` at the last epoch."""
    if not 0.0 <= init_rate <= 1.0:
        raise ConfigError(f"skip dropout rate must lie in [0, 1], got {init_rate}")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return init_rate * (1.0 - epoch / total_epochs)


# ---------------------------------------------------------------- pruning

def approximate_space(snapshot: AlphaSnapshot, keep: int) -> CandidateTable:
    """Per edge, the ``keep`` candidates with the largest softmax weight.

    Ties resolve towards the earlier operation in ``OP_KINDS``.  Normal and
    reduction tables are pruned independently.
    """
    out: CandidateTable = {}
    for ct in CELL_TYPES:
        out[ct] = {}
        for e, rows in snapshot.tables[ct].items():
            if not 1 <= keep <= len(rows):
                raise SearchSpaceError(
                    f"cannot keep {keep} of {len(rows)} candidates on {ct} edge {e[0]}->{e[1]}")
            ranked = sorted(rows, key=lambda r: (-r[2], op_index(r[0])))
            out[ct][e] = tuple(sorted((r[0] for r in ranked[:keep]), key=op_index))
    return out


# ---------------------------------------------------------------- training

@dataclass
class SearchData:
    """Normalised search halves: A trains weights, B trains alphas."""

    xa: np.ndarray
    ya: np.ndarray
    xb: np.ndarray
    yb: np.ndarray
    num_classes: int

    @classmethod
    def from_splits(cls, splits: DatasetSplits, split_seed: int = 0) -> "SearchData":
        train = splits.train
        a, b = search_split(train.labels, split_seed)
        x = splits.normalise(train.images)
        return cls(x[a], train.labels[a], x[b], train.labels[b], train.num_classes)

    @property
    def image_size(self) -> int:
        return self.xa.shape[-1]

    @property
    def in_channels(self) -> int:
        return self.xa.shape[1]


@dataclass
class StageResult:
    snapshot: AlphaSnapshot
    metrics: List[Dict]
    alpha_before_warm: Dict
    alpha_after_warm: Dict
    parameter_count: int
    activation_floats: int


def stage_seeds(seed: int, stage_index: int) -> Tuple[int, np.random.Generator]:
    """Network-init seed and batch-shuffle generator for one stage."""
    init_ss, shuffle_ss = np.random.SeedSequence([seed, stage_index]).spawn(2)
    return int(init_ss.generate_state(1)[0]), np.random.default_rng(shuffle_ss)


def _step(net: SearchNetwork, x: np.ndarray, y: np.ndarray) -> Tuple[float, int]:
    with Tape() as tape:
        loss = F.cross_entropy(net(Tensor(x), mode="train"), y)
        floats = tape.recorded_floats
        tape.backward(loss)
    return float(loss.data), floats


def _clear_grads(params) -> None:
    for p in params:
        p.grad = None


def run_stage(net: SearchNetwork, stage: StageSpec, data: SearchData,
              optim: OptimizerConfig = OptimizerConfig(), seed: int = 0, *,
              stage_index: int = 1, metadata: Optional[Dict] = None,
              on_epoch: Optional[Callable[[Dict], None]] = None) -> StageResult:
    """Train one stage and return its final architecture weights.

    Warm epochs update only operation weights on split A.  Afterwards each
    iteration takes one Adam step on the alphas (split B) followed by one
    SGD step on the weights (split A).
    """
    _, rng = stage_seeds(seed, stage_index)
    weights, alphas = net.weights(), net.arch_parameters()
    w_opt = SGD(weights, optim.weight_lr, optim.momentum, optim.weight_decay)
    a_opt = Adam(alphas, optim.alpha_lr, optim.alpha_betas, weight_decay=optim.alpha_weight_decay)
    bs = optim.batch_size
    before = net.alpha_table()
    after_warm = before if stage.warm_epochs == 0 else None
    rows: List[Dict] = []
    activation = 0
    for epoch in range(stage.epochs):
        rate = dropout_schedule(stage.init_skip_dropout, epoch, stage.epochs)
        net.set_skip_dropout(rate)
        lr_w = cosine_lr(optim.weight_lr, optim.weight_lr_min, epoch, stage.epochs)
        w_opt.lr = lr_w
        joint = epoch >= stage.warm_epochs
        train_losses, val_losses = [], []
        batches_b = list(minibatches(len(data.yb), bs, rng)) if joint else []
        for k, idx in enumerate(minibatches(len(data.ya), bs, rng)):
            try:
                if joint and k < len(batches_b):
                    jb = batches_b[k]
                    _clear_grads(alphas)
                    val, _ = _step(net, data.xb[jb], data.yb[jb])
                    a_opt.step()
                    val_losses.append(val)
                _clear_grads(weights)
                loss, floats = _step(net, data.xa[idx], data.ya[idx])
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"stage {stage_index} epoch {epoch} batch {k} (lr_w={lr_w:.6g}, "
                    f"lr_alpha={optim.alpha_lr:.6g}): {exc}", location=exc.location) from exc
            activation = max(activation, floats)
            clip_grad_norm(weights, optim.grad_clip)
            w_opt.step()
            train_losses.append(loss)
        row = {
            "stage": stage_index, "epoch": epoch, "phase": "joint" if joint else "warm",
            "train_loss": float(np.mean(train_losses)),
            "val_loss": float(np.mean(val_losses)) if val_losses else math.nan,
            "skip_dropout_rate": rate, "lr_w": lr_w,
            "lr_alpha": optim.alpha_lr if joint else 0.0,
        }
        rows.append(row)
        log.info("stage %d epoch %d %s loss %.4f", stage_index, epoch, row["phase"], row["train_loss"])
        if on_epoch is not None:
            on_epoch(row)
        if epoch + 1 == stage.warm_epochs:
            after_warm = net.alpha_table()
    meta = {"stage": stage_index, "seed": seed, "depth": stage.depth}
    meta.update(metadata or {})
    snapshot = AlphaSnapshot.from_alphas(net.alpha_table(), meta, net.n_intermediate)
    return StageResult(snapshot, rows, before, after_warm, net.num_parameters(), activation)


# ---------------------------------------------------------------- the full search

@dataclass
class SearchResult:
    snapshots: List[AlphaSnapshot]
    candidates: List[CandidateTable]
    metrics: List[Dict]
    accounting: List[Dict]
    stages: List[StageResult] = field(repr=False, default_factory=list)

    @property
    def final(self) -> AlphaSnapshot:
        return self.snapshots[-1]


def run_progressive_search(plan: StagePlan, data: SearchData, seed: int = 0, *,
                           optim: OptimizerConfig = OptimizerConfig(),
                           network: NetworkConfig = NetworkConfig(),
                           out_dir=None, on_epoch=None) -> SearchResult:
    """Run every stage of ``plan``, pruning the candidate space in between.

    Each stage starts from fresh weights and zero alphas over the candidates
    that survived the previous stage.  With ``out_dir`` set, per-stage
    snapshots, the metrics CSV and the accounting CSV are written there.
    """
    candidates = full_candidates(network.n_intermediate)
    result = SearchResult([], [], [], [])
    for k, stage in enumerate(plan.stages, start=1):
        counts = {len(v) for t in candidates.values() for v in t.values()}
        if counts != {stage.op_budget}:
            raise SearchSpaceError(f"stage {k} expects {stage.op_budget} candidates per edge, found {counts}")
        init_seed, _ = stage_seeds(seed, k)
        net = SearchNetwork(stage.depth, data.num_classes, candidates=candidates,
                            init_channels=network.init_channels, in_channels=data.in_channels,
                            image_size=data.image_size, n_intermediate=network.n_intermediate,
                            stem_multiplier=network.stem_multiplier, seed=init_seed,
                            skip_dropout_in_reduction=network.skip_dropout_in_reduction)
        stage_res = run_stage(net, stage, data, optim, seed, stage_index=k,
                              metadata={"plan_digest": plan.digest()}, on_epoch=on_epoch)
        result.stages.append(stage_res)
        result.snapshots.append(stage_res.snapshot)
        result.candidates.append(candidates)
        result.metrics.extend(stage_res.metrics)
        result.accounting.append({
            "stage": k, "depth": stage.depth, "op_budget": stage.op_budget,
            "parameters": stage_res.parameter_count,
            "activation_floats": stage_res.activation_floats,
        })
        if out_dir is not None:
            save_snapshot(Path(out_dir) / f"snapshot_stage{k}.json", stage_res.snapshot)
        if k < len(plan.stages):
            candidates = approximate_space(stage_res.snapshot, plan.stages[k].op_budget)
    first = result.accounting[0]
    for row in result.accounting:
        row["activation_ratio"] = row["activation_floats"] / first["activation_floats"]
        row["depth_ratio"] = row["depth"] / first["depth"]
    if out_dir is not None:
        write_metrics_csv(Path(out_dir) / "metrics.csv", result.metrics)
        write_accounting_csv(Path(out_dir) / "accounting.csv", result.accounting)
    return result


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".17g")
    return str(v)


def write_metrics_csv(path, rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


ACCOUNTING_COLUMNS = ("stage", "depth", "op_budget", "parameters", "activation_floats",
                      "activation_ratio", "depth_ratio")


def write_accounting_csv(path, rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ACCOUNTING_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in ACCOUNTING_COLUMNS])
