"""Discrete evaluation networks, their training loop, and diagnostic experiments."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .data import DatasetSplits, cutout, minibatches
from .exceptions import ConfigError, GenotypeError, NonFiniteError
from .genotype import (AlphaSnapshot, Genotype, count_parameters, derive, refine_skip_count,
                       save_genotype, validate_genotype)
from .nn import BatchNorm2d, Conv2d, Linear, Module, Sequential
from .ops import OP_KINDS, FactorizedReduce, ReLUConvBN, build_candidate
from .optim import SGD, clip_grad_norm, cosine_lr
from .search import (NetworkConfig, OptimizerConfig, SearchData, StagePlan, approximate_space,
                     run_progressive_search, run_stage, stage_seeds)
from .supernet import CELL_TYPES, SearchNetwork, edge_keys, reduction_positions
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    depth: int = 8
    init_channels: int = 16
    epochs: int = 10
    batch_size: int = 32
    drop_path_prob: float = 0.2
    cutout_length: int = 0
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    stem_multiplier: int = 3

    def __post_init__(self):
        if self.depth < 3:
            raise ConfigError(f"evaluation depth must be >= 3 for distinct reduction cells, got {self.depth}")
        if not 0.0 <= self.drop_path_prob < 1.0:
            raise ConfigError(f"drop_path_prob must lie in [0, 1), got {self.drop_path_prob}")
        if self.init_channels < 2 or self.init_channels % 2:
            raise ConfigError("init_channels must be a positive even number")
        if self.epochs < 0 or self.batch_size < 1 or self.cutout_length < 0:
            raise ConfigError("epochs, batch_size and cutout_length out of range")
        if self.lr <= 0 or not 0 <= self.lr_min <= self.lr:
            raise ConfigError("need lr > 0 and 0 <= lr_min <= lr")


# ---------------------------------------------------------------- network

def drop_path_masks(batch: int, p: float, rng: np.random.Generator):
    """Per-sample keep masks for the two inputs of a node.

    A sample that would lose both inputs is redrawn, so every node always
    receives at least one path.
    """
    keep_a = rng.random(batch) >= p
    keep_b = rng.random(batch) >= p
    dead = ~(keep_a | keep_b)
    while dead.any():
        n = int(dead.sum())
        keep_a[dead] = rng.random(n) >= p
        keep_b[dead] = rng.random(n) >= p
        dead = ~(keep_a | keep_b)
    return keep_a, keep_b


class EvalCell(Module):
    def __init__(self, pairs, concat, c_pp, c_p, c, reduction, reduction_prev, *, rng):
        self.reduction = reduction
        self.pre0 = (FactorizedReduce(c_pp, c, rng=rng) if reduction_prev
                     else ReLUConvBN(c_pp, c, 1, 1, 0, rng=rng))
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, rng=rng)
        self.pairs = tuple(pairs)
        self.concat = tuple(concat)
        self.ops = [build_candidate(op, c, 2 if reduction and src < 2 else 1, rng=rng, search=False)
                    for op, src in self.pairs]

    def forward(self, s0, s1, drop_prob=0.0, rng=None):
        states = [self.pre0(s0), self.pre1(s1)]
        for j in range(len(self.pairs) // 2):
            hs = []
            for k in (2 * j, 2 * j + 1):
                hs.append(self.ops[k](states[self.pairs[k][1]]))
            if self.training and drop_prob > 0:
                masks = drop_path_masks(hs[0].shape[0], drop_prob, rng)
                hs = [F.apply_mask(h, m[:, None, None, None], 1.0 / (1.0 - drop_prob))
                      for h, m in zip(hs, masks)]
            states.append(hs[0] + hs[1])
        return F.concat([states[i] for i in self.concat], axis=1)


class EvalNetwork(Module):
    """Stack of discrete cells built from a genotype; no mixtures and no alphas."""

    def __init__(self, genotype: Genotype, config: EvalConfig, num_classes: int, *,
                 in_channels: int = 3, seed: int = 0):
        validate_genotype(genotype)
        self.genotype, self.config = genotype, config
        self.drop_path_prob = 0.0
        init_seed, drop_seed = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_seed)
        self._rng = np.random.default_rng(drop_seed)
        c = config.init_channels
        c_curr = config.stem_multiplier * c
        self.stem = Sequential(Conv2d(in_channels, c_curr, 3, padding=1, rng=rng), BatchNorm2d(c_curr))
        c_pp, c_p, c_curr = c_curr, c_curr, c
        reductions = set(reduction_positions(config.depth))
        self.cells = []
        reduction_prev = False
        for k in range(config.depth):
            reduction = k in reductions
            if reduction:
                c_curr *= 2
            pairs = genotype.reduce if reduction else genotype.normal
            self.cells.append(EvalCell(pairs, genotype.concat, c_pp, c_p, c_curr, reduction,
                                       reduction_prev, rng=rng))
            reduction_prev = reduction
            c_pp, c_p = c_p, len(genotype.concat) * c_curr
        self.classifier = Linear(c_p, num_classes, rng=rng)

    def forward(self, x, mode: str = "train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.train(mode == "train")
        x = x if isinstance(x, Tensor) else Tensor(x)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, self.drop_path_prob, self._rng)
        return self.classifier(F.global_avg_pool(s1))

    def reseed(self, seed) -> None:
        self._rng = np.random.default_rng(seed)


def build_eval_network(genotype: Genotype, config: EvalConfig, num_classes: int, *,
                       in_channels: int = 3, seed: int = 0) -> EvalNetwork:
    if not isinstance(genotype, Genotype):
        raise GenotypeError(f"expected a Genotype, got {type(genotype).__name__}")
    return EvalNetwork(genotype, config, num_classes, in_channels=in_channels, seed=seed)


# ---------------------------------------------------------------- training

@dataclass
class EvalResult:
    history: List[Dict]
    test_error: float
    train_loss: float


def predict_logits(net: Module, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = [net(Tensor(x[i:i + batch_size]), mode="eval").data for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.classifier.weight.shape[1]))


def error_rate(net: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 128) -> float:
    if len(y) == 0:
        return math.nan
    return float(np.mean(np.argmax(predict_logits(net, x, batch_size), axis=1) != y))


def train_eval(net: EvalNetwork, splits: DatasetSplits, config: EvalConfig, seed: int = 0) -> EvalResult:
    """Train on ``splits.train`` from scratch and report ``splits.test`` error per epoch."""
    return fit_network(net, splits.normalise(splits.train.images), splits.train.labels, config, seed,
                       splits.normalise(splits.test.images), splits.test.labels)


def fit_network(net: EvalNetwork, x_train: np.ndarray, y_train: np.ndarray, config: EvalConfig,
                seed: int = 0, x_test: Optional[np.ndarray] = None,
                y_test: Optional[np.ndarray] = None) -> EvalResult:
    """SGD with a cosine schedule; drop-path ramps linearly from 0 to its configured value."""
    shuffle_ss, aug_ss, drop_ss = np.random.SeedSequence([seed, 0xE7A1]).spawn(3)
    shuffle_rng, aug_rng = np.random.default_rng(shuffle_ss), np.random.default_rng(aug_ss)
    net.reseed(drop_ss)
    if x_test is None:
        x_test, y_test = x_train[:0], y_train[:0]
    params = net.parameters()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    history: List[Dict] = []
    train_loss = math.nan
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr, config.lr_min, epoch, config.epochs)
        opt.lr = lr
        net.drop_path_prob = config.drop_path_prob * epoch / config.epochs
        losses = []
        for k, idx in enumerate(minibatches(len(y_train), config.batch_size, shuffle_rng)):
            x = x_train[idx]
            if config.cutout_length:
                # inputs are normalised, so a zero fill equals the dataset mean
                x = cutout(x, config.cutout_length, aug_rng, fill=0.0)
            for p in params:
                p.grad = None
            try:
                with Tape() as tape:
                    loss = F.cross_entropy(net(Tensor(x), mode="train"), y_train[idx])
                    tape.backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"eval epoch {epoch} batch {k} (lr={lr:.6g}): {exc}",
                                     location=exc.location) from exc
            clip_grad_norm(params, config.grad_clip)
            opt.step()
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses)) if losses else math.nan
        err = error_rate(net, x_test, y_test)
        history.append({"epoch": epoch, "train_loss": train_loss, "test_error": err,
                        "drop_path_prob": net.drop_path_prob, "lr": lr})
        log.info("eval epoch %d loss %.4f test error %.4f", epoch, train_loss, err)
    net.drop_path_prob = 0.0
    final = history[-1]["test_error"] if history else error_rate(net, x_test, y_test)
    return EvalResult(history, final, train_loss)


EVAL_COLUMNS = ("epoch", "train_loss", "test_error", "drop_path_prob", "lr")


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".17g")
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


# ---------------------------------------------------------------- experiments

def _evaluate(genotype, splits, config, seed) -> Dict:
    net = build_eval_network(genotype, config, splits.num_classes,
                             in_channels=splits.train.image_shape[0], seed=seed)
    res = train_eval(net, splits, config, seed)
    return {"test_error": res.test_error, "train_loss": res.train_loss,
            "parameters": net.num_parameters()}


RANDOM_SPACE_COLUMNS = ("seed", "arm", "repeat", "normal_skips", "parameters",
                        "train_loss", "test_error", "selected")


def sample_candidates(op_budget: int, rng: np.random.Generator, n_intermediate: int = 4):
    """Uniformly sampled candidate sets of ``op_budget`` operations per edge."""
    out = {}
    for ct in CELL_TYPES:
        out[ct] = {}
        for e in edge_keys(n_intermediate):
            pick = rng.choice(len(OP_KINDS), size=op_budget, replace=False)
            out[ct][e] = tuple(OP_KINDS[i] for i in sorted(pick))
    return out


def experiment_random_space(plan: StagePlan, data: SearchData, splits: DatasetSplits,
                            seeds: Sequence[int], eval_config: EvalConfig, *,
                            optim: OptimizerConfig = OptimizerConfig(),
                            network: NetworkConfig = NetworkConfig(),
                            random_repeats: int = 3, out_dir=None) -> List[Dict]:
    """Final stage on approximated candidates versus equally sized random ones.

    The random arm is sampled ``random_repeats`` times per seed and the
    repeat with the lowest test error is marked as selected.
    """
    rows: List[Dict] = []
    final = plan.stages[-1]
    k_final = len(plan.stages)
    for seed in seeds:
        if len(plan.stages) > 1:
            head = StagePlan(plan.stages[:-1])
            prev = run_progressive_search(head, data, seed, optim=optim, network=network)
            approx = approximate_space(prev.final, final.op_budget)
        else:
            approx = {ct: {e: OP_KINDS for e in edge_keys(network.n_intermediate)} for ct in CELL_TYPES}
        sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
        arms = [("approximated", 0, approx)]
        arms += [("random", r, sample_candidates(final.op_budget, sample_rng, network.n_intermediate))
                 for r in range(random_repeats)]
        arm_rows = []
        for arm, repeat, candidates in arms:
            init_seed, _ = stage_seeds(seed, k_final)
            net = SearchNetwork(final.depth, data.num_classes, candidates=candidates,
                                init_channels=network.init_channels, in_channels=data.in_channels,
                                image_size=data.image_size, n_intermediate=network.n_intermediate,
                                stem_multiplier=network.stem_multiplier, seed=init_seed)
            snap = run_stage(net, final, data, optim, seed, stage_index=k_final).snapshot
            g = derive(snap)
            stats = _evaluate(g, splits, eval_config, seed)
            row = {"seed": seed, "arm": arm, "repeat": repeat, "normal_skips": g.skip_count(),
                   **stats, "selected": arm == "approximated"}
            arm_rows.append(row)
            if out_dir is not None:
                save_genotype(Path(out_dir) / f"genotype_seed{seed}_{arm}{repeat}.json", g)
        randoms = [r for r in arm_rows if r["arm"] == "random"]
        if randoms:
            min(randoms, key=lambda r: (r["test_error"], r["repeat"]))["selected"] = True
        rows.extend(arm_rows)
    if out_dir is not None:
        write_csv(Path(out_dir) / "report.csv", RANDOM_SPACE_COLUMNS, rows)
    return rows


SKIP_SWEEP_COLUMNS = ("m", "normal_skips", "parameters", "test_error")


def experiment_skip_sweep(snapshot: AlphaSnapshot, m_values: Sequence[int], eval_config: EvalConfig,
                          num_classes: int, splits: Optional[DatasetSplits] = None, seed: int = 0,
                          in_channels: int = 3, out_dir=None) -> List[Dict]:
    """Refine one snapshot at every M; train each result when ``splits`` is given."""
    rows = []
    for m in m_values:
        g = refine_skip_count(snapshot, m).genotype
        params = count_parameters(g, eval_config.init_channels, eval_config.depth, num_classes,
                                  in_channels, eval_config.stem_multiplier)
        err = _evaluate(g, splits, eval_config, seed)["test_error"] if splits is not None else math.nan
        rows.append({"m": m, "normal_skips": g.skip_count(), "parameters": params, "test_error": err})
        if out_dir is not None:
            save_genotype(Path(out_dir) / f"genotype_m{m}.json", g)
    if out_dir is not None:
        write_csv(Path(out_dir) / "report.csv", SKIP_SWEEP_COLUMNS, rows)
    return rows


def longest_path(genotype: Genotype, cell_type: str = "normal") -> int:
    """Most operations on any path from a cell input to an intermediate node."""
    depth = {0: 0, 1: 0}
    for node, *pairs in genotype.node_pairs(cell_type):
        depth[node] = 1 + max(depth[src] for _, src in pairs)
    return max(depth[c] for c in genotype.concat)


def intermediate_sources(genotype: Genotype, cell_type: str = "normal") -> int:
    return sum(src >= 2 for _, src in genotype.cell(cell_type))


DEPTH_GAP_COLUMNS = ("stage", "longest_path", "intermediate_sources", "normal_skips")


def depth_gap_probe(snapshots: Sequence, out_dir=None) -> List[Dict]:
    """Connectivity statistics of each stage's derived normal cell."""
    rows = []
    for k, s in enumerate(snapshots, start=1):
        g = s if isinstance(s, Genotype) else derive(s)
        stage = s.metadata.get("stage", k) if isinstance(s, AlphaSnapshot) else k
        rows.append({"stage": stage, "longest_path": longest_path(g),
                     "intermediate_sources": intermediate_sources(g), "normal_skips": g.skip_count()})
    if out_dir is not None:
        write_csv(Path(out_dir) / "report.csv", DEPTH_GAP_COLUMNS, rows)
    return rows


def config_dict(config) -> Dict:
    return asdict(config)
