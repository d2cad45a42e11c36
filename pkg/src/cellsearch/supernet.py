"""Search network: stacked cells of mixed edges sharing two alpha tables.

Node numbering inside a cell: 0 and 1 are the two cell inputs
(``c_{k-2}``, ``c_{k-1}``), 2 .. n+1 are the intermediate nodes.  Edges
are keyed ``(i, j)`` with ``i < j``.
"""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .exceptions import ConfigError, SearchSpaceError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module, Sequential
from .ops import OP_KINDS, EdgeState, FactorizedReduce, ReLUConvBN, canonical_order
from .tensor import Tensor, parameter

CELL_TYPES = ("normal", "reduce")
Edge = Tuple[int, int]
CandidateTable = Dict[str, Dict[Edge, Tuple[str, ...]]]


def edge_keys(n_intermediate: int = 4) -> List[Edge]:
    """All ``(i, j)`` edges of a cell, grouped by target node then source."""
    return [(i, j) for j in range(2, n_intermediate + 2) for i in range(j)]


def reduction_positions(depth: int) -> Tuple[int, int]:
    return depth // 3, 2 * depth // 3


def full_candidates(n_intermediate: int = 4) -> CandidateTable:
    return {ct: {e: OP_KINDS for e in edge_keys(n_intermediate)} for ct in CELL_TYPES}


def node_aggregate(states: Sequence, edges: Sequence[EdgeState], mode="train", rng=None):
    """Compute every intermediate node as the sum of its incoming mixed edges.

    ``states`` holds the two preprocessed cell inputs; the returned list is
    extended with one entry per intermediate node.
    """
    states = list(states)
    by_target: Dict[int, List[EdgeState]] = {}
    for e in edges:
        by_target.setdefault(e.to_node, []).append(e)
    for j in sorted(by_target):
        if j != len(states):
            raise SearchSpaceError(f"node {j} computed out of order")
        total = None
        for e in sorted(by_target[j], key=lambda e: e.from_node):
            out = e(states[e.from_node], mode, rng)
            if total is not None and total.shape != out.shape:
                raise ShapeError(f"node_aggregate[edge {e.from_node}->{e.to_node}]",
                                 total.shape, out.shape)
            total = out if total is None else F.add(total, out)
        states.append(total)
    return states


class SearchCell(Module):
    def __init__(self, c_pp, c_p, c, reduction, reduction_prev, candidates, alphas,
                 n_intermediate, *, rng):
        self.reduction = reduction
        self.n_intermediate = n_intermediate
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, rng=rng)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, 1, 1, 0, rng=rng)
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, rng=rng)
        self.edges = [
            EdgeState(i, j, candidates[(i, j)], alphas[(i, j)], c,
                      2 if reduction and i < 2 else 1, rng=rng)
            for (i, j) in edge_keys(n_intermediate)
        ]

    def forward(self, s0, s1, mode="train", rng=None):
        states = node_aggregate([self.pre0(s0), self.pre1(s1)], self.edges, mode, rng)
        return F.concat(states[2:], axis=1)


class SearchNetwork(Module):
    """Stem, ``depth`` search cells, global pooling and a linear classifier.

    Reduction cells sit at ``depth // 3`` and ``2 * depth // 3``; channels
    double at each.  Every normal cell reads the same per-edge alpha
    tensors, and so do the reduction cells.
    """

    _skip_collect = ("alphas",)

    def __init__(self, depth: int, num_classes: int, *, candidates: Optional[CandidateTable] = None,
                 init_channels: int = 8, in_channels: int = 3, image_size: int = 16,
                 n_intermediate: int = 4, stem_multiplier: int = 3, seed: int = 0,
                 skip_dropout_in_reduction: bool = True):
        validate_geometry(depth, init_channels, image_size)
        self.depth, self.num_classes = depth, num_classes
        self.init_channels, self.in_channels, self.image_size = init_channels, in_channels, image_size
        self.n_intermediate = n_intermediate
        self.skip_dropout_in_reduction = skip_dropout_in_reduction
        if candidates is None:
            candidates = full_candidates(n_intermediate)
        self.candidates = check_candidates(candidates, n_intermediate)
        seq = np.random.SeedSequence(seed)
        init_seed, drop_seed = seq.spawn(2)
        rng = np.random.default_rng(init_seed)
        self._rng = np.random.default_rng(drop_seed)
        self.alphas = {
            ct: {e: parameter(np.zeros(len(k)), name=f"alpha[{ct}][{e[0]}-{e[1]}]")
                 for e, k in self.candidates[ct].items()}
            for ct in CELL_TYPES
        }

        c_curr = stem_multiplier * init_channels
        self.stem = Sequential(Conv2d(in_channels, c_curr, 3, padding=1, rng=rng), BatchNorm2d(c_curr))
        c_pp, c_p, c_curr = c_curr, c_curr, init_channels
        reductions = set(reduction_positions(depth))
        self.cells = []
        reduction_prev = False
        for k in range(depth):
            reduction = k in reductions
            if reduction:
                c_curr *= 2
            ct = "reduce" if reduction else "normal"
            cell = SearchCell(c_pp, c_p, c_curr, reduction, reduction_prev, self.candidates[ct],
                              self.alphas[ct], n_intermediate, rng=rng)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, n_intermediate * c_curr
        self.classifier = Linear(c_p, num_classes, rng=rng)
        self.feature_channels = c_p

    def arch_parameters(self) -> List[Tensor]:
        return [self.alphas[ct][e] for ct in CELL_TYPES for e in self.alphas[ct]]

    def weights(self) -> List[Tensor]:
        return self.parameters()

    def edges(self):
        for cell in self.cells:
            yield from cell.edges

    def set_skip_dropout(self, rate: float) -> None:
        for cell in self.cells:
            r = rate if (self.skip_dropout_in_reduction or not cell.reduction) else 0.0
            for e in cell.edges:
                e.skip_dropout_rate = r

    def forward(self, x, mode: str = "train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.train(mode == "train")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ShapeError("SearchNetwork.forward", x.shape,
                             (None, self.in_channels, self.image_size, self.image_size))
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, mode, self._rng)
        return self.classifier(F.global_avg_pool(s1))

    def alpha_table(self) -> Dict[str, Dict[Edge, Tuple[Tuple[str, ...], np.ndarray]]]:
        """Copy of ``cell type -> edge -> (candidates, alpha values)``."""
        return {ct: {e: (self.candidates[ct][e], self.alphas[ct][e].data.copy())
                     for e in self.alphas[ct]} for ct in CELL_TYPES}


def validate_geometry(depth: int, init_channels: int, image_size: int) -> None:
    if depth < 2:
        raise ConfigError(f"depth must be >= 2 for two distinct reduction cells, got {depth}")
    r1, r2 = reduction_positions(depth)
    if r1 == r2:
        raise ConfigError(f"depth {depth} puts both reduction cells at position {r1}")
    if init_channels < 2 or init_channels % 2:
        raise ConfigError(f"init_channels must be a positive even number, got {init_channels}")
    if image_size < 4 or image_size % 4:
        raise ConfigError(
            f"image size {image_size} cannot be halved twice into an even, non-empty grid")


def check_candidates(candidates: Mapping, n_intermediate: int = 4) -> CandidateTable:
    out: CandidateTable = {}
    for ct in CELL_TYPES:
        if ct not in candidates:
            raise SearchSpaceError(f"missing candidate table for {ct} cells")
        table = {}
        for e in edge_keys(n_intermediate):
            kinds = candidates[ct].get(e)
            if not kinds:
                raise SearchSpaceError(f"empty candidate set on {ct} edge {e[0]}->{e[1]}")
            table[e] = canonical_order(kinds)
        out[ct] = table
    return out


def rebuild_for_stage(depth: int, candidates: CandidateTable, num_classes: int, **kwargs) -> SearchNetwork:
    """Fresh network for a new stage: new weights, zero alphas, given candidates."""
    return SearchNetwork(depth, num_classes, candidates=candidates, **kwargs)
