"""Discrete cells derived from architecture weights, plus their file formats.

Node indices follow the search network: 0 and 1 are the cell inputs
(``c_{k-2}``, ``c_{k-1}``), 2 .. n+1 are intermediate nodes.  Edge keys in
files are written ``"i-j"``.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import FormatError, GenotypeError, RefinementError
from .ops import OP_KINDS, op_index, op_param_count
from .supernet import CELL_TYPES, edge_keys, reduction_positions

SCHEMA_VERSION = 1
SKIP = "skip_connect"
Edge = Tuple[int, int]
Pair = Tuple[str, int]


# ---------------------------------------------------------------- data types

@dataclass
class AlphaSnapshot:
    """Per cell type, per edge: ``[(op, alpha, softmax weight), ...]`` in canonical op order."""

    tables: Dict[str, Dict[Edge, List[Tuple[str, float, float]]]]
    metadata: Dict = field(default_factory=dict)
    n_intermediate: int = 4

    @classmethod
    def from_alphas(cls, alphas: Mapping, metadata: Optional[Dict] = None,
                    n_intermediate: int = 4) -> "AlphaSnapshot":
        """Build from ``cell type -> edge -> (candidates, alpha values)``."""
        tables = {}
        for ct in CELL_TYPES:
            tables[ct] = {}
            for e in edge_keys(n_intermediate):
                kinds, values = alphas[ct][e]
                values = np.asarray(values, dtype=np.float64)
                w = np.exp(values - values.max())
                w /= w.sum()
                tables[ct][e] = [(k, float(a), float(p)) for k, a, p in zip(kinds, values, w)]
        return cls(tables, dict(metadata or {}), n_intermediate)

    def weights(self) -> Dict[str, Dict[Edge, Dict[str, float]]]:
        return {ct: {e: {op: w for op, _, w in rows} for e, rows in table.items()}
                for ct, table in self.tables.items()}

    def candidates(self) -> Dict[str, Dict[Edge, Tuple[str, ...]]]:
        return {ct: {e: tuple(op for op, _, _ in rows) for e, rows in table.items()}
                for ct, table in self.tables.items()}


@dataclass
class Genotype:
    """Two ``(op, source node)`` pairs per intermediate node, for each cell type."""

    normal: Tuple[Pair, ...]
    reduce: Tuple[Pair, ...]
    concat: Tuple[int, ...] = (2, 3, 4, 5)
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.normal = tuple((str(op), int(src)) for op, src in self.normal)
        self.reduce = tuple((str(op), int(src)) for op, src in self.reduce)
        self.concat = tuple(int(c) for c in self.concat)
        validate_genotype(self)

    @property
    def n_intermediate(self) -> int:
        return len(self.normal) // 2

    def cell(self, cell_type: str) -> Tuple[Pair, ...]:
        return self.normal if cell_type == "normal" else self.reduce

    def node_pairs(self, cell_type: str = "normal") -> List[Tuple[int, Pair, Pair]]:
        pairs = self.cell(cell_type)
        return [(j + 2, pairs[2 * j], pairs[2 * j + 1]) for j in range(len(pairs) // 2)]

    def skip_count(self, cell_type: str = "normal") -> int:
        return sum(op == SKIP for op, _ in self.cell(cell_type))


def validate_genotype(g: Genotype) -> None:
    n = len(g.normal) // 2
    if len(g.normal) != 2 * n or len(g.reduce) != len(g.normal) or n < 1:
        raise GenotypeError("each cell needs exactly two pairs per intermediate node")
    for ct in CELL_TYPES:
        pairs = g.cell(ct)
        for j in range(n):
            (op_a, src_a), (op_b, src_b) = pairs[2 * j], pairs[2 * j + 1]
            node = j + 2
            for op, src in ((op_a, src_a), (op_b, src_b)):
                if op not in OP_KINDS:
                    raise GenotypeError(f"{ct} node {node}: unknown operation {op!r}")
                if op == "zero":
                    raise GenotypeError(f"{ct} node {node}: zero is not a valid genotype operation")
                if not 0 <= src < node:
                    raise GenotypeError(f"{ct} node {node}: source {src} must lie in [0, {node})")
            if src_a == src_b:
                raise GenotypeError(f"{ct} node {node}: both pairs read from node {src_a}")
    if any(not 0 <= c < n + 2 for c in g.concat):
        raise GenotypeError(f"concat {g.concat} references unknown nodes")


# ---------------------------------------------------------------- derivation

def _derive_cell(weights: Mapping[Edge, Mapping[str, float]], n_intermediate: int,
                 cell_type: str) -> List[Pair]:
    pairs: List[Pair] = []
    for j in range(2, n_intermediate + 2):
        best_per_edge = []
        for i in range(j):
            ops = [(op, w) for op, w in weights[(i, j)].items() if op != "zero"]
            if not ops:
                continue
            op, w = min(ops, key=lambda t: (-t[1], op_index(t[0])))
            best_per_edge.append((w, i, op))
        if len(best_per_edge) < 2:
            raise GenotypeError(
                f"{cell_type} node {j} has {len(best_per_edge)} edge(s) with a non-zero candidate; need 2")
        best_per_edge.sort(key=lambda t: (-t[0], t[1]))
        pairs.extend((op, i) for _, i, op in best_per_edge[:2])
    return pairs


def derive_from_weights(weights: Mapping, n_intermediate: int = 4,
                        provenance: Optional[Dict] = None) -> Genotype:
    return Genotype(
        normal=_derive_cell(weights["normal"], n_intermediate, "normal"),
        reduce=_derive_cell(weights["reduce"], n_intermediate, "reduce"),
        concat=tuple(range(2, n_intermediate + 2)),
        provenance=dict(provenance or {}),
    )


def derive(snapshot: AlphaSnapshot) -> Genotype:
    """Keep the two strongest non-zero operations per node, at most one per edge.

    Each incoming edge contributes its best non-zero candidate; the two edges
    whose best candidates weigh most win.  Ties go to the lower source node,
    and within an edge to the earlier operation in ``OP_KINDS``.
    """
    return derive_from_weights(snapshot.weights(), snapshot.n_intermediate,
                               _provenance(snapshot.metadata))


def _provenance(meta):
    return {k: meta[k] for k in ("seed", "plan_digest", "stage") if k in meta}


@dataclass
class RefinementResult:
    genotype: Genotype
    trace: List[Dict]
    rounds: int

    @property
    def iterations(self) -> int:
        """Number of derivations performed (``rounds + 1``)."""
        return len(self.trace)


def refine_skip_count(snapshot: AlphaSnapshot, max_skips: int,
                      cell_types: Sequence[str] = ("normal",)) -> RefinementResult:
    """Re-derive with surplus skip-connects zeroed until at most ``max_skips`` remain.

    Each round keeps the ``max_skips`` strongest skip-connects present in the
    current topology and sets the weight of every other one to 0 in a working
    copy, then derives again.  ``max_skips`` is an upper bound: a topology that
    already has fewer skips is returned as is.
    """
    if max_skips < 0:
        raise ValueError(f"max_skips must be >= 0, got {max_skips}")
    work = copy.deepcopy(snapshot.weights())
    n = snapshot.n_intermediate
    budget = sum(SKIP in work[ct][e] for ct in cell_types for e in work[ct])
    trace: List[Dict] = []
    rounds = 0
    while True:
        g = derive_from_weights(work, n, _provenance(snapshot.metadata))
        surplus = {}
        for ct in cell_types:
            skips = [(work[ct][(src, node)][SKIP], node, src)
                     for node, *pairs in g.node_pairs(ct) for op, src in pairs if op == SKIP]
            if len(skips) > max_skips:
                skips.sort(key=lambda t: (-t[0], t[1], t[2]))
                surplus[ct] = [(src, node) for _, node, src in skips[max_skips:]]
        trace.append({"skip_counts": {ct: g.skip_count(ct) for ct in cell_types},
                      "zeroed": {ct: [f"{i}-{j}" for i, j in edges] for ct, edges in surplus.items()}})
        if not surplus:
            return RefinementResult(g, trace, rounds)
        if rounds >= budget:
            raise RefinementError(
                f"skip refinement did not reach <= {max_skips} skips within {budget} rounds")
        for ct, edges in surplus.items():
            for e in edges:
                work[ct][e][SKIP] = 0.0
        rounds += 1


# ---------------------------------------------------------------- parameter accounting

def count_parameters(genotype: Genotype, init_channels: int, depth: int, num_classes: int = 10,
                     in_channels: int = 3, stem_multiplier: int = 3) -> int:
    """Closed-form learnable parameter count of the evaluation network for ``genotype``."""
    c = init_channels
    c_curr = stem_multiplier * c
    total = in_channels * c_curr * 9 + 2 * c_curr
    c_pp, c_p, c_curr = c_curr, c_curr, c
    reductions = set(reduction_positions(depth))
    multiplier = len(genotype.concat)
    for k in range(depth):
        reduction = k in reductions
        if reduction:
            c_curr *= 2
        total += c_pp * c_curr + 2 * c_curr
        total += c_p * c_curr + 2 * c_curr
        pairs = genotype.reduce if reduction else genotype.normal
        for op, src in pairs:
            total += op_param_count(op, c_curr, 2 if reduction and src < 2 else 1)
        c_pp, c_p = c_p, multiplier * c_curr
    return total + c_p * num_classes + num_classes


# ---------------------------------------------------------------- serialisation

_FLOAT_TAG = "\x00f:"


def _tag_floats(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise FormatError(f"cannot serialise non-finite value {obj}")
        return _FLOAT_TAG + format(obj, ".17g")
    if isinstance(obj, dict):
        return {k: _tag_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tag_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _tag_floats(obj.item())
    return obj


def dumps(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    text = json.dumps(_tag_floats(obj), indent=2)
    text = re.sub(r'"\\u0000f:([^"]+)"', lambda m: _float_literal(m.group(1)), text)
    return text + "\n"


def _float_literal(s: str) -> str:
    # keep a float marker so integers-valued floats read back as floats
    return s if any(ch in s for ch in ".eEn") else s + ".0"


def _edge_key(e: Edge) -> str:
    return f"{e[0]}-{e[1]}"


def _parse_edge_key(key: str, where: str) -> Edge:
    m = re.fullmatch(r"(\d+)-(\d+)", key)
    if not m:
        raise FormatError(f"malformed edge key {key!r}", field=where)
    return int(m.group(1)), int(m.group(2))


def snapshot_to_dict(s: AlphaSnapshot) -> Dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "alpha_snapshot",
        "n_intermediate": s.n_intermediate,
        **{ct: {_edge_key(e): [[op, float(a), float(w)] for op, a, w in rows]
                for e, rows in s.tables[ct].items()} for ct in CELL_TYPES},
        "metadata": s.metadata,
    }


def _check_header(d, kind):
    if not isinstance(d, dict):
        raise FormatError("top level must be an object")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"expected {SCHEMA_VERSION}, got {d.get('schema_version')!r}",
                          field="schema_version")
    if d.get("kind") != kind:
        raise FormatError(f"expected {kind!r}, got {d.get('kind')!r}", field="kind")


def _check_op(op, where, allow_zero=True):
    if op not in OP_KINDS or (op == "zero" and not allow_zero):
        raise FormatError(f"unknown operation {op!r}", field=where)
    return op


def _number(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise FormatError(f"expected a finite number, got {v!r}", field=where)
    return float(v)


def snapshot_from_dict(d: Dict) -> AlphaSnapshot:
    _check_header(d, "alpha_snapshot")
    n = d.get("n_intermediate", 4)
    if not isinstance(n, int) or n < 1:
        raise FormatError(f"invalid value {n!r}", field="n_intermediate")
    tables = {}
    expected = set(edge_keys(n))
    for ct in CELL_TYPES:
        if not isinstance(d.get(ct), dict):
            raise FormatError("missing cell type table", field=ct)
        table = {}
        for key, rows in d[ct].items():
            where = f"{ct}.{key}"
            e = _parse_edge_key(key, where)
            if e not in expected:
                raise FormatError(f"edge {key} is not part of a {n}-node cell", field=where)
            if not isinstance(rows, list) or not rows:
                raise FormatError("expected a non-empty list of [op, alpha, weight]", field=where)
            parsed = []
            for k, row in enumerate(rows):
                if not isinstance(row, list) or len(row) != 3:
                    raise FormatError("expected [op, alpha, weight]", field=f"{where}[{k}]")
                op = _check_op(row[0], f"{where}[{k}].op")
                parsed.append((op, _number(row[1], f"{where}[{k}].alpha"),
                               _number(row[2], f"{where}[{k}].weight")))
            ops = [p[0] for p in parsed]
            if len(set(ops)) != len(ops) or ops != sorted(ops, key=op_index):
                raise FormatError("operations must be distinct and in canonical order", field=where)
            total = math.fsum(p[2] for p in parsed)
            if abs(total - 1.0) > 1e-9:
                raise FormatError(f"weights sum to {total!r}, expected 1", field=where)
            table[e] = parsed
        missing = expected - set(table)
        if missing:
            raise FormatError(f"missing edges {sorted(_edge_key(e) for e in missing)}",
                              field=ct)
        tables[ct] = {e: table[e] for e in edge_keys(n)}
    meta = d.get("metadata", {})
    if not isinstance(meta, dict):
        raise FormatError("expected an object", field="metadata")
    return AlphaSnapshot(tables, meta, n)


def genotype_to_dict(g: Genotype) -> Dict:
    def grouped(pairs):
        return [[[op, src] for op, src in pairs[2 * j:2 * j + 2]] for j in range(len(pairs) // 2)]

    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "genotype",
        "normal": grouped(g.normal),
        "reduce": grouped(g.reduce),
        "concat": list(g.concat),
        "provenance": g.provenance,
    }


def genotype_from_dict(d: Dict) -> Genotype:
    _check_header(d, "genotype")
    cells = {}
    for ct in CELL_TYPES:
        nodes = d.get(ct)
        if not isinstance(nodes, list) or not nodes:
            raise FormatError("expected a list of nodes", field=ct)
        pairs = []
        for j, node in enumerate(nodes):
            if not isinstance(node, list) or len(node) != 2:
                raise FormatError("expected two [op, from] pairs", field=f"{ct}[{j}]")
            for k, pair in enumerate(node):
                where = f"{ct}[{j}][{k}]"
                if not isinstance(pair, list) or len(pair) != 2:
                    raise FormatError("expected [op, from]", field=where)
                op = _check_op(pair[0], f"{where}.op", allow_zero=False)
                src = pair[1]
                if isinstance(src, bool) or not isinstance(src, int):
                    raise FormatError(f"expected an integer node index, got {src!r}", field=f"{where}.from")
                pairs.append((op, src))
        cells[ct] = pairs
    concat = d.get("concat")
    if not isinstance(concat, list) or not all(isinstance(c, int) for c in concat):
        raise FormatError("expected a list of node indices", field="concat")
    prov = d.get("provenance", {})
    if not isinstance(prov, dict):
        raise FormatError("expected an object", field="provenance")
    try:
        return Genotype(cells["normal"], cells["reduce"], tuple(concat), prov)
    except GenotypeError as exc:
        raise FormatError(str(exc), field="genotype") from exc


def save_snapshot(path, s: AlphaSnapshot) -> None:
    Path(path).write_text(dumps(snapshot_to_dict(s)))


def load_snapshot(path) -> AlphaSnapshot:
    return snapshot_from_dict(_load_json(path))


def save_genotype(path, g: Genotype) -> None:
    Path(path).write_text(dumps(genotype_to_dict(g)))


def load_genotype(path) -> Genotype:
    return genotype_from_dict(_load_json(path))


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}", field=str(path)) from exc


# ---------------------------------------------------------------- graph export

def node_label(index: int) -> str:
    if index == 0:
        return "c_{k-2}"
    if index == 1:
        return "c_{k-1}"
    return str(index - 2)


def export_graph(genotype: Genotype, cell_type: str = "normal") -> str:
    """DOT description of one cell: labelled operation edges plus concat edges."""
    if cell_type not in CELL_TYPES:
        raise ValueError(f"cell_type must be one of {CELL_TYPES}")
    n = genotype.n_intermediate
    lines = [f"digraph {cell_type} {{", "  rankdir=LR;"]
    lines.append('  "c_{k-2}" [shape=box];')
    lines.append('  "c_{k-1}" [shape=box];')
    for j in range(n):
        lines.append(f'  "{j}" [shape=ellipse];')
    lines.append('  "output" [shape=box];')
    for node, *pairs in genotype.node_pairs(cell_type):
        for op, src in pairs:
            lines.append(f'  "{node_label(src)}" -> "{node_label(node)}" [label="{op}"];')
    for c in genotype.concat:
        lines.append(f'  "{node_label(c)}" -> "output";')
    lines.append("}")
    return "\n".join(lines) + "\n"
