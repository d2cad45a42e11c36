"""Reference implementations the package is checked against.

Each one follows the written rule as literally as possible and shares no
code with the implementation under test beyond plain data containers.
"""

import itertools
import math

import numpy as np

from cellsearch.genotype import AlphaSnapshot

OPS = ("zero", "skip_connect", "max_pool_3x3", "avg_pool_3x3",
       "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5")
EDGES = [(i, j) for j in range(2, 6) for i in range(j)]


def softmax(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = math.fsum(e)
    return [v / s for v in e]


def random_snapshot(rng, candidates=None, skip_bias=0.0, biased_edges=6, scale=1.0):
    """Random alphas; ``skip_bias`` is added to the skip alpha on ``biased_edges`` random normal edges."""
    alphas = {}
    for ct in ("normal", "reduce"):
        alphas[ct] = {}
        boosted = set()
        if skip_bias and ct == "normal":
            boosted = {EDGES[k] for k in rng.choice(len(EDGES), biased_edges, replace=False)}
        for e in EDGES:
            kinds = candidates[ct][e] if candidates else OPS
            a = rng.standard_normal(len(kinds)) * scale
            if e in boosted and "skip_connect" in kinds:
                a[kinds.index("skip_connect")] += skip_bias
            alphas[ct][e] = (tuple(kinds), a)
    return AlphaSnapshot.from_alphas(alphas, {"stage": 1, "seed": 0})


def random_candidates(rng, size):
    return {ct: {e: tuple(OPS[i] for i in sorted(rng.choice(8, size, replace=False))) for e in EDGES}
            for ct in ("normal", "reduce")}


# ---------------------------------------------------------------- pruning

def topk_oracle(rows, keep):
    """Full stable sort of all candidates by descending weight, then the first ``keep``."""
    weights = np.array([w for _, _, w in rows])
    order = np.argsort(-weights, kind="stable")
    return {rows[i][0] for i in order[:keep]}


# ---------------------------------------------------------------- derivation

def derive_cell_oracle(weights, n=4):
    """Enumerate every pair of (edge, op) choices per node and keep the best one.

    Pairs must use distinct edges and non-zero ops; "best" compares the
    larger weight first, then the smaller one.
    """
    pairs = []
    for j in range(2, n + 2):
        choices = [(w, i, op) for i in range(j) for op, w in weights[(i, j)].items() if op != "zero"]
        best, best_key = None, None
        for a, b in itertools.combinations(choices, 2):
            if a[1] == b[1]:
                continue
            hi, lo = sorted((a, b), key=lambda c: (-c[0], c[1], OPS.index(c[2])))
            key = (hi[0], lo[0], -hi[1], -lo[1], -OPS.index(hi[2]), -OPS.index(lo[2]))
            if best_key is None or key > best_key:
                best, best_key = (hi, lo), key
        if best is None:
            raise ValueError(f"node {j} has no valid pair")
        pairs.extend((op, i) for _, i, op in best)
    return pairs


def derive_oracle(snapshot):
    w = snapshot.weights()
    return derive_cell_oracle(w["normal"]), derive_cell_oracle(w["reduce"])


def refine_oracle(snapshot, m):
    """Simulate the refinement procedure step by step with the enumeration oracle."""
    w = {ct: {e: dict(ops) for e, ops in t.items()} for ct, t in snapshot.weights().items()}
    derivations = 0
    while True:
        normal = derive_cell_oracle(w["normal"])
        derivations += 1
        skips = []
        for k, (op, src) in enumerate(normal):
            if op == "skip_connect":
                node = 2 + k // 2
                skips.append((w["normal"][(src, node)]["skip_connect"], node, src))
        if len(skips) <= m:
            return normal, derivations
        skips.sort(key=lambda s: (-s[0], s[1], s[2]))
        for _, node, src in skips[m:]:
            w["normal"][(src, node)]["skip_connect"] = 0.0


# ---------------------------------------------------------------- graphs

def longest_path_oracle(pairs, n=4):
    """Enumerate every input-to-node path explicitly and return the longest (in operations)."""
    preds = {2 + k // 2: [] for k in range(2 * n)}
    for k, (_, src) in enumerate(pairs):
        preds[2 + k // 2].append(src)

    def paths_to(node):
        if node < 2:
            return [[node]]
        return [p + [node] for s in preds[node] for p in paths_to(s)]

    return max(len(p) - 1 for node in range(2, n + 2) for p in paths_to(node))


# ---------------------------------------------------------------- numerics

def conv2d_oracle(x, w, stride=1, padding=0, dilation=1, groups=1):
    b, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((b, c_out, ho, wo))
    per = c_out // groups
    for n in range(b):
        for o in range(c_out):
            g = o // per
            for y in range(ho):
                for q in range(wo):
                    acc = 0.0
                    for c in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[n, g * cg + c, y * stride + i * dilation,
                                                         q * stride + j * dilation]
                    out[n, o, y, q] = acc
    return out


def pool_oracle(x, mode, k=3, stride=1, padding=1):
    b, c, h, wd = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, c, ho, wo))
    for n in range(b):
        for ch in range(c):
            for y in range(ho):
                for q in range(wo):
                    vals = []
                    for i in range(k):
                        for j in range(k):
                            r, s = y * stride + i - padding, q * stride + j - padding
                            if 0 <= r < h and 0 <= s < wd:
                                vals.append(x[n, ch, r, s])
                    out[n, ch, y, q] = max(vals) if mode == "max" else sum(vals) / len(vals)
    return out
