import numpy as np
import pytest

from cellsearch.data import DatasetSpec, generate_synthetic
from cellsearch.evaluation import (EvalConfig, build_eval_network, depth_gap_probe, drop_path_masks,
                                   experiment_random_space, experiment_skip_sweep, intermediate_sources,
                                   longest_path, sample_candidates, train_eval)
from cellsearch.exceptions import ConfigError, GenotypeError
from cellsearch.genotype import Genotype, count_parameters, derive
from cellsearch.ops import EdgeState
from cellsearch.search import NetworkConfig, OptimizerConfig, SearchData, StagePlan
from cellsearch.tensor import Tensor

from oracles import longest_path_oracle, random_snapshot, refine_oracle
from test_genotype import GOLDEN, REFERENCE

ALL_SKIP = Genotype([("skip_connect", s) for _ in range(4) for s in (0, 1)],
                    [("skip_connect", s) for _ in range(4) for s in (0, 1)])
TINY = EvalConfig(depth=3, init_channels=4, epochs=1, batch_size=16)


@pytest.fixture(scope="module")
def tiny_splits():
    return generate_synthetic(DatasetSpec(image_size=8, train_count=32, test_count=16))


def _random_genotype(rng):
    pairs = []
    for node in range(2, 6):
        a, b = rng.choice(node, 2, replace=False)
        pairs += [("sep_conv_3x3", int(a)), ("skip_connect", int(b))]
    return Genotype(pairs, REFERENCE.reduce)


def test_census_matches_analytic_count():
    for g in (REFERENCE, ALL_SKIP):
        for depth, c in ((3, 4), (8, 16)):
            cfg = EvalConfig(depth=depth, init_channels=c)
            assert build_eval_network(g, cfg, 10).num_parameters() == count_parameters(g, c, depth)


def test_network_has_no_mixtures_or_alphas():
    net = build_eval_network(REFERENCE, TINY, 4)
    assert not any(isinstance(m, EdgeState) for m in net.modules())
    assert not any("alpha" in name for name, _ in net.named_parameters())
    assert [c.reduction for c in net.cells] == [False, True, True]


def test_all_skip_parameters_are_stem_adapters_and_classifier():
    net = build_eval_network(ALL_SKIP, EvalConfig(depth=5, init_channels=4), 4)
    adapters = sum(c.pre0.num_parameters() + c.pre1.num_parameters() for c in net.cells)
    # stride-2 skips in reduction cells are factorized reductions, counted as adapters too
    reduce_skips = sum(op.num_parameters() for c in net.cells if c.reduction for op in c.ops)
    cell_ops = sum(op.num_parameters() for c in net.cells if not c.reduction for op in c.ops)
    assert cell_ops == 0
    total = net.stem.num_parameters() + adapters + reduce_skips + net.classifier.num_parameters()
    assert net.num_parameters() == total


def test_all_skip_cell_sums_identity_paths():
    net = build_eval_network(ALL_SKIP, TINY, 4).eval()
    cell = net.cells[0]
    rng = np.random.default_rng(0)
    s0, s1 = Tensor(rng.standard_normal((2, 12, 8, 8))), Tensor(rng.standard_normal((2, 12, 8, 8)))
    a, b = cell.pre0(s0).data, cell.pre1(s1).data
    np.testing.assert_allclose(cell(s0, s1).data, np.concatenate([a + b] * 4, axis=1), atol=1e-14)


def test_full_geometry_builds():
    net = build_eval_network(REFERENCE, EvalConfig(depth=20, init_channels=36), 10)
    assert len(net.cells) == 20
    assert [k for k, c in enumerate(net.cells) if c.reduction] == [6, 13]


def test_invalid_inputs_rejected():
    with pytest.raises(GenotypeError):
        build_eval_network("not a genotype", TINY, 4)
    with pytest.raises(ConfigError):
        EvalConfig(depth=2)
    with pytest.raises(ConfigError):
        EvalConfig(drop_path_prob=1.0)


def test_drop_path_never_kills_both_inputs():
    rng = np.random.default_rng(0)
    a, b = drop_path_masks(100_000, 0.6, rng)
    assert (a | b).all()
    assert 0.3 < a.mean() < 0.7


def test_zero_epochs_reports_initial_error(tiny_splits):
    cfg = EvalConfig(depth=3, init_channels=4, epochs=0)
    res = train_eval(build_eval_network(REFERENCE, cfg, 4, seed=0), tiny_splits, cfg, seed=0)
    assert res.history == []
    assert 0.0 <= res.test_error <= 1.0


def test_training_is_deterministic_and_ramps_drop_path(tiny_splits):
    cfg = EvalConfig(depth=3, init_channels=4, epochs=2, batch_size=16, drop_path_prob=0.4, cutout_length=3)
    runs = [train_eval(build_eval_network(REFERENCE, cfg, 4, seed=5), tiny_splits, cfg, seed=5)
            for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert [h["drop_path_prob"] for h in runs[0].history] == [0.0, 0.2]


def test_learnable_cells_fit_better_than_all_skip():
    splits = generate_synthetic(DatasetSpec(image_size=16, train_count=128, test_count=32))
    cfg = EvalConfig(depth=3, init_channels=8, epochs=4, drop_path_prob=0.0)
    losses = {}
    for name, g in (("skip", ALL_SKIP), ("learnable", REFERENCE)):
        losses[name] = train_eval(build_eval_network(g, cfg, 4, seed=0), splits, cfg, seed=0).train_loss
    assert losses["learnable"] < losses["skip"]


def test_longest_path_examples():
    shallow = Genotype([("sep_conv_3x3", s) for _ in range(4) for s in (0, 1)], REFERENCE.reduce)
    assert longest_path(shallow) == 1 and intermediate_sources(shallow) == 0
    chain = Genotype([("sep_conv_3x3", 0), ("sep_conv_3x3", 1), ("sep_conv_3x3", 0), ("sep_conv_3x3", 2),
                      ("sep_conv_3x3", 0), ("sep_conv_3x3", 3), ("sep_conv_3x3", 0), ("sep_conv_3x3", 4)],
                     REFERENCE.reduce)
    assert longest_path(chain) == 4 and intermediate_sources(chain) == 3


def test_longest_path_matches_enumeration_oracle():
    for k in range(100):
        g = _random_genotype(np.random.default_rng(k))
        assert longest_path(g) == longest_path_oracle(g.normal)
        assert intermediate_sources(g) == sum(src >= 2 for _, src in g.normal)


def test_depth_gap_probe_rows(tmp_path):
    snaps = [random_snapshot(np.random.default_rng(k)) for k in range(3)]
    rows = depth_gap_probe(snaps, out_dir=tmp_path)
    assert [r["longest_path"] for r in rows] == [longest_path(derive(s)) for s in snaps]
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header == "stage,longest_path,intermediate_sources,normal_skips"


def test_skip_sweep_without_training():
    snap = random_snapshot(np.random.default_rng(4), skip_bias=4.0, biased_edges=8)
    rows = experiment_skip_sweep(snap, range(5), EvalConfig(depth=5, init_channels=8), 10)
    for r in rows:
        assert r["normal_skips"] <= r["m"]
        expected = sum(op == "skip_connect" for op, _ in refine_oracle(snap, r["m"])[0])
        assert r["normal_skips"] == expected
    # a removed skip may be replaced by a parameter-free pool, so only non-increasing here
    by_skips = sorted({(r["normal_skips"], r["parameters"]) for r in rows})
    assert all(a[1] >= b[1] for a, b in zip(by_skips, by_skips[1:]))


def test_random_candidates_are_equal_size_and_seeded():
    a = sample_candidates(3, np.random.default_rng(1))
    b = sample_candidates(3, np.random.default_rng(1))
    assert a == b
    assert {len(v) for t in a.values() for v in t.values()} == {3}


def test_random_space_report(tmp_path, tiny_splits):
    plan = StagePlan.from_lists((2, 3), (8, 3), (0.0, 0.0), epochs=1, warm_epochs=0)
    data = SearchData.from_splits(tiny_splits)
    rows = experiment_random_space(plan, data, tiny_splits, [0], TINY, optim=OptimizerConfig(batch_size=16),
                                   network=NetworkConfig(init_channels=2), random_repeats=2, out_dir=tmp_path)
    assert [(r["arm"], r["repeat"]) for r in rows] == [("approximated", 0), ("random", 0), ("random", 1)]
    assert sum(r["selected"] for r in rows) == 2
    header = (tmp_path / "report.csv").read_text().splitlines()[0] + "\n"
    assert header == (GOLDEN / "random_space_header.csv").read_text()
