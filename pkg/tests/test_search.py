import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_front
from quantnas.data import SRPairs, toy_task
from quantnas.objective import cost_report
from quantnas.search import (
    RunResult,
    SearchAborted,
    SearchConfig,
    TimingRow,
    TrainConfig,
    final_max_alpha,
    history_from_csv,
    history_to_csv,
    non_dominated,
    pareto_sweep,
    psnr,
    random_genotype,
    retrain,
    rgb_to_y,
    search,
    sweep_from_csv,
    sweep_to_csv,
    timing_bench,
    timing_from_csv,
    timing_ratios,
    timing_to_csv,
    uniform_genotype,
)
from quantnas.supernet import SearchSpaceSpec, build_supernet
from quantnas.tensor import ConfigurationError

TINY_SPACE = SearchSpaceSpec(channels=3, bits=(4, 8))
ONE_EDGE = {
    "head": ["simple_3x3"], "body": ["simple_3x3"], "skip": ["simple_1x1"],
    "upsample": ["simple_3x3"], "tail": ["simple_1x1"],
}


@pytest.fixture(scope="module")
def task():
    return toy_task(seed=0, scale=2, n_train_images=4, n_test_images=2, image_hw=(16, 16), lr_patch=4)


def tiny_search_cfg(**kw):
    base = SearchConfig(epochs=3, batch_size=4, max_iters_per_epoch=2, w_optimizer="adam", alpha_lr=0.05, mu0=1e-2)
    return replace(base, **kw)


def tiny_train_cfg(**kw):
    return replace(TrainConfig(epochs=2, batch_size=2, w_optimizer="adam", max_iters_per_epoch=2), **kw)


class TestPsnr:
    def test_uniform_error(self):
        # every Y value off by 0.1 -> mse 0.01 -> 20 dB
        a = np.zeros((1, 3, 8, 8))
        assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-10)

    def test_identical(self, rng):
        a = rng.uniform(size=(2, 3, 5, 5))
        assert psnr(a, a) == math.inf

    def test_gray_images_use_value(self, rng):
        g, h = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
        a, b = np.stack([g] * 3), np.stack([h] * 3)
        mse = np.mean((g - h) ** 2)
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), rel=1e-12)

    def test_crop(self):
        a, b = np.zeros((1, 3, 6, 6)), np.zeros((1, 3, 6, 6))
        b[..., 0, :] = 1.0  # damage only the border row
        assert psnr(a, b, crop=1) == math.inf
        assert psnr(a, b) < 20

    def test_luma_weights(self):
        img = np.zeros((3, 1, 1))
        img[1] = 1.0
        assert rgb_to_y(img)[0, 0] == pytest.approx(0.587)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            psnr(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


class TestPareto:
    def test_example(self):
        pts = [(1.0, 30.0), (2.0, 29.0), (0.5, 28.0)]
        assert sorted(non_dominated(pts)) == [0, 2]
        assert set(non_dominated(pts)) == brute_force_front(pts)

    def test_duplicates_both_kept(self):
        assert non_dominated([(1.0, 2.0), (1.0, 2.0)]) == [0, 1]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=12))
    def test_matches_brute_force(self, pts):
        pts = [(float(b), float(p)) for b, p in pts]
        assert set(non_dominated(pts)) == brute_force_front(pts)


class TestSearchLoop:
    def test_degenerate_space(self, task):
        space = SearchSpaceSpec(channels=3, bits=(8,), catalogs=dict(ONE_EDGE))
        net = build_supernet(space, "san")
        g, history = search(net, task.alpha_split, task.weight_split, tiny_search_cfg())
        assert [c.op for c in g.layers] == [ONE_EDGE[c.block][0] for c in g.layers]
        assert all(c.bits == 8 for c in g.layers)
        assert all(row["l_e"] == 0.0 for row in history)

    def test_history_rows(self, task):
        net = build_supernet(TINY_SPACE, "san")
        _, history = search(net, task.alpha_split, task.weight_split, tiny_search_cfg())
        assert [r["epoch"] for r in history] == [0, 1, 2]
        assert [r["mu"] for r in history][:2] == [0.0, 0.0]
        assert history[0]["l_cq"] == pytest.approx(1.0, abs=0.05)
        assert {f"max_alpha.{k}" for k in net.layers} <= set(history[0])
        assert 0 < final_max_alpha(history) <= 1

    def test_weight_pass_leaves_alpha(self, task):
        net = build_supernet(TINY_SPACE, "san")
        before = [p.data.copy() for p in net.alpha_parameters()]
        search(net, task.alpha_split, task.weight_split, tiny_search_cfg(alpha_lr=0.0))
        for a, p in zip(before, net.alpha_parameters()):
            np.testing.assert_array_equal(a, p.data)

    def test_alpha_pass_leaves_weights(self, task):
        net = build_supernet(TINY_SPACE, "san")
        names = [n for n, _ in net.named_parameters() if not n.endswith("logits")]
        before = {n: p.data.copy() for n, p in net.named_parameters() if n in names}
        search(net, task.alpha_split, task.weight_split, tiny_search_cfg(w_lr=0.0, epochs=1))
        after = dict(net.named_parameters())
        for n in names:
            if n.endswith(".step"):
                continue  # steps are set from data on first use
            np.testing.assert_array_equal(before[n], after[n].data, err_msg=n)
        assert any(not np.allclose(p.data, 0) for p in net.alpha_parameters())

    def test_needs_disjoint_splits(self, task):
        net = build_supernet(TINY_SPACE)
        with pytest.raises(ConfigurationError):
            search(net, task.alpha_split, task.alpha_split, tiny_search_cfg())

    def test_nan_aborts_with_snapshot(self, task):
        bad = SRPairs(task.alpha_split.lr.copy(), task.alpha_split.hr, task.alpha_split.scale)
        bad.lr[0, 0, 0, 0] = np.nan
        net = build_supernet(TINY_SPACE)
        with pytest.raises(SearchAborted) as info:
            search(net, bad, task.weight_split, tiny_search_cfg(batch_size=len(bad)))
        snap = info.value.snapshot
        assert snap["failed"] == "alpha loss"
        assert snap["epoch"] == 0 and set(snap["alphas"]) == set(net.layers)

    @pytest.mark.parametrize("field,value", [("epochs", 0), ("w_optimizer", "rmsprop"), ("eta", -1.0)])
    def test_bad_config(self, task, field, value):
        with pytest.raises(ConfigurationError):
            search(build_supernet(TINY_SPACE), task.alpha_split, task.weight_split, tiny_search_cfg(**{field: value}))

    def test_deterministic(self, task):
        outs = []
        for _ in range(2):
            net = build_supernet(TINY_SPACE, "san", seed=5)
            g, h = search(net, task.alpha_split, task.weight_split, tiny_search_cfg(seed=5))
            outs.append((g.to_json(), history_to_csv(h)))
        assert outs[0] == outs[1]


class TestRetrain:
    def test_deterministic(self, task):
        g = random_genotype(TINY_SPACE, np.random.default_rng(0))
        runs = [retrain(g, task.train, task.test, tiny_train_cfg()) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        s0, s1 = runs[0][0].state_dict(), runs[1][0].state_dict()
        assert s0.keys() == s1.keys()
        assert all(np.array_equal(s0[k], s1[k]) for k in s0)

    def test_metrics(self, task):
        g = uniform_genotype(TINY_SPACE, 0, 8)
        _, m = retrain(g, task.train, task.test, tiny_train_cfg())
        assert set(m) == {"psnr", "bicubic_psnr", "final_l1", "bitops", "flops"}
        assert m["bitops"] == cost_report(g).total_bitops == 64 * m["flops"]
        assert np.isfinite(m["psnr"])

    def test_uniform_genotype_clamps(self):
        g = uniform_genotype(TINY_SPACE, 3, 4)
        ops = {c.block: c.op for c in g.layers}
        assert ops["skip"] == "simple_5x5" and ops["tail"] == "simple_5x5"
        assert ops["head"] == "simple_5x5_g3"


class TestSweep:
    def test_single_eta(self, task, tmp_path):
        results, front = pareto_sweep(TINY_SPACE, task, [0.0], tiny_search_cfg(epochs=1), tiny_train_cfg(epochs=1),
                                      out_dir=tmp_path)
        assert len(results) == 1 and front == [0]
        assert (tmp_path / "genotype_00.json").exists()

    def test_duplicate_eta_identical(self, task):
        results, front = pareto_sweep(TINY_SPACE, task, [1e-3, 1e-3], tiny_search_cfg(epochs=1),
                                      tiny_train_cfg(epochs=1))
        a, b = results
        assert a.genotype == b.genotype
        assert (a.bitops, a.psnr) == (b.bitops, b.psnr)
        assert front == [0, 1]

    def test_csv_round_trip(self):
        res = [RunResult(0.0, 1, None, [], 2.5e8, 27.25), RunResult(1e-4, 1, None, [], math.nan, math.nan, "boom")]
        rows = sweep_from_csv(sweep_to_csv(res, [0]))
        assert rows[0] == {"eta": 0.0, "seed": 1, "bitops": 2.5e8, "psnr": 27.25, "pareto": True, "error": ""}
        assert math.isnan(rows[1]["psnr"]) and rows[1]["error"] == "boom" and not rows[1]["pareto"]


class TestCsv:
    def test_history_round_trip(self):
        hist = [{"epoch": 0, "l1": 0.1, "l_cq": 1.0, "l_e": 3.2, "mu": 0.0, "lr_w": 1e-3, "max_alpha.head.0": 0.2},
                {"epoch": 1, "l1": 1 / 3, "l_cq": 0.9, "l_e": 3.1, "mu": 1e-5, "lr_w": 5e-4, "max_alpha.head.0": 0.3}]
        text = history_to_csv(hist)
        assert history_from_csv(text) == hist
        assert history_to_csv(history_from_csv(text)) == text

    def test_timing_round_trip(self):
        rows = [TimingRow("san", 2, 60, 1.2345678901234, 480), TimingRow("independent", 2, 60, 2.0, 960)]
        assert timing_from_csv(timing_to_csv(rows)) == rows


class TestTiming:
    def test_conv_counts(self):
        rows = timing_bench(iterations=2, batch_size=2, lr_hw=(4, 4), space=TINY_SPACE, bit_counts=(1, 2, 3))
        layer_convs = 0
        for spec in TINY_SPACE.layer_specs():
            # every catalog op is evaluated once per edge; separable ops hold two convs
            layer_convs += sum(2 if op.startswith("conv_") else 1 for op in spec.ops)
        for r in rows:
            per_edge = r.n_bits if r.strategy == "independent" else 1
            assert r.conv_calls == layer_convs * per_edge * r.iterations, r
            assert r.seconds > 0

    def test_ratios(self):
        rows = [TimingRow("independent", 2, 1, 4.0, 0), TimingRow("shared", 2, 1, 2.0, 0), TimingRow("san", 2, 1, 3.0, 0)]
        assert timing_ratios(rows)[2] == {"san/shared": 1.5, "shared/independent": 0.5, "san/independent": 0.75}

    def test_unknown_bit_count(self):
        with pytest.raises(ConfigurationError):
            timing_bench(bit_counts=(4,), iterations=1)
