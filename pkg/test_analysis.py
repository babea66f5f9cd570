"""
Tests for analysis: correlation statistics, the per-group studies and the
CSV re-ingestion path.
"""
import numpy as np
import pytest
from scipy import stats

from analysis import (
    CorrelationResult,
    average_results,
    correlate,
    early_layer_ratio,
    ebt_correlation_trace,
    grasp_vs_loss_correlation,
    l2_vs_distance_correlation,
    l2_vs_distance_trace,
    layerwise_report,
    pearson,
    read_scatter_csv,
    sigma_mask,
    spearman,
    summary_csv,
    trend,
    write_scatter_csv,
)
from diffcore import dot
from importance import loss_preservation
from masking import Mask, round_half_up, uniform_mask
from netmodel import STRUCTURED, UNSTRUCTURED, build_mlp, build_quadratic, make_blobs
from trainer import RunLog, full_batch_gradient
from utils import write_artifact


def _with_sigma(net, layer: str, values):
    params = net.params.copy()
    params[f"{layer}.sigma"] = values
    return params


class TestStatistics:
    def test_perfect_linear(self):
        x = np.arange(6.0)
        assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
        assert pearson(x, -x) == pytest.approx(-1.0)

    def test_hand_value(self):
        assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    def test_zero_variance_is_undefined(self):
        assert pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None
        assert spearman([1.0, 2.0, 3.0], [5.0, 5.0, 5.0]) is None

    def test_input_validation(self):
        with pytest.raises(ValueError):
            pearson([1.0, 2.0], [2.0, 1.0])
        with pytest.raises(ValueError):
            pearson([1.0, 2.0, 3.0], [1.0, 2.0])

    def test_affine_invariance(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=20), rng.normal(size=20)
        assert pearson(3.0 * x + 7.0, 0.5 * y - 2.0) == pytest.approx(pearson(x, y), abs=1e-12)
        assert pearson(-x, y) == pytest.approx(-pearson(x, y), abs=1e-12)

    def test_spearman_rank_invariance(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=15), rng.normal(size=15)
        assert spearman(np.exp(x), y ** 3) == pytest.approx(spearman(x, y), abs=1e-12)

    def test_trend_skips_undefined(self):
        assert trend([0.1, None, 0.2, 0.5, float("nan"), 0.9]) == pytest.approx(1.0)
        assert trend([0.1, None, 0.2]) is None

    def test_average_ignores_undefined(self):
        keys = [(0, i) for i in range(4)]
        a = correlate("x", [1, 2, 3, 4], "y", [1, 3, 2, 4], keys)
        b = correlate("x", [1, 2, 3, 4], "y", [1, 2, 3, 4], keys)
        c = CorrelationResult("x", "y", None, None, 4)
        averaged = average_results([a, b, c])
        assert averaged.pearson == pytest.approx(0.9)
        assert averaged.extra["runs"] == 3


class TestGraspVsLoss:
    def test_identity_hessian_is_perfectly_correlated(self):
        model = build_quadratic(np.eye(4), [0.3, -1.0, 2.0, 0.7])
        results = grasp_vs_loss_correlation(model, None)
        assert set(results) == {STRUCTURED, UNSTRUCTURED}
        for result in results.values():
            assert result.pearson == pytest.approx(1.0)
            assert result.n == 4

    def test_critical_point_is_undefined(self):
        model = build_quadratic(np.eye(3), [0.0, 0.0, 0.0])
        assert grasp_vs_loss_correlation(model, None, granularities=[STRUCTURED])[STRUCTURED].pearson is None

    def test_network_scatter_covers_every_group(self):
        net = build_mlp([3, 5, 3], "tanh", seed=0)
        result = grasp_vs_loss_correlation(net, make_blobs(3, 3, 4, 0.5, 0), granularities=[UNSTRUCTURED])[UNSTRUCTURED]
        assert result.n == 3 * 5 + 5 * 3
        assert result.pearson is None or -1.0 <= result.pearson <= 1.0


class TestEbtTrace:
    def _runlog(self, net, sigmas):
        log = RunLog()
        for values in sigmas:
            params = _with_sigma(net, "fc1", values)
            log.param_history.append(params)
            log.sigma_history.append({"fc1": params["fc1.sigma"].copy(), "fc2": params["fc2.sigma"].copy()})
        return log

    def test_frozen_sigma(self):
        net = build_mlp([3, 4, 3], "tanh", seed=0)
        log = self._runlog(net, [np.ones(4)] * 3)
        points = ebt_correlation_trace(log, net, make_blobs(3, 3, 4, 0.5, 0))
        assert [p.epoch for p in points] == [1, 2]
        assert all(p.correlation.pearson is None for p in points)
        assert all(p.mask_distance == 0 for p in points)

    def test_hand_oracle(self):
        net = build_mlp([3, 4, 3], "tanh", seed=0)
        data = make_blobs(3, 3, 4, 0.5, 0)
        s0, s1 = np.ones(4), np.array([1.0, 0.9, 0.1, 0.2])
        log = self._runlog(net, [s0, s1])

        points = ebt_correlation_trace(log, net, data, target=0.5)

        ebt = np.abs(s1) * np.abs(s1 - s0)
        trained = build_mlp([3, 4, 3], "tanh", seed=0)
        trained.set_params(log.param_history[1])
        loss = loss_preservation(trained, full_batch_gradient(trained, data)).scores[:4]
        assert points[0].correlation.pearson == pytest.approx(stats.pearsonr(ebt, loss)[0], abs=1e-12)
        assert points[0].mask_distance == 4

    def test_params_restored(self):
        net = build_mlp([3, 4, 3], "tanh", seed=0)
        before = net.params.flatten()
        ebt_correlation_trace(self._runlog(net, [np.ones(4), np.full(4, 0.5)]), net, make_blobs(3, 3, 4, 0.5, 0))
        np.testing.assert_array_equal(net.params.flatten(), before)

    def test_needs_two_snapshots(self):
        net = build_mlp([3, 4, 3], seed=0)
        with pytest.raises(ValueError):
            ebt_correlation_trace(self._runlog(net, [np.ones(4)]), net, make_blobs(3, 3, 4, 0.5, 0))

    def test_every_picks_multiples(self):
        net = build_mlp([3, 4, 3], "tanh", seed=0)
        log = self._runlog(net, [np.full(4, 1.0 - 0.1 * i) for i in range(5)])
        points = ebt_correlation_trace(log, net, make_blobs(3, 3, 4, 0.5, 0), every=2)
        assert [p.epoch for p in points] == [2, 4]

    def test_per_step_uses_step_snapshots(self):
        net = build_mlp([3, 4, 3], "tanh", seed=0)
        data = make_blobs(3, 3, 4, 0.5, 0)
        s0, s1 = np.ones(4), np.array([1.0, 0.9, 0.1, 0.2])
        log = self._runlog(net, [s0, s1])
        log.step_sigma_history, log.step_param_history = log.sigma_history, log.param_history
        log.sigma_history, log.param_history = [], []

        points = ebt_correlation_trace(log, net, data, target=0.5, per_step=True)

        assert [p.epoch for p in points] == [1]
        assert points[0].mask_distance == 4
        with pytest.raises(ValueError):
            ebt_correlation_trace(log, net, data)

    def test_sigma_mask_picks_smallest(self):
        net = build_mlp([3, 4, 3], seed=0)
        mask = sigma_mask(net, {"fc1": np.array([0.5, -0.1, 2.0, 0.3]), "fc2": np.ones(3)}, 0.5)
        assert mask.pruned_keys() == {(0, 1), (0, 3)}


class TestL2VsDistance:
    def test_zero_init_makes_them_identical(self):
        model = build_quadratic(np.eye(5), np.zeros(5))
        model.params["theta"] = [0.4, -1.0, 0.2, 3.0, -0.6]
        result = l2_vs_distance_correlation(model, target=0.4)
        assert result.pearson == pytest.approx(1.0)
        assert result.extra["overlap"] == 1.0

    def test_overlap_matches_set_oracle(self):
        net = build_mlp([4, 12, 3], "tanh", seed=0)
        rng = np.random.default_rng(3)
        net.set_params(net.params + net.params.unflatten(rng.normal(scale=0.3, size=net.params.size)))
        result = l2_vs_distance_correlation(net, target=0.5)

        groups = [g for g in net.groups(STRUCTURED) if g.prunable]
        weights = [{n: i for n, i in g.indices.items() if not n.endswith(".sigma")} for g in groups]
        l2 = np.array([sum(float(np.sum(net.params[n].ravel()[i] ** 2)) for n, i in w.items()) for w in weights])
        distance = np.array([
            sum(float(np.sum((net.params[n].ravel()[i] - net.init_snapshot[n].ravel()[i]) ** 2))
                for n, i in w.items())
            for w in weights
        ])
        k = round_half_up(0.5 * len(groups))
        set_a = set(np.argsort(l2)[:k].tolist())
        set_b = set(np.argsort(distance)[:k].tolist())
        assert result.extra["overlap"] == pytest.approx(len(set_a & set_b) / k)
        assert result.n == 12

    def test_sigma_is_left_out(self):
        net = build_mlp([4, 6, 3], "tanh", seed=0)
        rng = np.random.default_rng(5)
        net.set_params(net.params + net.params.unflatten(rng.normal(scale=0.2, size=net.params.size)))
        before = l2_vs_distance_correlation(net, target=0.5)
        net.set_params(_with_sigma(net, "fc1", [4.0, 0.1, 2.5, 0.0, 7.0, 0.3]))
        after = l2_vs_distance_correlation(net, target=0.5)
        assert after.pearson == pytest.approx(before.pearson, abs=1e-15)
        assert after.extra["overlap"] == before.extra["overlap"]

    def test_trace_over_param_history(self):
        net = build_mlp([4, 6, 3], seed=0)
        log = RunLog(param_history=[net.params.copy(), net.params * 1.1, net.params * 1.2])
        results = l2_vs_distance_trace(log, net)
        assert [r.stamp for r in results] == [1, 2]


class TestLayerwise:
    def test_gradnorm_rows_sum_to_total(self):
        net = build_mlp([3, 5, 4, 3], "tanh", seed=1)
        data = make_blobs(3, 3, 4, 0.5, 1)
        rows = layerwise_report(net, "gradnorm", data)
        g = full_batch_gradient(net, data)
        assert rows[0]["total"] == pytest.approx(dot(g, g), rel=1e-12)
        assert sum(rows[0][name] for name in ("fc1", "fc2", "fc3")) == pytest.approx(rows[0]["total"])

    def test_uniform_mask_gives_flat_row(self):
        net = build_mlp([3, 8, 6, 3], seed=0)
        rows = layerwise_report(uniform_mask(net, 0.5, seed=1), "ratios")
        assert rows == [{"index": 0, "fc1": 0.5, "fc2": 0.5, "fc3": 0.0}]

    def test_runlog_history(self):
        log = RunLog(grad_norm_history=[{"fc1": 1.0, "fc2": 2.0}, {"fc1": 0.5, "fc2": 0.25}])
        rows = layerwise_report(log, "gradnorm")
        assert rows[1] == {"epoch": 1, "fc1": 0.5, "fc2": 0.25, "total": 0.75}

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            layerwise_report(RunLog(), "weights")

    def test_early_layer_ratio(self):
        net = build_mlp([3, 4, 4, 3], seed=0)
        mask = Mask.full(net)
        mask.kept[:2] = False
        assert early_layer_ratio(mask) == 0.5


class TestScatterCsv:
    def test_reingestion_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        keys = [(0, i) for i in range(6)] + [(1, 0)]
        a, b = rng.normal(size=7) * 1e-7, rng.normal(size=7) * 1e5
        result = correlate("theta_Hg", a, "theta_g", b, keys)
        path = tmp_path / "scatter.csv"
        write_artifact(str(path), write_scatter_csv(result))

        read_keys, read_a, read_b = read_scatter_csv(str(path))
        assert read_keys == keys
        assert read_a.tobytes() == a.tobytes()
        assert read_b.tobytes() == b.tobytes()
        assert pearson(read_a, read_b) == result.pearson

    def test_summary_header(self):
        result = correlate("a", [1, 2, 3], "b", [3, 2, 1], [(0, 0), (0, 1), (0, 2)], stamp=4)
        lines = summary_csv([result]).decode("utf-8").splitlines()
        assert lines[0] == "measure_a,measure_b,pearson,spearman,n,stamp,granularity,seed"
        cells = lines[1].split(",")
        assert cells[:2] == ["a", "b"]
        assert float(cells[2]) == pytest.approx(-1.0)
        assert cells[4:] == ["3", "4", STRUCTURED, ""]
