"""
Tests for importance measures: closed-form scores on small quadratic
models, sign conventions and report validation.
"""
import numpy as np
import pytest
from scipy import stats

from diffcore import GradientVector, grad
from importance import (
    REPORT_COLUMNS,
    ImportanceReport,
    ebt_proxy,
    grasp,
    grasp_preserve,
    loss_preservation,
    magnitude,
    proposed_extension,
    random_importance,
    score,
)
from masking import Mask, build_mask
from netmodel import STRUCTURED, UNSTRUCTURED, build_cnn, build_mlp, build_quadratic, make_blobs
from utils import ImportanceError

A_DENSE = np.array([[2.0, 1.0], [1.0, 3.0]])


def _gradient(values) -> GradientVector:
    return GradientVector({"theta": values})


class TestMagnitude:
    def test_group_of_three_and_four(self):
        model = build_quadratic(np.eye(3), [3.0, 4.0, 0.0], grouping=[[0, 1], [2]])
        report = magnitude(model)
        np.testing.assert_array_equal(report.scores, [25.0, 0.0])
        assert report.keys == [(0, 0), (0, 1)]

    def test_doubling_scales_by_four_and_keeps_prune_set(self):
        model = build_quadratic(np.eye(4), [0.5, -2.0, 1.0, 0.1])
        before = magnitude(model)
        model.set_params(model.params * 2.0)
        after = magnitude(model)
        np.testing.assert_allclose(after.scores, 4.0 * before.scores)
        prior = Mask.full(model)
        assert build_mask(before, 0.5, prior).pruned_keys() == build_mask(after, 0.5, prior).pruned_keys()

    def test_l1_variant(self):
        model = build_quadratic(np.eye(3), [3.0, -4.0, 0.0], grouping=[[0, 1], [2]])
        report = magnitude(model, norm="l1")
        assert report.measure == "magnitude_l1"
        np.testing.assert_array_equal(report.scores, [7.0, 0.0])

    def test_unknown_norm(self):
        with pytest.raises(ValueError):
            magnitude(build_quadratic(np.eye(1), [1.0]), norm="l3")


class TestLossPreservation:
    def test_mixed_signs_cancel(self):
        model = build_quadratic(np.eye(2), [1.0, -2.0], grouping=[[0, 1]])
        report = loss_preservation(model, _gradient([0.5, 0.5]))
        assert report.scores[0] == pytest.approx(0.5)
        assert report.signed_raw[0] == pytest.approx(-0.5)

    def test_zero_gradient(self):
        model = build_quadratic(np.eye(3), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(loss_preservation(model, _gradient([0.0, 0.0, 0.0])).scores, np.zeros(3))

    def test_identity_quadratic_equals_magnitude(self):
        model = build_quadratic(np.eye(4), [0.3, -1.2, 2.0, 0.7], grouping=[[0, 1], [2, 3]])
        g = grad(model.loss_graph(), model.params)
        np.testing.assert_allclose(loss_preservation(model, g).scores, magnitude(model).scores, rtol=1e-14)

    def test_missing_gradient(self):
        with pytest.raises(ImportanceError):
            loss_preservation(build_quadratic(np.eye(1), [1.0]), None)


class TestProposed:
    def test_single_parameter(self):
        model = build_quadratic(np.eye(1), [2.0])
        assert proposed_extension(model, _gradient([3.0])).scores[0] == pytest.approx(12.0)

    def test_per_element_sum(self):
        model = build_quadratic(np.eye(2), [1.0, -2.0], grouping=[[0, 1]])
        assert proposed_extension(model, _gradient([0.5, 0.5])).scores[0] == pytest.approx(2.5)

    def test_zero_gradient(self):
        model = build_quadratic(np.eye(2), [1.0, -2.0])
        np.testing.assert_array_equal(proposed_extension(model, _gradient([0.0, 0.0])).scores, [0.0, 0.0])


class TestGrasp:
    def test_identity_hessian(self):
        model = build_quadratic(np.eye(2), [1.0, 2.0], grouping=[[0, 1]])
        assert grasp(model, None, temperature=1.0).scores[0] == pytest.approx(5.0)

    def test_zero_parameters(self):
        model = build_quadratic(A_DENSE, [0.0, 0.0])
        np.testing.assert_array_equal(grasp(model, None).scores, [0.0, 0.0])

    def test_dense_hessian_oracle(self):
        theta = np.array([1.0, -2.0])
        model = build_quadratic(A_DENSE, theta)
        expected = theta * (A_DENSE @ A_DENSE @ theta)
        report = grasp(model, None)
        np.testing.assert_allclose(report.scores, expected, atol=1e-12)
        np.testing.assert_allclose(report.signed_raw, [-5.0, 30.0], atol=1e-12)

    def test_identity_hessian_reduces_to_signed_loss_score(self):
        model = build_quadratic(np.eye(3), [0.5, -1.0, 2.0], grouping=[[0, 1], [2]])
        g = grad(model.loss_graph(), model.params)
        np.testing.assert_allclose(grasp(model, None).scores, loss_preservation(model, g).signed_raw, atol=1e-14)

    def test_most_negative_pruned_first(self):
        model = build_quadratic(A_DENSE, [1.0, -2.0])
        mask = build_mask(grasp(model, None), 0.5, Mask.full(model), floor=0)
        assert mask.pruned_keys() == {(0, 0)}

    @pytest.mark.parametrize("temperature", [0.0, -1.0])
    def test_nonpositive_temperature(self, temperature):
        model = build_quadratic(np.eye(1), [1.0])
        with pytest.raises(ImportanceError):
            grasp(model, None, temperature)
        with pytest.raises(ImportanceError):
            grasp_preserve(model, None, temperature)

    def test_preserve_is_absolute_value(self):
        model = build_quadratic(A_DENSE, [1.0, -2.0])
        np.testing.assert_allclose(grasp_preserve(model, None).scores, [5.0, 30.0], atol=1e-12)

    def test_nonnegative_scores_rank_identically(self):
        model = build_quadratic(np.eye(3), [0.4, -1.0, 2.0])
        signed, absolute = grasp(model, None), grasp_preserve(model, None)
        assert np.all(signed.scores >= 0)
        assert list(np.argsort(signed.scores)) == list(np.argsort(absolute.scores))

    @pytest.mark.parametrize("granularity", [STRUCTURED, UNSTRUCTURED])
    def test_finite_on_networks_at_high_temperature(self, granularity):
        data = make_blobs(3, 16, 4, 0.3, 0)
        for net in (build_mlp([16, 6, 3], "relu", seed=0), build_cnn([3, 3], classes=3, seed=0)):
            batch = data.scoring_batch(2, 0)
            report = grasp(net, batch, 200.0, granularity)
            assert np.all(np.isfinite(report.scores))
            assert report.temperature == 200.0
            assert report.batch_ids == batch.indices.tolist()
            assert len(report) == len(net.groups(granularity))


class TestRandom:
    def test_seeded(self):
        model = build_quadratic(np.eye(5), np.ones(5))
        np.testing.assert_array_equal(random_importance(model, 3).scores, random_importance(model, 3).scores)
        assert not np.array_equal(random_importance(model, 3).scores, random_importance(model, 4).scores)

    def test_uniform_distribution(self):
        net = build_mlp([100, 100, 2], seed=0)
        scores = random_importance(net, seed=11, granularity=UNSTRUCTURED).scores
        assert scores.size >= 10000
        assert np.all((scores >= 0) & (scores < 1))
        assert stats.kstest(scores, "uniform").pvalue > 0.01


class TestEbt:
    def test_hand_computed(self):
        net = build_mlp([2, 1, 2], seed=0)
        params = net.params.copy()
        params["fc1.sigma"] = [0.5]
        net.set_params(params)
        report = ebt_proxy(net, {"fc1": np.array([0.4]), "fc2": np.array([1.0, 1.0])})
        np.testing.assert_allclose(report.scores, [0.05, 0.0, 0.0], atol=1e-15)

    def test_unchanged_sigma(self):
        net = build_mlp([2, 3, 2], seed=0)
        np.testing.assert_array_equal(ebt_proxy(net, net.sigma()).scores, np.zeros(5))

    def test_missing_snapshot(self):
        with pytest.raises(ImportanceError):
            ebt_proxy(build_mlp([2, 3, 2], seed=0), None)

    def test_mismatched_snapshot(self):
        with pytest.raises(ImportanceError):
            ebt_proxy(build_mlp([2, 3, 2], seed=0), {"fc1": np.ones(2), "fc2": np.ones(2)})

    def test_model_without_sigma(self):
        with pytest.raises(ImportanceError):
            ebt_proxy(build_quadratic(np.eye(1), [1.0]), {})

    def test_unstructured_weights_inherit_filter_score(self):
        net = build_mlp([2, 3, 2], seed=0)
        params = net.params.copy()
        params["fc1.sigma"] = [0.5, 2.0, 1.0]
        net.set_params(params)
        prev = {"fc1": np.array([0.4, 1.0, 1.0]), "fc2": np.ones(2)}

        filters = ebt_proxy(net, prev).scores
        report = ebt_proxy(net, prev, granularity=UNSTRUCTURED)

        assert report.granularity == UNSTRUCTURED
        assert report.keys == [g.key for g in net.groups(UNSTRUCTURED)]
        # fc1.weight is (2, 3): flat entry f feeds filter f % 3
        np.testing.assert_allclose(report.scores[:6], [filters[f % 3] for f in range(6)], atol=1e-15)
        np.testing.assert_array_equal(report.scores[6:], np.zeros(6))

    def test_unstructured_report_builds_a_mask(self):
        net = build_mlp([2, 3, 2], seed=0)
        prev = {"fc1": np.array([0.9, 1.0, 0.2]), "fc2": np.ones(2)}
        report = score("ebt", net, prev_sigma=prev, granularity=UNSTRUCTURED)
        mask = build_mask(report, 0.5, Mask.full(net, UNSTRUCTURED), floor=0)
        # filter 1 is unchanged, so its weights 1 and 4 go first; weight 0 wins the 0.1 tie with weight 3
        assert mask.pruned_keys() == {(0, 0), (0, 1), (0, 4)}


class TestReport:
    def test_non_finite_scores_rejected(self):
        with pytest.raises(ImportanceError):
            ImportanceReport("magnitude", [(0, 0), (0, 1)], [1.0, np.nan])

    def test_score_count_must_match(self):
        with pytest.raises(ImportanceError):
            ImportanceReport("magnitude", [(0, 0)], [1.0, 2.0])

    def test_csv_columns(self):
        report = ImportanceReport("grasp", [(0, 0), (1, 2)], [-1.5, 0.25], temperature=200.0, step=7)
        lines = report.to_csv().decode("utf-8").splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS)
        assert lines[1] == "0,0,-1.5,-1.5,grasp,200.0,7"

    def test_positive_rescaling_keeps_prune_set(self):
        model = build_quadratic(np.eye(6), [0.3, -0.1, 2.0, 1.1, -0.7, 0.05])
        report = magnitude(model)
        prior = Mask.full(model)
        assert build_mask(report, 0.5, prior).pruned_keys() == build_mask(report.scaled(7.5), 0.5, prior).pruned_keys()


class TestDispatch:
    def test_grasp_default_temperature(self):
        model = build_quadratic(np.eye(2), [1.0, 2.0])
        assert score("grasp", model).temperature == 200.0
        assert score("grasp_abs", model).temperature == 1.0

    def test_gradient_measures(self):
        model = build_quadratic(np.eye(2), [1.0, -2.0], grouping=[[0, 1]])
        g = _gradient([0.5, 0.5])
        assert score("loss", model, gradient=g).scores[0] == pytest.approx(0.5)
        assert score("proposed", model, gradient=g).scores[0] == pytest.approx(2.5)

    def test_unknown_measure(self):
        with pytest.raises(ImportanceError):
            score("fisher", build_quadratic(np.eye(1), [1.0]))
