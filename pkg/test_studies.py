"""
End-to-end studies on the bundled configs at full size. Each test runs the
command the config was written for and asserts the thresholds its checks
enforce. Run with `pytest -m slow`.
"""
import glob
import os

import pytest

from main import EXIT_OK, main
from utils import load_state, read_csv

ROOT = os.path.dirname(os.path.abspath(__file__))

pytestmark = pytest.mark.slow


def _run(tmp_path, command: str, config_name: str, *extra) -> dict:
    argv = [command, "--config", os.path.join(ROOT, config_name), "--out", str(tmp_path)] + list(extra)
    assert main(argv) == EXIT_OK
    runs = glob.glob(os.path.join(str(tmp_path), f"{command}-*"))
    assert len(runs) == 1
    return runs[0]


def _checks(run: str) -> dict:
    return load_state(run)["checks"]


class TestGraspLossStudy:
    def test_correlation_high_at_two_checkpoints(self, tmp_path):
        checks = _checks(_run(tmp_path, "analyze", "study_blobs_cnn.json"))
        check = checks["grasp-loss-correlation"]
        assert check["passed"] and check["hard"]
        assert sum(p >= 0.7 for p in check["value"]) >= 2


class TestL2DistanceStudy:
    def test_magnitude_tracks_distance_from_init(self, tmp_path):
        run = _run(tmp_path, "analyze", "study_l2_mlp.json")
        checks = _checks(run)
        assert checks["l2-distance-correlation"]["value"] >= 0.9
        assert checks["l2-distance-overlap"]["value"] >= 0.9
        rows = read_csv(os.path.join(run, "analysis-l2_distance-summary.csv"))
        assert [r["seed"] for r in rows] == ["0", "1", "2"]


class TestEbtStudy:
    def test_correlation_rises_as_the_rate_drops(self, tmp_path):
        run = _run(tmp_path, "analyze", "study_ebt_mlp.json")
        check = _checks(run)["ebt-trend"]
        assert check["passed"] and check["hard"]
        for seed in (0, 1, 2):
            assert len(read_csv(os.path.join(run, f"analysis-ebt-seed{seed}.csv"))) == 40


class TestLayerwiseStudy:
    def test_grasp_prunes_early_layers_harder(self, tmp_path):
        check = _checks(_run(tmp_path, "analyze", "study_layerwise_cnn.json"))["grasp-early-layers"]
        assert check["passed"] and check["hard"]


class TestCompareStudy:
    def test_direction_checks_after_five_rounds(self, tmp_path):
        run = _run(tmp_path, "compare", "compare_blobs_mlp.json")
        checks = _checks(run)
        assert checks["budget-fairness"]["passed"]
        for name in ("magnitude-vs-loss-train-loss-r5", "proposed-vs-loss-eval-acc-r5"):
            assert checks[name]["passed"] and checks[name]["hard"], name

        rows = read_csv(os.path.join(run, "compare.csv"))
        assert len(rows) == 3 * 2 * 3
        assert all(float(r["pruned_fraction"]) == pytest.approx(0.75) for r in rows)
