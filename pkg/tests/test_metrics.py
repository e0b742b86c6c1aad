import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podseg.cloud import NON_SILIQUE, SILIQUE, LabeledCloud, VoxelGrid
from podseg.metrics import (
    count_detected,
    f1_score,
    instance_metrics,
    instances_from_labels,
    report_to_csv,
    report_to_table,
    rmse,
    semantic_metrics,
    voxel_class_proportions,
)


def brute_force_instance_report(pred, gt, thresholds=(0.5, 0.75, 0.9)):
    """All-pairs IoU reference implementation."""
    def iou(a, b):
        inter = len(set(a) & set(b))
        return inter / len(set(a) | set(b)) if inter else 0.0

    best_gt = [max((iou(p, g) for p in pred), default=0.0) for g in gt]
    best_pred = [max((iou(p, g) for g in gt), default=0.0) for p in pred]
    sizes = np.array([len(g) for g in gt], dtype=float)
    mcov = float(np.mean(best_gt))
    mwcov = float(np.sum(sizes / sizes.sum() * best_gt))
    out = {"mcov": mcov, "mwcov": mwcov}
    for theta in thresholds:
        tp = sum(b > theta for b in best_pred)
        out[f"prec{theta}"] = tp / len(pred) if pred else 0.0
        out[f"rec{theta}"] = tp / len(gt)
    return out


class TestSemanticMetrics:
    def test_iou_from_counts(self):
        # one class with TP=8, FP=1, FN=1
        gt = np.array([1] * 9 + [0] * 1 + [0] * 10)
        pred = np.array([1] * 8 + [0] + [1] + [0] * 10)
        report = semantic_metrics(pred, gt)
        assert report.iou[1] == pytest.approx(0.8)

    def test_f1_from_table_values(self):
        assert f1_score(96.43, 98.89) == pytest.approx(97.65, abs=0.01)

    def test_mean_iou_from_table_values(self):
        assert np.mean([95.40, 92.51]) == pytest.approx(93.96, abs=0.01)

    def test_oacc_is_agreement_fraction(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(0, 2, 500)
        pred = rng.integers(0, 2, 500)
        report = semantic_metrics(pred, gt)
        assert report.oacc == pytest.approx((pred == gt).mean())

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            semantic_metrics(np.array([]), np.array([]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_per_class_inequalities(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 300))
        gt = rng.integers(0, 2, n)
        pred = rng.integers(0, 2, n)
        report = semantic_metrics(pred, gt)
        for c in (0, 1):
            p, r = report.prec[c], report.rec[c]
            assert report.f1[c] == pytest.approx(f1_score(p, r))
            assert report.iou[c] <= min(p, r) + 1e-12
            assert min(p, r) <= report.f1[c] + 1e-12
            assert 0 <= report.iou[c] <= 1


class TestInstanceMetrics:
    def test_mcov_example(self):
        gt = [np.arange(10), np.arange(10, 20)]
        pred = [np.arange(9), np.concatenate([np.arange(10, 17), [25, 26, 27]])]
        # best IoUs: 9/10 = 0.9 and 7/13 -> construct exact 0.9 / 0.7 instead
        gt = [np.arange(10), np.arange(10, 20)]
        pred = [np.arange(9), np.arange(10, 17)]
        report = instance_metrics(pred, gt)
        assert report.mcov == pytest.approx((0.9 + 0.7) / 2)

    def test_mwcov_weights(self):
        gt = [np.arange(10), np.arange(10, 40)]
        pred = [np.arange(9), np.arange(10, 31)]
        report = instance_metrics(pred, gt)
        assert report.mwcov == pytest.approx(0.25 * 0.9 + 0.75 * 0.7)

    def test_mprec_counts_predictions(self):
        gt = [np.arange(10), np.arange(10, 20)]
        pred = [np.arange(10), np.arange(10, 20), np.arange(30, 40)]
        report = instance_metrics(pred, gt, thresholds=(0.5,))
        assert report.mprec[0.5] == pytest.approx(2 / 3)
        assert report.mrec[0.5] == pytest.approx(1.0)

    def test_thresholds_monotone(self):
        rng = np.random.default_rng(1)
        universe = np.arange(200)
        gt = [universe[i * 20:(i + 1) * 20] for i in range(10)]
        pred = [np.sort(rng.choice(g, size=rng.integers(10, 20), replace=False)) for g in gt]
        report = instance_metrics(pred, gt)
        thetas = sorted(report.mprec)
        for a, b in zip(thetas, thetas[1:]):
            assert report.mprec[a] >= report.mprec[b]
            assert report.mrec[a] >= report.mrec[b]

    def test_empty_gt_raises(self):
        with pytest.raises(ValueError):
            instance_metrics([np.arange(3)], [])

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n_gt = int(rng.integers(1, 20))
        n_pred = int(rng.integers(0, 20))
        universe = 300
        gt = [np.sort(rng.choice(universe, size=rng.integers(3, 25), replace=False))
              for _ in range(n_gt)]
        pred = [np.sort(rng.choice(universe, size=rng.integers(3, 25), replace=False))
                for _ in range(n_pred)]
        mine = instance_metrics(pred, gt)
        ref = brute_force_instance_report([list(p) for p in pred], [list(g) for g in gt])
        assert mine.mcov == pytest.approx(ref["mcov"])
        assert mine.mwcov == pytest.approx(ref["mwcov"])
        for theta in (0.5, 0.75, 0.9):
            assert mine.mprec[theta] == pytest.approx(ref[f"prec{theta}"])
            assert mine.mrec[theta] == pytest.approx(ref[f"rec{theta}"])

    def test_one_to_one_mode(self):
        gt = [np.arange(10)]
        pred = [np.arange(10), np.arange(10)]  # duplicate predictions
        unconstrained = instance_metrics(pred, gt, thresholds=(0.5,))
        exclusive = instance_metrics(pred, gt, thresholds=(0.5,), one_to_one=True)
        assert unconstrained.mprec[0.5] == pytest.approx(1.0)
        assert exclusive.mprec[0.5] == pytest.approx(0.5)


class TestCounting:
    def test_count_detected(self):
        gt = [np.arange(10), np.arange(10, 20), np.arange(20, 30)]
        pred = [np.arange(10), np.arange(10, 20), np.arange(40, 50)]
        assert count_detected(pred, gt, 0.9) == 2

    def test_perfect_rmse(self):
        assert rmse([5, 7], [5, 7]) == 0.0

    def test_rmse_example(self):
        assert rmse([10, 12], [10, 10]) == pytest.approx(np.sqrt(2))

    def test_instances_from_labels(self):
        inst = np.array([-1, 0, 0, 2, -1, 2])
        sets = instances_from_labels(inst)
        assert [tuple(s) for s in sets] == [(1, 2), (3, 5)]


class TestVoxelProportions:
    def test_majority_vote_tie_to_silique(self):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(1, 1, 1))
        cloud = LabeledCloud(
            coords=np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.3, 0.3]]),
            sem=np.array([SILIQUE, SILIQUE, NON_SILIQUE]),
        )
        _, after = voxel_class_proportions(cloud, grid)
        assert after[SILIQUE] == 1.0

    def test_tie_goes_to_silique(self):
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(1, 1, 1))
        cloud = LabeledCloud(
            coords=np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]),
            sem=np.array([SILIQUE, NON_SILIQUE]),
        )
        _, after = voxel_class_proportions(cloud, grid)
        assert after[SILIQUE] == 1.0

    def test_one_point_per_voxel_identity(self):
        rng = np.random.default_rng(2)
        coords = np.unique(rng.integers(0, 5, (40, 3)), axis=0) + 0.5
        sem = rng.choice([0, 1], len(coords))
        cloud = LabeledCloud(coords=coords, sem=sem)
        grid = VoxelGrid(origin=(0, 0, 0), voxel_size=(1, 1, 1), extent=(5, 5, 5))
        before, after = voxel_class_proportions(cloud, grid)
        np.testing.assert_allclose(before, after)


class TestReports:
    def test_csv_and_table_render(self):
        gt = np.array([0, 1, 1, 0])
        pred = np.array([0, 1, 0, 0])
        rows = semantic_metrics(pred, gt).rows()
        csv_text = report_to_csv(rows)
        assert csv_text.splitlines()[0] == "class,iou,prec,rec,f1"
        table = report_to_table(rows)
        assert "mean" in table
