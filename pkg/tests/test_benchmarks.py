import numpy as np
import pytest

from multigrain.benchmarks import (
    METRICS,
    dataset_fingerprint,
    inaug_task,
    run_metric,
    ukb_views,
)
from multigrain.data import synth_dataset
from multigrain.retrieval import METRIC_RANGES, N_COPIES, MetricError


@pytest.fixture(scope="module")
def ds():
    return synth_dataset(n_classes=3, per_class=4, size=16, seed=5, val_per_class=3, n_distractors=4)


def pixels(images):
    return np.asarray(images).reshape(len(images), -1) + 1e-3


class TestTasks:
    def test_fingerprint_stable(self, ds):
        again = synth_dataset(n_classes=3, per_class=4, size=16, seed=5, val_per_class=3, n_distractors=4)
        assert dataset_fingerprint(ds) == dataset_fingerprint(again)
        other = synth_dataset(n_classes=3, per_class=4, size=16, seed=6, val_per_class=3, n_distractors=4)
        assert dataset_fingerprint(ds) != dataset_fingerprint(other)

    def test_ukb_views_layout(self, ds):
        views, groups = ukb_views(ds, seed=0)
        assert views.shape == (4 * 9, 16, 16, 3)
        np.testing.assert_array_equal(np.unique(groups, return_counts=True)[1], [4] * 9)
        # the first view of each group is the untouched image
        np.testing.assert_array_equal(views[::4], ds.subset("val").images)

    def test_inaug_task_counts(self, ds):
        task = inaug_task(ds, 2, seed=0)
        assert task.n_queries == 6
        assert len(task.images) == 6 * (1 + N_COPIES)
        assert set(task.source_ids) <= set(ds.subset("train").image_ids)

    @pytest.mark.parametrize("metric", METRICS)
    def test_metrics_in_range_and_deterministic(self, ds, metric):
        a = run_metric(metric, ds, pixels, seed=1, inaug_per_class=1)
        b = run_metric(metric, ds, pixels, seed=1, inaug_per_class=1)
        lo, hi = METRIC_RANGES[metric]
        assert lo <= a.value <= hi
        assert a.value == b.value and a.n_queries > 0

    def test_partition_sizes_drive_query_counts(self, ds):
        assert run_metric("map", ds, pixels, seed=0).n_queries == 9
        assert run_metric("ukb", ds, pixels, seed=0).n_queries == 36
        assert run_metric("inaug", ds, pixels, seed=0, inaug_per_class=2).n_queries == 6

    def test_unknown_metric(self, ds):
        with pytest.raises(MetricError):
            run_metric("recall", ds, pixels, seed=0)
