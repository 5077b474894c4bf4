"""Accuracy metric against an independent re-implementation."""

import numpy as np
import pytest

from gsaf.errors import ValidationError
from gsaf.align import PersonalityVector
from gsaf.metrics import MetricReport, accuracy, aggregate_reports


def test_perfect_predictions_score_exactly_100():
    y = np.random.default_rng(0).uniform(0, 1, (20, 5))
    report = accuracy(y, y.copy())
    np.testing.assert_array_equal(report.trait_accuracy, np.full(5, 100.0))
    assert report.average_accuracy == 100.0
    np.testing.assert_array_equal(report.trait_mse, np.zeros(5))


def test_single_sample_known_value():
    report = accuracy(np.full((1, 5), 0.3), np.full((1, 5), 0.5))
    np.testing.assert_allclose(report.trait_accuracy, np.full(5, 80.0), atol=1e-9)


def oracle_accuracy(preds, labels):
    """Literal per-trait mean of (1 - |error|) * 100."""
    out = np.zeros(5)
    n = len(preds)
    for k in range(5):
        total = 0.0
        for i in range(n):
            total += 1.0 - abs(preds[i][k] - labels[i][k])
        out[k] = total / n * 100.0
    return out


def test_matches_reimplementation_on_random_pairs():
    rng = np.random.default_rng(1)
    preds = rng.uniform(0, 1, (1000, 5))
    labels = rng.uniform(0, 1, (1000, 5))
    report = accuracy(preds, labels)
    want = oracle_accuracy(preds, labels)
    np.testing.assert_allclose(report.trait_accuracy, want, rtol=1e-12, atol=1e-12)
    assert abs(report.average_accuracy - want.mean()) < 1e-12


def test_accepts_personality_vectors():
    vecs = [PersonalityVector(np.full(5, 0.25)), PersonalityVector(np.full(5, 0.75))]
    report = accuracy(vecs, vecs)
    assert report.average_accuracy == 100.0
    assert report.sample_count == 2


def test_length_mismatch_errors():
    with pytest.raises(ValidationError):
        accuracy(np.zeros((3, 5)), np.zeros((4, 5)))


def test_out_of_range_values_rejected():
    with pytest.raises(ValidationError):
        accuracy(np.full((2, 5), 1.25), np.zeros((2, 5)))


def test_report_invariants_enforced():
    with pytest.raises(ValidationError):
        MetricReport(trait_accuracy=np.full(5, 120.0), average_accuracy=120.0,
                     trait_mse=np.zeros(5), sample_count=1)
    with pytest.raises(ValidationError):
        MetricReport(trait_accuracy=np.full(5, 50.0), average_accuracy=60.0,
                     trait_mse=np.zeros(5), sample_count=1)


def test_aggregate_reports_means_and_std():
    r1 = accuracy(np.full((2, 5), 0.4), np.full((2, 5), 0.5))
    r2 = accuracy(np.full((2, 5), 0.5), np.full((2, 5), 0.5))
    agg = aggregate_reports([r1, r2], stds_from=[r1, r2])
    np.testing.assert_allclose(agg.trait_accuracy, np.full(5, 95.0), atol=1e-12)
    np.testing.assert_allclose(agg.accuracy_std, 5.0, atol=1e-12)
    assert agg.sample_count == 4
