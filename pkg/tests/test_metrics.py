import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import aligned, unit_columns
from pmrl.errors import EmptyBatch, LengthMismatch, SingleClass
from pmrl.linalg import gram, svd_thin
from pmrl.metrics import alignment_report, classification_metrics, modality_contribution, recall_at_k

seeds = st.integers(0, 2**32 - 1)


def test_aligned_report(rng):
    dirs = unit_columns(rng, 6, 3)
    z = np.stack([np.repeat(dirs[:, i : i + 1], 4, axis=1) for i in range(3)])
    rep = alignment_report(z)
    assert rep.mean_pairwise_cosine == pytest.approx(1.0, abs=1e-12)
    assert rep.sigma1_ratio == pytest.approx(1.0, abs=1e-12)
    assert rep.effective_rank == 1.0
    sims = dirs.T @ dirs
    expected = (sims.sum() - np.trace(sims)) / 6
    assert rep.u1_offdiag_similarity == pytest.approx(expected, abs=1e-12)
    assert rep.aligned_fraction == 1.0 and rep.collapsed_fraction == 0.0


def test_orthonormal_report():
    rep = alignment_report(np.stack([np.eye(5)[:, :4]] * 2))
    assert rep.mean_pairwise_cosine == pytest.approx(0.0, abs=1e-15)
    assert rep.sigma1_ratio == pytest.approx(0.5, abs=1e-12)


def test_two_column_oracle():
    z = np.array([[1.0, 1.0 / math.sqrt(2)], [0.0, 1.0 / math.sqrt(2)]])
    rep = alignment_report(z)
    assert rep.mean_pairwise_cosine == pytest.approx(0.7071068, abs=1e-7)
    assert rep.sigma1_ratio == pytest.approx(0.9238795, abs=1e-7)


def test_report_empty():
    with pytest.raises(EmptyBatch):
        alignment_report(np.zeros((0, 3, 2)))


@given(seed=seeds, k=st.integers(2, 6))
def test_report_identities(seed, k):
    z = unit_columns(np.random.default_rng(seed), 5, 8, k)
    rep = alignment_report(z)
    s = svd_thin(z)
    np.testing.assert_allclose(np.sum(s.sigma**2, axis=1), k, atol=1e-9)
    g = gram(z)
    direct = np.mean((g.sum(axis=(1, 2)) - k) / (k * (k - 1)))
    loops = np.mean([[z[n, :, a] @ z[n, :, b] for a in range(k) for b in range(k) if a != b] for n in range(5)])
    assert rep.mean_pairwise_cosine == pytest.approx(direct, abs=1e-10)
    assert rep.mean_pairwise_cosine == pytest.approx(loops, abs=1e-10)
    assert -1.0 <= rep.min_pairwise_cosine <= rep.mean_pairwise_cosine <= 1.0
    assert 0.0 <= rep.sigma1_ratio <= 1.0 + 1e-9


def test_recall_identical_gallery(rng):
    q = rng.normal(size=(10, 4))
    assert recall_at_k(q, q, None, [1])[1] == 1.0


def test_recall_adversarial():
    n = 10
    q = np.eye(n)
    # every true match is orthogonal to its query while all others score 0.5
    g = np.full((n, n), 0.5) - 0.5 * np.eye(n)
    rec = recall_at_k(q, g.T @ q, None, [1, 10])
    assert rec[1] == 0.0 and rec[10] == 1.0


def test_recall_ties_prefer_lower_index():
    q = np.array([[1.0, 0.0], [1.0, 0.0]])
    g = np.array([[1.0, 0.0], [1.0, 0.0]])
    rec = recall_at_k(q, g, None, [1])
    assert rec[1] == 0.5


def test_recall_chance_level():
    rng = np.random.default_rng(11)
    vals = [recall_at_k(rng.normal(size=(100, 32)), rng.normal(size=(100, 32)), None, [1])[1] for _ in range(200)]
    assert np.mean(vals) == pytest.approx(0.01, abs=0.003)


def test_recall_length_mismatch():
    with pytest.raises(LengthMismatch):
        recall_at_k(np.ones((3, 2)), np.ones((4, 2)))


@given(seed=seeds)
def test_recall_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    rec = recall_at_k(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)), None, range(1, 21))
    vals = [rec[k] for k in range(1, 21)]
    assert all(a <= b for a, b in zip(vals, vals[1:])) and vals[-1] == 1.0


def test_contribution_aligned(rng):
    z = np.stack([aligned(rng, 5, 4) for _ in range(3)])
    np.testing.assert_allclose(modality_contribution(z)[:, 0], 0.5, atol=1e-12)


def test_contribution_orthonormal_pattern():
    c = modality_contribution(np.eye(3)[:, :2])
    assert np.all(np.isclose(c, 0.0) | np.isclose(c, 1.0) | np.isclose(c, 1.0 / math.sqrt(2)))
    assert c.shape == (2, 2)


@given(seed=seeds)
def test_contribution_rows_are_unit(seed):
    z = unit_columns(np.random.default_rng(seed), 4, 6, 3)
    v = svd_thin(z).v
    np.testing.assert_allclose(np.sum(v**2, axis=-1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(modality_contribution(z), modality_contribution(z.copy()))


def test_classification_oracles():
    assert classification_metrics([1.0, 1.0, 0.0], [1, 1, 0]) == (1.0, 1.0)
    auc, acc = classification_metrics([0.5] * 4, [1, 0, 0, 0])
    assert auc == 0.5 and acc == 0.25
    # perfectly ranked but 0.8 sits above the 0.5 threshold with a negative label
    auc, acc = classification_metrics([0.9, 0.8, 0.3], [1, 0, 0])
    assert auc == 1.0 and acc == pytest.approx(2.0 / 3.0)


def test_classification_errors():
    with pytest.raises(SingleClass):
        classification_metrics([0.2, 0.3], [1, 1])
    with pytest.raises(LengthMismatch):
        classification_metrics([0.2], [1, 0])
