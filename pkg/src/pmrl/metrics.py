"""Alignment diagnostics, retrieval and classification metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyBatch, LengthMismatch, SingleClass
from .linalg import SvdResult, effective_rank, gram, svd_thin

RANK_THRESHOLD = 0.01
ALIGNED_RATIO = 0.95
COLLAPSED_SIGMA = 0.05


@dataclass(frozen=True)
class AlignmentReport:
    mean_pairwise_cosine: float
    min_pairwise_cosine: float
    sigma_mean: tuple[float, ...]
    sigma1_ratio: float
    effective_rank: float
    u1_offdiag_similarity: float
    min_sigma: float
    aligned_fraction: float
    collapsed_fraction: float

    def flat(self) -> dict[str, float]:
        out = {k: v for k, v in asdict(self).items() if k != "sigma_mean"}
        for j, s in enumerate(self.sigma_mean, start=1):
            out[f"sigma_{j}"] = s
        return out


def _batch(z_batch) -> np.ndarray:
    z = np.asarray(z_batch, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.ndim != 3 or z.shape[0] == 0:
        raise EmptyBatch("need at least one instance")
    return z


def alignment_report(z_batch, *, svd: SvdResult | None = None) -> AlignmentReport:
    """Summary of within-instance alignment and cross-instance leading-direction similarity.

    ``aligned_fraction`` counts instances with sigma_1/sqrt(k) >= 0.95;
    ``collapsed_fraction`` counts those whose smallest singular value is
    below 0.05 while sigma_1/sqrt(k) stays below 0.95.
    """
    z = _batch(z_batch)
    n, _, k = z.shape
    s = svd if svd is not None else svd_thin(z)
    g = gram(z)
    iu = np.triu_indices(k, 1)
    pair_cos = g[:, iu[0], iu[1]]
    ratio = s.sigma[:, 0] / math.sqrt(k)
    ranks = effective_rank(s.sigma, RANK_THRESHOLD)
    if n > 1:
        u1 = s.u[:, :, 0]
        sim = u1 @ u1.T
        offdiag = float((sim.sum() - np.trace(sim)) / (n * (n - 1)))
    else:
        offdiag = 0.0
    min_sigma = s.sigma[:, -1]
    return AlignmentReport(
        mean_pairwise_cosine=float(pair_cos.mean()),
        min_pairwise_cosine=float(pair_cos.min()),
        sigma_mean=tuple(float(x) for x in s.sigma.mean(axis=0)),
        sigma1_ratio=float(ratio.mean()),
        effective_rank=float(np.mean(ranks)),
        u1_offdiag_similarity=offdiag,
        min_sigma=float(min_sigma.mean()),
        aligned_fraction=float(np.mean(ratio >= ALIGNED_RATIO)),
        collapsed_fraction=float(np.mean((min_sigma < COLLAPSED_SIGMA) & (ratio < ALIGNED_RATIO))),
    )


def recall_at_k(query_reps, gallery_reps, ground_truth=None, k_values=(1, 5, 10)) -> dict[int, float]:
    """Fraction of queries whose true gallery item ranks within the top K by cosine similarity.

    Ties are broken in favour of the lower gallery index.
    """
    q = np.asarray(query_reps, dtype=np.float64)
    g = np.asarray(gallery_reps, dtype=np.float64)
    if q.shape[0] != g.shape[0]:
        raise LengthMismatch(f"{q.shape[0]} queries vs {g.shape[0]} gallery items")
    n = q.shape[0]
    gt = np.arange(n) if ground_truth is None else np.asarray(ground_truth, dtype=np.int64)
    if gt.shape != (n,):
        raise LengthMismatch("ground truth must map every query to one gallery index")
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=-1, keepdims=True)
    sim = qn @ gn.T
    true_sim = sim[np.arange(n), gt][:, None]
    idx = np.arange(g.shape[0])[None, :]
    ahead = (sim > true_sim) | ((sim == true_sim) & (idx < gt[:, None]))
    rank = ahead.sum(axis=1)
    return {int(k): float(np.mean(rank < k)) for k in k_values}


def modality_contribution(z_batch, *, svd: SvdResult | None = None) -> np.ndarray:
    """Mean over instances of ``|V|``: rows are modalities, columns singular directions."""
    z = _batch(z_batch)
    s = svd if svd is not None else svd_thin(z)
    return np.abs(s.v).mean(axis=0)


def classification_metrics(scores, labels) -> tuple[float, float]:
    """AUC by pairwise comparison (ties count 1/2) and accuracy at threshold 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise LengthMismatch("scores and labels differ in length")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise SingleClass("AUC needs both classes present")
    cmp = pos[:, None] - neg[None, :]
    auc = float((np.sum(cmp > 0) + 0.5 * np.sum(cmp == 0)) / (pos.size * neg.size))
    acc = float(np.mean((s >= 0.5).astype(np.int64) == y))
    return auc, acc
