"""Training objectives over batches of per-instance representation matrices.

A batch is an array of shape ``(N, d, k)``: instance ``i`` contributes the
matrix whose ``k`` columns are its unit-norm modality embeddings. Every loss
returns a :class:`LossOutput` whose ``grad_z`` has the batch's layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import BadAnchor, BatchTooSmall, EmptyBatch, LengthMismatch, NonFinite, NonUnitColumns
from .linalg import EPS_NULL, SvdResult, svd_backward, svd_thin
from .model import MatchingHead

UNIT_TOL = 1e-6


@dataclass
class LossOutput:
    value: float
    grad_z: np.ndarray
    terms: dict[str, float] = field(default_factory=dict)
    head_grads: dict[str, np.ndarray] | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value) or not np.all(np.isfinite(self.grad_z)):
            raise NonFinite("loss value or gradient is not finite")


@dataclass(frozen=True)
class LossConfig:
    tau1: float = 0.05
    tau2: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.1
    tau_baseline: float = 0.1

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0 or self.tau_baseline <= 0:
            raise ValueError("temperatures must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


def as_batch(z_batch, *, min_size: int = 1, check_unit: bool = True) -> np.ndarray:
    z = np.asarray(z_batch, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.ndim != 3 or z.shape[0] == 0:
        raise EmptyBatch("batch must be a nonempty stack of matrices")
    if z.shape[0] < min_size:
        raise BatchTooSmall(f"need at least {min_size} instances, got {z.shape[0]}")
    if check_unit:
        norms = np.linalg.norm(z, axis=-2)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise NonUnitColumns("representation columns must have unit norm")
    return z


def _svd(z: np.ndarray, svd: SvdResult | None) -> SvdResult:
    return svd if svd is not None else svd_thin(z)


def pmrl_singular_loss(z_batch, tau1: float = 0.05, *, svd: SvdResult | None = None) -> LossOutput:
    """Cross-entropy with the singular values as logits and the largest as target."""
    z = as_batch(z_batch)
    n = z.shape[0]
    s = _svd(z, svd)
    logits = s.sigma / tau1
    logp = log_softmax(logits, axis=-1)
    value = float(-np.mean(logp[:, 0]))
    p = np.exp(logp)
    p[:, 0] -= 1.0
    grad_sigma = p / (n * tau1)
    grad = (s.u * grad_sigma[:, None, :]) @ np.swapaxes(s.v, -1, -2)
    return LossOutput(value, grad, terms={"sv": value})


def leading_direction_reg(z_batch, tau2: float = 0.1, *, svd: SvdResult | None = None) -> LossOutput:
    """Instance-wise contrastive penalty on the leading left singular vectors."""
    z = as_batch(z_batch, min_size=2)
    n = z.shape[0]
    s = _svd(z, svd)
    u1 = s.u[:, :, 0]
    sim = u1 @ u1.T
    logits = sim / tau2
    logp = log_softmax(logits, axis=-1)
    value = float(-np.mean(np.diag(logp)))
    p = np.exp(logp)
    grad_u1 = (p @ u1 + p.T @ u1 - 2.0 * u1) / (n * tau2)
    grad_u1 = grad_u1 - u1 * np.sum(u1 * grad_u1, axis=-1, keepdims=True)
    grad_u = np.zeros_like(s.u)
    grad_u[:, :, 0] = grad_u1
    grad = svd_backward(s, grad_u=grad_u)
    return LossOutput(value, grad, terms={"reg": value}, extras={"similarity": sim})


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy from logits and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    per = np.logaddexp(0.0, logits) - labels * logits
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(np.mean(per)), (probs - labels) / logits.size


def hard_negative_donors(z: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """For each instance, the other instance whose column ``slots[i]`` is most similar (cosine)."""
    n = z.shape[0]
    donors = np.empty(n, dtype=np.int64)
    for i in range(n):
        m = slots[i]
        col = z[:, :, m]
        sims = col @ col[i]
        sims[i] = -np.inf
        donors[i] = int(np.argmax(sims))
    return donors


def _flatten_tuples(z: np.ndarray) -> np.ndarray:
    # (N, d, k) -> (N, k*d), modality-major: [z^1; z^2; ...]
    return np.swapaxes(z, -1, -2).reshape(z.shape[0], -1)


def instance_matching_loss(z_batch, head: MatchingHead, rng) -> tuple[LossOutput, dict[str, np.ndarray]]:
    """Binary matched / mismatched prediction with one hard negative per instance.

    The negative for instance ``i`` swaps one modality slot (drawn from
    ``rng``) for the most similar other instance's embedding in that slot.
    """
    z = as_batch(z_batch, min_size=2)
    n, d, k = z.shape
    rng = np.random.default_rng(rng)
    slots = rng.integers(0, k, size=n)
    donors = hard_negative_donors(z, slots)
    neg = z.copy()
    neg[np.arange(n), :, slots] = z[donors, :, slots]
    tuples = np.concatenate([_flatten_tuples(z), _flatten_tuples(neg)], axis=0)
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    logits, cache = head.forward(tuples)
    value, grad_logits = bce_with_logits(logits, labels)
    head_grads, grad_x = head.backward(cache, grad_logits)
    grad_pos = np.swapaxes(grad_x[:n].reshape(n, k, d), -1, -2)
    grad_neg = np.swapaxes(grad_x[n:].reshape(n, k, d), -1, -2)
    grad = grad_pos.copy()
    swapped = grad_neg[np.arange(n), :, slots].copy()
    grad_neg[np.arange(n), :, slots] = 0.0
    grad += grad_neg
    for i in range(n):
        grad[donors[i], :, slots[i]] += swapped[i]
    out = LossOutput(
        value,
        grad,
        terms={"im": value},
        head_grads=head_grads,
        extras={"slots": slots, "donors": donors, "probs": 0.5 * (1.0 + np.tanh(0.5 * logits))},
    )
    return out, head_grads


def combined_loss(z_batch, head: MatchingHead, cfg: LossConfig, rng) -> LossOutput:
    """Singular-value loss plus weighted leading-direction and instance-matching terms."""
    z = as_batch(z_batch, min_size=2)
    s = svd_thin(z)
    sv = pmrl_singular_loss(z, cfg.tau1, svd=s)
    reg = leading_direction_reg(z, cfg.tau2, svd=s)
    im, head_grads = instance_matching_loss(z, head, rng)
    value = sv.value + cfg.lambda1 * reg.value + cfg.lambda2 * im.value
    grad = sv.grad_z + cfg.lambda1 * reg.grad_z + cfg.lambda2 * im.grad_z
    head_grads = {name: cfg.lambda2 * g for name, g in head_grads.items()}
    return LossOutput(
        value,
        grad,
        terms={"sv": sv.value, "reg": reg.value, "im": im.value},
        head_grads=head_grads,
        extras={"svd": s, "donors": im.extras["donors"]},
    )


def pairwise_infonce(z_m1, z_m2, tau: float = 0.1) -> LossOutput:
    """One-directional InfoNCE between two aligned lists of unit vectors.

    ``grad_z[:, :, 0]`` is the gradient for ``z_m1`` and ``grad_z[:, :, 1]``
    for ``z_m2``.
    """
    a = np.asarray(z_m1, dtype=np.float64)
    b = np.asarray(z_m2, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise EmptyBatch("pairwise_infonce needs a nonempty list of vectors")
    if a.shape != b.shape:
        raise LengthMismatch(f"modality lists differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    logits = a @ b.T / tau
    logp = log_softmax(logits, axis=-1)
    value = float(-np.mean(np.diag(logp)))
    dlogits = (np.exp(logp) - np.eye(n)) / n
    grad = np.stack([dlogits @ b / tau, dlogits.T @ a / tau], axis=-1)
    return LossOutput(value, grad, terms={"infonce": value})


def infonce_all_pairs(z_batch, tau: float = 0.1) -> LossOutput:
    """Mean of the pairwise InfoNCE over every ordered pair of distinct modalities."""
    z = as_batch(z_batch, min_size=2)
    k = z.shape[-1]
    grad = np.zeros_like(z)
    total = 0.0
    n_pairs = k * (k - 1)
    for a in range(k):
        for b in range(k):
            if a == b:
                continue
            out = pairwise_infonce(z[:, :, a], z[:, :, b], tau)
            total += out.value
            grad[:, :, a] += out.grad_z[:, :, 0]
            grad[:, :, b] += out.grad_z[:, :, 1]
    value = total / n_pairs
    return LossOutput(value, grad / n_pairs, terms={"infonce": value})


def gram_volume(z) -> float | np.ndarray:
    """Parallelotope volume spanned by the columns: the product of singular values."""
    s = svd_thin(as_batch(z) if np.ndim(z) == 3 else np.asarray(z, dtype=np.float64))
    vol = np.prod(s.sigma, axis=-1)
    return float(vol) if np.ndim(vol) == 0 else vol


def _volume_sigma_grad(sigma: np.ndarray) -> np.ndarray:
    """d(prod sigma)/d sigma_j = prod_{l != j} sigma_l, exactly zero when two sigmas vanish."""
    k = sigma.shape[-1]
    partial = np.empty_like(sigma)
    for j in range(k):
        partial[..., j] = np.prod(np.delete(sigma, j, axis=-1), axis=-1)
    stalled = np.sum(sigma < EPS_NULL, axis=-1) >= 2
    partial[stalled] = 0.0
    return partial


def volume_only_loss(z_batch) -> LossOutput:
    """Mean Gram volume over the batch (volume minimisation with no contrastive term)."""
    z = as_batch(z_batch)
    n = z.shape[0]
    s = svd_thin(z)
    vol = np.prod(s.sigma, axis=-1)
    grad = svd_backward(s, grad_sigma=_volume_sigma_grad(s.sigma) / n)
    value = float(np.mean(vol))
    return LossOutput(value, grad, terms={"volume": value}, extras={"svd": s})


def volume_contrastive_loss(z_batch, anchor_slot: int = 0, tau: float = 0.1) -> LossOutput:
    """Contrast each instance's volume against volumes with its anchor column swapped in from others.

    Logits are ``-Vol(Z_i with anchor column from instance j) / tau``; the
    target for row ``i`` is ``j == i``.
    """
    z = as_batch(z_batch, min_size=2)
    n, d, k = z.shape
    if not 0 <= anchor_slot < k:
        raise BadAnchor(f"anchor slot {anchor_slot} outside 0..{k - 1}")
    mixed = np.broadcast_to(z[:, None], (n, n, d, k)).copy()
    mixed[:, :, :, anchor_slot] = np.broadcast_to(z[None, :, :, anchor_slot], (n, n, d))
    s = svd_thin(mixed)
    vol = np.prod(s.sigma, axis=-1)
    logp = log_softmax(-vol / tau, axis=-1)
    value = float(-np.mean(np.diag(logp)))
    dlogits = (np.exp(logp) - np.eye(n)) / n
    dvol = -dlogits / tau
    gmix = svd_backward(s, grad_sigma=_volume_sigma_grad(s.sigma) * dvol[..., None])
    grad = np.zeros_like(z)
    anchor_grad = gmix[:, :, :, anchor_slot].sum(axis=0)
    gmix[:, :, :, anchor_slot] = 0.0
    grad += gmix.sum(axis=1)
    grad[:, :, anchor_slot] += anchor_grad
    return LossOutput(value, grad, terms={"volume_contrastive": value}, extras={"volumes": vol})


def logsumexp_identity_value(u1: np.ndarray, tau2: float) -> float:
    """Regulariser value through the identity mean_i logsumexp_j(s_ij / tau) - 1 / tau."""
    sim = u1 @ u1.T
    return float(np.mean(logsumexp(sim / tau2, axis=-1)) - 1.0 / tau2)
