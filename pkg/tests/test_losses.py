import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import log_softmax

from conftest import aligned, unit_columns
from pmrl.errors import BadAnchor, BatchTooSmall, EmptyBatch, LengthMismatch, NonUnitColumns
from pmrl.linalg import svd_thin
from pmrl.losses import (
    LossConfig,
    _volume_sigma_grad,
    combined_loss,
    gram_volume,
    hard_negative_donors,
    infonce_all_pairs,
    instance_matching_loss,
    leading_direction_reg,
    logsumexp_identity_value,
    pairwise_infonce,
    pmrl_singular_loss,
    volume_contrastive_loss,
    volume_only_loss,
)
from pmrl.model import MatchingHead

LOG2 = math.log(2.0)
seeds = st.integers(0, 2**32 - 1)


def zero_head(in_dim: int, hidden: int = 3) -> MatchingHead:
    return MatchingHead(np.zeros((hidden, in_dim)), np.zeros(hidden), np.zeros((1, hidden)), np.zeros(1))


def tangent(z, g):
    return g - z * np.sum(z * g, axis=-2, keepdims=True)


def fd_on_sphere(loss, z, h=1e-6):
    def unit(w):
        return w / np.linalg.norm(w, axis=-2, keepdims=True)

    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (loss(unit(zp)).value - loss(unit(zm)).value) / (2 * h)
    return num


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b))


# --- singular-value loss ------------------------------------------------------


def test_singular_loss_uniform_logits():
    z = np.stack([np.eye(3)[:, :2]] * 4)
    for tau in (0.05, 0.3, 2.0):
        assert pmrl_singular_loss(z, tau).value == pytest.approx(0.6931472, abs=1e-7)


def test_singular_loss_aligned_is_near_zero(rng):
    assert pmrl_singular_loss(aligned(rng, 6, 3), 0.05).value <= 1e-12


def test_singular_loss_gradient_is_sigma_chain(rng):
    z = unit_columns(rng, 5, 8, 4)
    tau = 0.2
    out = pmrl_singular_loss(z, tau)
    s = svd_thin(z)
    p = np.exp(log_softmax(s.sigma / tau, axis=-1))
    p[:, 0] -= 1.0
    expected = np.einsum("nj,ndj,nkj->ndk", p / (5 * tau), s.u, s.v)
    np.testing.assert_allclose(out.grad_z, expected, atol=1e-12)


def test_singular_loss_finite_differences(rng):
    z = unit_columns(rng, 1, 8, 4)
    out = pmrl_singular_loss(z, 0.5)
    assert rel(tangent(z, out.grad_z), fd_on_sphere(lambda w: pmrl_singular_loss(w, 0.5), z)) < 1e-4


def test_singular_loss_minimised_by_alignment():
    rng = np.random.default_rng(3)
    tau = 0.05
    best = pmrl_singular_loss(aligned(rng, 8, 4), tau).value
    z = unit_columns(rng, 10_000, 8, 4)
    per_instance = -log_softmax(svd_thin(z).sigma / tau, axis=-1)[:, 0]
    assert best <= per_instance.min()
    for i in range(5):
        assert pmrl_singular_loss(z[i], tau).value == pytest.approx(per_instance[i], abs=1e-12)


def test_singular_loss_errors(rng):
    with pytest.raises(EmptyBatch):
        pmrl_singular_loss(np.zeros((0, 4, 2)))
    z = unit_columns(rng, 2, 4, 2)
    z[0, :, 0] *= 1.0 + 2e-6
    with pytest.raises(NonUnitColumns):
        pmrl_singular_loss(z)


# --- leading-direction regulariser ------------------------------------------


def test_reg_identical_instances():
    z = np.stack([np.eye(4)[:, :2]] * 2)
    assert leading_direction_reg(z, 0.1).value == pytest.approx(LOG2, abs=1e-12)


def test_reg_orthogonal_leading_directions():
    a = np.repeat(np.eye(4)[:, :1], 3, axis=1)
    b = np.repeat(np.eye(4)[:, 1:2], 3, axis=1)
    value = leading_direction_reg(np.stack([a, b]), 0.1).value
    assert value == pytest.approx(4.5398899e-05, rel=1e-6)


def test_reg_finite_differences(rng):
    checked = 0
    while checked < 3:
        z = unit_columns(rng, 4, 8, 3)
        s = svd_thin(z)
        if np.min(-np.diff(s.sigma, axis=-1)) < 1e-3 or np.min(np.abs(s.v.sum(axis=-2))) < 1e-3:
            continue
        out = leading_direction_reg(z, 0.5)
        assert rel(tangent(z, out.grad_z), fd_on_sphere(lambda w: leading_direction_reg(w, 0.5), z)) < 1e-3
        checked += 1


def test_reg_needs_two_instances(rng):
    with pytest.raises(BatchTooSmall):
        leading_direction_reg(unit_columns(rng, 1, 4, 2))


@given(seed=seeds, n=st.integers(2, 8))
def test_reg_logsumexp_identity(seed, n):
    z = unit_columns(np.random.default_rng(seed), n, 6, 3)
    out = leading_direction_reg(z, 0.1)
    u1 = svd_thin(z).u[:, :, 0]
    assert out.value == pytest.approx(logsumexp_identity_value(u1, 0.1), abs=1e-10)


# --- instance matching ------------------------------------------------------


def test_im_uncertain_head(rng):
    z = unit_columns(rng, 4, 5, 3)
    out, grads = instance_matching_loss(z, zero_head(15), [1, 2])
    assert out.value == pytest.approx(0.6931472, abs=1e-7)
    assert set(grads) == {"W0", "b0", "W1", "b1"}


def test_im_confident_head_approaches_zero():
    # instance 0 is (e1, e1), instance 1 is (e2, e2); a mixed tuple has slot
    # difference a = +-2 along e1 - e2, a matched one has a = 0
    z = np.zeros((2, 3, 2))
    z[0, 0, :] = 1.0
    z[1, 1, :] = 1.0
    a = np.array([1.0, -1.0, 0.0, -1.0, 1.0, 0.0])
    head = MatchingHead(20.0 * np.stack([a, -a]), np.array([-10.0, -10.0]), np.array([[-30.0, -30.0]]), np.array([-30.0]))
    out, _ = instance_matching_loss(z, head, [0, 0])
    assert out.value < 1e-6
    np.testing.assert_allclose(out.extras["probs"], [1.0, 1.0, 0.0, 0.0], atol=1e-6)


def test_im_donors_match_brute_force(rng):
    z = unit_columns(rng, 4, 6, 3)
    out, _ = instance_matching_loss(z, MatchingHead.init(rng, 18, 5), [9, 9])
    slots = out.extras["slots"]
    for i in range(4):
        m = slots[i]
        best = max((j for j in range(4) if j != i), key=lambda j: float(z[j, :, m] @ z[i, :, m]))
        assert out.extras["donors"][i] == best
    np.testing.assert_array_equal(hard_negative_donors(z, slots), out.extras["donors"])


def test_im_finite_differences(rng):
    z = unit_columns(rng, 3, 4, 3)
    head = MatchingHead.init(rng, 12, 4)
    out, _ = instance_matching_loss(z, head, [5, 1])
    num = fd_on_sphere(lambda w: instance_matching_loss(w, head, [5, 1])[0], z)
    assert rel(tangent(z, out.grad_z), num) < 1e-4


def test_im_needs_two_instances(rng):
    with pytest.raises(BatchTooSmall):
        instance_matching_loss(unit_columns(rng, 1, 4, 2), zero_head(8), 0)


# --- combined objective -------------------------------------------------------


def test_combined_without_weights_is_singular_loss(rng):
    z = unit_columns(rng, 4, 6, 3)
    cfg = LossConfig(lambda1=0.0, lambda2=0.0)
    out = combined_loss(z, MatchingHead.init(rng, 18, 4), cfg, 0)
    ref = pmrl_singular_loss(z, cfg.tau1)
    assert out.value == ref.value
    np.testing.assert_array_equal(out.grad_z, ref.grad_z)


def test_combined_defaults():
    cfg = LossConfig()
    assert (cfg.tau1, cfg.tau2, cfg.lambda1, cfg.lambda2) == (0.05, 0.1, 1.0, 0.1)


def test_combined_recomposes_terms(rng):
    z = unit_columns(rng, 5, 6, 3)
    head = MatchingHead.init(rng, 18, 4)
    cfg = LossConfig(tau1=0.3, lambda1=0.7, lambda2=0.2)
    out = combined_loss(z, head, cfg, [4])
    sv = pmrl_singular_loss(z, cfg.tau1).value
    reg = leading_direction_reg(z, cfg.tau2).value
    im = instance_matching_loss(z, head, [4])[0].value
    assert out.value == pytest.approx(sv + 0.7 * reg + 0.2 * im, abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau1=0.0)
    with pytest.raises(ValueError):
        LossConfig(lambda2=-1.0)


@given(seed=seeds)
def test_combined_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    z = unit_columns(rng, 3, 5, 3)
    head = MatchingHead.init(rng, 15, 3)
    a = combined_loss(z, head, LossConfig(), [seed, 1])
    b = combined_loss(z.copy(), head, LossConfig(), [seed, 1])
    assert a.value == b.value and np.array_equal(a.grad_z, b.grad_z)


@given(seed=seeds, k=st.integers(2, 5))
def test_losses_invariant_to_column_permutation(seed, k):
    rng = np.random.default_rng(seed)
    z = unit_columns(rng, 4, 7, k)
    perm = rng.permutation(k)
    zp = z[:, :, perm]
    assert pmrl_singular_loss(zp, 0.1).value == pytest.approx(pmrl_singular_loss(z, 0.1).value, abs=1e-12)
    assert volume_only_loss(zp).value == pytest.approx(volume_only_loss(z).value, abs=1e-12)
    assert infonce_all_pairs(zp, 0.1).value == pytest.approx(infonce_all_pairs(z, 0.1).value, abs=1e-12)


# --- contrastive baseline -----------------------------------------------------


def test_infonce_orthogonal_pairs():
    a = np.eye(3)[:2]
    assert pairwise_infonce(a, a, 1.0).value == pytest.approx(0.3132617, abs=1e-7)


def test_infonce_indistinguishable(rng):
    v = unit_columns(rng, 5, 1)[:, 0]
    a = np.tile(v, (6, 1))
    assert pairwise_infonce(a, a, 0.1).value == pytest.approx(math.log(6), abs=1e-12)


def test_infonce_finite_differences(rng):
    a = unit_columns(rng, 5, 4).T
    b = unit_columns(rng, 5, 4).T
    out = pairwise_infonce(a, b, 0.5)
    for side, x in ((0, a), (1, b)):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-6
            xm[idx] -= 1e-6
            pair_p = (xp, b) if side == 0 else (a, xp)
            pair_m = (xm, b) if side == 0 else (a, xm)
            num[idx] = (pairwise_infonce(*pair_p, 0.5).value - pairwise_infonce(*pair_m, 0.5).value) / 2e-6
        assert rel(out.grad_z[:, :, side], num) < 1e-5


def test_infonce_errors():
    with pytest.raises(EmptyBatch):
        pairwise_infonce(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(LengthMismatch):
        pairwise_infonce(np.ones((2, 3)), np.ones((3, 3)))


# --- volume objectives --------------------------------------------------------


def test_volume_oracles():
    assert gram_volume(np.eye(4)[:, :3]) == pytest.approx(1.0, abs=1e-15)
    assert gram_volume(np.repeat(np.eye(3)[:, :1], 2, axis=1)) == pytest.approx(0.0, abs=1e-15)
    z = np.array([[1.0, 1.0 / math.sqrt(2)], [0.0, 1.0 / math.sqrt(2)]])
    assert gram_volume(z) == pytest.approx(0.7071068, abs=1e-7)


@given(seed=seeds, k=st.integers(2, 5))
def test_volume_is_root_gram_determinant(seed, k):
    z = unit_columns(np.random.default_rng(seed), 8, k)
    det = np.linalg.det(z.T @ z)
    if det > 1e-6:
        assert gram_volume(z) == pytest.approx(math.sqrt(det), abs=1e-8)


def test_volume_only_orthonormal_batch():
    assert volume_only_loss(np.stack([np.eye(4)[:, :3]] * 3)).value == pytest.approx(1.0, abs=1e-14)


def test_volume_only_stalls_when_aligned(rng):
    z = np.stack([aligned(rng, 5, 3) for _ in range(4)])
    out = volume_only_loss(z)
    assert out.value == pytest.approx(0.0, abs=1e-15)
    assert np.all(out.grad_z == 0.0)


def test_volume_stall_with_rank_above_one():
    # two null singular values but rank 2: the product gradient is exactly zero
    sigma = np.array([[1.5, 0.8, 1e-12, 0.0]])
    assert np.all(_volume_sigma_grad(sigma) == 0.0)
    one_null = _volume_sigma_grad(np.array([[1.5, 0.8, 0.5, 0.0]]))
    assert one_null[0, -1] == pytest.approx(0.6) and np.all(one_null[0, :-1] == 0.0)


def test_volume_only_finite_differences(rng):
    z = unit_columns(rng, 2, 6, 3)
    assert min(svd_thin(z).sigma.ravel()) >= 1e-2
    out = volume_only_loss(z)
    assert rel(tangent(z, out.grad_z), fd_on_sphere(volume_only_loss, z)) < 1e-4


def test_volume_contrastive_identical_instances(rng):
    z = unit_columns(rng, 1, 4, 3)
    out = volume_contrastive_loss(np.concatenate([z, z]), 0, 0.1)
    assert out.value == pytest.approx(LOG2, abs=1e-12)


def test_volume_contrastive_scalar_oracle():
    e1, e2 = np.eye(3)[:, 0], np.eye(3)[:, 1]
    z = np.stack([np.stack([e1, e1], axis=1), np.stack([e2, e2], axis=1)])
    assert volume_contrastive_loss(z, 0, 1.0).value == pytest.approx(0.3132617, abs=1e-7)


def test_volume_contrastive_self_swap(rng):
    z = unit_columns(rng, 3, 5, 3)
    vols = volume_contrastive_loss(z, 1, 0.1).extras["volumes"]
    for i in range(3):
        assert vols[i, i] == pytest.approx(gram_volume(z[i]), abs=1e-14)


def test_volume_contrastive_finite_differences(rng):
    z = unit_columns(rng, 3, 4, 3)
    out = volume_contrastive_loss(z, 2, 0.1)
    num = fd_on_sphere(lambda w: volume_contrastive_loss(w, 2, 0.1), z)
    assert rel(tangent(z, out.grad_z), num) < 1e-4


def test_volume_contrastive_bad_anchor(rng):
    with pytest.raises(BadAnchor):
        volume_contrastive_loss(unit_columns(rng, 2, 4, 2), 2)
