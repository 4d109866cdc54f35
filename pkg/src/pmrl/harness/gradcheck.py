"""Central finite-difference checks of every analytic gradient in the package."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..linalg import svd_backward, svd_thin
from ..losses import (
    LossConfig,
    combined_loss,
    infonce_all_pairs,
    instance_matching_loss,
    leading_direction_reg,
    pairwise_infonce,
    pmrl_singular_loss,
    volume_contrastive_loss,
    volume_only_loss,
)
from ..model import MatchingHead, MlpEncoder, PmrlModel, encoder_backward, encoder_forward, normalized_output

FD_STEP = 1e-6
# Below this gradient norm the differences are dominated by round-off in
# losses that subtract O(1/tau) terms, so such draws are skipped.
MIN_GRAD_NORM = 1e-5
MIN_GAP = 1e-3
COMPONENT_TOL = 1e-4
TIGHT_TOL = 1e-5
END_TO_END_TOL = 1e-3
# End-to-end cases difference a random subset of parameter coordinates each.
END_TO_END_COORDS = 64


class Degenerate(Exception):
    """The sampled case sits too close to a non-differentiable point."""


@dataclass
class CheckReport:
    name: str
    tolerance: float
    errors: list[float] = field(default_factory=list)
    skipped: int = 0
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.errors) and self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name:<18} cases={len(self.errors):<4d} skipped={self.skipped:<3d} "
            f"max_rel_err={self.max_error:.3e} tol={self.tolerance:.0e} ({self.seconds:.1f}s)"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < MIN_GRAD_NORM:
        raise Degenerate("gradient below finite-difference resolution")
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards).

    With ``coords`` only those flat indices are differenced; the rest stay zero.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def _unit(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=-2, keepdims=True)


def _tangent(z: np.ndarray, g: np.ndarray) -> np.ndarray:
    # gradient of L(normalize(W)) at W = Z with unit columns
    return g - z * np.sum(z * g, axis=-2, keepdims=True)


def _require_spectrum(z: np.ndarray, signs: bool = True) -> None:
    s = svd_thin(z)
    sig = np.atleast_2d(s.sigma)
    if np.any(sig[..., -1] < MIN_GAP) or np.any(-np.diff(sig, axis=-1) < MIN_GAP):
        raise Degenerate("singular values too close")
    if signs and np.any(np.abs(np.atleast_3d(s.v).sum(axis=-2)) < MIN_GAP):
        raise Degenerate("sign convention near its switching point")


def _random_z(rng: np.random.Generator, n_max: int = 4, d_max: int = 6, k_max: int = 4) -> np.ndarray:
    k = int(rng.integers(2, k_max + 1))
    d = int(rng.integers(k, d_max + 1))
    n = int(rng.integers(2, n_max + 1))
    return _unit(rng.normal(size=(n, d, k)))


def _sphere_check(loss, z: np.ndarray, signs: bool = True) -> float:
    """Compare ``loss(z).grad_z`` with finite differences of ``loss(normalize(W))``."""
    _require_spectrum(z, signs)
    analytic = _tangent(z, loss(z).grad_z)
    numeric = numeric_grad(lambda w: loss(_unit(w)).value, z.copy())
    return relative_error(analytic, numeric)


def _case_sigma_path(rng):
    z = rng.normal(size=(int(rng.integers(2, 7)), int(rng.integers(2, 5))))
    if z.shape[0] < z.shape[1]:
        z = z.T
    _require_spectrum(z, signs=False)
    c = rng.normal(size=z.shape[1])
    s = svd_thin(z)
    analytic = (s.u * c) @ s.v.T
    numeric = numeric_grad(lambda w: float(c @ svd_thin(w).sigma), z.copy())
    return relative_error(analytic, numeric)


def _case_svd_backward(rng):
    z = rng.normal(size=(int(rng.integers(3, 7)), int(rng.integers(2, 4))))
    _require_spectrum(z)
    gu, gs, gv = rng.normal(size=z.shape), rng.normal(size=z.shape[1]), rng.normal(size=(z.shape[1],) * 2)

    def f(w):
        s = svd_thin(w)
        return float(np.sum(gu * s.u) + gs @ s.sigma + np.sum(gv * s.v))

    analytic = svd_backward(svd_thin(z), grad_u=gu, grad_sigma=gs, grad_v=gv)
    return relative_error(analytic, numeric_grad(f, z.copy()))


def _case_singular_loss(rng):
    tau = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
    return _sphere_check(lambda z: pmrl_singular_loss(z, tau), _random_z(rng), signs=False)


def _case_leading_reg(rng):
    tau = float(rng.choice([0.1, 0.5]))
    return _sphere_check(lambda z: leading_direction_reg(z, tau), _random_z(rng))


def _case_volume_only(rng):
    return _sphere_check(volume_only_loss, _random_z(rng), signs=False)


def _case_volume_contrastive(rng):
    z = _random_z(rng, n_max=3, d_max=5, k_max=3)
    anchor = int(rng.integers(0, z.shape[-1]))
    return _sphere_check(lambda w: volume_contrastive_loss(w, anchor, 0.1), z, signs=False)


def _case_infonce(rng):
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 7))
    a = _unit(rng.normal(size=(n, d)).T).T
    b = _unit(rng.normal(size=(n, d)).T).T
    tau = float(rng.choice([0.1, 0.5]))
    out = pairwise_infonce(a, b, tau)
    ga = numeric_grad(lambda x: pairwise_infonce(x, b, tau).value, a.copy())
    gb = numeric_grad(lambda x: pairwise_infonce(a, x, tau).value, b.copy())
    err = relative_error(out.grad_z, np.stack([ga, gb], axis=-1))
    all_pairs = _sphere_check(lambda z: infonce_all_pairs(z, tau), _random_z(rng), signs=False)
    return max(err, all_pairs)


def _stable_donors(fn, reference: np.ndarray):
    def wrapped(*args):
        out, _ = fn(*args)
        if not np.array_equal(out.extras["donors"], reference):
            raise Degenerate("hard negative changed under perturbation")
        return out.value

    return wrapped


def _case_instance_matching(rng):
    z = _random_z(rng)
    n, d, k = z.shape
    head = MatchingHead.init(rng, d * k, int(rng.integers(2, 6)))
    seed = [int(rng.integers(1 << 30)), 7]
    base, head_grads = instance_matching_loss(z, head, seed)
    donors = base.extras["donors"]
    f_z = _stable_donors(lambda w: instance_matching_loss(_unit(w), head, seed), donors)
    errs = [relative_error(_tangent(z, base.grad_z), numeric_grad(f_z, z.copy()))]
    params = head.params()
    for name in params:
        def f_p(p, name=name):
            trial = MatchingHead(**{k_.lower(): (p if k_ == name else v) for k_, v in params.items()})
            return instance_matching_loss(z, trial, seed)

        errs.append(relative_error(head_grads[name], numeric_grad(_stable_donors(f_p, donors), params[name].copy())))
    return max(errs)


def _case_encoder(rng):
    in_dim, hidden, out_dim = (int(rng.integers(2, 7)) for _ in range(3))
    enc = MlpEncoder.init(rng, in_dim, hidden, out_dim)
    x = rng.normal(size=(int(rng.integers(1, 4)), in_dim))
    c = rng.normal(size=(x.shape[0], out_dim))

    def value(e, inp):
        _, cache = encoder_forward(e, inp)
        return float(np.sum(c * normalized_output(cache)))

    _, cache = encoder_forward(enc, x)
    grads, grad_x = encoder_backward(enc, cache, c)
    errs = [relative_error(grad_x, numeric_grad(lambda xx: value(enc, xx), x.copy()))]
    params = enc.params()
    for name, p in params.items():
        def f(q, name=name):
            trial = MlpEncoder([params[f"W{i}"] for i in range(len(enc.weights))], [params[f"b{i}"] for i in range(len(enc.weights))])
            trial.set_params({**params, name: q})
            return value(trial, x)

        errs.append(relative_error(grads[name], numeric_grad(f, p.copy())))
    return max(errs)


def _case_end_to_end(rng):
    k, obs, hidden, d, n = 3, 5, 4, 6, 3
    model = PmrlModel.init(int(rng.integers(1 << 30)), [obs] * k, hidden, d, hidden)
    xs = [rng.normal(size=(n, obs)) for _ in range(k)]
    cfg = LossConfig(tau1=0.5)
    seed = [int(rng.integers(1 << 30)), 11]
    z, caches = model.encode(xs)
    _require_spectrum(z)
    out = combined_loss(z, model.head, cfg, seed)
    donors = out.extras["donors"]
    grads = model.backward(caches, out.grad_z)
    grads.update({f"head.{name}": g for name, g in out.head_grads.items()})
    params = {name: p.copy() for name, p in model.params().items()}
    names = list(params)
    sizes = [params[name].size for name in names]
    flat = np.concatenate([params[name].ravel() for name in names])

    def f(vec):
        split = np.split(vec, np.cumsum(sizes)[:-1])
        model.set_params({name: part.reshape(params[name].shape) for name, part in zip(names, split)})
        zz, _ = model.encode(xs)
        trial = combined_loss(zz, model.head, cfg, seed)
        if not np.array_equal(trial.extras["donors"], donors):
            raise Degenerate("hard negative changed under perturbation")
        return trial.value

    coords = np.sort(rng.choice(flat.size, size=min(END_TO_END_COORDS, flat.size), replace=False))
    numeric = numeric_grad(f, flat.copy(), coords=coords)
    analytic = np.concatenate([grads[name].ravel() for name in names])
    return relative_error(analytic[coords], numeric[coords])


SUITES = {
    "sigma-path": (_case_sigma_path, COMPONENT_TOL),
    "svd-backward": (_case_svd_backward, COMPONENT_TOL),
    "singular-loss": (_case_singular_loss, COMPONENT_TOL),
    "leading-reg": (_case_leading_reg, COMPONENT_TOL),
    "instance-matching": (_case_instance_matching, COMPONENT_TOL),
    "volume-only": (_case_volume_only, COMPONENT_TOL),
    "volume-contrastive": (_case_volume_contrastive, COMPONENT_TOL),
    "infonce": (_case_infonce, TIGHT_TOL),
    "encoder": (_case_encoder, TIGHT_TOL),
    "end-to-end": (_case_end_to_end, END_TO_END_TOL),
}


def run_suite(name: str, seed: int = 0, cases: int = 100, max_draws: int | None = None) -> CheckReport:
    """Collect ``cases`` non-degenerate checks; degenerate draws are counted as skipped."""
    case, tol = SUITES[name]
    rng = np.random.default_rng([seed, sorted(SUITES).index(name)])
    report = CheckReport(name, tol)
    limit = max_draws if max_draws is not None else 5 * cases
    t0 = time.perf_counter()
    while len(report.errors) < cases and len(report.errors) + report.skipped < limit:
        try:
            report.errors.append(case(rng))
        except Degenerate:
            report.skipped += 1
    report.seconds = time.perf_counter() - t0
    return report


def run_gradcheck(seed: int = 0, cases: int = 100, suites=None, echo=None) -> list[CheckReport]:
    reports = []
    for name in suites or SUITES:
        rep = run_suite(name, seed, cases)
        if echo is not None:
            echo(rep.line())
        reports.append(rep)
    return reports
