"""Training loop, evaluation and run outputs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import IoFailure, NonFinite
from ..linalg import svd_thin
from ..losses import (
    LossOutput,
    combined_loss,
    infonce_all_pairs,
    volume_contrastive_loss,
    volume_only_loss,
)
from ..metrics import alignment_report, classification_metrics, modality_contribution, recall_at_k
from ..model import AdamWState, PmrlModel, adamw_step, learning_rate, save_checkpoint
from ..synth import SyntheticDataset, add_input_noise, generate
from .config import RunConfig

log = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10)

COLUMN_DOCS = {
    "step": "optimiser updates applied before this row was recorded",
    "lr": "learning rate the next update will use",
    "loss_total": "value of the run's own objective on the fixed evaluation batch",
    "loss_sv": "singular-value softmax loss on the evaluation batch",
    "loss_reg": "leading-direction contrastive regulariser on the evaluation batch",
    "loss_im": "instance-matching binary cross-entropy on the evaluation batch",
    "mean_pairwise_cosine": "mean cosine over modality pairs and training instances",
    "min_pairwise_cosine": "smallest cosine over modality pairs and training instances",
    "sigma1_ratio": "mean over training instances of sigma_1 / sqrt(k)",
    "effective_rank": "mean count of singular values above 0.01 * sigma_1",
    "u1_offdiag_similarity": "mean cosine between leading left singular vectors of distinct instances",
    "min_sigma": "mean over training instances of the smallest singular value",
    "aligned_fraction": "fraction of training instances with sigma_1 / sqrt(k) >= 0.95",
    "collapsed_fraction": "fraction with smallest sigma < 0.05 and sigma_1 / sqrt(k) < 0.95",
    "wall_seconds": "seconds since the start of training (only when record_wall_clock is set)",
}


@dataclass
class TrainResult:
    config: RunConfig
    model: PmrlModel
    trajectory: list[dict]
    summary: dict


def prepare_data(cfg: RunConfig) -> SyntheticDataset:
    ds = generate(cfg.synthetic)
    if cfg.input_noise > 0.0:
        ds = add_input_noise(ds, cfg.input_noise, cfg.synthetic.seed)
    return ds


def objective_loss(cfg: RunConfig, z: np.ndarray, model: PmrlModel, rng) -> LossOutput:
    if cfg.objective.startswith("pmrl"):
        return combined_loss(z, model.head, cfg.loss_config(), rng)
    if cfg.objective == "volume-only":
        return volume_only_loss(z)
    if cfg.objective == "volume-contrastive":
        return volume_contrastive_loss(z, cfg.anchor_slot, cfg.loss.tau_baseline)
    return infonce_all_pairs(z, cfg.loss.tau_baseline)


def _batches(rng: np.random.Generator, n: int, size: int):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield order[start:start + size]


def _evaluate(cfg: RunConfig, model: PmrlModel, xs: list[np.ndarray], eval_idx: np.ndarray, step: int) -> dict:
    z, _ = model.encode(xs)
    svd = svd_thin(z)
    report = alignment_report(z, svd=svd)
    zb = z[eval_idx]
    im_seed = [cfg.seed, 0xE7A1]
    terms = combined_loss(zb, model.head, cfg.loss, im_seed).terms
    total = objective_loss(cfg, zb, model, im_seed).value
    row = {
        "step": step,
        "lr": learning_rate(cfg.optim_config(), step),
        "loss_total": total,
        "loss_sv": terms["sv"],
        "loss_reg": terms["reg"],
        "loss_im": terms["im"],
    }
    row.update(report.flat())
    bad = [k for k, v in row.items() if not math.isfinite(v)]
    if bad:
        raise NonFinite(f"non-finite metrics at step {step}: {', '.join(bad)}")
    return row


def fit_probe(features: np.ndarray, labels: np.ndarray, l2: float = 1e-2, iters: int = 50) -> np.ndarray:
    """Ridge-regularised logistic regression by Newton iterations; returns weights with bias last."""
    x = np.hstack([features, np.ones((features.shape[0], 1))])
    w = np.zeros(x.shape[1])
    reg = l2 * np.eye(x.shape[1])
    reg[-1, -1] = 0.0
    for _ in range(iters):
        p = 0.5 * (1.0 + np.tanh(0.5 * (x @ w)))
        grad = x.T @ (p - labels) / len(labels) + reg @ w
        hess = (x.T * (p * (1.0 - p))) @ x / len(labels) + reg
        step = np.linalg.solve(hess + 1e-12 * np.eye(len(w)), grad)
        w = w - step
        if np.max(np.abs(step)) < 1e-12:
            break
    return w


def probe_scores(w: np.ndarray, features: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * (features @ w[:-1] + w[-1])))


def summarize(cfg: RunConfig, model: PmrlModel, ds: SyntheticDataset) -> dict:
    train_x, train_y = ds.subset("train")
    test_x, test_y = ds.subset("test")
    z_train, _ = model.encode(train_x)
    train_svd = svd_thin(z_train)
    summary = {
        "objective": cfg.objective,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "k": cfg.synthetic.k,
        "train_alignment": alignment_report(z_train, svd=train_svd).flat(),
        "modality_contribution": modality_contribution(z_train, svd=train_svd).tolist(),
        "train_sigma_per_instance_quantiles": {
            "sigma1_ratio_p10": float(np.quantile(train_svd.sigma[:, 0] / math.sqrt(cfg.synthetic.k), 0.1)),
            "min_sigma_p90": float(np.quantile(train_svd.sigma[:, -1], 0.9)),
        },
    }
    if len(test_y) >= 2:
        z_test, _ = model.encode(test_x)
        summary["test_alignment"] = alignment_report(z_test).flat()
        retrieval = {}
        k = cfg.synthetic.k
        for a in range(k):
            for b in range(k):
                if a != b:
                    rec = recall_at_k(z_test[:, :, a], z_test[:, :, b], None, RECALL_KS)
                    retrieval[f"m{a}->m{b}"] = {f"R@{kk}": v for kk, v in rec.items()}
        summary["retrieval"] = retrieval
        for kk in RECALL_KS:
            summary[f"mean_recall_at_{kk}"] = float(np.mean([r[f"R@{kk}"] for r in retrieval.values()]))
        if len(np.unique(train_y)) == 2 and len(np.unique(test_y)) == 2:
            w = fit_probe(z_train.mean(axis=-1), train_y.astype(np.float64))
            auc, acc = classification_metrics(probe_scores(w, z_test.mean(axis=-1)), test_y)
            summary["classification"] = {"auc": auc, "accuracy": acc}
    return summary


def train(cfg: RunConfig, out_dir=None) -> TrainResult:
    """Run one configuration end to end; writes outputs when an output directory is given."""
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    ds = prepare_data(cfg)
    train_x, _ = ds.subset("train")
    n_train = train_x[0].shape[0]
    model = PmrlModel.init(cfg.seed, list(cfg.synthetic.obs_dims), cfg.hidden_width, cfg.embed_dim, cfg.head_hidden, cfg.init_shared_offset)
    params = model.params()
    state = AdamWState.create(cfg.optim_config(), params)
    batch_rng = np.random.default_rng([cfg.seed, 0xBA7C])
    batches = _batches(batch_rng, n_train, cfg.batch_size)
    eval_idx = np.arange(cfg.batch_size)
    t0 = time.perf_counter()

    def record(step):
        row = _evaluate(cfg, model, train_x, eval_idx, step)
        if cfg.record_wall_clock:
            row["wall_seconds"] = time.perf_counter() - t0
        return row

    trajectory = [record(0)]
    for step in range(cfg.steps):
        idx = next(batches)
        z, caches = model.encode([xm[idx] for xm in train_x])
        out = objective_loss(cfg, z, model, [cfg.seed, 0x1A, step])
        grads = model.backward(caches, out.grad_z)
        if out.head_grads is not None:
            grads.update({f"head.{n}": g for n, g in out.head_grads.items()})
        params, state = adamw_step(state, params, grads)
        model.set_params(params)
        done = step + 1
        if done % cfg.eval_interval == 0 or done == cfg.steps:
            trajectory.append(record(done))
            if done % (cfg.eval_interval * 20) == 0:
                row = trajectory[-1]
                log.info("%s step %d loss %.4f sigma1/sqrt(k) %.4f", cfg.objective, done, row["loss_total"], row["sigma1_ratio"])
    summary = summarize(cfg, model, ds)
    result = TrainResult(cfg, model, trajectory, summary)
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def trajectory_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    columns = list(rows[0])
    writer.writerow(columns)
    for row in rows:
        writer.writerow([str(row[c]) if isinstance(row[c], int) else repr(float(row[c])) for c in columns])
    return buf.getvalue()


def schema_for(columns: list[str]) -> dict:
    docs = {}
    for c in columns:
        if c.startswith("sigma_") and c[6:].isdigit():
            docs[c] = f"mean over training instances of singular value number {c[6:]} (descending order)"
        else:
            docs[c] = COLUMN_DOCS[c]
    return {"file": "trajectory.csv", "delimiter": ",", "columns": [{"name": c, "description": docs[c]} for c in columns]}


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_outputs(result: TrainResult, out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trajectory.csv").write_text(trajectory_csv(result.trajectory))
        dump_json(schema_for(list(result.trajectory[0])), out / "schema.json")
        dump_json(result.summary, out / "summary.json")
        dump_json(result.config.to_dict(), out / "config.json")
        save_checkpoint(out / "checkpoint.pmrl", result.model.params(), result.config.seed)
        if result.config.figures:
            from .plotting import plot_run

            plot_run(result, out / "figures")
    except OSError as exc:
        raise IoFailure(f"cannot write outputs to {out}: {exc}") from exc
