"""Multi-arm comparison suites: collapse demonstration, ablation and robustness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from ..errors import UnknownSuite
from .config import RunConfig
from .train import TrainResult, dump_json, train, trajectory_csv

log = logging.getLogger(__name__)

SUITE_NAMES = ("collapse-demo", "ablate", "robustness")
ROBUST_NOISE = 0.4
ROBUST_FLIP = 0.3
ALIGNED_TARGET = 0.9
COLLAPSED_TARGET = 0.5


@dataclass(frozen=True)
class SuiteSpec:
    arms: tuple[str, ...]
    # Arms reported alongside but never part of an asserted ordering.
    extra_arms: tuple[str, ...]
    n_seeds: int


SUITES = {
    "collapse-demo": SuiteSpec(("pmrl", "volume-only"), ("volume-contrastive",), 1),
    "ablate": SuiteSpec(("pmrl", "pmrl-no-reg", "pmrl-no-im"), ("volume-only",), 3),
    "robustness": SuiteSpec(("pmrl", "volume-contrastive"), ("infonce-pairwise",), 3),
}


def arm_metrics(result: TrainResult) -> dict:
    s = result.summary
    align = s["train_alignment"]
    out = {
        key: align[key]
        for key in (
            "sigma1_ratio",
            "mean_pairwise_cosine",
            "min_sigma",
            "effective_rank",
            "aligned_fraction",
            "collapsed_fraction",
            "u1_offdiag_similarity",
        )
    }
    out["mean_recall_at_1"] = s.get("mean_recall_at_1")
    cls = s.get("classification")
    out["auc"] = cls["auc"] if cls else None
    out["accuracy"] = cls["accuracy"] if cls else None
    return out


def suite_config(name: str, base: RunConfig) -> RunConfig:
    if name == "robustness":
        synthetic = replace(base.synthetic, label_flip_prob=ROBUST_FLIP, flip_split="train")
        return replace(base, input_noise=ROBUST_NOISE, synthetic=synthetic)
    return base


def _check(name: str, per_seed: list[bool], rule: str) -> dict:
    holds = sum(per_seed) * 2 > len(per_seed) if rule == "majority" else all(per_seed)
    return {"name": name, "rule": rule, "per_seed": per_seed, "holds": bool(holds)}


def evaluate_checks(name: str, metrics: dict[str, list[dict]]) -> list[dict]:
    """Declared orderings for a suite; ``metrics`` maps arm to per-seed metric dicts."""
    if name == "collapse-demo":
        pm, vo = metrics["pmrl"], metrics["volume-only"]
        return [
            _check(
                "pmrl sigma1_ratio > volume-only sigma1_ratio",
                [a["sigma1_ratio"] > b["sigma1_ratio"] for a, b in zip(pm, vo)],
                "all",
            ),
            _check(
                f"volume-only collapsed_fraction >= {COLLAPSED_TARGET}",
                [b["collapsed_fraction"] >= COLLAPSED_TARGET for b in vo],
                "all",
            ),
            _check(
                f"pmrl aligned_fraction >= {ALIGNED_TARGET}",
                [a["aligned_fraction"] >= ALIGNED_TARGET for a in pm],
                "all",
            ),
        ]
    if name == "ablate":
        pm = metrics["pmrl"]
        return [
            _check(
                "pmrl recall@1 >= pmrl-no-reg recall@1",
                [a["mean_recall_at_1"] >= b["mean_recall_at_1"] for a, b in zip(pm, metrics["pmrl-no-reg"])],
                "majority",
            ),
            _check(
                "pmrl recall@1 >= pmrl-no-im recall@1",
                [a["mean_recall_at_1"] >= b["mean_recall_at_1"] for a, b in zip(pm, metrics["pmrl-no-im"])],
                "majority",
            ),
            _check(
                "pmrl u1 similarity < pmrl-no-reg u1 similarity",
                [a["u1_offdiag_similarity"] < b["u1_offdiag_similarity"] for a, b in zip(pm, metrics["pmrl-no-reg"])],
                "all",
            ),
        ]
    pm, vc = metrics["pmrl"], metrics["volume-contrastive"]
    return [
        _check(
            "pmrl auc >= volume-contrastive auc",
            [a["auc"] >= b["auc"] for a, b in zip(pm, vc)],
            "majority",
        )
    ]


def sigma_trajectories_csv(results: dict[str, TrainResult]) -> str:
    """Per-position mean singular values of every arm, one row per recorded step."""
    rows = []
    for arm, res in results.items():
        for r in res.trajectory:
            row = {"arm": arm, "step": r["step"]}
            row.update({c: r[c] for c in r if c.startswith("sigma_") and c[6:].isdigit()})
            rows.append(row)
    header = list(rows[0])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else str(v) if isinstance(v, int) else repr(float(v)) for v in row.values()))
    return "\n".join(lines) + "\n"


def run_suite(name: str, base: RunConfig, out_dir=None, n_seeds: int | None = None) -> dict:
    """Run every arm of a suite on shared data and seeds and evaluate its orderings.

    Seeds are ``base.seed, base.seed + 1, ...``; each seed sets both the data and
    the model seed. Returns the comparison report (also written as
    ``comparison.json`` when an output directory is given).
    """
    if name not in SUITES:
        raise UnknownSuite(f"unknown suite {name!r}; choose from {', '.join(SUITE_NAMES)}")
    spec = SUITES[name]
    cfg = suite_config(name, base)
    seeds = [cfg.seed + i for i in range(n_seeds or spec.n_seeds)]
    out = Path(out_dir) if out_dir is not None else None
    all_arms = spec.arms + spec.extra_arms
    metrics: dict[str, list[dict]] = {arm: [] for arm in all_arms}
    first: dict[str, TrainResult] = {}
    for seed in seeds:
        for arm in all_arms:
            arm_cfg = replace(cfg.with_seed(seed), objective=arm, out_dir=None)
            log.info("suite %s: seed %d arm %s", name, seed, arm)
            arm_out = out / f"seed_{seed}" / arm if out is not None else None
            res = train(arm_cfg, arm_out)
            metrics[arm].append(arm_metrics(res))
            first.setdefault(arm, res)
    checks = evaluate_checks(name, metrics)
    report = {
        "suite": name,
        "seeds": seeds,
        "asserted_arms": list(spec.arms),
        "reported_arms": list(spec.extra_arms),
        "base_config": cfg.to_dict() | {"out_dir": None},
        "arms": {arm: {str(s): m for s, m in zip(seeds, metrics[arm])} for arm in all_arms},
        "checks": checks,
        "passed": all(c["holds"] for c in checks),
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_json(report, out / "comparison.json")
        (out / "sigma_trajectories.csv").write_text(sigma_trajectories_csv(first))
        if cfg.figures:
            from .plotting import plot_comparison

            plot_comparison(name, first, out / "figures")
    return report
