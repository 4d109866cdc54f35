"""Synthetic shared-latent multimodal data and the noise-injection protocols."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadConfig


@dataclass(frozen=True)
class SyntheticConfig:
    n_instances: int = 256
    n_test: int = 64
    k: int = 4
    latent_dim: int = 8
    obs_dims: tuple[int, ...] = (24, 29, 34, 40)
    noise_scale: float = 0.0
    label_flip_prob: float = 0.0
    flip_split: str = "train"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obs_dims", tuple(int(n) for n in self.obs_dims))
        if not 2 <= self.k <= 8:
            raise BadConfig(f"k must be in 2..8, got {self.k}")
        if self.latent_dim < 1:
            raise BadConfig("latent_dim must be >= 1")
        if len(self.obs_dims) != self.k or min(self.obs_dims) < 1:
            raise BadConfig("obs_dims must list one positive width per modality")
        if self.n_instances < 1 or self.n_test < 0:
            raise BadConfig("need at least one training instance")
        if self.noise_scale < 0:
            raise BadConfig("noise_scale must be nonnegative")
        if not 0.0 <= self.label_flip_prob <= 1.0:
            raise BadConfig("label_flip_prob must be a probability")
        if self.flip_split not in ("train", "test", "both"):
            raise BadConfig(f"flip_split must be train, test or both, got {self.flip_split!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticConfig":
        return cls(**doc)


@dataclass(frozen=True)
class SyntheticDataset:
    """Observations ``x[m]`` of shape ``(n, obs_dims[m])``, labels, latents and split tags."""

    config: SyntheticConfig
    x: tuple[np.ndarray, ...]
    labels: np.ndarray
    latents: np.ndarray
    split: np.ndarray
    maps: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> tuple[list[np.ndarray], np.ndarray]:
        idx = self.indices(split)
        return [xm[idx] for xm in self.x], self.labels[idx]


def generate(cfg: SyntheticConfig) -> SyntheticDataset:
    """Draw latents ``c ~ N(0, I)`` and observe them through per-modality affine maps plus noise."""
    rng = np.random.default_rng([cfg.seed, 0x5E7])
    n = cfg.n_instances + cfg.n_test
    p = cfg.latent_dim
    maps_a = [rng.normal(size=(dm, p)) / np.sqrt(p) for dm in cfg.obs_dims]
    maps_b = [0.5 * rng.normal(size=dm) for dm in cfg.obs_dims]
    w = rng.normal(size=p)
    latents = rng.normal(size=(n, p))
    x = []
    for a, b in zip(maps_a, maps_b):
        clean = latents @ a.T + b
        x.append(clean + cfg.noise_scale * rng.normal(size=clean.shape))
    labels = (latents @ w > 0.0).astype(np.int64)
    split = np.array(["train"] * cfg.n_instances + ["test"] * cfg.n_test)
    ds = SyntheticDataset(cfg, tuple(x), labels, latents, split, {"A": maps_a, "b": maps_b, "w": w})
    if cfg.label_flip_prob > 0.0:
        ds = flip_labels(ds, cfg.label_flip_prob, cfg.seed, split=cfg.flip_split)
    return ds


def add_input_noise(ds: SyntheticDataset, scale: float, seed: int) -> SyntheticDataset:
    """Unit-normalise every observation, then add ``scale`` times fresh Gaussian noise."""
    if scale < 0:
        raise BadConfig("noise scale must be nonnegative")
    rng = np.random.default_rng([seed, 0x401])
    noisy = []
    for xm in ds.x:
        norms = np.linalg.norm(xm, axis=-1, keepdims=True)
        unit = xm / np.where(norms > 0.0, norms, 1.0)
        noisy.append(unit + scale * rng.normal(size=xm.shape))
    return replace(ds, x=tuple(noisy))


def flip_labels(ds: SyntheticDataset, prob: float, seed: int, *, split: str = "both") -> SyntheticDataset:
    """Flip each label independently with probability ``prob``, restricted to ``split``."""
    if not 0.0 <= prob <= 1.0:
        raise BadConfig("flip probability must be in [0, 1]")
    rng = np.random.default_rng([seed, 0xF11])
    flip = rng.random(ds.n) < prob
    if split != "both":
        flip &= ds.split == split
    return replace(ds, labels=np.where(flip, 1 - ds.labels, ds.labels))


def dump_jsonl(ds: SyntheticDataset, path) -> None:
    """Header line with the config, then one record per instance."""
    lines = [json.dumps({"config": asdict(ds.config)})]
    for i in range(ds.n):
        rec = {"id": i, "split": str(ds.split[i]), "label": int(ds.labels[i])}
        for m, xm in enumerate(ds.x):
            rec[f"mod_{m}"] = [float(v) for v in xm[i]]
        rec["latent"] = [float(v) for v in ds.latents[i]]
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_jsonl(path) -> SyntheticDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        records = [json.loads(line) for line in fh if line.strip()]
    cfg = SyntheticConfig.from_dict(header["config"])
    records.sort(key=lambda r: r["id"])
    x = tuple(np.array([r[f"mod_{m}"] for r in records], dtype=np.float64) for m in range(cfg.k))
    labels = np.array([r["label"] for r in records], dtype=np.int64)
    split = np.array([r["split"] for r in records])
    latents = np.array(
        [r.get("latent", [np.nan] * cfg.latent_dim) for r in records], dtype=np.float64
    ).reshape(len(records), cfg.latent_dim)
    return SyntheticDataset(cfg, x, labels, latents, split)
