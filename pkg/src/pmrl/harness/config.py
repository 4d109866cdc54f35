"""Run configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..errors import BadConfig, ConfigInvalid
from ..losses import LossConfig
from ..model import AdamWConfig
from ..synth import SyntheticConfig

OBJECTIVES = (
    "pmrl",
    "pmrl-no-reg",
    "pmrl-no-im",
    "volume-only",
    "volume-contrastive",
    "infonce-pairwise",
)

# The singular-value temperature suited to large pretrained encoders leaves the
# loss flat at this scale; toy runs default to a warmer value.
TOY_TAU1 = 0.5


@dataclass(frozen=True)
class RunConfig:
    objective: str = "pmrl"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    hidden_width: int = 64
    embed_dim: int = 32
    head_hidden: int = 64
    init_shared_offset: float = 2.0
    loss: LossConfig = field(default_factory=lambda: LossConfig(tau1=TOY_TAU1))
    optim: AdamWConfig = field(default_factory=AdamWConfig)
    steps: int = 2000
    batch_size: int = 32
    eval_interval: int = 25
    input_noise: float = 0.0
    anchor_slot: int = 0
    seed: int = 0
    record_wall_clock: bool = False
    figures: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigInvalid(f"unknown objective {self.objective!r}; choose from {', '.join(OBJECTIVES)}")
        if self.steps < 0:
            raise ConfigInvalid("steps must be nonnegative")
        if self.batch_size < 2 or self.batch_size > self.synthetic.n_instances:
            raise ConfigInvalid("batch_size must be at least 2 and at most the training set size")
        if self.eval_interval < 1:
            raise ConfigInvalid("eval_interval must be positive")
        if self.embed_dim < self.synthetic.k:
            raise ConfigInvalid("embed_dim must be at least the number of modalities")
        if min(self.hidden_width, self.head_hidden) < 1:
            raise ConfigInvalid("layer widths must be positive")
        if self.input_noise < 0:
            raise ConfigInvalid("input_noise must be nonnegative")
        if not 0 <= self.anchor_slot < self.synthetic.k:
            raise ConfigInvalid("anchor_slot must index a modality")

    def loss_config(self) -> LossConfig:
        if self.objective == "pmrl-no-reg":
            return replace(self.loss, lambda1=0.0)
        if self.objective == "pmrl-no-im":
            return replace(self.loss, lambda2=0.0)
        return self.loss

    def optim_config(self) -> AdamWConfig:
        return replace(self.optim, total_steps=max(self.steps, 1))

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with both the model/training seed and the data seed set to ``seed``."""
        return replace(self, seed=seed, synthetic=replace(self.synthetic, seed=seed))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["synthetic"]["obs_dims"] = list(self.synthetic.obs_dims)
        return doc


_NESTED = {"synthetic": SyntheticConfig, "loss": LossConfig, "optim": AdamWConfig}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigInvalid(f"unknown field(s) in {where}: {', '.join(unknown)}")
    return cls(**doc)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigInvalid("config must be a JSON object")
    doc = dict(doc)
    try:
        for key, cls in _NESTED.items():
            if key in doc:
                doc[key] = _build(cls, doc[key], key)
        return _build(RunConfig, doc, "config")
    except ConfigInvalid:
        raise
    except (BadConfig, TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc)
