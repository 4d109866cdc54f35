"""Toy encoders, the matching head, manual backprop and an AdamW optimiser."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, DimensionMismatch, NonFinite, ShapeMismatch, StaleCache

CHECKPOINT_MAGIC = "PMRL1"


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


class MlpEncoder:
    """Affine layers with tanh between them; the last layer is linear.

    ``forward`` returns the pre-normalisation output. ``backward`` takes the
    gradient with respect to the *normalised* output and applies the
    normalisation Jacobian itself.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise DimensionMismatch("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise DimensionMismatch(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionMismatch(f"layer {i} input width {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> "MlpEncoder":
        w0, b0 = _uniform_layer(rng, in_dim, hidden)
        w1, b1 = _uniform_layer(rng, hidden, out_dim)
        return cls([w0, w1], [b0, b1])

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = params[f"W{i}"]
            self.biases[i] = params[f"b{i}"]


def encoder_forward(enc: MlpEncoder, x) -> tuple[np.ndarray, dict]:
    """Run ``x`` (one vector or a batch of rows) through the encoder."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != enc.in_dim:
        raise DimensionMismatch(f"encoder expects input width {enc.in_dim}, got {h.shape[-1]}")
    acts = [h]
    n_layers = len(enc.weights)
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        h = h @ w.T + b
        if i < n_layers - 1:
            h = np.tanh(h)
        acts.append(h)
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    cache = {"acts": acts, "norm": norm, "shapes": [w.shape for w in enc.weights]}
    return h, cache


def normalized_output(cache: dict) -> np.ndarray:
    return cache["acts"][-1] / cache["norm"]


def encoder_backward(enc: MlpEncoder, cache: dict, grad_z) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the parameters and of the input given ``dL/d(normalised output)``."""
    if cache["shapes"] != [w.shape for w in enc.weights]:
        raise StaleCache("cache was produced by an encoder of a different shape")
    acts = cache["acts"]
    g = np.asarray(grad_z, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise StaleCache(f"gradient shape {g.shape} does not match cached output {acts[-1].shape}")
    zhat = acts[-1] / cache["norm"]
    # d(p/|p|)/dp = (I - zz^T)/|p|
    g = (g - zhat * np.sum(zhat * g, axis=-1, keepdims=True)) / cache["norm"]
    grads: dict[str, np.ndarray] = {}
    n_layers = len(enc.weights)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        inp = acts[i]
        if g.ndim == 1:
            grads[f"W{i}"] = np.outer(g, inp)
            grads[f"b{i}"] = g.copy()
        else:
            grads[f"W{i}"] = g.T @ inp
            grads[f"b{i}"] = g.sum(axis=0)
        g = g @ enc.weights[i]
    return grads, g


class MatchingHead:
    """Two-layer tanh MLP from a concatenated modality tuple to a match logit."""

    def __init__(self, w0: np.ndarray, b0: np.ndarray, w1: np.ndarray, b1: np.ndarray):
        self.w0 = np.asarray(w0, dtype=np.float64)
        self.b0 = np.asarray(b0, dtype=np.float64)
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        if self.w0.shape[0] != self.b0.shape[0] or self.w1.shape != (1, self.w0.shape[0]) or self.b1.shape != (1,):
            raise DimensionMismatch("matching head layer shapes do not chain")

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int) -> "MatchingHead":
        w0, b0 = _uniform_layer(rng, in_dim, hidden)
        w1, b1 = _uniform_layer(rng, hidden, 1)
        return cls(w0, b0, w1, b1)

    @property
    def in_dim(self) -> int:
        return self.w0.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"W0": self.w0, "b0": self.b0, "W1": self.w1, "b1": self.b1}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.w0, self.b0, self.w1, self.b1 = params["W0"], params["b0"], params["W1"], params["b1"]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"head expects width {self.in_dim}, got {x.shape[-1]}")
        h = np.tanh(x @ self.w0.T + self.b0)
        logits = (h @ self.w1.T + self.b1)[:, 0]
        return logits, {"x": x, "h": h}

    def backward(self, cache: dict, grad_logits: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        x, h = cache["x"], cache["h"]
        go = grad_logits[:, None]
        grads = {"W1": go.T @ h, "b1": go.sum(axis=0)}
        gh = (go @ self.w1) * (1.0 - h * h)
        grads["W0"] = gh.T @ x
        grads["b0"] = gh.sum(axis=0)
        return grads, gh @ self.w0


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 2.0
    warmup_frac: float = 0.1
    total_steps: int = 2000
    schedule: str = "linear"


@dataclass
class AdamWState:
    config: AdamWConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: AdamWConfig, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            config,
            0,
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def learning_rate(config: AdamWConfig, step: int) -> float:
    """Linear warmup from 0 at step 0 to ``lr`` at the end of warmup, then linear decay to 0 (or constant)."""
    warmup = int(round(config.warmup_frac * config.total_steps))
    if warmup > 0 and step < warmup:
        return config.lr * step / warmup
    if config.schedule == "constant":
        return config.lr
    remaining = config.total_steps - warmup
    if remaining <= 0:
        return config.lr
    return config.lr * max(0.0, (config.total_steps - step) / remaining)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def adamw_step(state: AdamWState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One AdamW update with global-norm clipping; returns ``(new_params, state)``.

    ``params`` is not modified. Parameters without a gradient entry are
    only decayed.
    """
    cfg = state.config
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeMismatch(f"gradient {name!r} does not match any parameter shape")
        if name not in state.m or state.m[name].shape != g.shape:
            raise ShapeMismatch(f"optimiser state has no moments for {name!r}")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFinite("non-finite gradient norm")
    scale = cfg.clip_norm / norm if cfg.clip_norm > 0 and norm > cfg.clip_norm else 1.0
    lr = learning_rate(cfg, state.step)
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params = {}
    for name, p in params.items():
        p = p * (1.0 - lr * cfg.weight_decay)
        if name in grads:
            g = grads[name] * scale
            m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
            state.m[name], state.v[name] = m, v
            p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_params[name] = p
    state.step = t
    return new_params, state


class PmrlModel:
    """One encoder per modality plus the matching head, with flat named parameters."""

    def __init__(self, encoders: list[MlpEncoder], head: MatchingHead):
        self.encoders = encoders
        self.head = head

    @classmethod
    def init(
        cls,
        seed: int,
        obs_dims: list[int],
        hidden: int,
        embed_dim: int,
        head_hidden: int,
        shared_offset: float = 0.0,
    ) -> "PmrlModel":
        """Seeded fan-in uniform init.

        ``shared_offset`` adds one common random vector of that norm to every
        encoder's output bias, which makes the modalities of an instance start
        with positive cosines.
        """
        rng = np.random.default_rng([seed, 0xE1C])
        encoders = [MlpEncoder.init(rng, n, hidden, embed_dim) for n in obs_dims]
        head = MatchingHead.init(rng, len(obs_dims) * embed_dim, head_hidden)
        if shared_offset:
            direction = rng.normal(size=embed_dim)
            direction *= shared_offset / np.linalg.norm(direction)
            for enc in encoders:
                enc.biases[-1] = enc.biases[-1] + direction
        return cls(encoders, head)

    @property
    def k(self) -> int:
        return len(self.encoders)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for m, enc in enumerate(self.encoders):
            out.update({f"enc{m}.{n}": p for n, p in enc.params().items()})
        out.update({f"head.{n}": p for n, p in self.head.params().items()})
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for m, enc in enumerate(self.encoders):
            prefix = f"enc{m}."
            enc.set_params({n[len(prefix):]: p for n, p in params.items() if n.startswith(prefix)})
        self.head.set_params({n[5:]: p for n, p in params.items() if n.startswith("head.")})

    def encode(self, xs: list[np.ndarray]) -> tuple[np.ndarray, list[dict]]:
        """Encode per-modality input rows into a batch of unit-column matrices ``(N, d, k)``."""
        caches = []
        cols = []
        for enc, x in zip(self.encoders, xs):
            _, cache = encoder_forward(enc, x)
            caches.append(cache)
            cols.append(normalized_output(cache))
        return np.stack(cols, axis=-1), caches

    def backward(self, caches: list[dict], grad_z: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        for m, (enc, cache) in enumerate(zip(self.encoders, caches)):
            g, _ = encoder_backward(enc, cache, grad_z[..., m])
            grads.update({f"enc{m}.{n}": v for n, v in g.items()})
        return grads


def save_checkpoint(path, params: dict[str, np.ndarray], seed: int) -> None:
    """Write the magic line followed by a JSON document of shaped parameter arrays."""
    doc = {
        "format": CHECKPOINT_MAGIC,
        "seed": int(seed),
        "params": {
            name: {"shape": list(p.shape), "data": [float(x) for x in np.ravel(p)]}
            for name, p in sorted(params.items())
        },
    }
    Path(path).write_text(CHECKPOINT_MAGIC + "\n" + json.dumps(doc, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    text = Path(path).read_text()
    magic, _, body = text.partition("\n")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"expected magic {CHECKPOINT_MAGIC!r}, got {magic[:16]!r}")
    doc = json.loads(body)
    params = {}
    for name, rec in doc["params"].items():
        arr = np.asarray(rec["data"], dtype=np.float64)
        if arr.size != math.prod(rec["shape"]):
            raise CheckpointFormatError(f"parameter {name!r}: data length does not match shape")
        params[name] = arr.reshape(rec["shape"])
    return params, int(doc["seed"])
