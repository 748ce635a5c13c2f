"""Desk-scale FedAvg with a small numpy classifier.

The reference model is a one-hidden-layer network (or plain multinomial
logistic regression when ``hidden=0``) on 8x8 block-averaged RGB inputs,
trained with softmax cross-entropy and Adam.
"""

from __future__ import annotations

import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import seeding
from .errors import FedAlignError, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "Layout",
    "ModelParams",
    "TrainConfig",
    "RoundRecord",
    "make_layout",
    "image_features",
    "init_model",
    "loss_and_grad",
    "predict",
    "accuracy",
    "local_train",
    "fedavg_aggregate",
    "run_federated_training",
    "rounds_to_accuracy",
]

FEATURE_SIDE = 8
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Layout:
    """Ordered ``(name, shape)`` segments of the flat parameter vector."""

    segments: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.segments))

    def split(self, values: np.ndarray) -> dict:
        out, offset = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def to_text(self) -> str:
        return ";".join(f"{name}:{'x'.join(map(str, shape))}" for name, shape in self.segments)

    @classmethod
    def from_text(cls, text: str) -> "Layout":
        segments = []
        for part in text.strip().split(";"):
            name, dims = part.split(":")
            segments.append((name, tuple(int(d) for d in dims.split("x"))))
        return cls(tuple(segments))

    @property
    def hidden(self) -> int:
        names = [name for name, _ in self.segments]
        return self.segments[0][1][1] if "W2" in names else 0


def make_layout(n_inputs: int, n_classes: int, hidden: int = 64) -> Layout:
    if hidden > 0:
        return Layout((
            ("W1", (n_inputs, hidden)),
            ("b1", (hidden,)),
            ("W2", (hidden, n_classes)),
            ("b2", (n_classes,)),
        ))
    return Layout((("W1", (n_inputs, n_classes)), ("b1", (n_classes,))))


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(values) != self.layout.size:
            raise ValidationError(
                f"{len(values)} values do not fit layout of size {self.layout.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("model parameters must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def to_bytes(self) -> bytes:
        """Checkpoint: one text header line with the layout, then float64 LE."""
        header = f"fedalign-params {self.layout.to_text()}\n".encode()
        return header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        header, _, body = blob.partition(b"\n")
        tag, _, layout_text = header.decode().partition(" ")
        if tag != "fedalign-params":
            raise ValidationError("not a fedalign parameter checkpoint")
        return cls(np.frombuffer(body, dtype="<f8"), Layout.from_text(layout_text))


@dataclass(frozen=True)
class TrainConfig:
    n_agents: int = 5
    participants_per_round: Optional[int] = None
    local_epochs: Optional[int] = None
    rounds: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    hidden: int = 64
    workers: int = 1

    def __post_init__(self):
        P = self.participants
        if not 1 <= P <= self.n_agents:
            raise ValidationError(f"need 1 <= P <= N, got P={P}, N={self.n_agents}")
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ValidationError("batch_size must be >= 1 and learning_rate > 0")
        if self.local_epochs is not None and self.local_epochs < 0:
            raise ValidationError("local_epochs must be >= 0")

    @property
    def participants(self) -> int:
        return self.n_agents if self.participants_per_round is None else self.participants_per_round

    @property
    def epochs(self) -> int:
        """Two local epochs with full participation, five with partial."""
        if self.local_epochs is not None:
            return self.local_epochs
        return 2 if self.participants == self.n_agents else 5


def image_features(images: np.ndarray) -> np.ndarray:
    """Block-average to 8x8 per channel and scale to [0, 1]."""
    images = np.asarray(images)
    m, h, w, _ = images.shape
    if h % FEATURE_SIDE or w % FEATURE_SIDE:
        raise ValidationError(f"image side must be a multiple of {FEATURE_SIDE}, got {h}x{w}")
    bh, bw = h // FEATURE_SIDE, w // FEATURE_SIDE
    x = images.reshape(m, FEATURE_SIDE, bh, FEATURE_SIDE, bw, 3).mean(axis=(2, 4))
    return x.reshape(m, FEATURE_SIDE * FEATURE_SIDE * 3) / 255.0


def init_model(layout: Layout, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases; identical for every agent."""
    rng = seeding.rng(seed, seeding.MODEL_INIT)
    parts = []
    for name, shape in layout.segments:
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-limit, limit, size=shape).reshape(-1))
        else:
            parts.append(np.zeros(shape))
    return ModelParams(np.concatenate(parts), layout)


def _forward(p: dict, X: np.ndarray, hidden: bool):
    if hidden:
        z1 = X @ p["W1"] + p["b1"]
        h = np.maximum(z1, 0.0)
        logits = h @ p["W2"] + p["b2"]
        return logits, (z1, h)
    return X @ p["W1"] + p["b1"], None


def loss_and_grad(values: np.ndarray, layout: Layout, X: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the flat vector."""
    hidden = layout.hidden > 0
    p = layout.split(np.asarray(values, dtype=np.float64))
    logits, cache = _forward(p, X, hidden)
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    grads = {}
    if hidden:
        z1, h = cache
        grads["W2"] = h.T @ d
        grads["b2"] = d.sum(axis=0)
        dh = (d @ p["W2"].T) * (z1 > 0)
        grads["W1"] = X.T @ dh
        grads["b1"] = dh.sum(axis=0)
    else:
        grads["W1"] = X.T @ d
        grads["b1"] = d.sum(axis=0)
    flat = np.concatenate([grads[name].reshape(-1) for name, _ in layout.segments])
    return float(loss), flat


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    logits, _ = _forward(params.layout.split(params.values), X, params.layout.hidden > 0)
    return logits.argmax(axis=1)


def accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float((predict(params, X) == np.asarray(y)).mean())


class TrainingError(FedAlignError, RuntimeError):
    pass


def local_train(
    params: ModelParams,
    shard,
    cfg: TrainConfig,
    round_index: int = 0,
    features: Optional[np.ndarray] = None,
) -> Tuple[ModelParams, float]:
    """Run ``cfg.epochs`` epochs of mini-batch Adam on one shard.

    Adam moments start from zero on every call. Batch order comes from the
    ``(seed, round, epoch)`` stream, so it does not depend on which agent
    trains. Returns the new parameters and the mean batch loss of the last
    epoch (NaN when no epoch ran).
    """
    y = np.asarray(shard.labels)
    if len(y) == 0:
        raise ValidationError("cannot train on an empty shard")
    X = image_features(shard.images) if features is None else features
    w = params.values.copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    step = 0
    last = float("nan")
    for epoch in range(cfg.epochs):
        order = seeding.rng(cfg.seed, seeding.LOCAL_SHUFFLE, round_index, epoch).permutation(len(y))
        losses = []
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = loss_and_grad(w, params.layout, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at round {round_index}, epoch {epoch}, step {step}"
                )
            step += 1
            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
            mhat = m / (1 - ADAM_BETA1**step)
            vhat = v / (1 - ADAM_BETA2**step)
            w = w - cfg.learning_rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
            losses.append(loss)
        last = float(np.mean(losses))
    return ModelParams(w, params.layout), last


def fedavg_aggregate(updates: Sequence[Tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count weighted mean of parameter vectors.

    Updates are summed in a canonical order (by count, then by bytes) so
    the result does not depend on the order of ``updates``.
    """
    if len(updates) == 0:
        raise ValidationError("nothing to aggregate")
    layout = updates[0][0].layout
    for params, count in updates:
        if params.layout != layout:
            raise ValidationError("parameter layouts differ between updates")
        if count < 1:
            raise ValidationError("sample counts must be >= 1")
    if len(updates) == 1:
        return updates[0][0]
    ordered = sorted(updates, key=lambda u: (u[1], u[0].values.tobytes()))
    total = float(sum(c for _, c in ordered))
    acc = np.zeros(layout.size)
    for params, count in ordered:
        acc += (count / total) * params.values
    # a convex combination must stay inside the coordinate-wise hull
    stack = np.stack([p.values for p, _ in ordered])
    acc = np.clip(acc, stack.min(axis=0), stack.max(axis=0))
    return ModelParams(acc, layout)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_accuracy: float
    mean_local_loss: float
    seconds: float = 0.0


HISTORY_HEADER = ("round", "test_accuracy", "mean_local_loss", "seconds")


def history_to_csv(history: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(HISTORY_HEADER) + "\n")
    for r in history:
        buf.write(f"{r.round},{float(r.test_accuracy)!r},{float(r.mean_local_loss)!r},{float(r.seconds)!r}\n")
    return buf.getvalue()


def history_from_csv(text: str) -> List[RoundRecord]:
    lines = text.strip().splitlines()
    if not lines or tuple(lines[0].split(",")) != HISTORY_HEADER:
        raise ValidationError(f"history CSV must start with header {','.join(HISTORY_HEADER)}")
    out = []
    for line in lines[1:]:
        r, acc, loss, sec = line.split(",")
        out.append(RoundRecord(int(r), float(acc), float(loss), float(sec)))
    return out


def sample_participants(cfg: TrainConfig, round_index: int) -> np.ndarray:
    if cfg.participants == cfg.n_agents:
        return np.arange(cfg.n_agents)
    rng = seeding.rng(cfg.seed, seeding.ROUND_SAMPLING, round_index)
    return np.sort(rng.choice(cfg.n_agents, size=cfg.participants, replace=False))


def run_federated_training(
    agents: Sequence,
    cfg: TrainConfig,
    use_aligned: bool,
    test,
    init: Optional[ModelParams] = None,
):
    """FedAvg over ``agents``; returns ``(history, final_params)``.

    ``test`` is the held-out set to evaluate on. When training on aligned
    data it must already be projected onto the same global triplet (see
    :func:`fedalign.align.project_held_out`); :func:`fedalign.experiment.federated_experiment`
    does this for you.
    """
    agents = sorted(agents, key=lambda ag: ag.agent_id)
    if len(agents) != cfg.n_agents:
        raise ValidationError(f"config expects {cfg.n_agents} agents, got {len(agents)}")
    shards = [ag.aligned_dataset if use_aligned else ag.dataset for ag in agents]
    if any(s is None for s in shards):
        raise ValidationError("aligned training requested but some agents are not aligned")
    feats = [image_features(s.images) for s in shards]
    X_test = image_features(test.images)
    y_test = np.asarray(test.labels)
    n_classes = int(max(max(s.labels.max() for s in shards), y_test.max() if len(y_test) else 0)) + 1
    params = init or init_model(make_layout(X_test.shape[1], n_classes, cfg.hidden), cfg.seed)

    history = []
    for rnd in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        chosen = sample_participants(cfg, rnd)

        def train_one(a, params=params, rnd=rnd):
            try:
                return local_train(params, shards[a], cfg, rnd, features=feats[a])
            except TrainingError as err:
                raise TrainingError(f"agent {agents[a].agent_id}: {err}") from None

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(train_one, chosen))
        else:
            results = [train_one(a) for a in chosen]
        params = fedavg_aggregate([(p, len(shards[a])) for (p, _), a in zip(results, chosen)])
        history.append(RoundRecord(
            rnd,
            accuracy(params, X_test, y_test),
            float(np.mean([loss for _, loss in results])),
            time.perf_counter() - t0,
        ))
        logger.debug("round %d: acc %.4f", rnd, history[-1].test_accuracy)
    return history, params


def rounds_to_accuracy(history: Sequence[RoundRecord], target: float) -> float:
    """First round reaching ``target`` test accuracy (inf if never)."""
    for r in history:
        if r.test_accuracy >= target:
            return r.round
    return float("inf")
