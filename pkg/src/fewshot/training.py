"""Episodic training, evaluation and checkpointing."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError, Tape
from .embeddings import FceConfig
from .episodes import EpisodeSampler, EpisodeSpec, TaskSet, VocabSplit, sample_pairs
from .models import SIAMESE, FewShotModel, ModelConfig, build_model

log = logging.getLogger(__name__)

EMA_DECAY = 0.99


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    steps: int = 30000
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_every: int = 500
    eval_episodes: int = 200
    seed: int = 0
    clip_norm: float = 5.0
    pair_batch: int = 20

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ValueError("eval_every and eval_episodes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["model"]["relation_hidden"] = list(self.model.relation_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        m = dict(d.pop("model"))
        m["fce"] = FceConfig(**m["fce"])
        m["relation_hidden"] = tuple(m["relation_hidden"])
        d["betas"] = tuple(d["betas"])
        return cls(model=ModelConfig(**m), spec=EpisodeSpec(**d.pop("spec")), **d)


@dataclass
class TaskData:
    tasks: TaskSet
    split: VocabSplit


# ---------------------------------------------------------------- optimizers

class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if p.trainable:
                p.value -= self.lr * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, t: int, arrays: dict[str, np.ndarray]):
        self.t = t


class Adam:
    name = "adam"

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if not p.trainable:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]):
        self.t = t
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr)
    return Adam(cfg.lr, *cfg.betas, cfg.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is <= max_norm; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    config: TrainConfig
    model: FewShotModel
    optimizer: SGD | Adam
    sampler_rng: np.random.Generator
    step: int = 0
    loss_ema: float | None = None
    best_val_accuracy: float | None = None
    best_step: int = 0

    @classmethod
    def initial(cls, config: TrainConfig, vocab_size: int) -> "TrainState":
        model = build_model(config.model, vocab_size, seed=config.seed)
        return cls(config, model, make_optimizer(config),
                   np.random.default_rng([config.seed, 1]))


def param_digest(model: FewShotModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].value).tobytes())
    return h.hexdigest()


def train_step(state: TrainState, batch) -> float:
    """Forward, backward, clip, update. Returns the (pre-update) loss."""
    tape = Tape()
    try:
        loss = state.model.loss(batch, tape)
    except NonFiniteError as exc:
        raise TrainingDivergedError(
            f"non-finite value at step {state.step} (episode seed {getattr(batch, 'seed', None)}): {exc}"
        ) from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss at step {state.step}")
    grads = tape.backward(loss).by_name()
    clip_global_norm(grads, state.config.clip_norm)
    state.optimizer.step(state.model.params, grads)
    state.step += 1
    state.loss_ema = value if state.loss_ema is None else EMA_DECAY * state.loss_ema + (1 - EMA_DECAY) * value
    return value


def next_batch(state: TrainState, data: TaskData):
    cfg = state.config
    if cfg.model.kind == SIAMESE:
        return sample_pairs(data.tasks, data.split.train, state.sampler_rng, cfg.pair_batch)
    sampler = EpisodeSampler(data.tasks, data.split.train, cfg.spec, seed=0)
    sampler.rng = state.sampler_rng
    return sampler.sample()


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    episodes: int
    accuracy: float
    stderr: float
    per_episode: list[float]
    n_way: int
    k_shot: int
    metric: str
    model: str
    role: str = "test"

    def to_json(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return f"{100 * self.accuracy:.1f} ± {100 * self.stderr:.1f}%"


def standard_error(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))


def episode_accuracy(model: FewShotModel, episode) -> float:
    return float(np.mean(model.predict(episode) == episode.query_labels))


def evaluate(model: FewShotModel, data: TaskData, role: str, n_episodes: int,
             spec: EpisodeSpec, seed: int = 0,
             predictor: Callable | None = None) -> EvalReport:
    """Accuracy over ``n_episodes`` fresh episodes drawn from ``role``'s words.

    ``predictor`` (episode -> class indices) overrides the model, e.g. for
    chance-level controls. Parameters are never touched.
    """
    if role not in ("validation", "test", "train"):
        raise ValueError(f"unknown role {role!r}")
    sampler = EpisodeSampler(data.tasks, data.split.role(role), spec, seed)
    predict = predictor or model.predict
    accs = []
    for _ in range(n_episodes):
        ep = sampler.sample()
        accs.append(float(np.mean(predict(ep) == ep.query_labels)))
    return EvalReport(n_episodes, float(np.mean(accs)), standard_error(accs), accs,
                      spec.n_way, spec.k_shot, model.config.metric, model.kind, role)


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    state: TrainState
    best: TrainState
    losses: list[float]
    log: list[dict]


def _snapshot(state: TrainState) -> TrainState:
    return copy.deepcopy(state)


def fit(config: TrainConfig, data: TaskData, out_dir=None, resume: TrainState | None = None,
        resume_best: TrainState | None = None, stop_after: int | None = None) -> FitResult:
    """Episodic training loop with periodic validation and best-checkpoint tracking.

    ``stop_after`` ends the call after that many steps (simulates an
    interruption); pass the returned state (and best) back via ``resume`` /
    ``resume_best`` to continue. Best-validation ties keep the earliest step.
    """
    state = resume if resume is not None else TrainState.initial(config, len(data.tasks.vocab))
    best = resume_best if resume_best is not None else _snapshot(state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    losses, records = [], []
    val_seed = config.seed + 1
    t0 = time.perf_counter()
    done = 0
    while state.step < config.steps and (stop_after is None or done < stop_after):
        losses.append(train_step(state, next_batch(state, data)))
        done += 1
        if state.step % config.eval_every == 0:
            rep = evaluate(state.model, data, "validation", config.eval_episodes, config.spec, val_seed)
            rec = {"step": state.step, "loss": state.loss_ema, "val_accuracy": rep.accuracy,
                   "wall_seconds": round(time.perf_counter() - t0, 3)}
            records.append(rec)
            log.info(json.dumps(rec))
            if state.best_val_accuracy is None or rep.accuracy > state.best_val_accuracy:
                state.best_val_accuracy = rep.accuracy
                state.best_step = state.step
                best = _snapshot(state)
            if out is not None:
                with (out / "train_log.jsonl").open("a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                save_checkpoint(best, out / "best.ckpt")
                save_checkpoint(state, out / "last.ckpt")
    if out is not None:
        save_checkpoint(state, out / "last.ckpt")
        save_checkpoint(best, out / "best.ckpt")
    return FitResult(state, best, losses, records)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FSHOTCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI32sQ")


def _write_blob(buf: io.BytesIO, data: bytes):
    buf.write(struct.pack("<Q", len(data)))
    buf.write(data)


def _read_blob(buf: io.BytesIO) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(buf, 8))
    return _read_exact(buf, n)


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointIntegrityError("checkpoint payload truncated")
    return data


def _write_arrays(buf: io.BytesIO, arrays: dict[str, np.ndarray]):
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        _write_blob(buf, name.encode("utf-8"))
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        _write_blob(buf, a.tobytes())


def _read_arrays(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        name = _read_blob(buf).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim))
        out[name] = np.frombuffer(_read_blob(buf), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(state: TrainState) -> bytes:
    meta = {"step": state.step, "loss_ema": state.loss_ema,
            "best_val_accuracy": state.best_val_accuracy, "best_step": state.best_step,
            "vocab_size": state.model.vocab_size, "model_kind": state.model.kind}
    opt = {"name": state.optimizer.name, "t": state.optimizer.t}
    buf = io.BytesIO()
    _write_blob(buf, _json_bytes(state.config.to_dict()))
    _write_blob(buf, _json_bytes(meta))
    _write_arrays(buf, {n: p.value for n, p in state.model.params.items()})
    _write_blob(buf, _json_bytes(opt))
    _write_arrays(buf, state.optimizer.state_arrays())
    _write_blob(buf, _json_bytes(state.sampler_rng.bit_generator.state))
    payload = buf.getvalue()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, hashlib.sha256(payload).digest(), len(payload)) + payload


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)


def checkpoint_from_bytes(blob: bytes, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState. ``config`` (optional) must agree with the stored shapes."""
    if len(blob) < _HEADER.size:
        raise CheckpointIntegrityError("file too short to be a checkpoint")
    magic, version, digest, length = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIntegrityError("bad magic bytes; not a checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    payload = blob[_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError("checksum mismatch; checkpoint is corrupt")
    buf = io.BytesIO(payload)
    stored_cfg = TrainConfig.from_dict(json.loads(_read_blob(buf)))
    meta = json.loads(_read_blob(buf))
    params = _read_arrays(buf)
    opt = json.loads(_read_blob(buf))
    opt_arrays = _read_arrays(buf)
    rng_state = json.loads(_read_blob(buf))

    cfg = config or stored_cfg
    model = build_model(cfg.model, meta["vocab_size"], seed=cfg.seed)
    expected = {n: p.shape for n, p in model.params.items()}
    stored = {n: a.shape for n, a in params.items()}
    if expected != stored:
        missing = sorted(set(expected) ^ set(stored))
        bad = sorted(n for n in set(expected) & set(stored) if expected[n] != stored[n])
        raise CheckpointMismatchError(
            f"checkpoint parameters do not match the model config "
            f"(name differences: {missing[:6]}, shape differences: "
            f"{[(n, stored[n], expected[n]) for n in bad[:6]]})")
    for n, a in params.items():
        model.params[n].value = a
    optimizer = make_optimizer(stored_cfg if config is None else cfg)
    if optimizer.name != opt["name"]:
        optimizer = SGD(cfg.lr) if opt["name"] == "sgd" else Adam(cfg.lr, *cfg.betas, cfg.eps)
    optimizer.load_state(opt["t"], opt_arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return TrainState(cfg, model, optimizer, rng, meta["step"], meta["loss_ema"],
                      meta["best_val_accuracy"], meta["best_step"])


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    return checkpoint_from_bytes(Path(path).read_bytes(), config)
