"""Objective, optimiser, schedule, early stopping and checkpoint files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffcore import Tensor
from .encoders import Batch, collate
from .errors import ConfigError, DataError, DivergenceError, ParseError
from .evalkit import accuracy, argmax_predictions, macro_f1
from .model import ModelConfig, ModelParams
from .seeding import derive_seed, make_rng
from .uapoe import kl_to_prior

CE_EPS = 1e-12


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_epochs: int = 15
    max_epochs: int = 100
    patience: int = 40
    batch_size: int = 32
    beta: float = 1e-3
    samples: int = 10
    seed: int = 0
    train_mc: bool = True
    modality_dropout: float = 0.0

    def validate(self) -> None:
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.max_epochs < 1 or not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < max_epochs, got {self.warmup_epochs}, {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.samples < 1:
            raise ConfigError("samples (L) must be at least 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0 <= self.modality_dropout < 1:
            raise ConfigError("modality_dropout must be in [0, 1)")


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    kl: float  # beta-weighted KL contribution, batch mean


def loss_terms(
    batch: Batch,
    params: ModelParams,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
    deterministic: bool | None = None,
) -> LossTerms:
    """Batch mean of cross-entropy on the MC-averaged prediction plus beta * KL."""
    if len(batch) == 0:
        raise DataError("loss over an empty batch")
    if not batch.mask.any(axis=1).all():
        raise DataError("every sample needs at least one observed modality")
    if deterministic is None:
        deterministic = params.config.deterministic_inference or not config.train_mc
    fwd = params.forward(batch, samples=config.samples, rng=rng, noise=noise, deterministic=deterministic)
    onehot = np.eye(params.config.num_classes, dtype=params.config.dtype)[batch.labels]
    ce = -((fwd.probs * onehot).sum(axis=-1) + CE_EPS).log()
    ce_mean = ce.mean()
    if config.beta == 0:
        return LossTerms(ce_mean, float(ce_mean.data), 0.0)
    kl = kl_to_prior(fwd.posterior) * config.beta
    total = (ce + kl).mean()
    return LossTerms(total, float(ce_mean.data), float(kl.data.mean()))


def loss(batch: Batch, params: ModelParams, config: TrainConfig, rng: np.random.Generator | None = None, **kw) -> Tensor:
    return loss_terms(batch, params, config, rng, **kw).total


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warm-up from 0, then half-cosine decay over the remaining epochs."""
    if not 0 <= epoch < config.max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.max_epochs})")
    if epoch < config.warmup_epochs:
        return config.lr * epoch / config.warmup_epochs
    t = (epoch - config.warmup_epochs) / (config.max_epochs - config.warmup_epochs)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * t))


class Adam:
    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ConfigError("a tensor is registered with the optimiser twice")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: float
    kl: float
    lr: float
    val_macro_f1: float
    val_acc: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _dropout_masks(mask: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    drop = rng.random(mask.shape) < rate
    new = mask & ~drop
    empty = ~new.any(axis=1)
    new[empty] = mask[empty]
    return new


def validation_scores(params: ModelParams, val: Batch, config: TrainConfig) -> tuple[float, float]:
    """Macro-F1 and accuracy on the validation set.

    The MC noise stream is the same every epoch, so unchanged parameters
    always score the same.
    """
    if len(val) == 0:
        return 0.0, 0.0
    rng = make_rng(config.seed, "val")
    probs = params.predict_proba(val, samples=config.samples, rng=rng)
    preds = argmax_predictions(probs)
    return macro_f1(val.labels, preds, params.config.num_classes), accuracy(val.labels, preds)


def train(
    train_set,
    val_set,
    model_config: ModelConfig,
    config: TrainConfig,
    *,
    params: ModelParams | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Adam training with early stopping on validation macro-F1.

    ``train_set``/``val_set`` are sample lists or pre-collated batches. The
    parameters with the best validation score are returned.
    """
    config.validate()
    dtype = model_config.dtype
    train_b = train_set if isinstance(train_set, Batch) else collate(train_set, model_config.dims, dtype)
    val_b = val_set if isinstance(val_set, Batch) else collate(val_set, model_config.dims, dtype)
    if len(train_b) == 0:
        raise DataError("training set is empty")
    if params is None:
        params = ModelParams.init(model_config, derive_seed(config.seed, "init"))
    tensors = params.tensors()
    opt = Adam(tensors)
    shuffle_rng = make_rng(config.seed, "shuffle")
    mc_rng = make_rng(config.seed, "mc")
    drop_rng = make_rng(config.seed, "dropout")

    history: list[EpochRecord] = []
    best_score = -math.inf
    best_state = params.state()
    best_epoch = 0
    stale = 0
    stopped_early = False
    n = len(train_b)
    for epoch in range(config.max_epochs):
        lr = lr_at(epoch, config)
        order = shuffle_rng.permutation(n)
        tot = ce_sum = kl_sum = 0.0
        batches = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            batch = train_b.subset(order[start : start + config.batch_size])
            if config.modality_dropout > 0:
                new_mask = _dropout_masks(batch.mask, config.modality_dropout, drop_rng)
                batch = Batch([np.where(new_mask[:, [m]], x, 0).astype(x.dtype) for m, x in enumerate(batch.xs)], new_mask, batch.labels)
            terms = loss_terms(batch, params, config, mc_rng)
            value = float(terms.total.data)
            if not np.isfinite(value):
                params.load_state(best_state)
                raise DivergenceError(
                    f"non-finite loss {value}", epoch=epoch, batch=bi, params=params, history=history
                )
            opt.zero_grad()
            terms.total.backward()
            opt.step(lr)
            tot += value
            ce_sum += terms.ce
            kl_sum += terms.kl
            batches += 1
        f1, acc = validation_scores(params, val_b, config)
        rec = EpochRecord(epoch, tot / batches, ce_sum / batches, kl_sum / batches, lr, f1, acc)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if f1 > best_score:
            best_score = f1
            best_state = params.state()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped_early = True
                break
    params.load_state(best_state)
    return TrainResult(params, history, best_epoch, stopped_early)


# history log

HISTORY_COLUMNS = ("epoch", "loss", "ce", "kl", "lr", "val_macro_f1", "val_acc")


def format_history(history: list[EpochRecord]) -> str:
    lines = ["\t".join(HISTORY_COLUMNS)]
    for r in history:
        lines.append(
            "\t".join(
                [str(r.epoch)] + [f"{getattr(r, c):.10g}" for c in HISTORY_COLUMNS[1:]]
            )
        )
    return "\n".join(lines) + "\n"


def parse_history(text: str) -> list[EpochRecord]:
    out = []
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines or tuple(lines[0].split("\t")) != HISTORY_COLUMNS:
        raise ParseError("history header missing or malformed", line=1)
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(HISTORY_COLUMNS):
            raise ParseError(f"expected {len(HISTORY_COLUMNS)} columns", line=lineno)
        try:
            out.append(EpochRecord(int(parts[0]), *(float(p) for p in parts[1:])))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return out


# checkpoint files
#
# layout: magic (8 bytes) | version u32 | header length u32 | header JSON |
# float32 little-endian payload, tensors concatenated in header order.

MAGIC = b"MISSFUSE"
CKPT_VERSION = 1


def checkpoint_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    named = params.named_tensors()
    header = {
        "version": CKPT_VERSION,
        "model": params.config.to_dict(),
        "tensors": [[name, list(t.shape)] for name, t in named],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in named)
    return MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob + payload


def write_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def read_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC or len(raw) < 16:
        raise ParseError(f"{path} is not a missfuse checkpoint", field="magic")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", field="version")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        model_cfg = ModelConfig(**{**header["model"], "dims": tuple(header["model"]["dims"])})
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", field="header") from None
    params = ModelParams.init(model_cfg, 0)
    expected = [[name, list(t.shape)] for name, t in params.named_tensors()]
    if header["tensors"] != expected:
        raise ParseError("checkpoint shape table does not match the model layout", field="tensors")
    offset = 16 + hlen
    state = {}
    for name, shape in expected:
        count = int(np.prod(shape)) if shape else 1
        chunk = raw[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise ParseError(f"payload truncated in tensor {name}", field=name)
        state[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise ParseError("trailing bytes after payload", field="payload")
    params.load_state(state)
    return params, header.get("meta", {})
