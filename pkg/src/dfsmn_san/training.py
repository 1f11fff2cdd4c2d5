"""Config files, the SGD training loop with elementwise gradient clipping, and evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import CtcError, corpus_cer, ctc_loss_batch, greedy_decode
from .datapipe import (
    SequenceBatch,
    SyntheticTaskSpec,
    apply_frontend,
    compute_cmvn,
    generate_corpus,
    load_batch,
)
from .model import ConfigError, Model, ModelConfig, _coerce
from .numerics import log_softmax_rows

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, detail: str):
        super().__init__(f"non-finite {detail} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 8
    clip_low: float = -1.0
    clip_high: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    deterministic: bool = True
    shuffle: bool = True
    # front end applied to raw features before the model
    stack: int = 1
    stride: int = 1
    cmvn: bool = True
    # when set, load <train_path>.feats/.labels instead of generating a corpus
    train_path: str = ""
    test_path: str = ""

    def validate(self) -> None:
        if not self.clip_low < self.clip_high:
            raise ConfigError("clip_low", f"clip_low {self.clip_low} must be < clip_high {self.clip_high}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("optimizer", f"must be one of {OPTIMIZERS}")
        if self.stack < 1 or self.stride < 1:
            raise ConfigError("stack", "stack and stride must be >= 1")
        self.model.validate()


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def _build(cls, values: dict[str, str], prefix: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(prefix + key, "unknown config key")
        kwargs[key] = _coerce(prefix + key, value, fields[key].type)
    return cls(**kwargs)


def config_from_dict(values: dict[str, str]) -> TrainConfig:
    groups: dict[str, dict[str, str]] = {"model": {}, "data": {}, "": {}}
    for key, value in values.items():
        head, dot, rest = key.partition(".")
        if dot and head in ("model", "data"):
            groups[head][rest] = value
        elif dot:
            raise ConfigError(key, "unknown config section")
        else:
            groups[""][key] = value
    for key in ("model", "data"):
        if key in groups[""]:
            raise ConfigError(key, "is a section; set its fields with dotted keys")
    try:
        model = ModelConfig.from_dict(groups["model"])
    except ConfigError as exc:
        raise ConfigError("model." + exc.key, str(exc).split(": ", 1)[-1]) from None
    data = _build(SyntheticTaskSpec, groups["data"], "data.")
    top = _build(TrainConfig, groups[""], "")
    cfg = dataclasses.replace(top, model=model, data=data)
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides or {})
    return config_from_dict(values)


# --- run log --------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    cer: float
    seconds: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must increase")
        self.records.append(record)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_text(self) -> str:
        return "".join(
            f"{r.epoch} {r.loss!r} {r.cer!r} {r.seconds:.3f}\n" for r in self.records
        )

    @classmethod
    def from_text(cls, text: str) -> "RunLog":
        out = cls()
        for line in text.splitlines():
            if line.strip():
                e, loss, c, s = line.split()
                out.append(EpochRecord(int(e), float(loss), float(c), float(s)))
        return out


# --- data -----------------------------------------------------------------------


def prepare_corpus(cfg: TrainConfig) -> tuple[SequenceBatch, SequenceBatch]:
    """Raw train/test sets, loaded from files or generated from ``cfg.data``."""
    if cfg.train_path:
        train = load_batch(cfg.train_path, cfg.model.output_labels)
        test = (
            load_batch(cfg.test_path, cfg.model.output_labels)
            if cfg.test_path
            else SequenceBatch([], [])
        )
        return train, test
    if cfg.data.alphabet_size != cfg.model.output_labels:
        raise ConfigError(
            "data.alphabet_size",
            f"{cfg.data.alphabet_size} != model.output_labels {cfg.model.output_labels}",
        )
    return generate_corpus(cfg.data)


def frontend(model: Model, batch: SequenceBatch) -> SequenceBatch:
    if not len(batch):
        return batch
    return apply_frontend(batch, model.stack, model.stride, model.cmvn)


# --- training -------------------------------------------------------------------


def _thread_limit(deterministic: bool):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def batch_loss_and_grad(model: Model, batch: SequenceBatch) -> tuple[np.ndarray, float]:
    """Mean CTC loss over ``batch``; parameter gradients are left in the model.

    Non-finite logits give a NaN loss and skip the backward pass.
    """
    x, mask = batch.padded()
    logits = model.forward_padded(x, mask)
    if not np.all(np.isfinite(logits)):
        nan = np.full(len(batch), np.nan)
        return nan, math.nan
    losses, dlogits = ctc_loss_batch(log_softmax_rows(logits), batch.lengths, batch.targets)
    model.backward(dlogits / len(batch))
    return losses, float(losses.mean())


def clip_gradient(grad: np.ndarray, low: float, high: float) -> np.ndarray:
    return np.clip(grad, low, high)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    cfg: TrainConfig,
    velocity: dict[str, np.ndarray] | None = None,
) -> None:
    """In-place update with each gradient element clipped to ``[clip_low, clip_high]`` first."""
    for name, grad in grads.items():
        g = clip_gradient(grad, cfg.clip_low, cfg.clip_high)
        if velocity:
            velocity[name] *= cfg.momentum
            velocity[name] += g
            g = velocity[name]
        params[name] -= cfg.learning_rate * g


def decode(model: Model, batch: SequenceBatch) -> list[list[int]]:
    model.train(False)
    return [greedy_decode(lp) for lp in model.log_probs(batch)]


def evaluate_cer(model: Model, batch: SequenceBatch, chunk: int = 64) -> float:
    """Corpus CER of greedy decoding on an already front-ended batch."""
    if not len(batch):
        raise ValueError("cannot evaluate an empty set")
    hyps: list[list[int]] = []
    for start in range(0, len(batch), chunk):
        hyps.extend(decode(model, batch.subset(range(start, min(start + chunk, len(batch))))))
    return corpus_cer([t.labels for t in batch.targets], hyps)


def train(
    cfg: TrainConfig,
    train_set: SequenceBatch | None = None,
    test_set: SequenceBatch | None = None,
    model: Model | None = None,
) -> tuple[Model, RunLog]:
    """Train with SGD on CTC loss, clipping each gradient element to ``[clip_low, clip_high]``.

    Without explicit sets the corpus comes from :func:`prepare_corpus`. The
    per-epoch CER is measured on the test set, or on the training set when
    there is no test set.
    """
    cfg.validate()
    if train_set is None:
        train_set, test_set = prepare_corpus(cfg)
    if model is None:
        model = Model(cfg.model, cfg.seed)
    model.stack, model.stride = cfg.stack, cfg.stride
    stacked = apply_frontend(train_set, cfg.stack, cfg.stride)
    model.cmvn = compute_cmvn(stacked) if cfg.cmvn else None
    train_set = frontend(model, train_set)
    eval_set = frontend(model, test_set) if test_set is not None and len(test_set) else train_set
    for i, (f, t) in enumerate(zip(train_set.features, train_set.targets)):
        if f.shape[0] < t.min_frames():
            raise CtcError(f"training sequence {i}: {f.shape[0]} frames after the front end "
                           f"cannot emit {len(t)} labels")

    rng = np.random.default_rng([cfg.seed, 3])
    params = dict(model.named_parameters())
    velocity = {k: np.zeros_like(v) for k, v in params.items()} if cfg.optimizer == "momentum" else {}
    runlog = RunLog()
    n = len(train_set)
    with _thread_limit(cfg.deterministic):
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(n) if cfg.shuffle else np.arange(n)
            total = 0.0
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                batch = train_set.subset(order[start : start + cfg.batch_size])
                model.train(True)
                losses, mean_loss = batch_loss_and_grad(model, batch)
                if not math.isfinite(mean_loss):
                    raise TrainingDiverged(epoch, bi, "loss")
                total += float(losses.sum())
                grads = dict(model.named_gradients())
                for name, grad in grads.items():
                    if not np.all(np.isfinite(grad)):
                        raise TrainingDiverged(epoch, bi, f"gradient in {name}")
                sgd_step(params, grads, cfg, velocity)
            model.train(False)
            cer = evaluate_cer(model, eval_set)
            seconds = 0.0 if cfg.deterministic else time.perf_counter() - started
            runlog.append(EpochRecord(epoch, total / n, cer, seconds))
            log.info(
                "epoch %d loss %.4f cer %.4f (%.1fs)",
                epoch, total / n, cer, time.perf_counter() - started,
            )
    return model, runlog
