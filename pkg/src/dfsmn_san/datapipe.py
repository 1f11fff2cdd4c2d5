"""Synthetic corpora, frame stacking/subsampling, global CMVN and feature/label files."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ctc import CtcTarget

FEATURE_MAGIC = "DFSMN-FEATS 1"
VARIANCE_FLOOR = 1e-8


class DataError(ValueError):
    pass


class FeatureFileError(DataError):
    """Malformed feature or label file; ``field`` names the part that failed to parse."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class SequenceBatch:
    features: list[np.ndarray]
    targets: list[CtcTarget] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.targets and len(self.targets) != len(self.features):
            raise DataError("features and targets differ in count")
        dims = {f.shape[1] for f in self.features}
        if len(dims) > 1:
            raise DataError(f"feature dims differ across the batch: {sorted(dims)}")

    @property
    def lengths(self) -> list[int]:
        return [f.shape[0] for f in self.features]

    @property
    def feat_dim(self) -> int:
        return self.features[0].shape[1]

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, indices: Sequence[int]) -> "SequenceBatch":
        return SequenceBatch(
            [self.features[i] for i in indices],
            [self.targets[i] for i in indices] if self.targets else [],
        )

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Zero-padded ``(B, T_max, feat_dim)`` array and the ``(B, T_max)`` frame mask."""
        if not self.features:
            raise DataError("empty batch")
        lengths = self.lengths
        out = np.zeros((len(self), max(lengths), self.feat_dim))
        mask = np.zeros((len(self), max(lengths)), dtype=bool)
        for i, f in enumerate(self.features):
            out[i, : len(f)] = f
            mask[i, : len(f)] = True
        return out, mask


# --- front end ----------------------------------------------------------------


def stack_and_subsample(x: np.ndarray, stack: int, stride: int) -> np.ndarray:
    """Concatenate ``stack`` consecutive frames starting every ``stride`` frames.

    Windows running past the end replicate the last frame. Output has
    ``ceil(T / stride)`` rows of width ``stack * f``.
    """
    x = np.asarray(x, dtype=float)
    if stack < 1 or stride < 1:
        raise DataError(f"stack and stride must be >= 1, got {stack}, {stride}")
    T = x.shape[0]
    if T == 0:
        raise DataError("cannot stack an empty sequence")
    starts = np.arange(0, T, stride)
    idx = np.minimum(starts[:, None] + np.arange(stack)[None, :], T - 1)
    return x[idx].reshape(len(starts), stack * x.shape[1])


@dataclass(frozen=True)
class CmvnStats:
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int
    floored_dims: tuple[int, ...] = ()


def compute_cmvn(corpus: Iterable[np.ndarray] | SequenceBatch) -> CmvnStats:
    """Global per-dimension mean and population variance over every frame in ``corpus``."""
    mats = corpus.features if isinstance(corpus, SequenceBatch) else list(corpus)
    if not mats:
        raise DataError("cannot compute CMVN over an empty corpus")
    frames = np.concatenate([np.asarray(m, dtype=float) for m in mats], axis=0)
    if frames.shape[0] == 0:
        raise DataError("cannot compute CMVN over zero frames")
    mean = frames.mean(axis=0)
    var = frames.var(axis=0)
    floored = tuple(int(i) for i in np.flatnonzero(var < VARIANCE_FLOOR))
    if floored:
        warnings.warn(f"CMVN variance floored at {VARIANCE_FLOOR} for dims {list(floored)}")
        var = np.maximum(var, VARIANCE_FLOOR)
    return CmvnStats(mean, var, frames.shape[0], floored)


def apply_cmvn(x: np.ndarray, stats: CmvnStats) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != stats.mean.size:
        raise DataError(f"CMVN stats cover {stats.mean.size} dims, features have {x.shape[-1]}")
    return (x - stats.mean) / np.sqrt(stats.variance)


def apply_frontend(
    batch: SequenceBatch, stack: int = 1, stride: int = 1, cmvn: CmvnStats | None = None
) -> SequenceBatch:
    feats = [stack_and_subsample(f, stack, stride) for f in batch.features]
    if cmvn is not None:
        feats = [apply_cmvn(f, cmvn) for f in feats]
    return SequenceBatch(feats, list(batch.targets))


# --- synthetic task -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """A toy acoustic task: each label emits ``frames_per_label`` noisy copies of its template.

    ``min_len``/``max_len`` bound the frame count of each sequence. Adjacent
    labels never repeat, so clean emissions decode exactly by nearest template.
    With ``global_bias`` a single corpus-wide offset pattern is added to every frame.
    """

    alphabet_size: int = 5
    min_len: int = 10
    max_len: int = 30
    frames_per_label: int = 2
    feat_dim: int = 8
    noise_std: float = 0.3
    global_bias: bool = False
    bias_scale: float = 2.0
    n_train: int = 200
    n_test: int = 40
    seed: int = 0

    def label_count_range(self) -> tuple[int, int]:
        k = self.frames_per_label
        return math.ceil(self.min_len / k), self.max_len // k

    def validate(self) -> None:
        if self.alphabet_size < 2:
            raise DataError("alphabet_size must be >= 2 (blank plus one label)")
        if self.frames_per_label < 1 or self.feat_dim < 1:
            raise DataError("frames_per_label and feat_dim must be >= 1")
        if self.min_len < 1 or self.min_len > self.max_len:
            raise DataError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        lo, hi = self.label_count_range()
        if lo > hi:
            raise DataError(
                f"no label count gives a length in [{self.min_len}, {self.max_len}] "
                f"at {self.frames_per_label} frames per label"
            )
        if self.alphabet_size == 2 and lo > 1:
            raise DataError("a single non-blank label cannot form repeat-free sequences longer than 1")
        if self.noise_std < 0 or self.n_train < 0 or self.n_test < 0:
            raise DataError("noise_std, n_train and n_test must be non-negative")


def _draw_task(spec: SyntheticTaskSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    templates = rng.normal(size=(spec.alphabet_size, spec.feat_dim))
    templates[0] = 0.0  # blank emits nothing of its own
    bias = rng.normal(size=spec.feat_dim) * spec.bias_scale
    return templates, bias if spec.global_bias else np.zeros(spec.feat_dim)


def task_templates(spec: SyntheticTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Label templates (row 0 unused) and the global bias pattern of ``spec``'s corpus."""
    return _draw_task(spec, np.random.default_rng(spec.seed))


def _draw_sequence(
    spec: SyntheticTaskSpec, rng: np.random.Generator, templates: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, CtcTarget]:
    lo, hi = spec.label_count_range()
    n_labels = int(rng.integers(lo, hi + 1))
    if spec.alphabet_size == 2:
        n_labels = 1
    labels: list[int] = []
    for _ in range(n_labels):
        choices = [v for v in range(1, spec.alphabet_size) if not labels or v != labels[-1]]
        labels.append(int(rng.choice(choices)))
    clean = np.repeat(templates[labels], spec.frames_per_label, axis=0)
    noise = rng.normal(size=clean.shape) * spec.noise_std
    return clean + noise + bias, CtcTarget(labels, spec.alphabet_size)


def generate_corpus(spec: SyntheticTaskSpec) -> tuple[SequenceBatch, SequenceBatch]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    templates, bias = _draw_task(spec, rng)
    sets = []
    for count in (spec.n_train, spec.n_test):
        feats, targets = [], []
        for _ in range(count):
            x, t = _draw_sequence(spec, rng, templates, bias)
            feats.append(x)
            targets.append(t)
        sets.append(SequenceBatch(feats, targets))
    return sets[0], sets[1]


# --- files --------------------------------------------------------------------


def write_features(path: str | Path, batch: SequenceBatch | Sequence[np.ndarray]) -> None:
    """Write matrices as float32 records after an ASCII magic line."""
    feats = batch.features if isinstance(batch, SequenceBatch) else list(batch)
    with open(path, "wb") as fh:
        fh.write((FEATURE_MAGIC + "\n").encode("ascii"))
        for m in feats:
            m = np.asarray(m)
            if m.ndim != 2:
                raise DataError(f"feature records must be 2-D, got shape {m.shape}")
            fh.write(f"{m.shape[0]} {m.shape[1]}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_features(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if not data:
        raise FeatureFileError("magic", f"{path} is empty")
    nl = data.find(b"\n")
    if nl < 0 or data[:nl].decode("ascii", "replace") != FEATURE_MAGIC:
        raise FeatureFileError("magic", f"expected {FEATURE_MAGIC!r} as the first line")
    pos = nl + 1
    out = []
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FeatureFileError("record header", f"unterminated header at byte {pos}")
        parts = data[pos:nl].split()
        try:
            rows, cols = (int(p) for p in parts)
        except ValueError:
            raise FeatureFileError(
                "record header", f"expected 'rows cols' at byte {pos}, got {data[pos:nl]!r}"
            ) from None
        if rows < 0 or cols < 0:
            raise FeatureFileError("record header", f"negative shape {rows}x{cols}")
        pos = nl + 1
        nbytes = rows * cols * 4
        if pos + nbytes > len(data):
            raise FeatureFileError(
                "payload", f"record {len(out)} truncated: need {nbytes} bytes, {len(data) - pos} left"
            )
        m = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
        out.append(m.astype(float))
        pos += nbytes
    return out


def write_labels(path: str | Path, targets: Sequence[CtcTarget]) -> None:
    with open(path, "w") as fh:
        for t in targets:
            fh.write(" ".join(str(v) for v in t.labels) + "\n")


def read_labels(path: str | Path, alphabet_size: int) -> list[CtcTarget]:
    targets = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        try:
            targets.append(CtcTarget([int(v) for v in line.split()], alphabet_size))
        except ValueError as exc:
            raise FeatureFileError("labels", f"line {lineno}: {exc}") from None
    return targets


def save_batch(stem: str | Path, batch: SequenceBatch) -> None:
    """Write ``<stem>.feats`` and ``<stem>.labels``."""
    write_features(f"{stem}.feats", batch)
    write_labels(f"{stem}.labels", batch.targets)


def load_batch(stem: str | Path, alphabet_size: int) -> SequenceBatch:
    feats = read_features(f"{stem}.feats")
    targets = read_labels(f"{stem}.labels", alphabet_size)
    if len(feats) != len(targets):
        raise FeatureFileError(
            "labels", f"{len(targets)} label lines for {len(feats)} feature records"
        )
    return SequenceBatch(feats, targets)
