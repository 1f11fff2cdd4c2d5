"""CTC loss, its logit gradient, a path-enumeration oracle, greedy decoding and CER.

Label index 0 is the blank throughout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import LOG_ZERO, logsumexp

BLANK = 0


class CtcError(ValueError):
    pass


@dataclass(frozen=True)
class CtcTarget:
    labels: tuple[int, ...]
    alphabet_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if self.alphabet_size < 2:
            raise CtcError("alphabet must contain the blank and at least one label")
        for v in self.labels:
            if not 1 <= v < self.alphabet_size:
                raise CtcError(f"label {v} outside [1, {self.alphabet_size - 1}] (0 is blank)")

    def __len__(self) -> int:
        return len(self.labels)

    def min_frames(self) -> int:
        """Shortest input that can emit this target: one frame per label plus a blank per repeat."""
        repeats = sum(a == b for a, b in zip(self.labels, self.labels[1:]))
        return len(self.labels) + repeats


@dataclass
class CtcLossResult:
    loss: float
    grad_logits: np.ndarray


def _extended(labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved label sequence and a mask of states reachable by a two-step skip."""
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip


def _check_inputs(log_probs: np.ndarray, length: int, target: CtcTarget) -> None:
    if log_probs.shape[-1] != target.alphabet_size:
        raise CtcError(
            f"log_probs have {log_probs.shape[-1]} columns, alphabet has {target.alphabet_size}"
        )
    if length < 1:
        raise CtcError("input must have at least one frame")
    if length < target.min_frames():
        raise CtcError(
            f"infeasible alignment: {length} frames cannot emit {len(target)} labels "
            f"(needs at least {target.min_frames()})"
        )
    norm = logsumexp(log_probs[:length], axis=-1)
    if not np.all(np.abs(norm) < 1e-9):
        raise CtcError("log_probs rows must be normalised log-distributions")


def ctc_loss_batch(
    log_probs: np.ndarray, lengths: Sequence[int], targets: Sequence[CtcTarget]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence CTC losses and gradients w.r.t. pre-softmax logits.

    ``log_probs`` is padded ``(B, T_max, A)``; frames at or beyond each length are
    ignored and receive zero gradient.
    """
    log_probs = np.asarray(log_probs, dtype=float)
    B, T_max, A = log_probs.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or len(targets) != B:
        raise CtcError("lengths and targets must match the batch size")
    if np.any(lengths > T_max):
        raise CtcError("sequence length exceeds padded time axis")
    for b in range(B):
        _check_inputs(log_probs[b], int(lengths[b]), targets[b])

    S_max = 2 * max(len(t) for t in targets) + 1
    ext = np.zeros((B, S_max), dtype=np.int64)
    skip = np.zeros((B, S_max), dtype=bool)
    valid = np.zeros((B, S_max), dtype=bool)
    n_states = np.zeros(B, dtype=np.int64)
    for b, target in enumerate(targets):
        e, s = _extended(target.labels)
        ext[b, : e.size] = e
        skip[b, : e.size] = s
        valid[b, : e.size] = True
        n_states[b] = e.size

    rows = np.arange(B)[:, None]
    # emit[t, b, s] = log p_t(ext[b, s]) for valid states
    emit = np.where(valid[None], log_probs[rows, :, ext].transpose(2, 0, 1), LOG_ZERO)

    def from_left(prev: np.ndarray) -> np.ndarray:
        one = np.full_like(prev, LOG_ZERO)
        one[:, 1:] = prev[:, :-1]
        two = np.full_like(prev, LOG_ZERO)
        two[:, 2:] = prev[:, :-2]
        two = np.where(skip, two, LOG_ZERO)
        return logsumexp(np.stack([prev, one, two]), axis=0)

    def from_right(nxt: np.ndarray) -> np.ndarray:
        one = np.full_like(nxt, LOG_ZERO)
        one[:, :-1] = nxt[:, 1:]
        two = np.full_like(nxt, LOG_ZERO)
        # a skip lands on s + 2, so it is allowed when state s + 2 is skip-reachable
        two[:, :-2] = np.where(skip[:, 2:], nxt[:, 2:], LOG_ZERO)
        return logsumexp(np.stack([nxt, one, two]), axis=0)

    alpha = np.full((T_max, B, S_max), LOG_ZERO)
    start = np.full((B, S_max), LOG_ZERO)
    start[:, :2] = 0.0  # emit already rules out state 1 for empty targets
    alpha[0] = np.maximum(start + emit[0], LOG_ZERO)
    for t in range(1, T_max):
        step = np.maximum(from_left(alpha[t - 1]) + emit[t], LOG_ZERO)
        alpha[t] = np.where((t < lengths)[:, None], step, alpha[t - 1])

    last = alpha[lengths - 1, np.arange(B)]
    idx = np.arange(B)
    final_pair = np.stack(
        [
            last[idx, n_states - 1],
            np.where(n_states > 1, last[idx, np.maximum(n_states - 2, 0)], LOG_ZERO),
        ]
    )
    log_likelihood = logsumexp(final_pair, axis=0)

    # beta[t, b, s]: log-prob of frames t+1 .. T_b-1 given state s at frame t
    end = np.full((B, S_max), LOG_ZERO)
    end[np.arange(B), n_states - 1] = 0.0
    end[np.arange(B), np.maximum(n_states - 2, 0)] = 0.0
    beta = np.full((T_max, B, S_max), LOG_ZERO)
    for t in range(T_max - 1, -1, -1):
        if t + 1 < T_max:
            step = np.maximum(from_right(beta[t + 1] + emit[t + 1]), LOG_ZERO)
        else:
            step = np.full((B, S_max), LOG_ZERO)
        step = np.where((t == lengths - 1)[:, None], end, step)
        beta[t] = np.where((t < lengths)[:, None], step, LOG_ZERO)

    occupancy = alpha + beta - log_likelihood[None, :, None]
    occupancy = np.where(valid[None], occupancy, LOG_ZERO)
    posterior = np.exp(np.minimum(occupancy, 0.0)).transpose(1, 0, 2)  # (B, T, S)
    onehot = (ext[:, :, None] == np.arange(A)) & valid[:, :, None]
    label_posterior = posterior @ onehot.astype(float)
    frame_mask = (np.arange(T_max)[None, :] < lengths[:, None])[..., None]
    grads = (np.exp(log_probs) - label_posterior) * frame_mask
    return -log_likelihood, grads


def ctc_loss(log_probs: np.ndarray, target: CtcTarget) -> CtcLossResult:
    """Negative log-likelihood of ``target`` under per-frame ``log_probs`` ``(T, A)``.

    ``grad_logits`` is the gradient w.r.t. the logits whose log-softmax is
    ``log_probs``.
    """
    log_probs = np.asarray(log_probs, dtype=float)
    if log_probs.ndim != 2:
        raise CtcError(f"log_probs must be a (T, A) matrix, got shape {log_probs.shape}")
    losses, grads = ctc_loss_batch(log_probs[None], [log_probs.shape[0]], [target])
    return CtcLossResult(float(losses[0]), grads[0])


def collapse(path: Sequence[int]) -> list[int]:
    out: list[int] = []
    prev = None
    for sym in path:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return out


def ctc_brute_force(log_probs: np.ndarray, target: CtcTarget, max_paths: int = 10**7) -> float:
    """CTC loss by summing the probability of every frame-level path that collapses to the target."""
    log_probs = np.asarray(log_probs, dtype=float)
    T, A = log_probs.shape
    if A ** T > max_paths:
        raise CtcError(f"{A}^{T} paths exceed the enumeration limit {max_paths}")
    wanted = list(target.labels)
    matched = []
    for path in itertools.product(range(A), repeat=T):
        if collapse(path) == wanted:
            matched.append(sum(log_probs[t, k] for t, k in enumerate(path)))
    if not matched:
        raise CtcError(f"no path of {T} frames collapses to {wanted}")
    return -float(logsumexp(np.array(matched)))


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Frame-wise argmax (lowest index wins ties), then collapse repeats and drop blanks."""
    return collapse(np.argmax(np.asarray(log_probs), axis=-1).tolist())


@dataclass(frozen=True)
class EditStats:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditStats:
    """Unit-cost Levenshtein distance with an operation breakdown."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditStats(int(d[n, m]), subs, ins, dels)


def cer(ref: Sequence, hyp: Sequence) -> float:
    return edit_distance(ref, hyp).distance / max(1, len(ref))


def corpus_cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edit distance over total reference length."""
    if len(refs) != len(hyps):
        raise CtcError("reference and hypothesis counts differ")
    errors = sum(edit_distance(r, h).distance for r, h in zip(refs, hyps))
    return errors / max(1, sum(len(r) for r in refs))

