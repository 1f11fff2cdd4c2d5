"""Finite-difference checks of every analytic backward pass.

Each layer check uses the scalar ``sum(forward(x) * R)`` for a fixed random
``R``, so the analytic side is ``backward(R)`` and every input entry and every
parameter is compared against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctc import CtcTarget, ctc_loss
from .layers import (
    MEMORY_INPUT_EMBEDDING,
    MEMORY_KEY_VALUE,
    AttentionLayer,
    DfsmnBlock,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    PositionalEncoding,
)
from .numerics import GradCheckReport, finite_diff_gradient, grad_check, log_softmax_rows, perturb_in_place

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    checked: int
    report: GradCheckReport
    worst_tensor: str

    @property
    def passed(self) -> bool:
        return self.report.max_relative_error < TOLERANCE


def check_module(
    name: str,
    module: Module,
    x: np.ndarray,
    mask: np.ndarray | None,
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> CheckResult:
    x = np.array(x, dtype=float)
    module.train(False)
    probe = rng.normal(size=module.forward(x, mask).shape)

    def objective() -> float:
        return float(np.sum(module.forward(x, mask) * probe))

    objective()
    dx = module.backward(probe)
    analytic = dict(module.named_gradients())
    pairs = [("input", dx, perturb_in_place(objective, x, eps))]
    for pname, value in module.named_parameters():
        pairs.append((pname, analytic[pname], perturb_in_place(objective, value, eps)))
    return _combine(name, pairs)


def _combine(name: str, pairs) -> CheckResult:
    worst: tuple[GradCheckReport, str] | None = None
    checked = 0
    for tensor, a, n in pairs:
        checked += np.size(a)
        report = grad_check(a, n)
        if worst is None or report.max_relative_error > worst[0].max_relative_error:
            worst = (report, tensor)
    assert worst is not None
    return CheckResult(name, checked, worst[0], worst[1])


def check_ctc(rng: np.random.Generator, T: int = 6, A: int = 4, labels=(1, 2, 2)) -> CheckResult:
    """CTC gradient w.r.t. pre-softmax logits."""
    logits = rng.normal(size=(T, A))
    target = CtcTarget(labels, A)
    analytic = ctc_loss(log_softmax_rows(logits), target).grad_logits
    numeric = finite_diff_gradient(lambda z: ctc_loss(log_softmax_rows(z), target).loss, logits)
    return _combine("ctc_loss", [("logits", analytic, numeric)])


def run_gradchecks(
    seed: int = 0,
    memory_sizes: Sequence[int] = (1, 4),
    dim: int = 8,
    heads: int = 2,
    frames: int = 5,
) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    mask = np.ones((2, frames), dtype=bool)
    mask[1, frames - 2 :] = False

    def x(width: int = dim) -> np.ndarray:
        return rng.normal(size=(2, frames, width))

    results = [
        check_module("dfsmn_block", DfsmnBlock(dim, 12, dim, 2, 2, rng), x(), mask, rng),
        check_module("dfsmn_block_projecting", DfsmnBlock(6, 12, dim, 2, 1, rng), x(6), mask, rng),
        check_module("layer_norm", LayerNorm(dim), x(), None, rng),
        check_module("feed_forward", FeedForward(dim, 2 * dim, rng), x(), None, rng),
        check_module("positional_encoding", PositionalEncoding(16, dim), x(), None, rng),
        check_module("attention", MultiHeadAttention(dim, heads, rng), x(), mask, rng),
        check_module(
            "attention_layer", AttentionLayer(dim, heads, rng, dropout=0.0), x(), mask, rng
        ),
    ]
    for variant, label in ((MEMORY_KEY_VALUE, "kv_memory"), (MEMORY_INPUT_EMBEDDING, "input_memory")):
        for n in memory_sizes:
            layer = AttentionLayer(dim, heads, rng, memory=variant, memory_n=n, dropout=0.0)
            results.append(check_module(f"{label}_N{n}", layer, x(), mask, rng))
    results.append(check_ctc(rng))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<26}{'entries':>8}  {'max rel err':>12}  {'worst tensor':<22}result"]
    for r in results:
        lines.append(
            f"{r.name:<26}{r.checked:>8}  {r.report.max_relative_error:>12.3e}  "
            f"{r.worst_tensor:<22}{'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
