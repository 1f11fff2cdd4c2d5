"""Layer forward/backward passes for DFSMN-SAN acoustic models.

Layers operate on padded batches shaped ``(batch, time, dim)`` together with a
boolean ``(batch, time)`` mask marking the real frames. The module-level
functions (:func:`dfsmn_memory`, :func:`self_attention`, ...) are the
single-sequence views used by tests and by the gradient-check harness.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import softmax_rows

MEMORY_NONE = "none"
MEMORY_KEY_VALUE = "key_value"
MEMORY_INPUT_EMBEDDING = "input_embedding"
MEMORY_VARIANTS = (MEMORY_NONE, MEMORY_KEY_VALUE, MEMORY_INPUT_EMBEDDING)


class LayerError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over all leading axes of the outer products ``a[..., :, None] * b[..., None, :]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _full_mask(x: np.ndarray) -> np.ndarray:
    return np.ones(x.shape[:2], dtype=bool)


class Module:
    """Parameter container with cached forward state.

    ``backward`` overwrites ``grads`` with the gradients of the most recent
    ``forward`` call; there is no accumulation across calls.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = False
        self._cache: tuple | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value
        for child_name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_gradients(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, self.grads.get(name, np.zeros_like(value))
        for child_name, child in self.children.items():
            yield from child.named_gradients(f"{prefix}{child_name}.")

    def param_count(self) -> int:
        return sum(v.size for _, v in self.named_parameters())

    def train(self, mode: bool = True) -> None:
        self.training = mode
        for child in self.children.values():
            child.train(mode)

    def _pop_cache(self) -> tuple:
        if self._cache is None:
            raise LayerError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.params["weight"] = glorot_uniform(rng, d_in, d_out)
        if bias:
            self.params["bias"] = np.zeros(d_out)

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        w = self.params["weight"]
        if x.shape[-1] != w.shape[0]:
            raise LayerError(f"Linear expects {w.shape[0]} input columns, got {x.shape[-1]}")
        self._cache = (x,)
        y = x @ w
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        (x,) = self._pop_cache()
        self.grads["weight"] = _outer_sum(x, dy)
        if "bias" in self.params:
            self.grads["bias"] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ self.params["weight"].T


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise LayerError("layer norm eps must be positive")
        self.eps = eps
        self.params["gain"] = np.ones(dim)
        self.params["bias"] = np.zeros(dim)

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        if x.shape[-1] != self.params["gain"].size:
            raise LayerError(
                f"LayerNorm over {self.params['gain'].size} columns got {x.shape[-1]}"
            )
        mean = x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.params["gain"] + self.params["bias"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._pop_cache()
        self.grads["gain"] = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        self.grads["bias"] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dxhat = dy * self.params["gain"]
        return inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


class FeedForward(Module):
    """Position-wise ``ReLU(x W1 + b1) W2 + b2``."""

    def __init__(self, dim: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.params["w_in"] = glorot_uniform(rng, dim, d_ff)
        self.params["b_in"] = np.zeros(d_ff)
        self.params["w_out"] = glorot_uniform(rng, d_ff, dim)
        self.params["b_out"] = np.zeros(dim)

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        if x.shape[-1] != self.params["w_in"].shape[0]:
            raise LayerError("FeedForward input width mismatch")
        pre = x @ self.params["w_in"] + self.params["b_in"]
        hidden = np.maximum(pre, 0.0)
        self._cache = (x, pre, hidden)
        return hidden @ self.params["w_out"] + self.params["b_out"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, pre, hidden = self._pop_cache()
        self.grads["w_out"] = _outer_sum(hidden, dy)
        self.grads["b_out"] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dpre = (dy @ self.params["w_out"].T) * (pre > 0)
        self.grads["w_in"] = _outer_sum(x, dpre)
        self.grads["b_in"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
        return dpre @ self.params["w_in"].T


# --- sinusoidal positions -------------------------------------------------


def sinusoid_table(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=float)[:, None]
    pair = np.arange(dim) // 2
    angle = pos / np.power(10000.0, 2.0 * pair / dim)
    return np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))


class PositionalEncoding(Module):
    """Adds a fixed sinusoidal table to 0-based frame positions; no parameters."""

    def __init__(self, max_len: int, dim: int, table: np.ndarray | None = None):
        super().__init__()
        self.max_len = max_len
        self.dim = dim
        self.table = sinusoid_table(max_len, dim) if table is None else table
        if self.table.shape != (max_len, dim):
            raise LayerError(f"table shape {self.table.shape} != {(max_len, dim)}")

    def encode(self, positions: np.ndarray) -> np.ndarray:
        return self.table[positions]

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        T = x.shape[-2]
        if T > self.max_len:
            raise LayerError(f"sequence length {T} exceeds positional table max_len {self.max_len}")
        if x.shape[-1] != self.dim:
            raise LayerError(f"positional encoding dim {self.dim} != input dim {x.shape[-1]}")
        self._cache = ()
        return x + self.table[:T]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._pop_cache()
        return dy


def positional_encode(x: np.ndarray, pe: PositionalEncoding) -> np.ndarray:
    return pe.forward(np.asarray(x, dtype=float))


# --- DFSMN ------------------------------------------------------------------


def _shift(h: np.ndarray, offset: int) -> np.ndarray:
    """Return ``g`` with ``g[..., t, :] = h[..., t - offset, :]``, zero outside the sequence."""
    out = np.zeros_like(h)
    T = h.shape[-2]
    if offset >= 0:
        if offset < T:
            out[..., offset:, :] = h[..., : T - offset, :]
    elif -offset < T:
        out[..., : T + offset, :] = h[..., -offset:, :]
    return out


def fir_filter(h: np.ndarray, fir_back: np.ndarray, fir_ahead: np.ndarray) -> np.ndarray:
    out = np.zeros_like(h)
    for i in range(fir_back.shape[0]):
        out += fir_back[i] * _shift(h, i)
    for j in range(1, fir_ahead.shape[0] + 1):
        out += fir_ahead[j - 1] * _shift(h, -j)
    return out


def fir_filter_backward(
    dout: np.ndarray, h: np.ndarray, fir_back: np.ndarray, fir_ahead: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`fir_filter` w.r.t. its input and both coefficient sets."""
    dh = np.zeros_like(h)
    g_back = np.zeros_like(fir_back)
    g_ahead = np.zeros_like(fir_ahead)
    flat = dout.reshape(-1, dout.shape[-1])
    for i in range(fir_back.shape[0]):
        dh += fir_back[i] * _shift(dout, -i)
        g_back[i] = (flat * _shift(h, i).reshape(flat.shape)).sum(axis=0)
    for j in range(1, fir_ahead.shape[0] + 1):
        dh += fir_ahead[j - 1] * _shift(dout, j)
        g_ahead[j - 1] = (flat * _shift(h, -j).reshape(flat.shape)).sum(axis=0)
    return dh, g_back, g_ahead


class DfsmnBlock(Module):
    """One DFSMN component: affine + ReLU, linear projection, FIR memory, skip.

    ``fir_back`` rows hold the look-back taps a_0..a_N1 (a_0 multiplies the
    current frame) and ``fir_ahead`` rows the look-ahead taps b_1..b_N2. Each
    tap is a per-channel vector applied elementwise.
    """

    def __init__(
        self,
        d_in: int,
        hidden_units: int,
        d_proj: int,
        lookback: int,
        lookahead: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        if lookback < 0 or lookahead < 0:
            raise LayerError("FIR orders must be non-negative")
        self.lookback_order = lookback
        self.lookahead_order = lookahead
        self.hidden_units = hidden_units
        self.skip = d_in == d_proj
        self.params["input_weight"] = glorot_uniform(rng, d_in, hidden_units)
        self.params["input_bias"] = np.zeros(hidden_units)
        self.params["projection_weight"] = glorot_uniform(rng, hidden_units, d_proj)
        tap_limit = 1.0 / (lookback + lookahead + 1)
        fir_back = rng.uniform(-tap_limit, tap_limit, size=(lookback + 1, d_proj))
        fir_back[0] = 1.0
        self.params["fir_back"] = fir_back
        self.params["fir_ahead"] = rng.uniform(-tap_limit, tap_limit, size=(lookahead, d_proj))

    @property
    def fir_back(self) -> np.ndarray:
        return self.params["fir_back"]

    @property
    def fir_ahead(self) -> np.ndarray:
        return self.params["fir_ahead"]

    @property
    def d_in(self) -> int:
        return self.params["input_weight"].shape[0]

    @property
    def d_proj(self) -> int:
        return self.params["projection_weight"].shape[1]

    def check_shapes(self) -> None:
        d_proj = self.d_proj
        if self.fir_back.shape != (self.lookback_order + 1, d_proj):
            raise LayerError(
                f"fir_back shape {self.fir_back.shape} != {(self.lookback_order + 1, d_proj)}"
            )
        if self.fir_ahead.shape != (self.lookahead_order, d_proj):
            raise LayerError(
                f"fir_ahead shape {self.fir_ahead.shape} != {(self.lookahead_order, d_proj)}"
            )

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise LayerError(f"DFSMN block expects {self.d_in} input columns, got {x.shape[-1]}")
        self.check_shapes()
        if mask is None:
            mask = _full_mask(x)
        m = mask[..., None]
        pre = x @ self.params["input_weight"] + self.params["input_bias"]
        hidden = np.maximum(pre, 0.0)
        proj = (hidden @ self.params["projection_weight"]) * m
        out = proj + fir_filter(proj, self.fir_back, self.fir_ahead)
        if self.skip:
            out = out + x
        self._cache = (x, pre, hidden, proj, m)
        return out * m

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, pre, hidden, proj, m = self._pop_cache()
        dy = dy * m
        dh_fir, g_back, g_ahead = fir_filter_backward(dy, proj, self.fir_back, self.fir_ahead)
        self.grads["fir_back"] = g_back
        self.grads["fir_ahead"] = g_ahead
        dproj = (dy + dh_fir) * m
        self.grads["projection_weight"] = _outer_sum(hidden, dproj)
        dpre = (dproj @ self.params["projection_weight"].T) * (pre > 0)
        self.grads["input_weight"] = _outer_sum(x, dpre)
        self.grads["input_bias"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
        dx = dpre @ self.params["input_weight"].T
        if self.skip:
            dx = dx + dy
        return dx


def dfsmn_memory(h_seq: np.ndarray, block: DfsmnBlock) -> np.ndarray:
    """FIR memory of one sequence ``(T, d_proj)``; frames outside [0, T) count as zero."""
    h_seq = np.asarray(h_seq, dtype=float)
    block.check_shapes()
    if h_seq.shape[-1] != block.d_proj:
        raise LayerError(f"memory input has {h_seq.shape[-1]} channels, block has {block.d_proj}")
    return fir_filter(h_seq, block.fir_back, block.fir_ahead)


def dfsmn_block_forward(x: np.ndarray, block: DfsmnBlock) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return block.forward(x[None])[0]


# --- attention ----------------------------------------------------------------


def self_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, key_mask: np.ndarray | None = None
) -> np.ndarray:
    """``softmax(q k^T / sqrt(d_k)) v`` for a single head; keys with a False mask are ignored."""
    q, k, v = (np.asarray(a, dtype=float) for a in (q, k, v))
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise LayerError("q, k, v must share the head dimension")
    if k.shape[-2] != v.shape[-2]:
        raise LayerError("k and v must have the same number of rows")
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = np.where(key_mask[..., None, :], scores, -np.inf)
    return softmax_rows(scores) @ v


class MultiHeadAttention(Module):
    """Multi-head attention sublayer with optional persistent memory.

    ``memory`` is one of ``"none"``, ``"key_value"`` (learned rows appended to
    the projected keys and values, split column-wise across heads) or
    ``"input_embedding"`` (learned rows appended to the input before the key
    and value projections). Queries always come from the input frames only.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        memory: str = MEMORY_NONE,
        memory_n: int = 0,
        memory_rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if heads <= 0 or dim % heads:
            raise LayerError(f"model dim {dim} is not divisible by {heads} heads")
        if memory not in MEMORY_VARIANTS:
            raise LayerError(f"unknown memory variant {memory!r}")
        if memory_n < 0:
            raise LayerError("memory_n must be >= 0")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.memory = memory
        self.memory_n = memory_n if memory != MEMORY_NONE else 0
        for name in ("wq", "wk", "wv", "wo"):
            self.params[name] = glorot_uniform(rng, dim, dim)
        mem_rng = memory_rng if memory_rng is not None else rng
        bound = 1.0 / math.sqrt(dim)
        if memory == MEMORY_KEY_VALUE:
            self.params["mem_keys"] = mem_rng.uniform(-bound, bound, size=(memory_n, dim))
            self.params["mem_values"] = mem_rng.uniform(-bound, bound, size=(memory_n, dim))
        elif memory == MEMORY_INPUT_EMBEDDING:
            self.params["mem_inputs"] = mem_rng.uniform(-bound, bound, size=(memory_n, dim))
        self.last_weights: np.ndarray | None = None

    def memory_param_count(self) -> int:
        return sum(
            v.size for k, v in self.params.items() if k in ("mem_keys", "mem_values", "mem_inputs")
        )

    def _split(self, a: np.ndarray) -> np.ndarray:
        B, T, _ = a.shape
        return a.reshape(B, T, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, a: np.ndarray) -> np.ndarray:
        B, _, T, _ = a.shape
        return a.transpose(0, 2, 1, 3).reshape(B, T, self.dim)

    def _check_memory(self) -> None:
        for name in ("mem_keys", "mem_values", "mem_inputs"):
            if name in self.params and self.params[name].shape != (self.memory_n, self.dim):
                raise LayerError(
                    f"{name} shape {self.params[name].shape} != {(self.memory_n, self.dim)}"
                )

    def keys_values(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Full-width keys and values ``(B, T+N, d)``, plus the augmented input if any."""
        self._check_memory()
        B = x.shape[0]
        p = self.params
        if self.memory == MEMORY_INPUT_EMBEDDING:
            mem = np.broadcast_to(p["mem_inputs"], (B, self.memory_n, self.dim))
            augmented = np.concatenate([x, mem], axis=1)
            return augmented @ p["wk"], augmented @ p["wv"], augmented
        k = x @ p["wk"]
        v = x @ p["wv"]
        if self.memory == MEMORY_KEY_VALUE:
            k = np.concatenate([k, np.broadcast_to(p["mem_keys"], (B, self.memory_n, self.dim))], 1)
            v = np.concatenate(
                [v, np.broadcast_to(p["mem_values"], (B, self.memory_n, self.dim))], 1
            )
        return k, v, None

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise LayerError(f"attention expects (batch, time, {self.dim}) input, got {x.shape}")
        if mask is None:
            mask = _full_mask(x)
        B = x.shape[0]
        k, v, augmented = self.keys_values(x)
        key_mask = np.concatenate([mask, np.ones((B, self.memory_n), dtype=bool)], axis=1)
        qh = self._split(x @ self.params["wq"])
        kh = self._split(k)
        vh = self._split(v)
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(self.head_dim)
        scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
        weights = softmax_rows(scores)
        context = self._merge(weights @ vh)
        self.last_weights = weights
        self._cache = (x, augmented, qh, kh, vh, weights, context)
        return context @ self.params["wo"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, augmented, qh, kh, vh, weights, context = self._pop_cache()
        p = self.params
        T = x.shape[1]
        self.grads["wo"] = np.einsum("bti,btj->ij", context, dy)
        dctx = self._split(dy @ p["wo"].T)
        dweights = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = weights.transpose(0, 1, 3, 2) @ dctx
        dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(self.head_dim)
        dq = self._merge(dscores @ kh)
        dk = self._merge(dscores.transpose(0, 1, 3, 2) @ qh)
        dv = self._merge(dvh)

        self.grads["wq"] = np.einsum("bti,btj->ij", x, dq)
        dx = dq @ p["wq"].T
        if self.memory == MEMORY_INPUT_EMBEDDING:
            self.grads["wk"] = np.einsum("bti,btj->ij", augmented, dk)
            self.grads["wv"] = np.einsum("bti,btj->ij", augmented, dv)
            daug = dk @ p["wk"].T + dv @ p["wv"].T
            self.grads["mem_inputs"] = daug[:, T:].sum(axis=0)
            return dx + daug[:, :T]
        self.grads["wk"] = np.einsum("bti,btj->ij", x, dk[:, :T])
        self.grads["wv"] = np.einsum("bti,btj->ij", x, dv[:, :T])
        if self.memory == MEMORY_KEY_VALUE:
            self.grads["mem_keys"] = dk[:, T:].sum(axis=0)
            self.grads["mem_values"] = dv[:, T:].sum(axis=0)
        return dx + dk[:, :T] @ p["wk"].T + dv[:, :T] @ p["wv"].T


class Dropout:
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise LayerError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._keep: np.ndarray | None = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if not training or self.rate == 0.0:
            self._keep = None
            return x
        self._keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._keep

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy if self._keep is None else dy * self._keep


class AttentionLayer(Module):
    """Post-norm self-attention layer.

    attention -> dropout -> residual -> norm, then (optionally)
    feed-forward -> dropout -> residual -> norm.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        d_ff: int | None = None,
        memory: str = MEMORY_NONE,
        memory_n: int = 0,
        dropout: float = 0.1,
        use_ffn: bool = True,
        memory_rng: np.random.Generator | None = None,
    ):
        super().__init__()
        self.dim = dim
        self.d_ff = 4 * dim if d_ff is None else d_ff
        self.children["attn"] = MultiHeadAttention(dim, heads, rng, memory, memory_n, memory_rng)
        self.children["norm1"] = LayerNorm(dim)
        if use_ffn:
            self.children["ffn"] = FeedForward(dim, self.d_ff, rng)
            self.children["norm2"] = LayerNorm(dim)
        self.drop1 = Dropout(dropout, rng)
        self.drop2 = Dropout(dropout, rng)

    @property
    def attn(self) -> MultiHeadAttention:
        return self.children["attn"]  # type: ignore[return-value]

    @property
    def use_ffn(self) -> bool:
        return "ffn" in self.children

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        if mask is None:
            mask = _full_mask(x)
        c = self.children
        a = self.drop1.forward(c["attn"].forward(x, mask), self.training)
        y = c["norm1"].forward(x + a)
        if self.use_ffn:
            f = self.drop2.forward(c["ffn"].forward(y), self.training)
            y = c["norm2"].forward(y + f)
        m = mask[..., None]
        self._cache = (m,)
        return y * m

    def backward(self, dy: np.ndarray) -> np.ndarray:
        (m,) = self._pop_cache()
        c = self.children
        dy = dy * m
        if self.use_ffn:
            dz = c["norm2"].backward(dy)
            dy = dz + c["ffn"].backward(self.drop2.backward(dz))
        dz = c["norm1"].backward(dy)
        return dz + c["attn"].backward(self.drop1.backward(dz))


def _per_head(k: np.ndarray, v: np.ndarray, layer: MultiHeadAttention):
    return layer._split(k)[0], layer._split(v)[0]


def kv_memory_keys_values(x: np.ndarray, layer: AttentionLayer | MultiHeadAttention):
    """Per-head ``(K_m, V_m)`` of shape ``(heads, T + N, d_k)`` for key-value memory."""
    attn = layer.attn if isinstance(layer, AttentionLayer) else layer
    if attn.memory != MEMORY_KEY_VALUE:
        raise LayerError(f"layer uses {attn.memory!r} memory, not key_value")
    k, v, _ = attn.keys_values(np.asarray(x, dtype=float)[None])
    return _per_head(k, v, attn)


def input_memory_keys_values(x: np.ndarray, layer: AttentionLayer | MultiHeadAttention):
    """Per-head ``(K_m, V_m)`` of shape ``(heads, T + N, d_k)`` for input-embedding memory."""
    attn = layer.attn if isinstance(layer, AttentionLayer) else layer
    if attn.memory != MEMORY_INPUT_EMBEDDING:
        raise LayerError(f"layer uses {attn.memory!r} memory, not input_embedding")
    k, v, _ = attn.keys_values(np.asarray(x, dtype=float)[None])
    return _per_head(k, v, attn)


def multi_head_attention(x: np.ndarray, layer: AttentionLayer) -> np.ndarray:
    """Run a full attention layer on one ``(T, d)`` sequence."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise LayerError(f"expected a (T, d) matrix, got shape {x.shape}")
    return layer.forward(x[None])[0]
