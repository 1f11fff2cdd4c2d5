"""Model assembly (DFSMN, SAN, DFSMN-SAN), parameter accounting and weight files."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .datapipe import CmvnStats, SequenceBatch
from .layers import (
    MEMORY_INPUT_EMBEDDING,
    MEMORY_KEY_VALUE,
    MEMORY_NONE,
    MEMORY_VARIANTS,
    AttentionLayer,
    DfsmnBlock,
    Linear,
    Module,
    PositionalEncoding,
    sinusoid_table,
)
from .numerics import log_softmax_rows

WEIGHTS_MAGIC = "DFSMN-SAN-WEIGHTS"
WEIGHTS_VERSION = 1

ARCH_DFSMN_SAN = "dfsmn_san"
ARCH_DFSMN = "dfsmn"
ARCH_SAN = "san"
ARCHITECTURES = (ARCH_DFSMN_SAN, ARCH_DFSMN, ARCH_SAN)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class WeightFileError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ModelConfig:
    """Declarative layer stack. Defaults are the full-size DFSMN-SAN.

    ``input_dim`` 960 is 120-dim features (40 log-Mel + deltas + delta-deltas)
    stacked 8 frames wide; ``output_labels`` 1434 is 1394 syllables, 39 phones
    and the blank.
    """

    architecture: str = ARCH_DFSMN_SAN
    input_dim: int = 960
    model_dim: int = 512
    heads: int = 8
    dfsmn_blocks_total: int = 30
    san_insert_every: int = 10
    san_layers_pure: int = 10
    lookback: int = 10
    lookahead: int = 10
    hidden_units: int = 1024
    projection_dim: int = 512
    memory_variant: str = MEMORY_NONE
    memory_n: int = 0
    output_labels: int = 1434
    d_ff: int = 0  # 0 means 4 * model_dim
    dropout: float = 0.1
    ffn_in_san: bool = True
    pe_before_san: bool = True
    max_len: int = 4096

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff > 0 else 4 * self.model_dim

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in fields:
                raise ConfigError(key, "unknown model config key")
            kwargs[key] = _coerce(key, value, fields[key].type)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError("architecture", f"must be one of {ARCHITECTURES}")
        if self.memory_variant not in MEMORY_VARIANTS:
            raise ConfigError("memory_variant", f"must be one of {MEMORY_VARIANTS}")
        for key in ("input_dim", "model_dim", "heads", "hidden_units", "projection_dim", "max_len"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.output_labels < 2:
            raise ConfigError("output_labels", "must include the blank and one label")
        if self.model_dim % self.heads:
            raise ConfigError("heads", f"model_dim {self.model_dim} is not divisible by {self.heads}")
        if self.memory_n < 0:
            raise ConfigError("memory_n", "must be >= 0")
        if self.lookback < 0 or self.lookahead < 0:
            raise ConfigError("lookback", "FIR orders must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if self.d_ff < 0:
            raise ConfigError("d_ff", "must be >= 0")
        if self.architecture in (ARCH_DFSMN_SAN, ARCH_DFSMN) and self.dfsmn_blocks_total < 1:
            raise ConfigError("dfsmn_blocks_total", "must be >= 1")
        if self.architecture == ARCH_SAN and self.san_layers_pure < 1:
            raise ConfigError("san_layers_pure", "a SAN-only model needs at least one layer")
        if self.architecture == ARCH_DFSMN_SAN:
            if self.san_insert_every < 1 or self.dfsmn_blocks_total % self.san_insert_every:
                raise ConfigError(
                    "san_insert_every",
                    f"dfsmn_blocks_total {self.dfsmn_blocks_total} is not a multiple of "
                    f"{self.san_insert_every}",
                )
            if self.projection_dim != self.model_dim:
                raise ConfigError(
                    "projection_dim", "must equal model_dim when attention follows DFSMN blocks"
                )

    def san_layer_count(self) -> int:
        if self.architecture == ARCH_DFSMN_SAN:
            return self.dfsmn_blocks_total // self.san_insert_every
        if self.architecture == ARCH_SAN:
            return self.san_layers_pure
        return 0

    def layer_tags(self) -> list[str]:
        if self.architecture == ARCH_DFSMN:
            return ["D"] * self.dfsmn_blocks_total
        if self.architecture == ARCH_SAN:
            return ["S"] * self.san_layers_pure
        group = ["D"] * self.san_insert_every + ["S"]
        return group * (self.dfsmn_blocks_total // self.san_insert_every)


def _coerce(key: str, value, annotation):
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", "")
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot interpret {value!r} as {kind}") from None


def memory_params_per_layer(cfg: ModelConfig) -> int:
    if cfg.memory_variant == MEMORY_KEY_VALUE:
        return 2 * cfg.memory_n * cfg.model_dim
    if cfg.memory_variant == MEMORY_INPUT_EMBEDDING:
        return cfg.memory_n * cfg.model_dim
    return 0


def _dfsmn_params(d_in: int, cfg: ModelConfig) -> int:
    h, p = cfg.hidden_units, cfg.projection_dim
    return d_in * h + h + h * p + (cfg.lookback + 1 + cfg.lookahead) * p


def _san_params(cfg: ModelConfig) -> int:
    d = cfg.model_dim
    n = 4 * d * d + 2 * d + memory_params_per_layer(cfg)
    if cfg.ffn_in_san:
        n += 2 * d * cfg.ffn_dim + cfg.ffn_dim + d + 2 * d
    return n


def param_count(cfg: ModelConfig) -> int:
    """Exact trainable parameter count of the model ``cfg`` builds, without building it."""
    cfg.validate()
    total = 0
    width = cfg.input_dim
    if cfg.architecture == ARCH_SAN:
        total += cfg.input_dim * cfg.model_dim + cfg.model_dim
        width = cfg.model_dim
    for tag in cfg.layer_tags():
        if tag == "D":
            total += _dfsmn_params(width, cfg)
            width = cfg.projection_dim
        else:
            total += _san_params(cfg)
            width = cfg.model_dim
    return total + width * cfg.output_labels + cfg.output_labels


class Model:
    """An ordered stack of DFSMN ("D") and attention ("S") layers plus an output projection."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        memory_rng = np.random.default_rng([seed, 1])
        dropout_rng = np.random.default_rng([seed, 2])
        table = sinusoid_table(cfg.max_len, cfg.model_dim)

        self.input_proj: Linear | None = None
        self.input_pe: PositionalEncoding | None = None
        if cfg.architecture == ARCH_SAN:
            self.input_proj = Linear(cfg.input_dim, cfg.model_dim, rng)
            self.input_pe = PositionalEncoding(cfg.max_len, cfg.model_dim, table)

        self.tags = cfg.layer_tags()
        self.layers: list[Module] = []
        self.layer_pe: list[PositionalEncoding | None] = []
        width = cfg.model_dim if cfg.architecture == ARCH_SAN else cfg.input_dim
        for tag in self.tags:
            if tag == "D":
                layer: Module = DfsmnBlock(
                    width, cfg.hidden_units, cfg.projection_dim, cfg.lookback, cfg.lookahead, rng
                )
                width = cfg.projection_dim
                pe = None
            else:
                layer = AttentionLayer(
                    cfg.model_dim,
                    cfg.heads,
                    rng,
                    d_ff=cfg.ffn_dim,
                    memory=cfg.memory_variant,
                    memory_n=cfg.memory_n,
                    dropout=cfg.dropout,
                    use_ffn=cfg.ffn_in_san,
                    memory_rng=memory_rng,
                )
                layer.drop1.rng = layer.drop2.rng = dropout_rng
                width = cfg.model_dim
                pe = (
                    PositionalEncoding(cfg.max_len, cfg.model_dim, table)
                    if cfg.architecture == ARCH_DFSMN_SAN and cfg.pe_before_san
                    else None
                )
            self.layers.append(layer)
            self.layer_pe.append(pe)
        self.output = Linear(width, cfg.output_labels, rng)

        # optional front end carried with the weights
        self.stack = 1
        self.stride = 1
        self.cmvn: CmvnStats | None = None

    # parameters -------------------------------------------------------------

    def modules(self) -> Iterator[tuple[str, Module]]:
        if self.input_proj is not None:
            yield "input_proj", self.input_proj
        for i, (tag, layer) in enumerate(zip(self.tags, self.layers)):
            yield f"layers.{i:02d}.{'dfsmn' if tag == 'D' else 'san'}", layer
        yield "output", self.output

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, module in self.modules():
            yield from module.named_parameters(prefix + ".")

    def named_gradients(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, module in self.modules():
            yield from module.named_gradients(prefix + ".")

    def param_count(self) -> int:
        return sum(v.size for _, v in self.named_parameters())

    def memory_param_count(self) -> int:
        return sum(
            layer.attn.memory_param_count()
            for layer in self.layers
            if isinstance(layer, AttentionLayer)
        )

    def train(self, mode: bool = True) -> None:
        for _, module in self.modules():
            module.train(mode)

    # compute ----------------------------------------------------------------

    def forward_padded(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Logits ``(B, T, labels)`` for a padded batch; rows beyond each length are unspecified."""
        if x.ndim != 3 or x.shape[-1] != self.config.input_dim:
            raise ValueError(
                f"model expects (batch, time, {self.config.input_dim}) input, got {x.shape}"
            )
        h = x
        if self.input_proj is not None:
            h = self.input_pe.forward(self.input_proj.forward(h))
        for layer, pe in zip(self.layers, self.layer_pe):
            if pe is not None:
                h = pe.forward(h)
            h = layer.forward(h, mask)
        return self.output.forward(h)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        dh = self.output.backward(dlogits)
        for layer, pe in zip(reversed(self.layers), reversed(self.layer_pe)):
            dh = layer.backward(dh)
            if pe is not None:
                dh = pe.backward(dh)
        if self.input_proj is not None:
            dh = self.input_proj.backward(self.input_pe.backward(dh))
        return dh

    def forward(self, batch: SequenceBatch) -> list[np.ndarray]:
        """Per-sequence logits ``(T_i, output_labels)``."""
        x, mask = batch.padded()
        logits = self.forward_padded(x, mask)
        return [logits[i, :n] for i, n in enumerate(batch.lengths)]

    def log_probs(self, batch: SequenceBatch) -> list[np.ndarray]:
        return [log_softmax_rows(z) for z in self.forward(batch)]


def full_size_config(
    architecture: str = ARCH_DFSMN_SAN, memory_variant: str = MEMORY_NONE, memory_n: int = 0
) -> ModelConfig:
    """Full-size configuration: 30 DFSMN blocks, 512-dim attention, 1434 outputs.

    Attention layers placed between DFSMN blocks carry no feed-forward
    sublayer; the SAN-only baseline keeps it.
    """
    cfg = ModelConfig(
        architecture=architecture,
        memory_variant=memory_variant,
        memory_n=memory_n,
        ffn_in_san=architecture == ARCH_SAN,
    )
    cfg.validate()
    return cfg


def float32_megabytes(n_params: int) -> float:
    return n_params * 4 / 1e6


def build_dfsmn_san(cfg: ModelConfig, seed: int = 0) -> Model:
    """DFSMN blocks with one attention layer after every ``san_insert_every`` of them."""
    if cfg.architecture != ARCH_DFSMN_SAN:
        cfg = dataclasses.replace(cfg, architecture=ARCH_DFSMN_SAN)
    return Model(cfg, seed)


def build_pure(cfg: ModelConfig, seed: int = 0) -> Model:
    """DFSMN-only or SAN-only stack, per ``cfg.architecture``."""
    if cfg.architecture not in (ARCH_DFSMN, ARCH_SAN):
        raise ConfigError("architecture", "build_pure needs 'dfsmn' or 'san'")
    return Model(cfg, seed)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


# --- weight container -----------------------------------------------------------


def _tensors_to_save(model: Model) -> list[tuple[str, np.ndarray]]:
    tensors = list(model.named_parameters())
    if model.cmvn is not None:
        tensors.append(("frontend.cmvn_mean", model.cmvn.mean))
        tensors.append(("frontend.cmvn_variance", model.cmvn.variance))
    return tensors


def save_weights(model: Model, path: str | Path, dtype: str = "<f8") -> None:
    """Write a text header (config, front end, tensor table) followed by raw payloads.

    Payloads are little-endian and row-major, in header order.
    """
    if np.dtype(dtype) not in (np.dtype("<f8"), np.dtype("<f4")):
        raise ValueError("weights are stored as <f8 or <f4")
    tensors = _tensors_to_save(model)
    frontend = {"stack": model.stack, "stride": model.stride, "seed": model.seed}
    if model.cmvn is not None:
        frontend["cmvn_frames"] = model.cmvn.frame_count
    lines = [
        f"{WEIGHTS_MAGIC} {WEIGHTS_VERSION}",
        "config " + json.dumps(model.config.to_dict(), sort_keys=True),
        "frontend " + json.dumps(frontend, sort_keys=True),
        f"tensors {len(tensors)}",
    ]
    for name, arr in tensors:
        lines.append(f"{name} {dtype} {','.join(str(s) for s in arr.shape)}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


@dataclass
class WeightHeader:
    config: dict
    frontend: dict
    tensors: list[tuple[str, str, tuple[int, ...]]]
    payload_offset: int


def _next_line(data: bytes, pos: int, field: str) -> tuple[str, int]:
    nl = data.find(b"\n", pos)
    if nl < 0:
        raise WeightFileError(field, "file ends inside the header")
    return data[pos:nl].decode("ascii", "replace"), nl + 1


def read_header(data: bytes) -> WeightHeader:
    if not data:
        raise WeightFileError("magic", "empty file")
    line, pos = _next_line(data, 0, "magic")
    parts = line.split()
    if len(parts) != 2 or parts[0] != WEIGHTS_MAGIC:
        raise WeightFileError("magic", f"expected '{WEIGHTS_MAGIC} <version>', got {line[:40]!r}")
    if parts[1] != str(WEIGHTS_VERSION):
        raise WeightFileError("version", f"unsupported version {parts[1]} (expected {WEIGHTS_VERSION})")
    sections = {}
    for field in ("config", "frontend"):
        line, pos = _next_line(data, pos, field)
        key, _, body = line.partition(" ")
        if key != field:
            raise WeightFileError(field, f"expected '{field}' line, got {key!r}")
        try:
            sections[field] = json.loads(body)
        except json.JSONDecodeError as exc:
            raise WeightFileError(field, f"invalid JSON ({exc})") from None
    line, pos = _next_line(data, pos, "tensors")
    key, _, count = line.partition(" ")
    if key != "tensors" or not count.strip().isdigit():
        raise WeightFileError("tensors", f"expected 'tensors <count>', got {line!r}")
    tensors = []
    for _ in range(int(count)):
        line, pos = _next_line(data, pos, "tensors")
        parts = line.split()
        if len(parts) not in (2, 3) or parts[1] not in ("<f8", "<f4"):
            raise WeightFileError("tensors", f"malformed tensor entry {line!r}")
        try:
            shape = tuple(int(s) for s in parts[2].split(",")) if len(parts) == 3 else ()
        except ValueError:
            raise WeightFileError(parts[0], f"bad shape {parts[2]!r}") from None
        tensors.append((parts[0], parts[1], shape))
    line, pos = _next_line(data, pos, "end")
    if line != "end":
        raise WeightFileError("end", f"expected 'end' after tensor table, got {line!r}")
    return WeightHeader(sections["config"], sections["frontend"], tensors, pos)


def load_weights(path: str | Path, expected: ModelConfig | None = None) -> Model:
    """Rebuild the model stored at ``path``.

    With ``expected``, a stored config that differs raises naming the first
    differing field.
    """
    data = Path(path).read_bytes()
    header = read_header(data)
    try:
        cfg = ModelConfig.from_dict(header.config)
    except ConfigError as exc:
        raise WeightFileError(f"config.{exc.key}", str(exc)) from None
    if expected is not None:
        for key, want in expected.to_dict().items():
            if header.config.get(key) != want:
                raise WeightFileError(
                    f"config.{key}", f"file has {header.config.get(key)!r}, expected {want!r}"
                )
    model = Model(cfg, int(header.frontend.get("seed", 0)))
    model.stack = int(header.frontend.get("stack", 1))
    model.stride = int(header.frontend.get("stride", 1))

    arrays: dict[str, np.ndarray] = {}
    pos = header.payload_offset
    for name, dtype, shape in header.tensors:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(data):
            raise WeightFileError(name, "payload truncated")
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise WeightFileError("payload", f"{len(data) - pos} trailing bytes after last tensor")

    for name, param in model.named_parameters():
        if name not in arrays:
            raise WeightFileError(name, "tensor missing from file")
        stored = arrays.pop(name)
        if stored.shape != param.shape:
            raise WeightFileError(name, f"shape {stored.shape} does not match config {param.shape}")
        param[...] = stored
    if "frontend.cmvn_mean" in arrays:
        mean = arrays.pop("frontend.cmvn_mean").astype(float)
        var = arrays.pop("frontend.cmvn_variance", None)
        if var is None or var.shape != mean.shape:
            raise WeightFileError("frontend.cmvn_variance", "missing or mismatched")
        model.cmvn = CmvnStats(mean, var.astype(float), int(header.frontend.get("cmvn_frames", 1)))
    if arrays:
        raise WeightFileError(sorted(arrays)[0], "tensor not used by the stored config")
    return model
