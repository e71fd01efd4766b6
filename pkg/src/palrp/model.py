"""Transformer definition, positional encodings and the weight container.

The forward pass records onto a :class:`~palrp.tensor_tape.Tape`. Every
positional quantity (input-level table rows, RoPE rotation matrices, ALiBi
bias matrices) enters the tape as its own leaf so that relevance reaching it
can be captured later.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    DimensionError,
    LengthError,
    ManifestError,
    MissingTensorError,
    ShapeMismatchError,
    TruncatedBlobError,
)
from .tensor_tape import ForwardTrace, Tape, TapeNode, as_tensor

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
ROPE_BASE = 10000.0


class PEKind(str, enum.Enum):
    LEARNABLE = "learnable"
    SINUSOIDAL = "sinusoidal"
    ROPE = "rope"
    ALIBI = "alibi"

    @property
    def input_level(self) -> bool:
        return self in (PEKind.LEARNABLE, PEKind.SINUSOIDAL)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    pe_kind: PEKind = PEKind.LEARNABLE
    causal: bool = False
    norm_position: str = "post"
    activation: str = "gelu"
    # False replaces the attention softmax by the raw (masked) scores.
    attention_softmax: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pe_kind", PEKind(self.pe_kind))
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise DimensionError(f"{name} must be a positive integer")
        if self.d_model % self.num_heads:
            raise DimensionError("d_model must be divisible by num_heads")
        if self.pe_kind is PEKind.ROPE and self.head_dim % 2:
            raise DimensionError("RoPE needs an even head dimension")
        if self.pe_kind is PEKind.SINUSOIDAL and self.d_model % 2:
            raise DimensionError("sinusoidal encoding needs an even d_model")
        if self.norm_position not in ("post", "pre"):
            raise ValueError("norm_position must be 'post' or 'pre'")
        if self.activation not in ("gelu", "relu"):
            raise ValueError("activation must be 'gelu' or 'relu'")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pe_kind"] = self.pe_kind.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ManifestError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name a model with ``config`` needs, with its shape."""
    D, F, V = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_embed": (V, D), "head.weight": (D, V), "head.bias": (V,)}
    if config.pe_kind is PEKind.LEARNABLE:
        shapes["pos_embed"] = (config.max_seq_len, D)
    for k in range(config.num_layers):
        p = f"layers.{k}."
        for proj in "qkvo":
            shapes[p + f"attn.{proj}.weight"] = (D, D)
            shapes[p + f"attn.{proj}.bias"] = (D,)
        for ln in ("ln1", "ln2"):
            shapes[p + f"{ln}.gamma"] = (D,)
            shapes[p + f"{ln}.beta"] = (D,)
        shapes[p + "ffn.w1"] = (D, F)
        shapes[p + "ffn.b1"] = (F,)
        shapes[p + "ffn.w2"] = (F, D)
        shapes[p + "ffn.b2"] = (D,)
    if config.norm_position == "pre":
        shapes["ln_f.gamma"] = (D,)
        shapes["ln_f.beta"] = (D,)
    return shapes


class Model(NamedTuple):
    """A config/weights pair; unpacks like the tuple ``load_model`` returns."""

    config: "ModelConfig"
    weights: "WeightStore"

    def forward(self, tokens, zero_positions=()):
        return forward(self.config, self.weights, tokens, zero_positions)


OPTIONAL_SHAPES = {"alibi_slopes": lambda c: (c.num_heads,)}


class WeightStore(dict):
    """Name -> float64 array mapping, validated against a :class:`ModelConfig`."""

    def __init__(self, tensors: Mapping[str, np.ndarray] = (), **kw):
        super().__init__()
        for name, value in dict(tensors, **kw).items():
            self[name] = as_tensor(value)

    def validate(self, config: ModelConfig) -> "WeightStore":
        for name, shape in expected_shapes(config).items():
            if name not in self:
                raise MissingTensorError(f"missing tensor {name!r}")
            if self[name].shape != shape:
                raise ShapeMismatchError(f"{name}: expected shape {shape}, got {self[name].shape}")
        for name, shape_fn in OPTIONAL_SHAPES.items():
            if name in self and self[name].shape != shape_fn(config):
                raise ShapeMismatchError(f"{name}: expected shape {shape_fn(config)}, got {self[name].shape}")
        return self

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.items()})


# ---------------------------------------------------------------------------
# positional encodings

def sinusoidal_table(max_len: int, d_model: int) -> np.ndarray:
    """[max_len x d_model] table: sin at even columns, cos at odd columns."""
    if d_model % 2:
        raise DimensionError("sinusoidal table needs an even width")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freq = ROPE_BASE ** (2.0 * np.arange(d_model // 2, dtype=np.float64) / d_model)
    angles = pos / freq
    table = np.empty((max_len, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


@dataclass(frozen=True)
class RotationMatrix:
    position: int
    layer: int
    matrix: np.ndarray


def rope_frequencies(head_dim: int) -> np.ndarray:
    # omega_m = base^(-2(m-1)/head_dim), m = 1..head_dim/2
    return ROPE_BASE ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)


def rope_matrix(position: int, head_dim: int, layer: int = 0) -> RotationMatrix:
    if head_dim % 2:
        raise DimensionError("rotation matrices need an even head dimension")
    if position < 0:
        raise ValueError("position must be non-negative")
    theta = position * rope_frequencies(head_dim)
    c, s = np.cos(theta), np.sin(theta)
    R = np.zeros((head_dim, head_dim))
    idx = np.arange(0, head_dim, 2)
    R[idx, idx] = c
    R[idx, idx + 1] = -s
    R[idx + 1, idx] = s
    R[idx + 1, idx + 1] = c
    return RotationMatrix(position, layer, R)


def default_alibi_slopes(num_heads: int) -> np.ndarray:
    h = np.arange(1, num_heads + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / num_heads)


def alibi_bias(length: int, slope: float, causal: bool = True) -> np.ndarray:
    """Entry [i, j] = slope * (i - j) for j <= i.

    Above the diagonal the entry is 0 for causal use and slope * |i - j|
    otherwise.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    dist = (i - j).astype(np.float64)
    if causal:
        return slope * np.where(j <= i, dist, 0.0)
    return slope * np.abs(dist)


# ---------------------------------------------------------------------------
# weight container

def read_container(manifest_path, weights_path) -> tuple[dict, dict[str, np.ndarray]]:
    """Decode a manifest + blob pair into (raw config dict, name -> tensor)."""
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise ManifestError("manifest must be an object with a 'tensors' list")
    try:
        blob = Path(weights_path).read_bytes()
    except OSError as exc:
        raise ManifestError(f"cannot read weights {weights_path}: {exc}") from None

    tensors = {}
    for entry in manifest["tensors"]:
        try:
            name, dtype = entry["name"], entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            offset, byte_len = int(entry["offset"]), int(entry["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed tensor entry {entry!r}: {exc}") from None
        if dtype != "f32":
            raise ManifestError(f"{name}: unsupported dtype {dtype!r}")
        if offset % 8:
            raise ManifestError(f"{name}: offset {offset} is not 8-byte aligned")
        if byte_len != 4 * math.prod(shape):
            raise ShapeMismatchError(f"{name}: byte_len {byte_len} does not match shape {list(shape)}")
        if offset + byte_len > len(blob):
            raise TruncatedBlobError(f"{name}: needs bytes up to {offset + byte_len}, blob has {len(blob)}")
        values = np.frombuffer(blob, dtype="<f4", count=math.prod(shape), offset=offset)
        tensors[name] = values.astype(np.float64).reshape(shape)
    return manifest.get("config", {}), tensors


def write_container(manifest_path, weights_path, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        data = arr.tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                        "offset": offset, "byte_len": len(data)})
        pad = (-len(data)) % 8
        chunks.append(data + b"\0" * pad)
        offset += len(data) + pad
    manifest = {"config": dict(config), "tensors": entries}
    Path(manifest_path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    Path(weights_path).write_bytes(b"".join(chunks))


def load_model(manifest_path, weights_path=None) -> tuple[ModelConfig, WeightStore]:
    """Load a model; ``manifest_path`` may also be a model directory."""
    if weights_path is None:
        root = Path(manifest_path)
        manifest_path, weights_path = root / MANIFEST_NAME, root / WEIGHTS_NAME
    raw_config, tensors = read_container(manifest_path, weights_path)
    try:
        config = ModelConfig.from_dict(raw_config)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"invalid config: {exc}") from None
    return config, WeightStore(tensors).validate(config)


def save_model(directory, config: ModelConfig, weights: WeightStore) -> Path:
    root = Path(directory)
    os.makedirs(root, exist_ok=True)
    weights.validate(config)
    write_container(root / MANIFEST_NAME, root / WEIGHTS_NAME, config.to_dict(), weights)
    return root


# ---------------------------------------------------------------------------
# forward pass

def positional_table(config: ModelConfig, weights: WeightStore) -> np.ndarray:
    if config.pe_kind is PEKind.SINUSOIDAL:
        return sinusoidal_table(config.max_seq_len, config.d_model)
    return weights["pos_embed"]


def _attention(tape: Tape, config: ModelConfig, weights: WeightStore, x: TapeNode, k: int,
               rotations: list[TapeNode]) -> TapeNode:
    p = f"layers.{k}.attn."
    L, hd = x.shape[0], config.head_dim
    q = tape.linear(x, weights[p + "q.weight"], weights[p + "q.bias"], name=p + "q")
    kk = tape.linear(x, weights[p + "k.weight"], weights[p + "k.bias"], name=p + "k")
    v = tape.linear(x, weights[p + "v.weight"], weights[p + "v.bias"], name=p + "v")
    slopes = weights.get("alibi_slopes")
    if slopes is None:
        slopes = default_alibi_slopes(config.num_heads)
    mask = True if config.causal else None

    heads = []
    for h in range(config.num_heads):
        cols = (h * hd, (h + 1) * hd)
        if config.pe_kind is PEKind.ROPE:
            q_h = _rotate(tape, q, rotations, cols, L)
            k_h = _rotate(tape, kk, rotations, cols, L)
        else:
            q_h = tape.slice(q, cols=cols)
            k_h = tape.slice(kk, cols=cols)
        scores = tape.matmul(q_h, k_h, transpose_b=True)
        scores = tape.scale(scores, 1.0 / math.sqrt(hd), mask=None if config.attention_softmax else mask)
        if config.pe_kind is PEKind.ALIBI:
            bias = tape.leaf(alibi_bias(L, float(slopes[h]), causal=config.causal),
                             role="alibi", layer=k, head=h, slope=float(slopes[h]))
            scores = tape.add(scores, bias)
        probs = tape.softmax_rows(scores, mask=mask) if config.attention_softmax else scores
        heads.append(tape.matmul(probs, tape.slice(v, cols=cols)))
    merged = tape.concat(heads, axis=1)
    return tape.linear(merged, weights[p + "o.weight"], weights[p + "o.bias"], name=p + "o")


def _rotate(tape: Tape, proj: TapeNode, rotations: list[TapeNode], cols, L: int) -> TapeNode:
    rotated = [tape.matmul(rotations[i], tape.slice(proj, rows=i, cols=cols, as_column=True)) for i in range(L)]
    return tape.concat(rotated, as_rows=True)


def _ffn(tape: Tape, config: ModelConfig, weights: WeightStore, x: TapeNode, k: int) -> TapeNode:
    p = f"layers.{k}.ffn."
    h = tape.linear(x, weights[p + "w1"], weights[p + "b1"], name=p + "w1")
    h = tape.activation(config.activation, h)
    return tape.linear(h, weights[p + "w2"], weights[p + "b2"], name=p + "w2")


def forward(config: ModelConfig, weights: WeightStore, tokens: Sequence[int],
            zero_positions: Iterable[int] = ()) -> tuple[np.ndarray, ForwardTrace]:
    """Run the model on one token sequence.

    ``zero_positions`` replaces the token embedding at those positions with
    zeros (positional information is kept).
    Returns the [L x V] logits and the recorded trace.
    """
    tokens = [int(t) for t in tokens]
    L = len(tokens)
    if L == 0:
        raise LengthError("empty token sequence")
    if L > config.max_seq_len:
        raise LengthError(f"sequence of length {L} exceeds max_seq_len {config.max_seq_len}")

    tape = Tape()
    x = tape.embed_lookup(weights["tok_embed"], tokens, zero_positions, role="semantic")
    if config.pe_kind.input_level:
        pe = tape.leaf(positional_table(config, weights)[:L], role="pe_input", layer=0)
        x = tape.add(x, pe)

    for k in range(config.num_layers):
        rotations = []
        if config.pe_kind is PEKind.ROPE:
            rotations = [tape.leaf(rope_matrix(i, config.head_dim, k).matrix, role="rope", layer=k, position=i)
                         for i in range(L)]
        p = f"layers.{k}."
        if config.norm_position == "post":
            a = _attention(tape, config, weights, x, k, rotations)
            x = tape.layer_norm(tape.add(x, a), weights[p + "ln1.gamma"], weights[p + "ln1.beta"])
            f = _ffn(tape, config, weights, x, k)
            x = tape.layer_norm(tape.add(x, f), weights[p + "ln2.gamma"], weights[p + "ln2.beta"])
        else:
            h = tape.layer_norm(x, weights[p + "ln1.gamma"], weights[p + "ln1.beta"])
            x = tape.add(x, _attention(tape, config, weights, h, k, rotations))
            h = tape.layer_norm(x, weights[p + "ln2.gamma"], weights[p + "ln2.beta"])
            x = tape.add(x, _ffn(tape, config, weights, h, k))
    if config.norm_position == "pre":
        x = tape.layer_norm(x, weights["ln_f.gamma"], weights["ln_f.beta"])
    logits = tape.linear(x, weights["head.weight"], weights["head.bias"], name="head")
    trace = tape.finish(logits)
    return np.array(logits.output), trace


def find_node(trace: ForwardTrace, name: str) -> TapeNode:
    for node in trace.nodes:
        if node.metadata.get("name") == name:
            return node
    raise KeyError(name)
