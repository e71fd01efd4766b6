"""Positional sinks and position-aware relevance rules.

Relevance that the baseline rules route into positional leaves is captured
here instead of being discarded:

* input-level tables (learnable / sinusoidal): the addition split at the
  model input, one sink of width D;
* RoPE: the relevance of each rotation matrix R_{i,k}, accumulated over the
  query and key products of every head, flattened to head_dim**2 values;
* ALiBi: the relevance of each bias entry, redistributed to the two
  position indices it was computed from, one sink of width L.

Sinks are kept per layer and combined with the semantic relevance by a
positive-part sum.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, RegistryError
from .lrp_core import (
    DEFAULT_CONFIG,
    LRPConfig,
    backpropagate,
    init_relevance,
    rule_add_split,
    rule_matmul_split,
)
from .model import ModelConfig, PEKind, WeightStore, forward
from .tensor_tape import ForwardTrace, TapeNode, as_tensor


class Method(str, enum.Enum):
    PA_LRP = "pa-lrp"
    BASELINE = "baseline"
    PE_ONLY = "pe-only"


@dataclass(frozen=True)
class SinkEntry:
    layer: int
    kind: str  # "pe_input" | "rope" | "alibi"
    position: int | None = None
    head: int | None = None


SinkRegistry = dict[int, SinkEntry]


def build_sink_registry(trace: ForwardTrace) -> SinkRegistry:
    registry = {}
    for node in trace.leaves():
        role = node.metadata.get("role")
        if role in ("pe_input", "rope", "alibi"):
            registry[node.id] = SinkEntry(node.metadata["layer"], role,
                                          node.metadata.get("position"), node.metadata.get("head"))
    return registry


@dataclass
class RelevanceMap:
    method: Method
    tokens: list[int]
    semantic: np.ndarray
    positional_sinks: list[np.ndarray]
    per_token: np.ndarray
    seed_total: float = 0.0
    position: int = 0
    target_class: int = 0
    pe_kind: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def semantic_sum(self) -> np.ndarray:
        return self.semantic.sum(axis=1)

    @property
    def sink_sums(self) -> list[np.ndarray]:
        return [s.sum(axis=1) for s in self.positional_sinks]

    def raw_total(self) -> float:
        return float(self.semantic.sum() + sum(s.sum() for s in self.positional_sinks))

    def to_dict(self, full: bool = True) -> dict:
        d = {
            "method": self.method.value,
            "pe_kind": self.pe_kind,
            "tokens": list(self.tokens),
            "position": self.position,
            "target_class": self.target_class,
            "seed_total": self.seed_total,
            "per_token": self.per_token,
            "semantic_sum": self.semantic_sum,
            "sink_sums": self.sink_sums,
        }
        if "relevance_lost" in self.extras:
            d["relevance_lost"] = self.extras["relevance_lost"]
        if full:
            d["semantic"] = self.semantic
            d["positional_sinks"] = self.positional_sinks
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RelevanceMap":
        L = len(d["tokens"])
        semantic = as_tensor(d["semantic"]) if "semantic" in d else as_tensor(d["semantic_sum"]).reshape(L, 1)
        if "positional_sinks" in d:
            sinks = [as_tensor(s).reshape(L, -1) for s in d["positional_sinks"]]
        else:
            sinks = [as_tensor(s).reshape(L, 1) for s in d.get("sink_sums", [])]
        return cls(Method(d["method"]), [int(t) for t in d["tokens"]], semantic, sinks,
                   as_tensor(d["per_token"]), float(d.get("seed_total", 0.0)),
                   int(d.get("position", 0)), int(d.get("target_class", 0)), d.get("pe_kind", ""),
                   {"relevance_lost": dict(d["relevance_lost"])} if "relevance_lost" in d else {})


# ---------------------------------------------------------------------------
# rules

def input_pe_split(r_z, pe, embed, cfg: LRPConfig = DEFAULT_CONFIG):
    """Split the relevance of ``z = pe + embed`` into (r_pe, r_embed)."""
    r_pe, r_embed = rule_add_split(r_z, pe, embed, cfg)
    return r_pe, r_embed


def rope_sink(r_qrot, r_krot, rotations: Mapping[int, np.ndarray], q, k, cfg: LRPConfig = DEFAULT_CONFIG):
    """Sink rows [L x head_dim**2] for one head of one layer.

    ``q``/``k`` are the un-rotated per-position vectors ([L x head_dim]),
    ``r_qrot``/``r_krot`` the relevance of the rotated ones, and
    ``rotations`` maps position -> rotation matrix. Each product R_i q_i and
    R_i k_i is split with the uniform matrix-product rule; the R-side shares
    of both products are summed and flattened.
    """
    r_qrot, r_krot, q, k = (as_tensor(a) for a in (r_qrot, r_krot, q, k))
    if not (r_qrot.shape == r_krot.shape == q.shape == k.shape):
        raise DimensionError("rope_sink operands must share one [L x head_dim] shape")
    L, hd = q.shape
    rows = np.zeros((L, hd * hd))
    for i in range(L):
        if i not in rotations:
            raise RegistryError(f"no rotation matrix registered for position {i}")
        R = as_tensor(rotations[i])
        r_from_q, _ = rule_matmul_split(r_qrot[i][:, None], R, q[i][:, None], cfg)
        r_from_k, _ = rule_matmul_split(r_krot[i][:, None], R, k[i][:, None], cfg)
        rows[i] = (r_from_q + r_from_k).reshape(-1)
    return rows


def alibi_position_split(r_bias, cfg: LRPConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Distribute bias-entry relevance onto the two positions of each pair.

    For the entry pairing positions p > q (1-based) the bias is proportional
    to p - q = p + (-q), so the addition rule gives
    R(p) = p * R / (p - q + eps) and R(q) = -q * R / (p - q + eps).
    Result[t, u] collects what token t receives from its pairing with u.
    """
    r_bias = as_tensor(r_bias)
    L = r_bias.shape[0]
    pos = np.arange(1, L + 1, dtype=np.float64)
    hi = np.maximum(pos[:, None], pos[None, :])
    lo = np.minimum(pos[:, None], pos[None, :])
    off = ~np.eye(L, dtype=bool)
    denom = cfg.stabilize(hi - lo)
    share_hi = np.where(off, hi * r_bias / denom, 0.0)
    share_lo = np.where(off, -lo * r_bias / denom, 0.0)
    # entry [i, j] with i > j: row token i is the larger position
    upper = pos[:, None] >= pos[None, :]
    out = np.zeros((L, L))
    out += np.where(upper, share_hi, share_lo)          # token i paired with j
    out += np.where(upper, share_lo, share_hi).T        # token j paired with i
    return out


def alibi_sink(r_attn_scores, scores, bias, cfg: LRPConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Sink rows [L x L] for one ALiBi head: split A' = A + P, then split P by position."""
    _, r_bias = rule_add_split(r_attn_scores, scores, bias, cfg)
    return alibi_position_split(r_bias, cfg)


def aggregate_positive(semantic, positional_sinks: Sequence[np.ndarray]) -> np.ndarray:
    semantic = as_tensor(semantic)
    total = np.maximum(semantic, 0.0).sum(axis=1)
    for sink in positional_sinks:
        sink = as_tensor(sink)
        if sink.shape[0] != semantic.shape[0]:
            raise DimensionError("sink rows must match the number of tokens")
        total = total + np.maximum(sink, 0.0).reshape(sink.shape[0], -1).sum(axis=1)
    return total


# ---------------------------------------------------------------------------
# explanation

def collect_sinks(config: ModelConfig, trace: ForwardTrace, leaf_relevance: Mapping[int, np.ndarray],
                  registry: SinkRegistry, cfg: LRPConfig) -> list[np.ndarray]:
    L = trace[trace.output_id].shape[0]
    if config.pe_kind.input_level:
        (leaf_id,) = [i for i, e in registry.items() if e.kind == "pe_input"]
        return [np.array(leaf_relevance[leaf_id])]
    hd = config.head_dim
    width = hd * hd if config.pe_kind is PEKind.ROPE else L
    sinks = [np.zeros((L, width)) for _ in range(config.num_layers)]
    for leaf_id, entry in registry.items():
        r = leaf_relevance[leaf_id]
        if entry.kind == "rope":
            sinks[entry.layer][entry.position] += r.reshape(-1)
        elif entry.kind == "alibi":
            sinks[entry.layer] += alibi_position_split(r, cfg)
    return sinks


def explain(model, tokens: Sequence[int], position: int | None = None, target_class: int | None = None,
            method: Method | str = Method.PA_LRP, cfg: LRPConfig = DEFAULT_CONFIG,
            zero_positions=()) -> RelevanceMap:
    """Explain the logit at (``position``, ``target_class``).

    ``position`` defaults to the last token and ``target_class`` to the
    predicted class there.
    """
    config, weights = model
    method = Method(method)
    logits, trace = forward(config, weights, tokens, zero_positions)
    if position is None:
        position = len(tokens) - 1
    if target_class is None:
        target_class = int(np.argmax(logits[position]))
    seed = init_relevance(logits, position, target_class)

    registry = build_sink_registry(trace)
    captured: dict[int, np.ndarray] = {}

    def capture(node: TapeNode, r: np.ndarray) -> None:
        captured[node.id] = np.array(r)

    lost: dict[str, float] = {}
    rel = backpropagate(trace, seed, cfg, sink_hooks={i: capture for i in registry}, balance=lost)
    (embed,) = trace.leaves("semantic")
    semantic = np.array(rel[embed.id])
    sinks = collect_sinks(config, trace, captured, registry, cfg)

    if method is Method.BASELINE:
        sinks = [np.zeros_like(s) for s in sinks]
        per_token = aggregate_positive(semantic, [])
    elif method is Method.PE_ONLY:
        per_token = aggregate_positive(np.zeros_like(semantic), sinks)
    else:
        per_token = aggregate_positive(semantic, sinks)
    return RelevanceMap(method, [int(t) for t in tokens], semantic, sinks, per_token,
                        float(logits[position, target_class]), position, target_class, config.pe_kind.value,
                        {"relevance_lost": dict(sorted(lost.items()))})


def trace_relevance(model, tokens, position=None, target_class=None, cfg: LRPConfig = DEFAULT_CONFIG):
    """Forward + full relevance pass; returns (trace, node relevance, seed)."""
    config, weights = model
    logits, trace = forward(config, weights, tokens)
    if position is None:
        position = len(tokens) - 1
    if target_class is None:
        target_class = int(np.argmax(logits[position]))
    seed = init_relevance(logits, position, target_class)
    return trace, backpropagate(trace, seed, cfg), seed
