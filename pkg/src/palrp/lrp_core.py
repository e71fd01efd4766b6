"""Baseline relevance rules and the reverse pass over a :class:`ForwardTrace`.

Rule set (per node kind):

* ``Linear``            epsilon rule; the bias absorbs its share and forwards nothing
* ``Add``               epsilon split proportional to each summand
* ``MatMul`` / ``Mul``  uniform rule: each operand receives half of the output relevance
* ``SoftmaxRows``       input-times-Jacobian linearization
* ``Norm``, ``Activation``, ``Scale``   identity
* ``Concat`` / ``Slice`` routing only
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, UnsupportedOpError
from .tensor_tape import ForwardTrace, Kind, TapeNode, as_tensor, index_spec

NodeRelevance = dict[int, np.ndarray]
SinkHook = Callable[[TapeNode, np.ndarray], None]


@dataclass(frozen=True)
class LRPConfig:
    epsilon: float = 1e-6
    signed_stabilizer: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def stabilize(self, denominator: np.ndarray) -> np.ndarray:
        """Return ``denominator + eps``, with eps taking the denominator's sign if configured."""
        if self.signed_stabilizer:
            return denominator + self.epsilon * np.where(denominator >= 0, 1.0, -1.0)
        return denominator + self.epsilon


DEFAULT_CONFIG = LRPConfig()


def init_relevance(logits, position: int, target_class: int) -> np.ndarray:
    logits = as_tensor(logits)
    if not (0 <= position < logits.shape[0] and 0 <= target_class < logits.shape[1]):
        raise IndexError(f"(position={position}, class={target_class}) outside logits of shape {logits.shape}")
    seed = np.zeros_like(logits)
    seed[position, target_class] = logits[position, target_class]
    return seed


def rule_add_split(r_out, a, b, cfg: LRPConfig = DEFAULT_CONFIG):
    r_out, a, b = as_tensor(r_out), as_tensor(a), as_tensor(b)
    b_full = np.broadcast_to(b, a.shape)
    z = r_out / cfg.stabilize(a + b_full)
    r_a = a * z
    r_b = b_full * z
    if b.shape != a.shape:
        r_b = r_b.sum(axis=0)
    return r_a, r_b


def rule_mul_split(r_out, a, b, cfg: LRPConfig = DEFAULT_CONFIG):
    r_out, a, b = as_tensor(r_out), as_tensor(a), as_tensor(b)
    c = a * b
    half = 0.5 * c * r_out / cfg.stabilize(c)
    r_b = half if b.shape == a.shape else half.sum(axis=0)
    return half, r_b


def rule_matmul_split(r_c, a, b, cfg: LRPConfig = DEFAULT_CONFIG, transpose_b: bool = False):
    """Uniform rule for ``c = a @ b`` (or ``a @ b.T``).

    r_a[i,k] = sum_j a[i,k] b[k,j] / (c[i,j] + eps) * r_c[i,j] / 2, and
    symmetrically for ``b``.
    """
    r_c, a, b = as_tensor(r_c), as_tensor(a), as_tensor(b)
    rhs = b.T if transpose_b else b
    if a.shape[1] != rhs.shape[0] or r_c.shape != (a.shape[0], rhs.shape[1]):
        raise DimensionError("relevance / operand shapes inconsistent with a matrix product")
    z = 0.5 * r_c / cfg.stabilize(a @ rhs)
    r_a = a * (z @ rhs.T)
    r_rhs = rhs * (a.T @ z)
    return r_a, (r_rhs.T if transpose_b else r_rhs)


def rule_softmax(r_s, x, s):
    """r_x[j] = x[j] * (r_s[j] - s[j] * sum_i r_s[i]), row by row."""
    r_s, x, s = as_tensor(r_s), as_tensor(x), as_tensor(s)
    return x * (r_s - s * r_s.sum(axis=-1, keepdims=True))


def rule_identity(r_out):
    return as_tensor(r_out)


def rule_epsilon_linear(r_y, x, W, b=None, cfg: LRPConfig = DEFAULT_CONFIG):
    r_y, x, W = as_tensor(r_y), as_tensor(x), as_tensor(W)
    y = x @ W
    if b is not None:
        y = y + as_tensor(b)
    z = r_y / cfg.stabilize(y)
    return x * (z @ W.T)


def _rule_concat(r, node: TapeNode, operands: list[TapeNode]):
    if node.metadata["as_rows"]:
        return [r[i].reshape(op.shape) for i, op in enumerate(operands)]
    sizes = np.cumsum([op.shape[node.metadata["axis"]] for op in operands])[:-1]
    return np.split(r, sizes, axis=node.metadata["axis"])


def _rule_slice(r, node: TapeNode, operand: TapeNode):
    m = node.metadata
    full = np.zeros(operand.shape)
    region = full[index_spec(m["rows"]), index_spec(m["cols"])]
    full[index_spec(m["rows"]), index_spec(m["cols"])] = r.reshape(region.shape)
    return full


def propagate_node(node: TapeNode, r: np.ndarray, operands: list[TapeNode], cfg: LRPConfig) -> list[np.ndarray]:
    """Relevance of each operand of ``node`` given relevance ``r`` of its output."""
    kind = node.kind
    vals = [op.output for op in operands]
    if kind is Kind.LINEAR:
        return [rule_epsilon_linear(r, vals[0], node.metadata["weight"], node.metadata["bias"], cfg)]
    if kind is Kind.ADD:
        return list(rule_add_split(r, *vals, cfg))
    if kind is Kind.MUL:
        return list(rule_mul_split(r, *vals, cfg))
    if kind is Kind.MATMUL:
        return list(rule_matmul_split(r, *vals, cfg, transpose_b=node.metadata["transpose_b"]))
    if kind is Kind.SOFTMAX_ROWS:
        return [rule_softmax(r, vals[0], node.output)]
    if kind in (Kind.NORM, Kind.ACTIVATION, Kind.SCALE):
        return [rule_identity(r)]
    if kind is Kind.CONCAT:
        return _rule_concat(r, node, operands)
    if kind is Kind.SLICE:
        return [_rule_slice(r, node, operands[0])]
    raise UnsupportedOpError(f"no relevance rule for node kind {getattr(kind, 'value', kind)!r}")


def backpropagate(trace: ForwardTrace, seed, cfg: LRPConfig = DEFAULT_CONFIG,
                  sink_hooks: Mapping[int, SinkHook] | None = None,
                  balance: dict[str, float] | None = None) -> NodeRelevance:
    """Propagate ``seed`` (relevance of the output node) back to every leaf.

    Relevance arriving at a node from several consumers is summed. Leaves
    listed in ``sink_hooks`` have their hook called with their final
    relevance; every leaf gets an entry in the result (zeros if unreached).

    If ``balance`` is given, it is filled with the relevance each node kind
    failed to pass on (output total minus operand totals), keyed by kind name.
    """
    if isinstance(seed, Mapping):
        if set(seed) != {trace.output_id}:
            raise ValueError("seed must be keyed on the trace output node")
        seed = seed[trace.output_id]
    seed = as_tensor(seed)
    if seed.shape != trace.output.shape:
        raise DimensionError(f"seed shape {seed.shape} differs from output shape {trace.output.shape}")

    rel: NodeRelevance = {trace.output_id: seed.copy()}
    for node in reversed(trace.nodes):
        r = rel.get(node.id)
        if r is None or not node.operand_ids:
            continue
        operands = [trace[i] for i in node.operand_ids]
        r_ops = propagate_node(node, r, operands, cfg)
        if balance is not None:
            lost = float(r.sum() - sum(float(np.sum(x)) for x in r_ops))
            balance[node.kind.value] = balance.get(node.kind.value, 0.0) + lost
        for op, r_op in zip(operands, r_ops):
            if op.id in rel:
                rel[op.id] = rel[op.id] + r_op
            else:
                rel[op.id] = np.array(r_op, dtype=np.float64)
    for leaf_id in trace.input_ids:
        rel.setdefault(leaf_id, np.zeros(trace[leaf_id].shape))
    for leaf_id, hook in (sink_hooks or {}).items():
        hook(trace[leaf_id], rel[leaf_id])
    return rel
