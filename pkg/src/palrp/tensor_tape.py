"""Dense float64 kernels and the recording tape used by relevance propagation.

Tensors are plain ``numpy`` float64 arrays. The kernels below are pure
functions; :class:`Tape` wraps each of them so that every intermediate
activation is saved in a :class:`TapeNode` together with the ids of its
operands. Backward relevance rules only ever read these saved values.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateRowError, DimensionError, NonFiniteError, VocabularyError

MASK_VALUE = 1e9
LAYER_NORM_EPS = 1e-5


class Kind(str, enum.Enum):
    LEAF = "Leaf"
    EMBED_LOOKUP = "EmbedLookup"
    MATMUL = "MatMul"
    LINEAR = "Linear"
    ADD = "Add"
    MUL = "Mul"
    SOFTMAX_ROWS = "SoftmaxRows"
    NORM = "Norm"
    ACTIVATION = "Activation"
    SCALE = "Scale"
    CONCAT = "Concat"
    SLICE = "Slice"


LEAF_KINDS = frozenset({Kind.LEAF, Kind.EMBED_LOOKUP})


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite value in {what}")
    return x


# ---------------------------------------------------------------------------
# kernels

def matmul(a, b, transpose_b: bool = False) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    rhs = b.T if transpose_b else b
    if a.shape[1] != rhs.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {rhs.shape}")
    return check_finite(a @ rhs, "matmul")


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape or (b.ndim == a.ndim - 1 and b.shape == a.shape[1:])


def elementwise(kind: str, a, b) -> np.ndarray:
    """``Add`` or ``Mul``; ``b`` may omit the leading axis of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a, b):
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")
    kind = Kind(kind)
    if kind not in (Kind.ADD, Kind.MUL):
        raise ValueError(f"elementwise kind must be Add or Mul, not {kind.value}")
    with np.errstate(over="ignore", invalid="ignore"):  # reported by check_finite instead
        out = a + b if kind is Kind.ADD else a * b
    return check_finite(out, kind.value)


def causal_forbidden(rows: int, cols: int) -> np.ndarray:
    """Boolean matrix, True where column j > row i."""
    return np.triu(np.ones((rows, cols), dtype=bool), k=1)


def _resolve_mask(mask, shape) -> np.ndarray | None:
    if mask is None or mask is False:
        return None
    if mask is True:
        return causal_forbidden(*shape)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def softmax_rows(x, mask=None) -> np.ndarray:
    """Row-wise softmax.

    ``mask`` is ``None``, ``True`` for a causal mask, or a boolean array of
    forbidden entries. Forbidden entries get ``-1e9`` added before the
    max-shifted exponentials.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows expects an r x c matrix with c >= 1, got {x.shape}")
    check_finite(x, "softmax input")
    forbidden = _resolve_mask(mask, x.shape)
    logits = x
    if forbidden is not None:
        if np.any(forbidden.all(axis=1)):
            raise DegenerateRowError("a softmax row has every column masked")
        logits = x - MASK_VALUE * forbidden
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"layer_norm expects L x D with D >= 2, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError("gamma/beta must have shape (D,)")
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    return check_finite((x - mean) / np.sqrt(var + eps) * gamma + beta, "layer_norm")


def gelu(x) -> np.ndarray:
    x = as_tensor(x)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


_ACTIVATIONS = {"gelu": gelu, "relu": relu}


def activation(kind: str, x) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return check_finite(fn(x), kind)


def embed_lookup(table, ids: Sequence[int], zero_positions: Iterable[int] = ()) -> np.ndarray:
    """Gather rows of ``table``; rows listed in ``zero_positions`` are zeroed."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError("embedding table must be V x D")
    ids = [int(i) for i in ids]
    for i in ids:
        if not 0 <= i < table.shape[0]:
            raise VocabularyError(f"token id {i} outside vocabulary of size {table.shape[0]}")
    out = table[ids].copy() if ids else np.zeros((0, table.shape[1]))
    for p in zero_positions:
        out[p] = 0.0
    return out


def scale(x, factor: float, mask=None) -> np.ndarray:
    """Multiply by a constant; optional boolean ``mask`` zeroes forbidden entries."""
    x = as_tensor(x)
    out = x * factor
    forbidden = _resolve_mask(mask, x.shape) if x.ndim == 2 else None
    if forbidden is not None:
        out = np.where(forbidden, 0.0, out)
    return check_finite(out, "scale")


def linear(x, weight, bias=None) -> np.ndarray:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply {weight.shape} to {x.shape}")
    y = x @ weight
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError("bias must match the output width")
        y = y + bias
    return check_finite(y, "linear")


def concat(parts: Sequence[np.ndarray], axis: int = 0, as_rows: bool = False) -> np.ndarray:
    """Concatenate along ``axis``; with ``as_rows`` each part is flattened to one row."""
    parts = [as_tensor(p) for p in parts]
    if as_rows:
        return np.stack([p.reshape(-1) for p in parts], axis=0)
    try:
        return np.concatenate(parts, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None


def slice_(x, rows=None, cols=None, as_column: bool = False) -> np.ndarray:
    """Take ``x[rows, cols]``; ``rows``/``cols`` are ``None``, an int, or a (start, stop) pair.

    With ``as_column`` the result is reshaped to an (n x 1) column.
    """
    x = as_tensor(x)
    out = x[index_spec(rows), index_spec(cols)]
    out = np.atleast_2d(out)
    if as_column:
        out = out.reshape(-1, 1)
    return out.copy()


def index_spec(spec):
    if spec is None:
        return slice(None)
    if isinstance(spec, (int, np.integer)):
        return slice(int(spec), int(spec) + 1)
    start, stop = spec
    return slice(start, stop)


# ---------------------------------------------------------------------------
# tape

@dataclass(eq=False)
class TapeNode:
    id: int
    kind: Kind
    operand_ids: tuple[int, ...]
    output: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.output.shape


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Immutable, topologically ordered record of one forward pass."""

    nodes: tuple[TapeNode, ...]
    input_ids: tuple[int, ...]
    output_id: int

    def __getitem__(self, node_id: int) -> TapeNode:
        return self.nodes[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def output(self) -> np.ndarray:
        return self.nodes[self.output_id].output

    def leaves(self, role: str | None = None) -> list[TapeNode]:
        found = [self.nodes[i] for i in self.input_ids]
        if role is not None:
            found = [n for n in found if n.metadata.get("role") == role]
        return found

    def reachable(self) -> set[int]:
        seen = {self.output_id}
        stack = [self.output_id]
        while stack:
            for op in self.nodes[stack.pop()].operand_ids:
                if op not in seen:
                    seen.add(op)
                    stack.append(op)
        return seen

    def validate(self) -> None:
        """Check topological ordering, id consistency and reachability."""
        for pos, node in enumerate(self.nodes):
            if node.id != pos:
                raise ValueError(f"node at position {pos} carries id {node.id}")
            if any(op >= node.id for op in node.operand_ids):
                raise ValueError(f"node {node.id} refers to a later operand")
        reach = self.reachable()
        leaves = set(self.input_ids)
        orphans = [n.id for n in self.nodes if n.id not in reach and n.id not in leaves]
        if orphans:
            raise ValueError(f"unreachable non-leaf nodes: {orphans}")


class Tape:
    """Records kernel applications as :class:`TapeNode` objects."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.input_ids: list[int] = []

    def _record(self, kind: Kind, operands: Sequence[TapeNode], output: np.ndarray, **metadata) -> TapeNode:
        output = np.asarray(output, dtype=np.float64)
        output.flags.writeable = False
        node = TapeNode(len(self.nodes), kind, tuple(op.id for op in operands), output, metadata)
        self.nodes.append(node)
        if kind in LEAF_KINDS:
            self.input_ids.append(node.id)
        return node

    def leaf(self, value, **metadata) -> TapeNode:
        return self._record(Kind.LEAF, (), as_tensor(value).copy(), **metadata)

    def embed_lookup(self, table, ids, zero_positions=(), **metadata) -> TapeNode:
        table = as_tensor(table)
        zero_positions = tuple(int(p) for p in zero_positions)
        out = embed_lookup(table, ids, zero_positions)
        return self._record(Kind.EMBED_LOOKUP, (), out, table=table, ids=tuple(int(i) for i in ids),
                            zero_positions=zero_positions, **metadata)

    def matmul(self, a: TapeNode, b: TapeNode, transpose_b: bool = False) -> TapeNode:
        return self._record(Kind.MATMUL, (a, b), matmul(a.output, b.output, transpose_b), transpose_b=transpose_b)

    def linear(self, x: TapeNode, weight, bias=None, **metadata) -> TapeNode:
        weight = as_tensor(weight)
        bias = None if bias is None else as_tensor(bias)
        return self._record(Kind.LINEAR, (x,), linear(x.output, weight, bias), weight=weight, bias=bias, **metadata)

    def add(self, a: TapeNode, b: TapeNode) -> TapeNode:
        return self._record(Kind.ADD, (a, b), elementwise(Kind.ADD, a.output, b.output))

    def mul(self, a: TapeNode, b: TapeNode) -> TapeNode:
        return self._record(Kind.MUL, (a, b), elementwise(Kind.MUL, a.output, b.output))

    def softmax_rows(self, x: TapeNode, mask=None) -> TapeNode:
        return self._record(Kind.SOFTMAX_ROWS, (x,), softmax_rows(x.output, mask), mask=mask)

    def layer_norm(self, x: TapeNode, gamma, beta, eps: float = LAYER_NORM_EPS) -> TapeNode:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        return self._record(Kind.NORM, (x,), layer_norm(x.output, gamma, beta, eps), gamma=gamma, beta=beta, eps=eps)

    def activation(self, kind: str, x: TapeNode) -> TapeNode:
        return self._record(Kind.ACTIVATION, (x,), activation(kind, x.output), fn=kind.lower())

    def scale(self, x: TapeNode, factor: float, mask=None) -> TapeNode:
        return self._record(Kind.SCALE, (x,), scale(x.output, factor, mask), factor=float(factor), mask=mask)

    def concat(self, parts: Sequence[TapeNode], axis: int = 0, as_rows: bool = False) -> TapeNode:
        out = concat([p.output for p in parts], axis, as_rows)
        return self._record(Kind.CONCAT, parts, out, axis=axis, as_rows=as_rows)

    def slice(self, x: TapeNode, rows=None, cols=None, as_column: bool = False) -> TapeNode:
        out = slice_(x.output, rows, cols, as_column)
        return self._record(Kind.SLICE, (x,), out, rows=rows, cols=cols, as_column=as_column)

    def finish(self, output: TapeNode) -> ForwardTrace:
        trace = ForwardTrace(tuple(self.nodes), tuple(self.input_ids), output.id)
        trace.validate()
        return trace


def recompute(node: TapeNode, operands: Sequence[np.ndarray]) -> np.ndarray:
    """Re-run the kernel that produced ``node`` on the given operand values."""
    m = node.metadata
    kind = node.kind
    if kind is Kind.LEAF:
        return node.output
    if kind is Kind.EMBED_LOOKUP:
        return embed_lookup(m["table"], m["ids"], m["zero_positions"])
    if kind is Kind.MATMUL:
        return matmul(*operands, transpose_b=m["transpose_b"])
    if kind is Kind.LINEAR:
        return linear(operands[0], m["weight"], m["bias"])
    if kind in (Kind.ADD, Kind.MUL):
        return elementwise(kind, *operands)
    if kind is Kind.SOFTMAX_ROWS:
        return softmax_rows(operands[0], m["mask"])
    if kind is Kind.NORM:
        return layer_norm(operands[0], m["gamma"], m["beta"], m["eps"])
    if kind is Kind.ACTIVATION:
        return activation(m["fn"], operands[0])
    if kind is Kind.SCALE:
        return scale(operands[0], m["factor"], m["mask"])
    if kind is Kind.CONCAT:
        return concat(operands, m["axis"], m["as_rows"])
    if kind is Kind.SLICE:
        return slice_(operands[0], m["rows"], m["cols"], m["as_column"])
    raise ValueError(f"cannot recompute node kind {kind}")


def replay(trace: ForwardTrace) -> list[np.ndarray]:
    """Recompute every node from its operands' *saved* outputs."""
    return [recompute(n, [trace[i].output for i in n.operand_ids]) for n in trace.nodes]
