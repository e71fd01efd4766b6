"""Seeded model fixtures: random models and the all-positional ALiBi construction."""

from __future__ import annotations

import numpy as np

from ..model import Model, ModelConfig, PEKind, WeightStore, expected_shapes


def _f32(x) -> np.ndarray:
    # every fixture value survives a float32 container round trip unchanged
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def random_model(seed: int, pe_kind: PEKind | str = PEKind.ROPE, *, num_layers: int = 2, num_heads: int = 2,
                 d_model: int = 8, d_ff: int = 16, vocab_size: int = 11, max_seq_len: int = 8,
                 causal: bool | None = None, bias_free: bool = False, attention_softmax: bool = True,
                 norm_position: str = "post", activation: str = "gelu") -> Model:
    """Random weights drawn from ``numpy.random.default_rng(seed)``.

    ALiBi models are causal by default, all others bidirectional. With
    ``bias_free`` every bias and LayerNorm shift is zero.
    """
    pe_kind = PEKind(pe_kind)
    if causal is None:
        causal = pe_kind is PEKind.ALIBI
    config = ModelConfig(num_layers, num_heads, d_model, d_ff, vocab_size, max_seq_len, pe_kind, causal,
                         norm_position, activation, attention_softmax)
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gamma"):
            value = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith((".beta", ".bias")) or name.endswith((".b1", ".b2")):
            value = np.zeros(shape) if bias_free else 0.1 * rng.standard_normal(shape)
        elif name in ("tok_embed", "pos_embed"):
            value = rng.standard_normal(shape)
        else:
            value = rng.standard_normal(shape) / np.sqrt(shape[0])
        weights[name] = _f32(value)
    return Model(config, WeightStore(weights).validate(config))


def random_tokens(seed: int, config: ModelConfig, length: int | None = None) -> list[int]:
    rng = np.random.default_rng(seed)
    length = config.max_seq_len if length is None else length
    return [int(t) for t in rng.integers(0, config.vocab_size, size=length)]


LEMMA3_VALUE_BIAS = (1.0, -1.0)


def lemma3_fixture() -> tuple[ModelConfig, WeightStore, list[int]]:
    """Single causal ALiBi layer whose output depends on position only.

    Token embeddings, W_Q, W_K and W_V are zero, the value projection carries
    a non-zero bias b and the slope is 1. Attention uses the masked scores
    directly, so the second row of the attention matrix is (1, 0) and the
    second attention output equals b. The feed-forward block is zero and the
    read-out head is the identity, so class 0 at position 1 has logit ~1.
    """
    D = 2
    config = ModelConfig(num_layers=1, num_heads=1, d_model=D, d_ff=2, vocab_size=2, max_seq_len=2,
                         pe_kind=PEKind.ALIBI, causal=True, attention_softmax=False)
    weights = {name: np.zeros(shape) for name, shape in expected_shapes(config).items()}
    weights["layers.0.attn.v.bias"] = np.array(LEMMA3_VALUE_BIAS)
    weights["layers.0.attn.o.weight"] = np.eye(D)
    for ln in ("ln1", "ln2"):
        weights[f"layers.0.{ln}.gamma"] = np.ones(D)
    weights["head.weight"] = np.eye(D)
    weights["alibi_slopes"] = np.array([1.0])
    return config, WeightStore(weights).validate(config), [0, 1]
