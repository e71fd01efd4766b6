"""Tiny synthetic classification tasks and a full-batch trainer.

Training runs through a float64 ``torch`` mirror of :func:`palrp.model.forward`
(learnable positional table, softmax attention); the trained parameters are
exported back into a :class:`~palrp.model.WeightStore`. Only the read-out at
the last position is trained.

By default every query projection matrix is held at zero, so each layer's
query is the learned bias alone and the read-out position asks the same
question regardless of its own content. Without this, the read-out row of the
positional table tends to soak up as much positional relevance as the copied
position does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingFailureError
from ..model import Model, ModelConfig, PEKind, WeightStore, expected_shapes
from .fixtures import _f32

TASKS = ("positional-copy", "bag-of-tokens")
HELDOUT_SEED_OFFSET = 10_000


def make_task_data(task: str, n: int, seq_len: int, vocab_size: int, seed: int):
    """Return (tokens [n x L] int array, labels [n]).

    positional-copy: uniform tokens, label = the token at position 0.
    bag-of-tokens: one token fills a strict majority of positions, label = that token.
    """
    rng = np.random.default_rng(seed)
    if task == "positional-copy":
        tokens = rng.integers(0, vocab_size, size=(n, seq_len))
        return tokens, tokens[:, 0].copy()
    if task == "bag-of-tokens":
        labels = rng.integers(0, vocab_size, size=n)
        tokens = rng.integers(0, vocab_size, size=(n, seq_len))
        majority = seq_len // 2 + 1
        for row, c in zip(tokens, labels):
            others = rng.integers(0, vocab_size - 1, size=seq_len)
            row[:] = np.where(others >= c, others + 1, others)
            row[rng.permutation(seq_len)[:majority]] = c
        return tokens, labels
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def toy_config(vocab_size: int = 6, seq_len: int = 6, d_model: int = 16, num_heads: int = 2,
               num_layers: int = 1, d_ff: int = 16) -> ModelConfig:
    return ModelConfig(num_layers, num_heads, d_model, d_ff, vocab_size, seq_len, PEKind.LEARNABLE,
                       causal=False, norm_position="pre", activation="relu")


# ---------------------------------------------------------------------------
# torch mirror

def _torch():
    import torch

    return torch


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".beta", ".bias", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        elif name in ("tok_embed", "pos_embed"):
            params[name] = rng.standard_normal(shape)
        else:
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return params


def torch_logits(config: ModelConfig, params: dict, tokens):
    """Batched logits [N x L x V] for integer ``tokens`` [N x L]."""
    torch = _torch()
    F = torch.nn.functional
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    N, L = tokens.shape
    x = params["tok_embed"][tokens]
    if config.pe_kind is PEKind.LEARNABLE:
        x = x + params["pos_embed"][:L]
    hd = config.head_dim
    act = F.relu if config.activation == "relu" else (lambda t: F.gelu(t))

    def ln(t, name):
        mean = t.mean(-1, keepdim=True)
        var = ((t - mean) ** 2).mean(-1, keepdim=True)
        return (t - mean) / torch.sqrt(var + 1e-5) * params[name + ".gamma"] + params[name + ".beta"]

    def attention(t, p):
        q = t @ params[p + "q.weight"] + params[p + "q.bias"]
        k = t @ params[p + "k.weight"] + params[p + "k.bias"]
        v = t @ params[p + "v.weight"] + params[p + "v.bias"]
        split = lambda z: z.reshape(N, L, config.num_heads, hd).transpose(1, 2)
        scores = split(q) @ split(k).transpose(-1, -2) / math.sqrt(hd)
        if config.causal:
            forbidden = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
            scores = scores - 1e9 * forbidden
        out = torch.softmax(scores, dim=-1) @ split(v)
        out = out.transpose(1, 2).reshape(N, L, config.d_model)
        return out @ params[p + "o.weight"] + params[p + "o.bias"]

    def ffn(t, p):
        return act(t @ params[p + "w1"] + params[p + "b1"]) @ params[p + "w2"] + params[p + "b2"]

    for k in range(config.num_layers):
        p = f"layers.{k}."
        if config.norm_position == "post":
            x = ln(x + attention(x, p + "attn."), p + "ln1")
            x = ln(x + ffn(x, p + "ffn."), p + "ln2")
        else:
            x = x + attention(ln(x, p + "ln1"), p + "attn.")
            x = x + ffn(ln(x, p + "ln2"), p + "ffn.")
    if config.norm_position == "pre":
        x = ln(x, "ln_f")
    return x @ params["head.weight"] + params["head.bias"]


def readout_loss(config: ModelConfig, params: dict, tokens, labels):
    torch = _torch()
    logits = torch_logits(config, params, tokens)[:, -1, :]
    return torch.nn.functional.cross_entropy(logits, torch.as_tensor(np.asarray(labels), dtype=torch.long))


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)
    accuracy: float = 0.0
    heldout_accuracy: float = 0.0


def accuracy(model: Model, tokens, labels) -> float:
    params = {k: _torch().as_tensor(v) for k, v in model.weights.items()}
    logits = torch_logits(model.config, params, tokens)[:, -1, :].detach().numpy()
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def train_toy_classifier(task: str = "positional-copy", seed: int = 0, epochs: int = 2000, *,
                         config: ModelConfig | None = None, n_train: int = 256, lr: float = 0.01,
                         positional: str = "learned", target_accuracy: float | None = 0.95,
                         constant_query: bool = True, n_heldout: int = 512,
                         tol_loss: float = 1e-3) -> TrainResult:
    """Full-batch Adam on ``n_train`` synthetic examples.

    ``positional="zero"`` freezes the positional table at zero (ablation);
    ``constant_query`` freezes every ``attn.q.weight`` at zero.
    Raises :class:`TrainingFailureError` if ``target_accuracy`` is set and the
    train accuracy falls short. ``heldout_accuracy`` is measured on
    ``n_heldout`` fresh examples. Stops early once the loss falls below ``tol_loss``.
    """
    torch = _torch()
    config = config or toy_config()
    tokens, labels = make_task_data(task, n_train, config.max_seq_len, config.vocab_size, seed)
    init = init_params(config, seed + 1)
    if positional not in ("learned", "zero"):
        raise ValueError("positional must be 'learned' or 'zero'")
    frozen = {"pos_embed"} if positional == "zero" else set()
    if constant_query:
        frozen |= {f"layers.{k}.attn.q.weight" for k in range(config.num_layers)}
    for name in frozen:
        init[name] = np.zeros_like(init[name])
    params = {k: torch.tensor(v, dtype=torch.float64, requires_grad=k not in frozen) for k, v in init.items()}
    opt = torch.optim.Adam([p for p in params.values() if p.requires_grad], lr=lr)
    losses = []
    for _ in range(epochs):
        opt.zero_grad()
        loss = readout_loss(config, params, tokens, labels)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if losses[-1] < tol_loss:
            break

    weights = WeightStore({k: _f32(v.detach().numpy()) for k, v in params.items()}).validate(config)
    model = Model(config, weights)
    acc = accuracy(model, tokens, labels)
    heldout = accuracy(model, *make_task_data(task, n_heldout, config.max_seq_len, config.vocab_size,
                                              seed + HELDOUT_SEED_OFFSET))
    if target_accuracy is not None and acc < target_accuracy:
        raise TrainingFailureError(
            f"{task}: train accuracy {acc:.3f} below {target_accuracy} after {len(losses)} epochs", losses)
    return TrainResult(model, losses, acc, heldout)
