"""Transformer encoder over behavior tokens with ALiBi attention biases.

Pre-norm residual blocks, multi-head self-attention and a GELU feed-forward
layer.  Positions are encoded in one of three ways:

* ``alibi``: no position vectors; each head subtracts ``slope * |i - j|``
  from its attention scores, so any length up to ``max_len_cap`` is accepted.
* ``learned_absolute``: a trainable table of ``max_train_len`` rows.
* ``none``: the encoder is permutation equivariant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

POSITIONAL_MODES = ("alibi", "learned_absolute", "none")
ATTENTION_MODES = ("bidirectional", "causal")
POOLINGS = ("mean", "max", "weighted_mean", "weighted_max")


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 123
    max_train_len: int = 32
    positional_mode: str = "alibi"
    attention_mode: str = "bidirectional"
    max_len_cap: int = 1024
    norm_eps: float = 1e-5

    @property
    def use_alibi(self) -> bool:
        return self.positional_mode == "alibi"

    def validate(self) -> None:
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim={self.hidden_dim} is not divisible by num_heads={self.num_heads}"
            )
        if self.positional_mode not in POSITIONAL_MODES:
            raise ValueError(f"positional_mode must be one of {POSITIONAL_MODES}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if min(self.num_layers, self.hidden_dim, self.num_heads, self.ffn_dim, self.vocab_size) < 1:
            raise ValueError("model sizes must be positive")
        if self.max_train_len < 1 or self.max_len_cap < self.max_train_len:
            raise ValueError("need 1 <= max_train_len <= max_len_cap")

    def to_dict(self) -> dict:
        return asdict(self)


def alibi_slopes(num_heads: int) -> list[float]:
    """Head slopes 1/2, 1/4, ..., 2**-num_heads."""
    return [2.0 ** -(h + 1) for h in range(num_heads)]


def alibi_bias(seq_len: int, head_index: int, num_heads: int) -> np.ndarray:
    """Bias matrix ``-slope * |i - j|`` for one head."""
    if not 0 <= head_index < num_heads:
        raise ValueError(f"head_index {head_index} out of range for {num_heads} heads")
    if seq_len < 1:
        raise ValueError("seq_len must be at least 1")
    pos = np.arange(seq_len)
    dist = np.abs(pos[:, None] - pos[None, :]).astype(np.float64)
    return -alibi_slopes(num_heads)[head_index] * dist


def alibi_bias_tensor(seq_len: int, num_heads: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(seq_len)
    dist = (pos[:, None] - pos[None, :]).abs().to(dtype)
    slopes = torch.tensor(alibi_slopes(num_heads), dtype=dtype)
    return -slopes[:, None, None] * dist


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden_dim
        self.num_heads = config.num_heads
        self.head_dim = d // config.num_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, bias=None, key_mask=None, causal=False):
        b, length, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.view(b, length, self.num_heads, self.head_dim).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(length, length, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, length, d)
        return self.out(y)


class EncoderBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.hidden_dim, eps=config.norm_eps)
        self.attn = SelfAttention(config)
        self.norm2 = nn.LayerNorm(config.hidden_dim, eps=config.norm_eps)
        self.ff_in = nn.Linear(config.hidden_dim, config.ffn_dim)
        self.ff_out = nn.Linear(config.ffn_dim, config.hidden_dim)

    def forward(self, x, bias=None, key_mask=None, causal=False):
        x = x + self.attn(self.norm1(x), bias, key_mask, causal)
        return x + self.ff_out(F.gelu(self.ff_in(self.norm2(x))))


class BehaviorEncoder(nn.Module):
    """Token embedding, encoder stack, final norm and a masked-behavior head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        d = config.hidden_dim
        self.embed = nn.Embedding(config.vocab_size, d)
        self.pos_embed = (
            nn.Parameter(torch.empty(config.max_train_len, d))
            if config.positional_mode == "learned_absolute"
            else None
        )
        self.layers = nn.ModuleList(EncoderBlock(config) for _ in range(config.num_layers))
        self.final_norm = nn.LayerNorm(d, eps=config.norm_eps)
        self.head = nn.Linear(d, config.vocab_size)
        self.reset_parameters(seed)
        self.to(dtype)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        # zero-mean normal with variance 1/hidden_dim; norm gains 1, biases 0
        gen = torch.Generator().manual_seed(seed)
        std = self.config.hidden_dim ** -0.5
        for name, p in self.named_parameters():
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "final_norm.weight":
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * std)

    @property
    def max_input_len(self) -> int:
        if self.config.positional_mode == "learned_absolute":
            return self.config.max_train_len
        return self.config.max_len_cap

    def check_tokens(self, tokens: torch.Tensor) -> None:
        bad = (tokens < 0) | (tokens >= self.config.vocab_size)
        if bad.any():
            row, pos = (int(i) for i in bad.nonzero()[0])
            raise ValueError(
                f"token id {int(tokens[row, pos])} at row {row}, position {pos} "
                f"is outside the vocabulary of size {self.config.vocab_size}"
            )
        if tokens.shape[1] > self.max_input_len:
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds the maximum of {self.max_input_len} "
                f"for positional_mode={self.config.positional_mode}"
            )

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Last-layer token vectors, shape (batch, length, hidden_dim).

        ``mask`` is True at real tokens; padded keys are never attended to.
        """
        if tokens.dim() == 1:
            tokens = tokens[None]
            mask = None if mask is None else mask[None]
        if tokens.shape[1] < 1:
            raise ValueError("empty input sequence")
        self.check_tokens(tokens)
        length = tokens.shape[1]
        x = self.embed(tokens)
        if self.pos_embed is not None:
            x = x + self.pos_embed[:length]
        bias = None
        if self.config.use_alibi:
            bias = alibi_bias_tensor(length, self.config.num_heads, x.dtype)
        causal = self.config.attention_mode == "causal"
        for layer in self.layers:
            x = layer(x, bias, mask, causal)
        return self.final_norm(x)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.head(hidden)


def pool_tensor(hidden: torch.Tensor, mask: torch.Tensor | None, strategy: str) -> torch.Tensor:
    """Pool (batch, length, dim) token vectors to (batch, dim)."""
    if strategy not in POOLINGS:
        raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLINGS}")
    if mask is None:
        mask = torch.ones(hidden.shape[:2], dtype=torch.bool)
    if (mask.sum(dim=1) == 0).any():
        raise ValueError("cannot pool a sequence whose positions are all masked")
    m = mask.to(hidden.dtype)[..., None]
    if strategy.startswith("weighted"):
        # recency weights 1, 2, 3, ... over unmasked positions, normalized
        w = torch.cumsum(m, dim=1) * m
        w = w / w.sum(dim=1, keepdim=True)
    else:
        w = m / m.sum(dim=1, keepdim=True)
    if strategy.endswith("mean"):
        return (hidden * w).sum(dim=1)
    scaled = hidden * w if strategy == "weighted_max" else hidden
    return scaled.masked_fill(~mask[..., None], float("-inf")).max(dim=1).values


@dataclass
class UserEmbedding:
    vector: np.ndarray
    pooling: str


def pool(token_vectors, mask=None, strategy: str = "mean") -> UserEmbedding:
    """Pool one (length, dim) matrix into a :class:`UserEmbedding`."""
    h = torch.as_tensor(np.asarray(token_vectors, dtype=np.float64))
    m = None if mask is None else torch.as_tensor(np.asarray(mask, dtype=bool))[None]
    vec = pool_tensor(h[None], m, strategy)[0].numpy()
    return UserEmbedding(vec, strategy)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Row-wise cosine similarities between two stacks of vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = x if y is None else np.asarray(y, dtype=np.float64)
    nx = np.linalg.norm(x, axis=-1, keepdims=True)
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    if (nx == 0).any() or (ny == 0).any():
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return (x / nx) @ (y / ny).T


class NonFiniteLossError(FloatingPointError):
    pass


def loss_and_gradients(
    model: nn.Module,
    compute_terms: Callable[[nn.Module], Mapping[str, torch.Tensor]],
    weights: Mapping[str, float] | None = None,
) -> tuple[float, dict[str, torch.Tensor], dict[str, float]]:
    """Weighted sum of loss terms and its exact gradient for every parameter.

    Returns (total loss, gradient per named parameter, value per term).
    """
    model.zero_grad(set_to_none=True)
    terms = compute_terms(model)
    weights = weights or {}
    values = {}
    total = None
    for name, term in terms.items():
        if not torch.isfinite(term).all():
            raise NonFiniteLossError(f"loss term {name!r} is not finite ({term.item()})")
        values[name] = float(term.detach())
        contrib = weights.get(name, 1.0) * term
        total = contrib if total is None else total + contrib
    grads = {}
    if total is not None and total.requires_grad:
        total.backward()
    for name, p in model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    loss = float(total.detach()) if total is not None else 0.0
    return loss, grads, values
