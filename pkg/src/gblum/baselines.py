"""Sequence embedders: TF, TF-IDF, SGNS, untrained table, and transformer models.

Every embedder maps behavior sequences to fixed-length vectors through
:meth:`Embedder.embed_pooled`, so evaluation code treats them uniformly.
Token-level models are pooled; TF and TF-IDF ignore the pooling argument.
Models with a fixed input window embed longer sequences by averaging the
embeddings of non-overlapping segments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_encoder, load_tensors, save_encoder, save_tensors
from .encoder import POOLINGS, BehaviorEncoder, UserEmbedding, pool_tensor
from .logdata import BehaviorSequence

KINDS = ("tf", "tfidf", "sgns", "untrained", "enc", "dec", "ours")


def _tokens(seq) -> list[int]:
    tokens = list(seq.tokens) if isinstance(seq, BehaviorSequence) else [int(t) for t in seq]
    if not tokens:
        raise ValueError("cannot embed an empty sequence")
    return tokens


def _as_list(poolings) -> list[str]:
    return [poolings] if isinstance(poolings, str) else list(poolings)


class Embedder:
    kind: str = ""
    dim: int = 0
    max_window: int | None = None
    pooled: bool = True
    has_mbp_head: bool = False

    def embed_pooled(self, seqs: Sequence, poolings: Iterable[str] = POOLINGS) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def embed_many(self, seqs: Sequence, pooling: str = "mean") -> np.ndarray:
        return self.embed_pooled(seqs, [pooling])[pooling]

    def embed(self, seq, pooling: str = "mean") -> UserEmbedding:
        return UserEmbedding(self.embed_many([seq], pooling)[0], pooling if self.pooled else "none")

    def save(self, path) -> None:
        raise NotImplementedError


def embed(embedder: Embedder, seq, pooling: str = "mean") -> UserEmbedding:
    return embedder.embed(seq, pooling)


# ---------------------------------------------------------------------------
# bag-of-behaviors
# ---------------------------------------------------------------------------

def tf_vector(seq, num_behaviors: int) -> np.ndarray:
    """Relative frequency of every behavior in the sequence."""
    tokens = _tokens(seq)
    return np.bincount(tokens, minlength=num_behaviors)[:num_behaviors] / len(tokens)


@dataclass
class CorpusStats:
    df: np.ndarray
    num_docs: int

    @classmethod
    def from_sequences(cls, seqs: Iterable, num_behaviors: int) -> "CorpusStats":
        df = np.zeros(num_behaviors)
        n = 0
        for s in seqs:
            df[np.unique(_tokens(s))] += 1
            n += 1
        if n == 0:
            raise ValueError("document frequencies need at least one sequence")
        return cls(df, n)

    @property
    def idf(self) -> np.ndarray:
        # add-one smoothed idf shifted by one, safe for behaviors never seen
        return np.log((1.0 + self.num_docs) / (1.0 + self.df)) + 1.0


def tfidf_vector(seq, stats: CorpusStats) -> np.ndarray:
    return tf_vector(seq, len(stats.df)) * stats.idf


class TFEmbedder(Embedder):
    kind = "tf"
    pooled = False

    def __init__(self, num_behaviors: int):
        self.dim = num_behaviors

    def embed_pooled(self, seqs, poolings=POOLINGS):
        x = np.stack([tf_vector(s, self.dim) for s in seqs])
        return {p: x for p in _as_list(poolings)}

    def save(self, path):
        save_tensors(path, {"dim": np.zeros(self.dim)}, {"kind": self.kind, "dim": self.dim})


class TfidfEmbedder(Embedder):
    kind = "tfidf"
    pooled = False

    def __init__(self, stats: CorpusStats):
        self.stats = stats
        self.dim = len(stats.df)

    def embed_pooled(self, seqs, poolings=POOLINGS):
        idf = self.stats.idf
        x = np.stack([tf_vector(s, self.dim) * idf for s in seqs])
        return {p: x for p in _as_list(poolings)}

    def save(self, path):
        save_tensors(path, {"df": self.stats.df}, {"kind": self.kind, "num_docs": self.stats.num_docs})


# ---------------------------------------------------------------------------
# static behavior tables
# ---------------------------------------------------------------------------

def _pool_array(h: np.ndarray, strategy: str) -> np.ndarray:
    if strategy == "mean":
        return h.mean(axis=0)
    if strategy == "max":
        return h.max(axis=0)
    w = np.arange(1, len(h) + 1, dtype=np.float64)
    w /= w.sum()
    if strategy == "weighted_mean":
        return w @ h
    if strategy == "weighted_max":
        return (h * w[:, None]).max(axis=0)
    raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLINGS}")


class TableEmbedder(Embedder):
    """Pools fixed per-behavior vectors (SGNS or untrained)."""

    def __init__(self, kind: str, table: np.ndarray):
        self.kind = kind
        self.table = np.asarray(table, dtype=np.float64)
        self.dim = self.table.shape[1]

    def embed_pooled(self, seqs, poolings=POOLINGS):
        poolings = _as_list(poolings)
        out = {p: np.empty((len(seqs), self.dim)) for p in poolings}
        for i, s in enumerate(seqs):
            h = self.table[_tokens(s)]
            for p in poolings:
                out[p][i] = _pool_array(h, p)
        return out

    def save(self, path):
        save_tensors(path, {"table": self.table}, {"kind": self.kind})


def untrained_table(num_behaviors: int, dim: int = 768, seed: int = 0) -> np.ndarray:
    """Seeded zero-mean random vector per behavior."""
    if dim < 1:
        raise ValueError("dim must be at least 1")
    return np.random.default_rng([seed, 0x0DD]).standard_normal((num_behaviors, dim))


def sgns_train(
    sequences: Sequence,
    num_behaviors: int,
    dim: int = 64,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
    batch_size: int = 4096,
    learning_rate: float = 0.01,
    max_pairs_per_epoch: int | None = 1_000_000,
) -> np.ndarray:
    """Skip-gram with negative sampling; returns the input-vector table.

    Contexts are every token within ``window`` positions on either side;
    negatives come from the unigram distribution raised to 3/4.
    """
    if window < 1:
        raise ValueError(f"window must be at least 1, got {window}")
    centers, contexts = [], []
    counts = np.zeros(num_behaviors)
    for s in sequences:
        t = np.asarray(_tokens(s))
        counts += np.bincount(t, minlength=num_behaviors)[:num_behaviors]
        for off in range(1, window + 1):
            if len(t) > off:
                centers += [t[:-off], t[off:]]
                contexts += [t[off:], t[:-off]]
    if not centers:
        raise ValueError("corpus yields no skip-gram pairs (every sequence has a single token)")
    centers_t = torch.as_tensor(np.concatenate(centers))
    contexts_t = torch.as_tensor(np.concatenate(contexts))
    noise = torch.as_tensor(counts ** 0.75)
    noise = noise / noise.sum()

    gen = torch.Generator().manual_seed(seed)
    w_in = torch.nn.Parameter((torch.rand(num_behaviors, dim, generator=gen, dtype=torch.float64) - 0.5) / dim)
    w_out = torch.nn.Parameter(torch.zeros(num_behaviors, dim, dtype=torch.float64))
    opt = torch.optim.Adam([w_in, w_out], lr=learning_rate)
    n_pairs = len(centers_t)
    for _ in range(epochs):
        order = torch.randperm(n_pairs, generator=gen)
        if max_pairs_per_epoch is not None:
            order = order[:max_pairs_per_epoch]
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            c, o = centers_t[idx], contexts_t[idx]
            neg = torch.multinomial(noise, len(idx) * negatives, replacement=True, generator=gen).view(len(idx), negatives)
            v = w_in[c]
            pos = (v * w_out[o]).sum(-1)
            negs = torch.einsum("bd,bkd->bk", v, w_out[neg])
            loss = -(F.logsigmoid(pos).mean() + F.logsigmoid(-negs).sum(-1).mean())
            opt.zero_grad()
            loss.backward()
            opt.step()
    return w_in.detach().numpy().copy()


# ---------------------------------------------------------------------------
# transformer models
# ---------------------------------------------------------------------------

class TransformerEmbedder(Embedder):
    """Pools last-layer token vectors of a :class:`BehaviorEncoder`."""

    has_mbp_head = True

    def __init__(self, model: BehaviorEncoder, kind: str = "ours", batch_tokens: int = 4096):
        self.model = model.eval()
        self.kind = kind
        self.dim = model.config.hidden_dim
        self.max_window = model.max_input_len
        self.batch_tokens = batch_tokens
        self.has_mbp_head = model.config.attention_mode == "bidirectional"

    def segments(self, tokens: list[int]) -> list[list[int]]:
        w = self.max_window
        if len(tokens) <= w:
            return [tokens]
        return [tokens[k:k + w] for k in range(0, len(tokens), w)]

    @torch.no_grad()
    def segment_embeddings(self, seqs, poolings=POOLINGS) -> tuple[list[list[int]], dict[str, np.ndarray]]:
        """Embeddings of every segment, and the segment indices of each sequence."""
        poolings = _as_list(poolings)
        segs, owner = [], []
        for i, s in enumerate(seqs):
            for seg in self.segments(_tokens(s)):
                segs.append(seg)
                owner.append(i)
        out = {p: np.empty((len(segs), self.dim)) for p in poolings}
        by_len: dict[int, list[int]] = {}
        for j, seg in enumerate(segs):
            by_len.setdefault(len(seg), []).append(j)
        # equal-length batches: no padding enters the computation
        for length in sorted(by_len):
            idx = by_len[length]
            rows = max(1, self.batch_tokens // length)
            for start in range(0, len(idx), rows):
                chunk = idx[start:start + rows]
                tokens = torch.as_tensor([segs[j] for j in chunk], dtype=torch.long)
                hidden = self.model(tokens)
                for p in poolings:
                    out[p][chunk] = pool_tensor(hidden, None, p).double().numpy()
        groups: list[list[int]] = [[] for _ in seqs]
        for j, i in enumerate(owner):
            groups[i].append(j)
        return groups, out

    def embed_pooled(self, seqs, poolings=POOLINGS):
        groups, seg = self.segment_embeddings(seqs, poolings)
        return {p: np.stack([v[g].mean(axis=0) for g in groups]) for p, v in seg.items()}

    @torch.no_grad()
    def mbp_logits(self, inputs: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.model.logits(self.model(inputs, mask))

    def save(self, path):
        save_encoder(path, self.model, self.kind)


class RandomEmbedder(Embedder):
    """Control embedder: an independent Gaussian vector for every call."""

    kind = "random"
    pooled = False

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.rng = np.random.default_rng([seed, 0xA11])

    def embed_pooled(self, seqs, poolings=POOLINGS):
        x = self.rng.standard_normal((len(seqs), self.dim))
        return {p: x for p in _as_list(poolings)}


def save_embedder(path, embedder: Embedder) -> None:
    embedder.save(path)


def load_embedder(path) -> Embedder:
    tensors, meta = load_tensors(path)
    kind = meta.get("kind")
    if kind in ("ours", "enc", "dec"):
        model, _ = load_encoder(path)
        return TransformerEmbedder(model, kind)
    if kind == "tf":
        return TFEmbedder(int(meta["dim"]))
    if kind == "tfidf":
        return TfidfEmbedder(CorpusStats(tensors["df"].astype(np.float64), int(meta["num_docs"])))
    if kind in ("sgns", "untrained"):
        return TableEmbedder(kind, tensors["table"])
    raise CheckpointError(f"{path}: unknown embedder kind {kind!r}")


def mbp_capable(embedder: Embedder) -> bool:
    return isinstance(embedder, TransformerEmbedder) and embedder.has_mbp_head
