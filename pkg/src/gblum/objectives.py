"""Masked Behavior Prediction, User Contrastive Learning and the training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import BehaviorEncoder, ModelConfig, NonFiniteLossError, loss_and_gradients, pool_tensor
from .logdata import BehaviorSequence, sample_sequence_pair

log = logging.getLogger(__name__)

NUM_SPECIAL = 3


def special_ids(vocab_size: int) -> tuple[int, int]:
    """(PAD, MASK) ids for a vocabulary laid out by :func:`build_vocab`."""
    return vocab_size - NUM_SPECIAL, vocab_size - NUM_SPECIAL + 1


@dataclass
class MaskingPlan:
    positions: list[int]
    targets: list[int]
    mode: str = "random"

    def apply(self, tokens: Sequence[int], mask_id: int) -> list[int]:
        out = list(tokens)
        for p in self.positions:
            out[p] = mask_id
        return out


def plan_random_masking(tokens: Sequence[int], rate: float, rng: np.random.Generator) -> MaskingPlan:
    """Mask each position independently with probability ``rate`` (at least one)."""
    if not 0 < rate < 1:
        raise ValueError(f"masking rate must lie in (0, 1), got {rate}")
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot mask an empty sequence")
    hits = np.flatnonzero(rng.random(n) < rate)
    if hits.size == 0:
        hits = np.array([rng.integers(n)])
    positions = hits.tolist()
    return MaskingPlan(positions, [int(tokens[p]) for p in positions], "random")


def plan_stratified_masking(
    sequences: Sequence[Sequence[int]],
    per_behavior_budget: int,
    rng: np.random.Generator,
    max_rate: float = 0.15,
) -> list[MaskingPlan]:
    """Mask every behavior (up to) ``per_behavior_budget`` times across the corpus.

    Occurrences are drawn uniformly at random per behavior, rarest behaviors
    first, and no sequence gets more than ``ceil(max_rate * len)`` masks.
    Returns one plan per input sequence; some plans may be empty.
    """
    if per_behavior_budget < 1:
        raise ValueError("per_behavior_budget must be at least 1")
    if not sequences:
        raise ValueError("cannot plan stratified masking over an empty corpus")
    occurrences: dict[int, list[tuple[int, int]]] = {}
    for si, seq in enumerate(sequences):
        for pos, tok in enumerate(seq):
            occurrences.setdefault(int(tok), []).append((si, pos))
    caps = [math.ceil(max_rate * len(s) - 1e-9) for s in sequences]
    used = [0] * len(sequences)
    chosen: list[list[int]] = [[] for _ in sequences]
    for tok in sorted(occurrences, key=lambda t: (len(occurrences[t]), t)):
        occ = occurrences[tok]
        taken = 0
        for k in rng.permutation(len(occ)):
            if taken == per_behavior_budget:
                break
            si, pos = occ[k]
            if used[si] < caps[si]:
                chosen[si].append(pos)
                used[si] += 1
                taken += 1
    plans = []
    for si, seq in enumerate(sequences):
        pos = sorted(chosen[si])
        plans.append(MaskingPlan(pos, [int(seq[p]) for p in pos], "stratified"))
    return plans


def mbp_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; ``logits`` is (masked, vocab)."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() == 0:
        raise ValueError("masked behavior loss needs at least one masked position")
    if int(targets.max()) >= logits.shape[-1] or int(targets.min()) < 0:
        raise ValueError(f"target id out of range for a vocabulary of size {logits.shape[-1]}")
    return F.cross_entropy(logits, targets)


def next_behavior_loss(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy of position t predicting token t+1."""
    if logits.dim() == 2:
        logits, tokens = logits[None], torch.as_tensor(tokens)[None]
        mask = None if mask is None else mask[None]
    if tokens.shape[1] < 2:
        raise ValueError("next-behavior prediction needs sequences of length at least 2")
    valid = torch.ones_like(tokens, dtype=torch.bool) if mask is None else mask
    pair_ok = valid[:, :-1] & valid[:, 1:]
    return F.cross_entropy(logits[:, :-1][pair_ok], tokens[:, 1:][pair_ok])


def ucl_loss(embeddings: torch.Tensor, temperature: float) -> torch.Tensor:
    """In-batch contrastive loss over cosine similarities.

    ``embeddings`` stacks the first members of n pairs followed by the second
    members, so row i and row i + n come from the same user.  Every row is an
    anchor; its candidates are all 2n - 1 other rows.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    two_n = embeddings.shape[0]
    if two_n % 2 or two_n < 4:
        raise ValueError("need an even number of embeddings from at least 2 users")
    norms = embeddings.norm(dim=-1)
    if (norms == 0).any():
        bad = int((norms == 0).nonzero()[0])
        raise ValueError(f"sequence {bad} has a zero-norm embedding")
    n = two_n // 2
    z = embeddings / norms[:, None]
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(two_n, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(n, two_n), torch.arange(0, n)])
    return F.cross_entropy(sim, target)


@dataclass
class ContrastiveBatch:
    pairs: list[tuple[BehaviorSequence, BehaviorSequence]]
    temperature: float = 0.2

    def __post_init__(self):
        users = [a.user_id for a, _ in self.pairs]
        if len(set(users)) != len(users):
            raise ValueError("pairs must come from distinct users")
        if any(a.user_id != b.user_id for a, b in self.pairs):
            raise ValueError("both members of a pair must belong to the same user")

    def sequences(self) -> list[BehaviorSequence]:
        return [a for a, _ in self.pairs] + [b for _, b in self.pairs]


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    pairs_per_user: int = 16
    learning_rate: float = 2e-3
    warmup_frac: float = 0.05
    mask_rate: float = 0.15
    temperature: float = 0.2
    val_frac: float = 0.05
    val_windows_per_user: int = 8
    grad_clip: float = 1.0
    mbp: bool = True
    ucl: bool = True
    nbp: bool = False

    def validate(self) -> None:
        if self.nbp and (self.mbp or self.ucl):
            raise ValueError("next-behavior training excludes the masked and contrastive objectives")
        if not (self.mbp or self.ucl or self.nbp):
            raise ValueError("at least one training objective must be enabled")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for contrastive learning")
        if self.epochs < 1 or self.pairs_per_user < 1:
            raise ValueError("epochs and pairs_per_user must be positive")


@dataclass
class TrainBatch:
    tokens: torch.Tensor          # original ids, (2n, L)
    inputs: torch.Tensor          # ids fed to the model, MASK applied
    mask: torch.Tensor            # True at real tokens
    mbp_rows: torch.Tensor
    mbp_cols: torch.Tensor
    mbp_targets: torch.Tensor


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    length = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), length), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), length), dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return tokens, mask


def make_batch(
    sequences: Sequence[BehaviorSequence],
    vocab_size: int,
    mask_rate: float | None,
    rng: np.random.Generator,
) -> TrainBatch:
    """Pad a list of sequences and (optionally) mask each one independently."""
    pad_id, mask_id = special_ids(vocab_size)
    raw = [s.tokens for s in sequences]
    tokens, mask = pad_batch(raw, pad_id)
    inputs = tokens.clone()
    rows, cols, targets = [], [], []
    if mask_rate is not None:
        for i, seq in enumerate(raw):
            plan = plan_random_masking(seq, mask_rate, rng)
            rows += [i] * len(plan.positions)
            cols += plan.positions
            targets += plan.targets
        inputs[rows, cols] = mask_id
    as_long = lambda v: torch.as_tensor(v, dtype=torch.long)  # noqa: E731
    return TrainBatch(tokens, inputs, mask, as_long(rows), as_long(cols), as_long(targets))


def batch_terms(model: BehaviorEncoder, batch: TrainBatch, config: TrainConfig) -> dict[str, torch.Tensor]:
    """Loss terms of one step: masked prediction on every sequence and
    contrastive loss on mean-pooled last-layer vectors."""
    hidden = model(batch.inputs, batch.mask)
    terms = {}
    if config.mbp:
        logits = model.logits(hidden[batch.mbp_rows, batch.mbp_cols])
        terms["mbp"] = mbp_loss(logits, batch.mbp_targets)
    if config.ucl:
        emb = pool_tensor(hidden, batch.mask, "mean")
        terms["ucl"] = ucl_loss(emb, config.temperature)
    if config.nbp:
        terms["nbp"] = next_behavior_loss(model.logits(hidden), batch.tokens, batch.mask)
    return terms


@dataclass
class TrainState:
    model: BehaviorEncoder
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: dict[str, list[float]] = field(default_factory=lambda: {"mbp": [], "ucl": [], "nbp": [], "total": []})
    epochs: list[dict] = field(default_factory=list)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: TrainState | None):
        super().__init__(message)
        self.last_good = last_good


def split_users(num_users: int, val_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, validation) index split; validation gets >= 1 user."""
    perm = np.random.default_rng([seed, 0x5A11]).permutation(num_users)
    n_val = max(1, int(round(val_frac * num_users))) if val_frac > 0 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def validation_windows(
    streams: Sequence[BehaviorSequence], window: int, per_user: int, seed: int
) -> list[BehaviorSequence]:
    """Up to ``per_user`` disjoint windows per stream at seeded offsets."""
    rng = np.random.default_rng([seed, 0x7A1])
    out = []
    for s in streams:
        n_slots = len(s) // window
        if n_slots == 0:
            out.append(s)
            continue
        for k in sorted(rng.choice(n_slots, size=min(per_user, n_slots), replace=False)):
            out.append(s.window(k * window, (k + 1) * window))
    return out


@torch.no_grad()
def masked_accuracy(
    model: BehaviorEncoder,
    windows: Sequence[BehaviorSequence],
    plans: Sequence[MaskingPlan],
    batch_size: int = 256,
) -> tuple[float, int]:
    """Fraction of masked positions whose arg-max behavior equals the target."""
    pad_id, mask_id = special_ids(model.config.vocab_size)
    correct = total = 0
    items = [(w, p) for w, p in zip(windows, plans) if p.positions]
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        inputs, mask = pad_batch([p.apply(w.tokens, mask_id) for w, p in chunk], pad_id)
        hidden = model(inputs, mask)
        rows = [i for i, (_, p) in enumerate(chunk) for _ in p.positions]
        cols = [c for _, p in chunk for c in p.positions]
        targets = torch.as_tensor([t for _, p in chunk for t in p.targets])
        # specials are never valid answers
        logits = model.logits(hidden[rows, cols])[:, :pad_id]
        correct += int((logits.argmax(dim=-1) == targets).sum())
        total += len(targets)
    return (correct / total if total else float("nan")), total


@torch.no_grad()
def next_accuracy(model: BehaviorEncoder, windows: Sequence[BehaviorSequence], batch_size: int = 256) -> float:
    pad_id, _ = special_ids(model.config.vocab_size)
    correct = total = 0
    for start in range(0, len(windows), batch_size):
        tokens, mask = pad_batch([w.tokens for w in windows[start:start + batch_size]], pad_id)
        pred = model.logits(model(tokens, mask))[:, :-1, :pad_id].argmax(dim=-1)
        ok = mask[:, :-1] & mask[:, 1:]
        correct += int((pred == tokens[:, 1:])[ok].sum())
        total += int(ok.sum())
    return correct / total if total else float("nan")


def _validation_metric(model, windows, config: TrainConfig, seed: int):
    if config.mbp:
        rng = np.random.default_rng([seed, 0x7A2])
        plans = [plan_random_masking(w.tokens, config.mask_rate, rng) for w in windows]
        return masked_accuracy(model, windows, plans)[0]
    if config.nbp:
        return next_accuracy(model, windows)
    return None


def train(
    streams: Sequence[BehaviorSequence],
    model_config: ModelConfig,
    config: TrainConfig,
    seed: int,
    on_epoch: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Train an encoder on paired, masked windows drawn from user streams.

    Each step takes ``batch_size`` distinct users, draws two non-overlapping
    windows of at most ``max_train_len`` from each, masks both independently
    and minimises the sum of the enabled loss terms with Adam and linear
    warmup.  An epoch visits every training user ``pairs_per_user`` times.
    """
    config.validate()
    if model_config.attention_mode == "causal" and (config.mbp or config.ucl):
        raise ValueError("causal attention is only trained with next-behavior prediction")
    train_idx, val_idx = split_users(len(streams), config.val_frac, seed)
    if len(train_idx) < config.batch_size:
        raise ValueError(
            f"{len(train_idx)} training users is fewer than batch_size={config.batch_size}"
        )
    train_streams = [streams[i] for i in train_idx]
    val_windows = validation_windows(
        [streams[i] for i in val_idx], model_config.max_train_len, config.val_windows_per_user, seed
    )

    torch.manual_seed(seed)
    model = BehaviorEncoder(model_config, seed=seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n_users = len(train_streams)
    batches_per_round = n_users // config.batch_size
    total_steps = config.epochs * config.pairs_per_user * batches_per_round
    warmup = max(1, round(config.warmup_frac * total_steps))
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: min(1.0, (s + 1) / warmup))
    state = TrainState(model, optimizer)
    last_good = None
    rng = np.random.default_rng([seed, 0x7EA1])
    weights = {"mbp": 1.0, "ucl": 1.0, "nbp": 1.0}

    for epoch in range(1, config.epochs + 1):
        sums = {"mbp": 0.0, "ucl": 0.0, "nbp": 0.0, "total": 0.0}
        steps = 0
        model.train()
        for _ in range(config.pairs_per_user):
            order = rng.permutation(n_users)
            for b in range(batches_per_round):
                users = order[b * config.batch_size:(b + 1) * config.batch_size]
                pairs = [sample_sequence_pair(train_streams[u], model_config.max_train_len, rng) for u in users]
                seqs = [a for a, _ in pairs] + [p for _, p in pairs]
                batch = make_batch(seqs, model_config.vocab_size, config.mask_rate if config.mbp else None, rng)
                try:
                    loss, _, values = loss_and_gradients(
                        model, lambda m: batch_terms(m, batch, config), weights
                    )
                except NonFiniteLossError as exc:
                    raise TrainingDivergedError(f"epoch {epoch}, step {state.step}: {exc}", last_good) from exc
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                scheduler.step()
                state.step += 1
                for key in ("mbp", "ucl", "nbp"):
                    state.history[key].append(values.get(key, float("nan")))
                    sums[key] += values.get(key, 0.0)
                state.history["total"].append(loss)
                sums["total"] += loss
                steps += 1
        model.eval()
        metrics = {
            "epoch": epoch,
            "L_MBP": sums["mbp"] / steps if config.mbp else None,
            "L_UCL": sums["ucl"] / steps if config.ucl else None,
            "L_NBP": sums["nbp"] / steps if config.nbp else None,
            "L": sums["total"] / steps,
            "val_accuracy": _validation_metric(model, val_windows, config, seed),
        }
        state.epochs.append(metrics)
        log.info("epoch %d: %s", epoch, metrics)
        last_good = TrainState(copy.deepcopy(model), optimizer, state.step, copy.deepcopy(state.history), list(state.epochs))
        if on_epoch is not None:
            on_epoch(state, metrics)
    return state
