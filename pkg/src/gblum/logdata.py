"""Behavioral-log data model, synthetic log generator and corpus files.

Synthetic users are driven by a latent :class:`Persona`.  Every user shares one
platform-wide successor structure (which behaviors tend to follow which), and
each persona reweights it by a private preference profile.  Three traits drive
the downstream labels.  Each leaves a trace in *what* a user does, and two of
them also leave an ordering signature that order-blind representations miss:

* ``engagement`` raises the preference for content behaviors.
* ``risk_level`` raises the preference for risky behaviors and makes a user
  repeat the previous behavior (a lazy chain).
* a declining ``activity_trend`` raises the preference for exit behaviors and
  mixes in draws from the user's own stationary distribution, which erodes
  sequential structure.

Both ordering perturbations preserve the stationary distribution of the base
chain.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

TASKS = ("reported", "ad_view", "self_delete")
MAX_GAP_DAYS = 7
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[UNK]")


class CorpusFormatError(ValueError):
    """A corpus or vocab file could not be parsed."""


@dataclass(frozen=True)
class BehaviorVocab:
    behaviors: tuple[str, ...]
    id_of: dict[str, int] = field(repr=False)

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    @property
    def pad_id(self) -> int:
        return len(self.behaviors)

    @property
    def mask_id(self) -> int:
        return len(self.behaviors) + 1

    @property
    def unk_id(self) -> int:
        return len(self.behaviors) + 2

    @property
    def size(self) -> int:
        return len(self.behaviors) + len(SPECIAL_TOKENS)

    def name_of(self, idx: int) -> str:
        if idx < self.num_behaviors:
            return self.behaviors[idx]
        return SPECIAL_TOKENS[idx - self.num_behaviors]

    def encode(self, names: Iterable[str]) -> list[int]:
        return [self.id_of.get(n, self.unk_id) for n in names]


def build_vocab(behavior_names: list[str]) -> BehaviorVocab:
    """Assign ids 0..n-1 to behaviors; PAD, MASK and UNK follow."""
    if not behavior_names:
        raise ValueError("empty vocabulary: at least one behavior name is required")
    id_of: dict[str, int] = {}
    for name in behavior_names:
        if not name:
            raise ValueError("behavior names must be non-empty strings")
        if name in id_of or name in SPECIAL_TOKENS:
            raise ValueError(f"duplicate behavior name: {name!r}")
        id_of[name] = len(id_of)
    return BehaviorVocab(tuple(behavior_names), id_of)


def default_behavior_names(n: int) -> list[str]:
    return [f"behavior_{i:03d}" for i in range(n)]


def save_vocab(path, vocab: BehaviorVocab) -> None:
    Path(path).write_text("".join(f"{b}\n" for b in vocab.behaviors), encoding="utf-8")


def load_vocab(path) -> BehaviorVocab:
    names = Path(path).read_text(encoding="utf-8").splitlines()
    return build_vocab(names)


@dataclass
class BehaviorSequence:
    user_id: int
    tokens: list[int]
    timestamps: list[int]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"user {self.user_id}: empty behavior sequence")
        if len(self.tokens) != len(self.timestamps):
            raise ValueError(
                f"user {self.user_id}: {len(self.tokens)} tokens but {len(self.timestamps)} timestamps"
            )
        ts = self.timestamps
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"user {self.user_id}: timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.tokens)

    def window(self, start: int, stop: int) -> "BehaviorSequence":
        return BehaviorSequence(self.user_id, self.tokens[start:stop], self.timestamps[start:stop])

    def before_day(self, day: int) -> "BehaviorSequence | None":
        """Events strictly earlier than ``day``, or None if there are none."""
        cut = int(np.searchsorted(np.asarray(self.timestamps), day, side="left"))
        if cut == 0:
            return None
        return self.window(0, cut)

    def latest(self, n: int) -> "BehaviorSequence":
        return self.window(max(0, len(self) - n), len(self))

    def to_record(self) -> dict:
        return {"user_id": self.user_id, "tokens": list(self.tokens), "timestamps": list(self.timestamps)}


@dataclass
class Persona:
    preference: np.ndarray
    transition_bias: np.ndarray
    activity_trend: float
    risk_level: float
    engagement: float = 0.5
    activity_level: float = 1.0


@dataclass(frozen=True)
class LabelRecord:
    user_id: int
    task: str
    gap_days: int
    label: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 0 <= self.gap_days <= MAX_GAP_DAYS:
            raise ValueError(f"gap_days must lie in [0, {MAX_GAP_DAYS}], got {self.gap_days}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticConfig:
    num_users: int = 1000
    num_behaviors: int = 120
    days: int = 21
    mean_events_per_day: float = 22.0
    zipf_exponent: float = 1.0
    successors_per_behavior: int = 2
    successor_popularity_power: float = 0.3
    transition_weight: float = 0.85
    preference_spread: float = 1.5
    activity_spread: float = 0.3
    num_risky: int = 6
    num_content: int = 10
    num_exit: int = 6
    trait_boost: float = 4.0
    max_repeat_prob: float = 0.35
    max_decline_mix: float = 0.4
    reported_noise: float = 0.1
    ad_view_noise: float = 0.2
    self_delete_noise: float = 0.15
    user_id_offset: int = 0

    @property
    def target_length(self) -> float:
        return self.days * self.mean_events_per_day

    def validate(self) -> None:
        if self.num_users < 2:
            raise ValueError(
                f"num_users={self.num_users}: contrastive learning needs at least 2 users"
            )
        if self.num_behaviors < 2:
            raise ValueError("num_behaviors must be at least 2")
        if self.days < MAX_GAP_DAYS + 2:
            raise ValueError(f"days must be at least {MAX_GAP_DAYS + 2} to cover every label gap")
        if self.mean_events_per_day <= 0:
            raise ValueError("mean_events_per_day must be positive")
        if not 0 <= self.transition_weight <= 1:
            raise ValueError("transition_weight must lie in [0, 1]")
        if self.max_repeat_prob + self.max_decline_mix >= 1:
            raise ValueError("max_repeat_prob + max_decline_mix must be below 1")
        k = self.num_risky + self.num_content + self.num_exit
        if k > self.num_behaviors - min(10, self.num_behaviors // 4):
            raise ValueError("num_risky + num_content + num_exit exceeds the mid-frequency band")


@dataclass
class Platform:
    """Structure shared by every synthetic user of one corpus."""

    popularity: np.ndarray
    successors: np.ndarray
    risky_ids: np.ndarray
    content_ids: np.ndarray
    exit_ids: np.ndarray

    @property
    def risky_reference(self) -> float:
        return float(self.popularity[self.risky_ids].sum())


def build_platform(config: SyntheticConfig, seed: int) -> Platform:
    rng = np.random.default_rng([seed, 0x5EED])
    v = config.num_behaviors
    ranks = np.arange(1, v + 1, dtype=np.float64)
    popularity = ranks ** -config.zipf_exponent
    popularity /= popularity.sum()

    k = min(config.successors_per_behavior, v)
    succ_weights = np.array([0.6, 0.25, 0.15, 0.1, 0.05][:k] + [0.05] * max(0, k - 5))
    succ_weights /= succ_weights.sum()
    successor_draw = popularity ** config.successor_popularity_power
    successor_draw /= successor_draw.sum()
    successors = np.zeros((v, v))
    for b in range(v):
        picks = rng.choice(v, size=k, replace=False, p=successor_draw)
        successors[b, picks] = succ_weights

    # trait-linked behaviors are drawn from the mid-frequency band
    band = np.arange(min(10, v // 4), v)
    r, c = config.num_risky, config.num_content
    chosen = rng.choice(band, size=r + c + config.num_exit, replace=False)
    return Platform(
        popularity=popularity,
        successors=successors,
        risky_ids=np.sort(chosen[:r]),
        content_ids=np.sort(chosen[r:r + c]),
        exit_ids=np.sort(chosen[r + c:]),
    )


def make_persona(platform: Platform, config: SyntheticConfig, rng: np.random.Generator) -> Persona:
    v = config.num_behaviors
    engagement = float(rng.uniform())
    z = rng.standard_normal(v)
    trend = float(rng.uniform(-1.0, 1.0))
    risk = float(rng.uniform())
    boost = config.trait_boost
    weights = platform.popularity * np.exp(config.preference_spread * z)
    weights[platform.content_ids] *= 0.5 + boost * engagement
    weights[platform.risky_ids] *= 0.5 + boost * risk
    weights[platform.exit_ids] *= 0.5 + boost * (1.0 - trend) / 2.0
    preference = weights / weights.sum()
    return Persona(
        preference=preference,
        transition_bias=preference_transitions(platform.successors, preference),
        activity_trend=trend,
        risk_level=risk,
        engagement=engagement,
        activity_level=float(np.exp(config.activity_spread * rng.standard_normal())),
    )


def preference_transitions(successors: np.ndarray, preference: np.ndarray) -> np.ndarray:
    """Reweight the shared successor rows by a preference profile.

    Rows with no support left fall back to the preference itself.
    """
    t = successors * preference[None, :]
    mass = t.sum(axis=1, keepdims=True)
    empty = mass[:, 0] <= 0
    t[~empty] /= mass[~empty]
    t[empty] = preference
    return t


def _stationary(p: np.ndarray, start: np.ndarray, iters: int = 200) -> np.ndarray:
    pi = start.copy()
    for _ in range(iters):
        pi = pi @ p
    return pi / pi.sum()


def persona_chain(persona: Persona, config: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return (transition matrix, stationary distribution) of a persona's chain."""
    beta = config.transition_weight
    base = beta * persona.transition_bias + (1.0 - beta) * persona.preference[None, :]
    pi = _stationary(base, persona.preference)
    repeat = config.max_repeat_prob * persona.risk_level
    decline = config.max_decline_mix * (1.0 - persona.activity_trend) / 2.0
    chain = (1.0 - repeat - decline) * base + decline * pi[None, :]
    chain[np.diag_indices_from(chain)] += repeat
    return chain, pi


def daily_counts(persona: Persona, config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    d = config.days
    rel = (np.arange(d) - (d - 1) / 2.0) / max(d - 1, 1)
    rate = config.mean_events_per_day * persona.activity_level * np.maximum(0.05, 1.0 + persona.activity_trend * rel)
    counts = rng.poisson(rate)
    short = 2 - counts.sum()
    if short > 0:
        counts[0] += short
    return counts


def simulate_stream(
    persona: Persona, config: SyntheticConfig, rng: np.random.Generator, user_id: int = 0
) -> BehaviorSequence:
    chain, _ = persona_chain(persona, config)
    cum = np.cumsum(chain, axis=1)
    cum /= cum[:, -1:]
    first = np.cumsum(persona.preference)
    first /= first[-1]

    counts = daily_counts(persona, config, rng)
    n = int(counts.sum())
    u = rng.random(n)
    tokens = np.empty(n, dtype=np.int64)
    tokens[0] = np.searchsorted(first, u[0], side="right")
    for k in range(1, n):
        tokens[k] = np.searchsorted(cum[tokens[k - 1]], u[k], side="right")
    timestamps = np.repeat(np.arange(config.days), counts)
    return BehaviorSequence(user_id, tokens.tolist(), timestamps.tolist())


def feature_cutoff_day(config_days: int, gap_days: int) -> int:
    """First day excluded from the feature window for a given label gap.

    The label concerns the final simulated day; features end ``gap_days``
    whole days before it.
    """
    return config_days - 1 - gap_days


def derive_labels(
    persona: Persona,
    stream: BehaviorSequence,
    task: str,
    gap_days: int,
    *,
    platform: Platform,
    config: SyntheticConfig,
    rng: np.random.Generator | None = None,
) -> LabelRecord:
    """Derive one downstream label; ``rng=None`` switches the noise off."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if not 0 <= gap_days <= MAX_GAP_DAYS:
        raise ValueError(f"gap_days must lie in [0, {MAX_GAP_DAYS}], got {gap_days}")
    cutoff = feature_cutoff_day(config.days, gap_days)
    if cutoff < 1:
        raise ValueError(f"stream of {config.days} days cannot cover a {gap_days}-day gap")

    def noise(scale: float) -> float:
        if rng is None or scale <= 0:
            return 0.0
        return float(rng.logistic(0.0, scale))

    if task == "reported":
        ts = np.asarray(stream.timestamps)
        post = np.asarray(stream.tokens)[ts >= cutoff]
        risky = float(np.isin(post, platform.risky_ids).mean()) if post.size else 0.0
        score = persona.risk_level + 2.0 * (risky - platform.risky_reference) - 0.5
        score += noise(config.reported_noise)
    elif task == "ad_view":
        score = persona.engagement - 0.5 + noise(config.ad_view_noise)
    else:
        score = -persona.activity_trend + noise(config.self_delete_noise)
    return LabelRecord(stream.user_id, task, gap_days, int(score > 0))


def _label_rng(seed: int, user_id: int, task: str, gap: int) -> np.random.Generator:
    return np.random.default_rng([seed, user_id, TASKS.index(task), gap, 0x1ABE1])


def generate_user(
    user_id: int, platform: Platform, config: SyntheticConfig, seed: int
) -> tuple[Persona, BehaviorSequence, list[LabelRecord]]:
    # per-user rng keyed by (seed, user_id): shards can be generated independently
    rng = np.random.default_rng([seed, user_id])
    persona = make_persona(platform, config, rng)
    stream = simulate_stream(persona, config, rng, user_id)
    labels = [
        derive_labels(
            persona, stream, task, gap,
            platform=platform, config=config, rng=_label_rng(seed, user_id, task, gap),
        )
        for task in TASKS
        for gap in range(MAX_GAP_DAYS + 1)
    ]
    return persona, stream, labels


def generate_corpus(
    config: SyntheticConfig, seed: int
) -> tuple[list[Persona], list[BehaviorSequence], list[LabelRecord]]:
    """Generate personas, one full-range stream per user, and all labels."""
    config.validate()
    platform = build_platform(config, seed)
    personas, streams, labels = [], [], []
    for uid in range(config.user_id_offset, config.user_id_offset + config.num_users):
        p, s, ls = generate_user(uid, platform, config, seed)
        personas.append(p)
        streams.append(s)
        labels.extend(ls)
    return personas, streams, labels


def sample_sequence_pair(
    stream: BehaviorSequence, max_len: int, rng: np.random.Generator
) -> tuple[BehaviorSequence, BehaviorSequence]:
    """Draw two non-overlapping contiguous windows from one user's stream."""
    n = len(stream)
    if n < 2:
        raise ValueError(f"user {stream.user_id}: stream of length {n} is too short for a window pair")
    if max_len < 1:
        raise ValueError("max_len must be positive")
    w = min(max_len, n // 2)
    a = int(rng.integers(0, n - 2 * w + 1))
    b = int(rng.integers(a + w, n - w + 1))
    first, second = stream.window(a, a + w), stream.window(b, b + w)
    if rng.random() < 0.5:
        first, second = second, first
    return first, second


def sample_pair_indices(n: int, max_len: int, rng: np.random.Generator) -> tuple[range, range]:
    """Index ranges drawn exactly like :func:`sample_sequence_pair` (for checks)."""
    w = min(max_len, n // 2)
    a = int(rng.integers(0, n - 2 * w + 1))
    b = int(rng.integers(a + w, n - w + 1))
    first, second = range(a, a + w), range(b, b + w)
    if rng.random() < 0.5:
        first, second = second, first
    return first, second


def balance_labels(
    labels: Iterable[LabelRecord], task: str, gap_days: int, rng: np.random.Generator
) -> list[LabelRecord]:
    """Subsample the majority class so both classes are equally frequent."""
    chosen = [r for r in labels if r.task == task and r.gap_days == gap_days]
    pos = [r for r in chosen if r.label == 1]
    neg = [r for r in chosen if r.label == 0]
    if not pos or not neg:
        raise ValueError(f"task {task!r} gap {gap_days}: one class is empty, cannot balance")
    k = min(len(pos), len(neg))
    keep_pos = sorted(rng.choice(len(pos), size=k, replace=False))
    keep_neg = sorted(rng.choice(len(neg), size=k, replace=False))
    out = [pos[i] for i in keep_pos] + [neg[i] for i in keep_neg]
    return sorted(out, key=lambda r: r.user_id)


# ---------------------------------------------------------------------------
# corpus files: one JSON object per line
# ---------------------------------------------------------------------------

_SEQ_FIELDS = {"user_id", "tokens", "timestamps"}
_LABEL_FIELDS = {"user_id", "task", "gap_days", "label"}


def save_corpus(path, sequences: Iterable[BehaviorSequence], labels: Iterable[LabelRecord] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sequences:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")
        for r in labels:
            fh.write(json.dumps(r.to_record(), separators=(",", ":")) + "\n")


def _parse_line(line: str, lineno: int) -> BehaviorSequence | LabelRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"line {lineno}: expected an object")
    keys = set(obj)
    try:
        if keys == _SEQ_FIELDS:
            return BehaviorSequence(obj["user_id"], obj["tokens"], obj["timestamps"])
        if keys == _LABEL_FIELDS:
            return LabelRecord(obj["user_id"], obj["task"], obj["gap_days"], obj["label"])
    except (TypeError, ValueError) as exc:
        raise CorpusFormatError(f"line {lineno}: {exc}") from None
    raise CorpusFormatError(f"line {lineno}: unexpected fields {sorted(keys)}")


def iter_records(path) -> Iterator[BehaviorSequence | LabelRecord]:
    """Stream records one line at a time."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield _parse_line(line, lineno)


def count_records(path) -> tuple[int, int]:
    """(sequence count, label count) without keeping records in memory."""
    n_seq = n_lab = 0
    for rec in iter_records(path):
        if isinstance(rec, BehaviorSequence):
            n_seq += 1
        else:
            n_lab += 1
    return n_seq, n_lab


def load_corpus(path) -> tuple[list[BehaviorSequence], list[LabelRecord]]:
    sequences, labels = [], []
    for rec in iter_records(path):
        (sequences if isinstance(rec, BehaviorSequence) else labels).append(rec)
    return sequences, labels


def total_variation(a: Iterable[int], b: Iterable[int], size: int) -> float:
    pa = np.bincount(np.asarray(list(a)), minlength=size)
    pb = np.bincount(np.asarray(list(b)), minlength=size)
    return 0.5 * float(np.abs(pa / pa.sum() - pb / pb.sum()).sum())


def median_length(sequences: Iterable[BehaviorSequence]) -> float:
    return float(np.median([len(s) for s in sequences]))
