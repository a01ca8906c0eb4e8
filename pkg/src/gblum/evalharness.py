"""Evaluation protocols for user representations.

Six tasks: masked behavior prediction accuracy (random and stratified
masking), within- vs between-user cosine similarity, user retrieval scored by
mean reciprocal rank over a length sweep, and three binary downstream tasks
scored by AUC over a sweep of label gaps.  :func:`run_ablation` trains model
variants and tabulates their deltas against the full model.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from scipy.stats import loguniform
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import RandomizedSearchCV, StratifiedKFold, train_test_split
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .baselines import Embedder, TransformerEmbedder
from .encoder import POOLINGS, ModelConfig
from .logdata import (
    TASKS,
    BehaviorSequence,
    LabelRecord,
    balance_labels,
    feature_cutoff_day,
    sample_sequence_pair,
)
from .objectives import (
    TrainConfig,
    TrainingDivergedError,
    masked_accuracy,
    plan_random_masking,
    plan_stratified_masking,
    train,
    validation_windows,
)

log = logging.getLogger(__name__)

METRIC_RANGES = {
    "accuracy": (0.0, 1.0),
    "auc": (0.0, 1.0),
    "mrr": (0.0, 1.0),
    "cosine": (-1.0, 1.0),
    "cosine_difference": (-2.0, 2.0),
}
ALL_TASKS = ("mbp", "ursa", "retrieval") + TASKS


@dataclass
class EvalReport:
    model: str
    task: str
    metric: str
    value: float
    seed: int = 0
    config_fingerprint: str = ""
    pooling: str = ""
    coordinate: int | None = None

    def __post_init__(self):
        lo, hi = METRIC_RANGES[self.metric]
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.task}/{self.metric} value {self.value} outside [{lo}, {hi}]")
        if self.metric == "mrr" and self.value == 0:
            raise ValueError("MRR must be positive")

    @property
    def column(self) -> str:
        return self.task if self.coordinate is None else f"{self.task}@{self.coordinate}"


@dataclass
class MLPSpec:
    hidden_sizes: tuple[int, ...] = (32, 64, 128)
    max_layers: int = 2
    learning_rate_range: tuple[float, float] = (1e-4, 1e-2)
    l2_options: tuple[float, ...] = (0.0, 1e-4, 1e-3)
    activation: str = "relu"
    draws: int = 20
    folds: int = 5
    max_iter: int = 30
    early_stopping: bool = False
    test_frac: float = 0.2

    def __post_init__(self):
        if self.folds != 5:
            raise ValueError("downstream model selection uses exactly 5 folds")
        if self.draws < 20:
            raise ValueError("random search needs at least 20 draws")

    def search_space(self) -> dict:
        layers = [(a,) for a in self.hidden_sizes]
        if self.max_layers >= 2:
            layers += [(a, b) for a in self.hidden_sizes for b in self.hidden_sizes]
        lo, hi = self.learning_rate_range
        return {
            "mlpclassifier__hidden_layer_sizes": layers,
            "mlpclassifier__learning_rate_init": loguniform(lo, hi),
            "mlpclassifier__alpha": list(self.l2_options),
        }


@dataclass
class EvalConfig:
    tasks: list[str] = field(default_factory=lambda: list(ALL_TASKS))
    mask_rate: float = 0.15
    mbp_windows_per_user: int = 8
    mbp_budget: int = 50
    ursa_len: int = 32
    ursa_reps: int = 5
    retrieval_samples: int = 500
    retrieval_candidates: int = 100
    lengths: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    feature_len: int = 128
    gaps: list[int] = field(default_factory=lambda: list(range(8)))
    pooling: str = "auto"
    models: list[str] = field(default_factory=lambda: ["ours", "tf", "tfidf", "sgns", "untrained", "enc", "dec"])
    mlp: MLPSpec = field(default_factory=MLPSpec)
    threads: int = 1

    def validate(self) -> None:
        unknown = set(self.tasks) - set(ALL_TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}; expected a subset of {ALL_TASKS}")
        if self.pooling not in ("auto",) + POOLINGS:
            raise ValueError(f"pooling must be 'auto' or one of {POOLINGS}")
        if any(not 0 <= g <= 7 for g in self.gaps):
            raise ValueError("gaps must lie in 0..7")
        if any(n < 1 for n in self.lengths):
            raise ValueError("retrieval lengths must be positive")


@dataclass
class EvalData:
    """Held-out users: full streams, their labels and the simulated day count."""

    streams: list[BehaviorSequence]
    labels: list[LabelRecord]
    days: int


# ---------------------------------------------------------------------------
# masked behavior prediction
# ---------------------------------------------------------------------------

def majority_accuracy(targets: Sequence[int]) -> float:
    counts = np.bincount(np.asarray(targets))
    return float(counts.max() / counts.sum())


def eval_mbp(
    embedder: Embedder,
    windows: Sequence[BehaviorSequence],
    mode: str,
    rng: np.random.Generator,
    mask_rate: float = 0.15,
    budget: int = 50,
) -> dict:
    """Accuracy on masked positions, plus the majority-vote accuracy on the same masks."""
    if not isinstance(embedder, TransformerEmbedder) or not embedder.has_mbp_head:
        raise ValueError(f"embedder {embedder.kind!r} has no masked behavior prediction head")
    if mode == "random":
        plans = [plan_random_masking(w.tokens, mask_rate, rng) for w in windows]
    elif mode == "stratified":
        plans = plan_stratified_masking([w.tokens for w in windows], budget, rng, mask_rate)
    else:
        raise ValueError(f"unknown masking mode {mode!r}")
    acc, n = masked_accuracy(embedder.model, windows, plans)
    targets = [t for p in plans for t in p.targets]
    return {"accuracy": acc, "majority": majority_accuracy(targets), "masked": n}


# ---------------------------------------------------------------------------
# user representation similarity
# ---------------------------------------------------------------------------

def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    # shift a random permutation by one: nobody is paired with themselves
    perm = rng.permutation(n)
    out = np.empty(n, dtype=int)
    out[perm] = np.roll(perm, 1)
    return out


def eval_ursa(
    embedder: Embedder,
    streams: Sequence[BehaviorSequence],
    pooling,
    rng: np.random.Generator,
    window_len: int = 32,
    repetitions: int = 5,
) -> dict[str, tuple[float, float, float]]:
    """(within, between, within - between) mean cosine per pooling strategy."""
    users = [s for s in streams if len(s) >= 2]
    if len(users) < 2 or len(users) < len(streams):
        raise ValueError("URSA needs at least 2 users, each with at least 2 behaviors")
    poolings = [pooling] if isinstance(pooling, str) else list(pooling)
    within = {p: [] for p in poolings}
    between = {p: [] for p in poolings}
    for _ in range(repetitions):
        pairs = [sample_sequence_pair(s, window_len, rng) for s in users]
        other = _derangement(len(users), rng)
        emb_a = embedder.embed_pooled([a for a, _ in pairs], poolings)
        emb_b = embedder.embed_pooled([b for _, b in pairs], poolings)
        for p in poolings:
            a, b = _unit(emb_a[p]), _unit(emb_b[p])
            within[p].append((a * b).sum(axis=1))
            between[p].append((a * a[other]).sum(axis=1))
    out = {}
    for p in poolings:
        w = float(np.concatenate(within[p]).mean())
        bt = float(np.concatenate(between[p]).mean())
        out[p] = (w, bt, w - bt)
    return out


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if (n == 0).any():
        raise ValueError("cosine similarity is undefined for a zero-norm embedding")
    return x / n


# ---------------------------------------------------------------------------
# user retrieval
# ---------------------------------------------------------------------------

@dataclass
class RetrievalSample:
    query: BehaviorSequence
    candidates: list[BehaviorSequence]
    positive_index: int


def build_retrieval_samples(
    streams: Sequence[BehaviorSequence],
    num_samples: int,
    length: int,
    rng: np.random.Generator,
    num_candidates: int = 100,
    pool_per_user: int = 4,
) -> list[RetrievalSample]:
    """Query and positive are disjoint same-user windows; negatives come from distinct other users.

    Negatives are drawn from a fixed pool of ``pool_per_user`` windows per user so
    that repeated candidates are embedded once.
    """
    qualifying = [s for s in streams if len(s) >= 2 * length]
    if len(qualifying) < num_candidates:
        raise ValueError(
            f"retrieval at length {length} needs {num_candidates} users with at least "
            f"{2 * length} behaviors; only {len(qualifying)} qualify"
        )
    pool = []
    for s in qualifying:
        starts = rng.integers(0, len(s) - length + 1, size=pool_per_user)
        pool.append([s.window(int(a), int(a) + length) for a in starts])
    samples = []
    for _ in range(num_samples):
        picks = rng.choice(len(qualifying), size=num_candidates, replace=False)
        owner = qualifying[picks[0]]
        query, positive = sample_sequence_pair(owner, length, rng)
        which = rng.integers(0, pool_per_user, size=num_candidates - 1)
        negatives = [pool[k][j] for k, j in zip(picks[1:], which)]
        pos = int(rng.integers(num_candidates))
        candidates = negatives[:pos] + [positive] + negatives[pos:]
        samples.append(RetrievalSample(query, candidates, pos))
    return samples


def reciprocal_ranks(scores: np.ndarray, positive_index: Sequence[int]) -> np.ndarray:
    """1 / rank of the positive per row; ties go to the lower candidate index."""
    scores = np.asarray(scores)
    rows = np.arange(len(scores))
    pos_score = scores[rows, positive_index][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > pos_score) | ((scores == pos_score) & (idx < np.asarray(positive_index)[:, None]))
    return 1.0 / (1 + ahead.sum(axis=1))


def eval_retrieval(embedder: Embedder, samples: Sequence[RetrievalSample], pooling) -> dict[str, float]:
    """Mean reciprocal rank per pooling strategy (candidates ranked by cosine)."""
    if not samples:
        raise ValueError("no retrieval samples")
    poolings = [pooling] if isinstance(pooling, str) else list(pooling)
    # shared negative windows are embedded once
    unique, slot = [], {}
    for w in (w for s in samples for w in (s.query, *s.candidates)):
        if id(w) not in slot:
            slot[id(w)] = len(unique)
            unique.append(w)
    emb = embedder.embed_pooled(unique, poolings)
    q_idx = [slot[id(s.query)] for s in samples]
    c_idx = [[slot[id(c)] for c in s.candidates] for s in samples]
    positive = [s.positive_index for s in samples]
    out = {}
    for p in poolings:
        v = _unit(emb[p])
        q, c = v[q_idx], v[c_idx]
        scores = np.einsum("sd,skd->sk", q, c)
        out[p] = float(reciprocal_ranks(scores, positive).mean())
    return out


# ---------------------------------------------------------------------------
# downstream tasks
# ---------------------------------------------------------------------------

def build_downstream_dataset(
    data: EvalData, task: str, gap_days: int, feature_len: int, rng: np.random.Generator
) -> tuple[list[BehaviorSequence], np.ndarray]:
    """Balanced (feature window, label) pairs; features end ``gap_days`` before the label day."""
    cutoff = feature_cutoff_day(data.days, gap_days)
    by_user = {s.user_id: s for s in data.streams}
    windows, y = [], []
    usable = []
    for r in data.labels:
        if r.task != task or r.gap_days != gap_days or r.user_id not in by_user:
            continue
        past = by_user[r.user_id].before_day(cutoff)
        if past is not None:
            usable.append(r)
    for r in balance_labels(usable, task, gap_days, rng):
        windows.append(by_user[r.user_id].before_day(cutoff).latest(feature_len))
        y.append(r.label)
    return windows, np.asarray(y)


def _check_balance(y: np.ndarray) -> None:
    if abs(y.mean() - 0.5) > 0.02:
        raise ValueError(f"downstream dataset is imbalanced: positive rate {y.mean():.3f}")


def eval_downstream(
    embedder: Embedder,
    windows: Sequence[BehaviorSequence],
    labels: Sequence[int],
    spec: MLPSpec,
    seed: int,
    pooling: str = "mean",
    n_jobs: int = 1,
) -> float:
    """Test AUC of the best MLP found by random search with 5-fold CV AUC."""
    y = np.asarray(labels)
    _check_balance(y)
    return fit_mlp(embedder.embed_many(windows, pooling), y, spec, seed, n_jobs)[0]


def sweep_downstream(
    embedder: Embedder,
    windows: Sequence[BehaviorSequence],
    labels: Sequence[int],
    spec: MLPSpec,
    seed: int,
    poolings: Sequence[str] = POOLINGS,
    n_jobs: int = 1,
) -> tuple[float, str]:
    """Search once per pooling and keep the pooling with the best CV AUC.

    Selection never looks at the test split, so the returned test AUC is
    not inflated by trying several poolings.
    """
    y = np.asarray(labels)
    _check_balance(y)
    xs = embedder.embed_pooled(windows, list(poolings))
    best = None
    for p in poolings:
        test_auc, cv_auc = fit_mlp(xs[p], y, spec, seed, n_jobs)
        if best is None or cv_auc > best[0]:
            best = (cv_auc, test_auc, p)
    return best[1], best[2]


def fit_mlp(x: np.ndarray, y: np.ndarray, spec: MLPSpec, seed: int, n_jobs: int = 1) -> tuple[float, float]:
    """(test AUC, best mean CV AUC) of a random search over MLP pipelines."""
    x_tr, x_te, y_tr, y_te = train_test_split(
        x, y, test_size=spec.test_frac, stratify=y, random_state=seed
    )
    pipe = make_pipeline(
        StandardScaler(),
        MLPClassifier(
            activation=spec.activation, max_iter=spec.max_iter, early_stopping=spec.early_stopping, random_state=seed
        ),
    )
    search = RandomizedSearchCV(
        pipe,
        spec.search_space(),
        n_iter=spec.draws,
        scoring="roc_auc",
        cv=StratifiedKFold(spec.folds, shuffle=True, random_state=seed),
        refit=True,
        random_state=seed,
        n_jobs=n_jobs,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        search.fit(x_tr, y_tr)
    return float(roc_auc_score(y_te, search.predict_proba(x_te)[:, 1])), float(search.best_score_)


def fit_mlp_auc(x: np.ndarray, y: np.ndarray, spec: MLPSpec, seed: int, n_jobs: int = 1) -> float:
    return fit_mlp(x, y, spec, seed, n_jobs)[0]


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def _task_rng(seed: int, task: str, coordinate: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, ALL_TASKS.index(task) if task in ALL_TASKS else 99, coordinate, 0xE7A1])


def select_pooling(embedder: Embedder, data: EvalData, config: EvalConfig, seed: int) -> str:
    """Pooling for URSA and retrieval: best retrieval MRR at the first sweep length.

    Downstream tasks choose their own pooling by cross-validation (see
    :func:`sweep_downstream`).
    """
    if config.pooling != "auto":
        return config.pooling
    if not embedder.pooled:
        return "mean"
    length = config.lengths[0]
    samples = build_retrieval_samples(
        data.streams, min(config.retrieval_samples, 200), length,
        _task_rng(seed, "retrieval", 10_000 + length), config.retrieval_candidates,
    )
    scores = eval_retrieval(embedder, samples, POOLINGS)
    return max(POOLINGS, key=lambda p: (scores[p], -POOLINGS.index(p)))


def evaluate(
    name: str,
    embedder: Embedder,
    data: EvalData,
    config: EvalConfig,
    seed: int,
    fingerprint: str = "",
    max_train_len: int = 32,
) -> list[EvalReport]:
    """Run the configured tasks for one embedder."""
    config.validate()
    torch.set_num_threads(max(1, config.threads))
    pooling = select_pooling(embedder, data, config, seed)
    rep = lambda task, metric, value, coord=None, pool=pooling: EvalReport(  # noqa: E731
        name, task, metric, value, seed, fingerprint, pool if embedder.pooled else "none", coord
    )
    reports: list[EvalReport] = []
    if "mbp" in config.tasks and isinstance(embedder, TransformerEmbedder) and embedder.has_mbp_head:
        windows = validation_windows(data.streams, max_train_len, config.mbp_windows_per_user, seed)
        for mode in ("random", "stratified"):
            res = eval_mbp(embedder, windows, mode, _task_rng(seed, "mbp", mode == "stratified"),
                           config.mask_rate, config.mbp_budget)
            reports.append(rep(f"mbp_{mode}", "accuracy", res["accuracy"], pool="none"))
            reports.append(rep(f"mbp_{mode}_majority", "accuracy", res["majority"], pool="none"))
    if "ursa" in config.tasks:
        w, b, d = eval_ursa(embedder, data.streams, pooling, _task_rng(seed, "ursa"),
                            config.ursa_len, config.ursa_reps)[pooling]
        reports += [rep("ursa_within", "cosine", w), rep("ursa_between", "cosine", b),
                    rep("ursa_difference", "cosine_difference", d)]
    if "retrieval" in config.tasks:
        for length in config.lengths:
            samples = build_retrieval_samples(
                data.streams, config.retrieval_samples, length,
                _task_rng(seed, "retrieval", length), config.retrieval_candidates,
            )
            mrr = eval_retrieval(embedder, samples, pooling)[pooling]
            reports.append(rep("retrieval", "mrr", mrr, length))
    for task in TASKS:
        if task not in config.tasks:
            continue
        for gap in config.gaps:
            windows, y = build_downstream_dataset(data, task, gap, config.feature_len, _task_rng(seed, task, gap))
            candidates = POOLINGS if config.pooling == "auto" and embedder.pooled else (pooling,)
            auc, chosen = sweep_downstream(embedder, windows, y, config.mlp, seed, candidates, config.threads)
            reports.append(rep(task, "auc", auc, gap, pool=chosen))
    return reports


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def reports_to_jsonl(reports: Sequence[EvalReport]) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in reports)


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    """Model x (task[@coordinate]) matrix; missing cells are empty."""
    models, columns, cells = [], [], {}
    for r in reports:
        if r.model not in models:
            models.append(r.model)
        if r.column not in columns:
            columns.append(r.column)
        cells[r.model, r.column] = r.value
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model"] + columns)
    for m in models:
        row = [m] + [f"{cells[m, c]:.6f}" if (m, c) in cells else "" for c in columns]
        writer.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "-MBP", "-UCL", "-ALiBi", "-UCL&ALiBi")


def variant_configs(variant: str, model: ModelConfig, train_cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    m, t = replace(model), replace(train_cfg)
    if variant == "-MBP":
        t.mbp = False
    if variant in ("-UCL", "-UCL&ALiBi"):
        t.ucl = False
    if variant in ("-ALiBi", "-UCL&ALiBi"):
        m.positional_mode = "learned_absolute"
    return m, t


@dataclass
class AblationTable:
    columns: list[str]
    values: dict[str, dict[str, float | None]]
    failed: dict[str, str] = field(default_factory=dict)

    def deltas(self) -> dict[str, dict[str, float | None]]:
        ref = self.values["full"]
        out = {}
        for row, vals in self.values.items():
            out[row] = {
                c: (None if vals.get(c) is None or ref.get(c) is None else vals[c] - ref[c])
                for c in self.columns
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant"] + self.columns)
        deltas = self.deltas() if "full" in self.values else {}
        for row in ABLATION_VARIANTS:
            if row in self.failed:
                writer.writerow([row] + ["failed"] * len(self.columns))
                continue
            if row not in self.values:
                continue
            src = self.values[row] if row == "full" else deltas[row]
            writer.writerow([row] + ["N/A" if src[c] is None else f"{src[c]:+.2f}" if row != "full" else f"{src[c]:.2f}"
                                     for c in self.columns])
        return buf.getvalue()


def ablation_row(reports: Sequence[EvalReport], config: EvalConfig, max_train_len: int) -> dict[str, float | None]:
    """Six-task summary on a 0-100 scale; missing metrics are None."""
    got = {r.column: r.value for r in reports}
    row = {
        "MBP": got.get("mbp_random"),
        "URSA": got.get("ursa_difference"),
        f"UR@{max_train_len}": got.get(f"retrieval@{max_train_len}"),
        f"UR@{4 * max_train_len}": got.get(f"retrieval@{4 * max_train_len}"),
    }
    gap = config.gaps[0] if config.gaps else 0
    for task, short in zip(TASKS, ("RAP", "AVTP", "ASP")):
        row[short] = got.get(f"{task}@{gap}")
    return {k: None if v is None else 100.0 * v for k, v in row.items()}


def run_ablation(
    train_streams: Sequence[BehaviorSequence],
    data: EvalData,
    model_config: ModelConfig,
    train_config: TrainConfig,
    eval_config: EvalConfig,
    seed: int,
    variants: Sequence[str] = ABLATION_VARIANTS,
    trained: dict | None = None,
) -> tuple[AblationTable, dict[str, list[EvalReport]]]:
    """Train every variant with the same seed and data order, evaluate, tabulate.

    ``trained`` may supply already-trained embedders by variant name.
    """
    mtl = model_config.max_train_len
    cfg = replace(eval_config, lengths=sorted({mtl, 4 * mtl}), gaps=eval_config.gaps[:1] or [0])
    table = AblationTable(["MBP", "URSA", f"UR@{mtl}", f"UR@{4 * mtl}", "RAP", "AVTP", "ASP"], {})
    all_reports = {}
    for variant in variants:
        m, t = variant_configs(variant, model_config, train_config)
        try:
            if trained and variant in trained:
                embedder = trained[variant]
            else:
                state = train(train_streams, m, t, seed)
                embedder = TransformerEmbedder(state.model, "ours")
        except TrainingDivergedError as exc:
            log.warning("ablation variant %s diverged: %s", variant, exc)
            table.failed[variant] = str(exc)
            continue
        reports = evaluate(variant, embedder, data, cfg, seed, max_train_len=mtl)
        all_reports[variant] = reports
        row = ablation_row(reports, cfg, mtl)
        if not t.mbp:
            row["MBP"] = None
        table.values[variant] = row
    return table, all_reports
