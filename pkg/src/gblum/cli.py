"""Command-line entry point: gen-data, train, embed, eval, ablate.

Every command reads one YAML config, applies command-line overrides, writes
the fully resolved config next to its outputs and is deterministic given that
snapshot and the seed.  Layout under ``out``::

    data/    train.jsonl train_labels.jsonl eval.jsonl eval_labels.jsonl vocab.txt
    train/<model>/  epoch-NNN.safetensors model.safetensors metrics.jsonl
    embed/<model>-<split>.npz
    eval/    report.csv report.jsonl
    ablate/  ablation.csv reports.jsonl
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from .baselines import (
    CorpusStats,
    Embedder,
    RandomEmbedder,
    TableEmbedder,
    TFEmbedder,
    TfidfEmbedder,
    load_embedder,
    sgns_train,
    untrained_table,
)
from .checkpoint import CheckpointError, load_tensors, save_encoder
from .encoder import POOLINGS, ModelConfig
from .evalharness import (
    ABLATION_VARIANTS,
    ALL_TASKS,
    EvalConfig,
    EvalData,
    MLPSpec,
    evaluate,
    reports_to_csv,
    reports_to_jsonl,
    run_ablation,
)
from .logdata import (
    CorpusFormatError,
    SyntheticConfig,
    build_vocab,
    default_behavior_names,
    generate_corpus,
    load_corpus,
    save_corpus,
    save_vocab,
)
from .objectives import TrainConfig, TrainingDivergedError, train

log = logging.getLogger("gblum")

TRANSFORMER_KINDS = ("ours", "enc", "dec")
TABLE_KINDS = ("tf", "tfidf", "sgns", "untrained", "random")


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


class OverlapError(RunError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    eval_users: int = 800


@dataclass
class BaselineConfig:
    sgns_dim: int = 64
    sgns_window: int = 5
    sgns_negatives: int = 5
    sgns_epochs: int = 5
    untrained_dim: int = 768
    random_dim: int = 64


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "out": self.out,
            "threads": self.threads,
            "data": {**dataclasses.asdict(self.data.synthetic), "eval_users": self.data.eval_users},
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "baselines": dataclasses.asdict(self.baselines),
            "eval": dataclasses.asdict(self.eval),
        }
        del d["eval"]["threads"]
        d["eval"]["mlp"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["eval"]["mlp"].items()}
        return d

    def fingerprint(self) -> str:
        d = self.to_dict()
        del d["out"], d["threads"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def vocab_size(self) -> int:
        return self.data.synthetic.num_behaviors + 3

    def validate(self) -> None:
        self.data.synthetic.validate()
        if self.data.eval_users < 2:
            raise ConfigError("data.eval_users must be at least 2")
        if self.model.vocab_size != self.vocab_size:
            raise ConfigError(
                f"model.vocab_size={self.model.vocab_size} disagrees with data.num_behaviors + 3 = {self.vocab_size}"
            )
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return type(default)(value)
    return value


def _fill(cls, section: str, values: dict | None, skip: tuple[str, ...] = ()):
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a mapping")
    values = dict(values or {})
    base = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name in skip or f.name not in values:
            continue
        kwargs[f.name] = _coerce(f"{section}.{f.name}", values.pop(f.name), getattr(base, f.name))
    if values:
        raise ConfigError(f"{section}: unknown field(s) {sorted(values)}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    known = {"data", "model", "train", "baselines", "eval", "seed", "out", "threads"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    data = dict(raw.get("data") or {})
    eval_users = _coerce("data.eval_users", data.pop("eval_users", 800), 800)
    synthetic = _fill(SyntheticConfig, "data", data)
    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("vocab_size", synthetic.num_behaviors + 3)
    eval_raw = dict(raw.get("eval") or {})
    if "threads" in eval_raw:
        raise ConfigError("eval.threads: set the top-level threads field instead")
    mlp = _fill(MLPSpec, "eval.mlp", eval_raw.pop("mlp", None))
    ev = _fill(EvalConfig, "eval", eval_raw, skip=("mlp", "threads"))
    run = RunConfig(
        data=DataConfig(synthetic, eval_users),
        model=_fill(ModelConfig, "model", model_raw),
        train=_fill(TrainConfig, "train", raw.get("train")),
        baselines=_fill(BaselineConfig, "baselines", raw.get("baselines")),
        eval=replace(ev, mlp=mlp),
        seed=_coerce("seed", raw.get("seed", 0), 0),
        out=_coerce("out", raw.get("out", "runs/default"), ""),
        threads=_coerce("threads", raw.get("threads", 1), 1),
    )
    run.eval.threads = run.threads
    try:
        run.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return run


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _set_path(raw: dict, dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = raw
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {p} is not a section")
    node[leaf] = value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(raw, key, yaml.safe_load(value))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    if args.threads is not None:
        raw["threads"] = args.threads
    ev = raw.setdefault("eval", {})
    if getattr(args, "task", None):
        tasks = [t for item in args.task for t in item.split(",") if t]
        ev["tasks"] = [t for t in ALL_TASKS if t in tasks] + [t for t in tasks if t not in ALL_TASKS]
    if getattr(args, "lengths", None):
        ev["lengths"] = _int_list(args.lengths)
    if getattr(args, "gaps", None):
        ev["gaps"] = _int_list(args.gaps)
    return config_from_dict(raw)


def write_snapshot(run: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.yaml").write_text(yaml.safe_dump(run.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# paths and corpora
# ---------------------------------------------------------------------------

def _data_dir(run: RunConfig) -> Path:
    return Path(run.out) / "data"


def _model_path(run: RunConfig, name: str) -> Path:
    return Path(run.out) / "train" / name / "model.safetensors"


def _load_split(run: RunConfig, split: str):
    seq_path = _data_dir(run) / f"{split}.jsonl"
    label_path = _data_dir(run) / f"{split}_labels.jsonl"
    if not seq_path.exists():
        raise RunError(f"corpus not found: {seq_path} (run gen-data first)")
    try:
        seqs, _ = load_corpus(seq_path)
        labels = load_corpus(label_path)[1] if label_path.exists() else []
    except CorpusFormatError as exc:
        raise RunError(f"{seq_path}: {exc}") from None
    return seqs, labels


def check_disjoint(train_ids, eval_ids) -> None:
    overlap = sorted(set(train_ids) & set(eval_ids))
    if overlap:
        shown = ", ".join(map(str, overlap[:20])) + (" ..." if len(overlap) > 20 else "")
        raise OverlapError(f"{len(overlap)} user id(s) appear in both training and evaluation data: {shown}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(run: RunConfig) -> None:
    out = _data_dir(run)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunError(f"cannot create output directory {out}: {exc}") from None
    syn = run.data.synthetic
    held_out = replace(syn, num_users=run.data.eval_users, user_id_offset=syn.user_id_offset + syn.num_users)
    for split, cfg in (("train", syn), ("eval", held_out)):
        _, streams, labels = generate_corpus(cfg, run.seed)
        save_corpus(out / f"{split}.jsonl", streams)
        save_corpus(out / f"{split}_labels.jsonl", [], labels)
        log.info("%s: %d users, %d label records", split, len(streams), len(labels))
    save_vocab(out / "vocab.txt", build_vocab(default_behavior_names(syn.num_behaviors)))
    write_snapshot(run, out)


def variant_name(kind: str, no_mbp: bool = False, no_ucl: bool = False, no_alibi: bool = False) -> str:
    suffix = "".join(s for s, on in (("-no-mbp", no_mbp), ("-no-ucl", no_ucl), ("-no-alibi", no_alibi)) if on)
    return kind + suffix


def transformer_configs(kind: str, model: ModelConfig, train_cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    if kind == "ours":
        return model, train_cfg
    if kind == "enc":
        return replace(model, positional_mode="learned_absolute"), replace(train_cfg, ucl=False, mbp=True, nbp=False)
    if kind == "dec":
        return (
            replace(model, positional_mode="learned_absolute", attention_mode="causal"),
            replace(train_cfg, mbp=False, ucl=False, nbp=True),
        )
    raise ValueError(f"{kind!r} is not a transformer kind")


def fit_baseline(kind: str, run: RunConfig, train_streams) -> Embedder:
    nb, b = run.data.synthetic.num_behaviors, run.baselines
    if kind == "tf":
        return TFEmbedder(nb)
    if kind == "tfidf":
        return TfidfEmbedder(CorpusStats.from_sequences(train_streams, nb))
    if kind == "sgns":
        table = sgns_train(train_streams, nb, b.sgns_dim, b.sgns_window, b.sgns_negatives, b.sgns_epochs, run.seed)
        return TableEmbedder("sgns", table)
    if kind == "untrained":
        return TableEmbedder("untrained", untrained_table(nb, b.untrained_dim, run.seed))
    if kind == "random":
        return RandomEmbedder(b.random_dim, run.seed)
    raise ValueError(f"unknown baseline kind {kind!r}")


def cmd_train(run: RunConfig, kind: str = "ours", no_mbp=False, no_ucl=False, no_alibi=False) -> Path:
    streams, _ = _load_split(run, "train")
    name = variant_name(kind, no_mbp, no_ucl, no_alibi)
    out = Path(run.out) / "train" / name
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(run, out)
    user_range = [min(s.user_id for s in streams), max(s.user_id for s in streams)]
    if kind not in TRANSFORMER_KINDS:
        if no_mbp or no_ucl or no_alibi:
            raise RunError(f"ablation flags apply to transformer models, not {kind!r}")
        if kind == "random":
            raise RunError("the random control has no trainable state; evaluate it directly")
        fit_baseline(kind, run, streams).save(out / "model.safetensors")
        return out / "model.safetensors"

    model_cfg, train_cfg = transformer_configs(kind, run.model, run.train)
    if no_mbp:
        train_cfg = replace(train_cfg, mbp=False)
    if no_ucl:
        train_cfg = replace(train_cfg, ucl=False)
    if no_alibi:
        model_cfg = replace(model_cfg, positional_mode="learned_absolute")
    extra = {"train_user_ids": user_range, "seed": run.seed, "train_config": dataclasses.asdict(train_cfg)}
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    def on_epoch(state, metrics):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(metrics, sort_keys=True) + "\n")
        save_encoder(out / f"epoch-{metrics['epoch']:03d}.safetensors", state.model, kind, extra)

    try:
        state = train(streams, model_cfg, train_cfg, run.seed, on_epoch=on_epoch)
    except TrainingDivergedError as exc:
        if exc.last_good is not None:
            save_encoder(out / "last-good.safetensors", exc.last_good.model, kind, extra)
        raise RunError(f"training diverged: {exc}") from None
    save_encoder(out / "model.safetensors", state.model, kind, extra)
    return out / "model.safetensors"


def load_model(run: RunConfig, name: str, train_streams, eval_ids) -> Embedder:
    """Load ``out/train/<name>``; cheap baselines are fitted (and saved) when absent."""
    if name == "random":
        return fit_baseline("random", run, train_streams)
    path = _model_path(run, name)
    if not path.exists():
        if name in TABLE_KINDS:
            path.parent.mkdir(parents=True, exist_ok=True)
            fit_baseline(name, run, train_streams).save(path)
        else:
            raise RunError(f"{name}: checkpoint not found at {path} (run `train` first)")
    _, meta = load_tensors(path)
    if "train_user_ids" in meta:
        lo, hi = meta["train_user_ids"]
        check_disjoint(range(lo, hi + 1), eval_ids)
    return load_embedder(path)


def cmd_eval(run: RunConfig, models: list[str] | None = None) -> tuple[Path, list[str]]:
    torch.set_num_threads(run.threads)
    train_streams, _ = _load_split(run, "train")
    streams, labels = _load_split(run, "eval")
    eval_ids = [s.user_id for s in streams]
    check_disjoint([s.user_id for s in train_streams], eval_ids)
    data = EvalData(streams, labels, run.data.synthetic.days)
    out = Path(run.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(run, out)
    reports, failed = [], []
    for name in models or run.eval.models:
        try:
            embedder = load_model(run, name, train_streams, eval_ids)
            reports += evaluate(name, embedder, data, run.eval, run.seed, run.fingerprint(), run.model.max_train_len)
        except OverlapError:
            raise
        except (RunError, CheckpointError, ValueError) as exc:
            log.error("%s: %s", name, exc)
            failed.append(name)
    (out / "report.csv").write_text(reports_to_csv(reports))
    (out / "report.jsonl").write_text(reports_to_jsonl(reports))
    return out / "report.csv", failed


def cmd_embed(run: RunConfig, model: str, split: str = "eval", pooling: str | None = None,
              length: int | None = None) -> Path:
    torch.set_num_threads(run.threads)
    train_streams, _ = _load_split(run, "train")
    streams, _ = _load_split(run, split)
    eval_ids = [s.user_id for s in streams] if split == "eval" else []
    embedder = load_model(run, model, train_streams, eval_ids)
    pooling = pooling or (run.eval.pooling if run.eval.pooling != "auto" else "mean")
    seqs = [s.latest(length) if length else s for s in streams]
    vectors = embedder.embed_many(seqs, pooling)
    out = Path(run.out) / "embed"
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(run, out)
    path = out / f"{model}-{split}.npz"
    np.savez(path, user_ids=np.array([s.user_id for s in streams]), vectors=vectors)
    return path


def cmd_ablate(run: RunConfig, variants: list[str] | None = None) -> Path:
    torch.set_num_threads(run.threads)
    train_streams, _ = _load_split(run, "train")
    streams, labels = _load_split(run, "eval")
    check_disjoint([s.user_id for s in train_streams], [s.user_id for s in streams])
    data = EvalData(streams, labels, run.data.synthetic.days)
    out = Path(run.out) / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(run, out)
    table, reports = run_ablation(
        train_streams, data, run.model, run.train, run.eval, run.seed, variants or ABLATION_VARIANTS
    )
    (out / "ablation.csv").write_text(table.to_csv())
    (out / "reports.jsonl").write_text("".join(reports_to_jsonl(r) for r in reports.values()))
    if table.failed:
        raise RunError("ablation variant(s) failed: " + ", ".join(sorted(table.failed)))
    return out / "ablation.csv"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--threads", type=int, help="torch / sklearn threads (default 1)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gblum", description="Behavioral-log user modeling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate synthetic train/eval corpora")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--kind", default="ours", choices=TRANSFORMER_KINDS + TABLE_KINDS[:-1])
    p.add_argument("--no-mbp", action="store_true")
    p.add_argument("--no-ucl", action="store_true")
    p.add_argument("--no-alibi", action="store_true")

    p = sub.add_parser("embed", parents=[common], help="write user embeddings")
    p.add_argument("--model", default="ours")
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--pooling", choices=POOLINGS)
    p.add_argument("--length", type=int, help="embed only the latest N behaviors")

    for name, helptext in (("eval", "evaluate models"), ("ablate", "train and evaluate ablation variants")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--task", action="append", help=f"tasks (comma-separated) from {', '.join(ALL_TASKS)}")
        p.add_argument("--lengths", help="retrieval lengths, e.g. 32,64,128,256")
        p.add_argument("--gaps", help="downstream gaps in days, e.g. 0,1,2")
    sub.choices["eval"].add_argument("--model", action="append", help="models to evaluate (default: eval.models)")
    sub.choices["ablate"].add_argument("--variant", action="append", choices=ABLATION_VARIANTS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        run = resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(run)
            print(_data_dir(run))
        elif args.command == "train":
            print(cmd_train(run, args.kind, args.no_mbp, args.no_ucl, args.no_alibi))
        elif args.command == "embed":
            print(cmd_embed(run, args.model, args.split, args.pooling, args.length))
        elif args.command == "eval":
            models = [m for item in args.model or [] for m in item.split(",") if m] or None
            path, failed = cmd_eval(run, models)
            print(path)
            if failed:
                print("failed models: " + ", ".join(failed), file=sys.stderr)
                return 1
        elif args.command == "ablate":
            print(cmd_ablate(run, args.variant))
    except (ConfigError, RunError, CheckpointError) as exc:
        print(f"gblum {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
