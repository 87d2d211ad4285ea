"""Command-line entry point.

Every subcommand reads one JSON config (``--config``); ``--seed`` and
``--out`` override the config, and ``--set section.field=value`` overrides
any other scalar. The resolved config, tool version and seeds are written to
``resolved_config.json`` in every output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort,
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import CorpusConfigError, CorpusSpec, generate_corpus, generate_reading_corpus, read_jsonl, write_corpus, write_jsonl
from .environments import (
    EnvSpec,
    InsufficientData,
    InsufficientPool,
    MixtureSpec,
    _record_texts,
    build_questions,
    cross_annotate,
    filter_questions,
    split_records,
)
from .harness import (
    TEMPERATURE_GRID,
    CrossTable,
    TrainingAborted,
    TrainRun,
    attention_analysis,
    evaluate,
    intervention_experiment,
    make_dataset,
    mixture_experiment,
    pretrain_reader,
    quality_sweep,
    quantity_sweep,
    temperature_search,
    train,
)
from .model import FidModel, ModelConfig, Tokenizer
from .numerics import NumericalAbort

log = logging.getLogger("fidlab")

COMMANDS = (
    "gen-corpus",
    "ingest",
    "annotate",
    "train",
    "eval",
    "sweep-quality",
    "sweep-quantity",
    "mixture",
    "probe-attention",
    "intervene",
    "adapt-temperature",
)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    enabled: bool = True
    n_questions: int = 20000
    unanswerable_rate: float = 0.5
    corpus_seed: int = 1
    max_steps: int = 3000
    eval_every: int = 1000
    base_lr: float = 1e-3
    n_dev: int = 300


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    max_steps: int = 2000
    eval_every: int = 100
    batch_size: int = 8
    target_mode: str = "first-gold"
    dev_fraction: float = 0.15
    min_relevant: int = 3
    min_irrelevant: int = 64


@dataclass
class EnvConfig:
    train: list = field(default_factory=lambda: [3, 7])  # [n+, n-] or a list of such pairs (mixture)
    eval: list = field(default_factory=lambda: [[1, 9], [3, 7]])


@dataclass
class EvalConfig:
    n_passage_sets: int = 5
    seed: int = 0


@dataclass
class SweepConfig:
    n_values: list = field(default_factory=lambda: [10])
    n_plus_values: list = field(default_factory=lambda: [1, 3])
    k_values: list = field(default_factory=lambda: [1, 5, 20])
    quantity_n_plus_values: list = field(default_factory=lambda: [1, 2, 3])
    mixture_components: list = field(default_factory=lambda: [[1, 9], [2, 8], [3, 7]])


@dataclass
class InterveneConfig:
    r_values: list = field(default_factory=lambda: [1.0, 0.1, 0.0])


@dataclass
class AdaptConfig:
    grid: list = field(default_factory=lambda: list(TEMPERATURE_GRID))
    env: list = field(default_factory=lambda: [3, 7])
    salt: str = "temperature-folds"


@dataclass
class AnnotateConfig:
    split_seed: int = 0
    annotator_env: list = field(default_factory=lambda: [1, 9])
    dual_setting: bool = False


@dataclass
class PathsConfig:
    corpus: str | None = None  # FiD JSON
    labels: str | None = None  # relevance-labels JSONL
    reading_corpus: str | None = None
    checkpoints: Any = None  # list of paths, or {label: [paths]} for intervene
    out: str | None = None


@dataclass
class RunConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    workers: int = 1
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    intervene: InterveneConfig = field(default_factory=InterveneConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    annotate: AnnotateConfig = field(default_factory=AnnotateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.field=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    cfg = _build(RunConfig, data, "config")
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds must be a nonempty list of integers")
    try:
        cfg.corpus.validate()
    except CorpusConfigError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def _env(pair, where: str) -> EnvSpec:
    try:
        n_plus, n_minus = pair
        return EnvSpec(int(n_plus), int(n_minus))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected [n_plus, n_minus], got {pair!r}") from exc


def _env_or_mixture(spec, where: str) -> EnvSpec | MixtureSpec:
    if spec and isinstance(spec[0], (list, tuple)):
        return MixtureSpec(tuple(_env(p, where) for p in spec))
    return _env(spec, where)


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.paths.out or f"runs/{command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, cfg: RunConfig, command: str) -> None:
    payload = {"command": command, "version": __version__, "seeds": cfg.seeds, "config": config_to_dict(cfg)}
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _load_records(cfg: RunConfig) -> tuple[list[dict], list[dict] | None]:
    if cfg.paths.corpus is None:
        records, labels = generate_corpus(cfg.corpus)
        return records, labels
    path = Path(cfg.paths.corpus)
    if not path.exists():
        raise DataError(f"corpus not found: {path}")
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    validate_records(records, str(path))
    labels = None
    if cfg.paths.labels:
        lpath = Path(cfg.paths.labels)
        if not lpath.exists():
            raise DataError(f"labels not found: {lpath}")
        labels = read_jsonl(lpath)
    return records, labels


def validate_records(records, where: str) -> None:
    if not isinstance(records, list):
        raise DataError(f"{where}: expected a list of question records")
    for i, rec in enumerate(records):
        for key in ("question", "answers", "ctxs"):
            if key not in rec:
                raise DataError(f"{where}: record {i} lacks '{key}'")
        if not rec["answers"]:
            raise DataError(f"{where}: record {i} has no answers")
        for j, ctx in enumerate(rec["ctxs"]):
            if "text" not in ctx:
                raise DataError(f"{where}: record {i} passage {j} lacks 'text'")


def _reading_corpus(cfg: RunConfig) -> tuple[list[dict], list[dict]]:
    if cfg.paths.reading_corpus:
        path = Path(cfg.paths.reading_corpus)
        if not path.exists():
            raise DataError(f"reading corpus not found: {path}")
        records = json.loads(path.read_text())
        labels = [
            {"question_id": r["id"], "passage_id": c["id"], "label": "relevant"} for r in records for c in r["ctxs"]
        ]
        return records, labels
    p = cfg.pretrain
    return generate_reading_corpus(cfg.corpus, p.n_questions, p.corpus_seed, p.unanswerable_rate)


@dataclass
class Workspace:
    cfg: RunConfig
    dataset: Any
    tokenizer: Tokenizer
    model_config: ModelConfig
    reading: tuple[list[dict], list[dict]] | None


def _workspace(cfg: RunConfig) -> Workspace:
    records, labels = _load_records(cfg)
    reading = _reading_corpus(cfg) if cfg.pretrain.enabled else None
    texts = _record_texts(records)
    if reading is not None:
        texts = itertools.chain(texts, _record_texts(reading[0]))
    tokenizer = Tokenizer.from_texts(texts, max_size=cfg.model.vocab_size)
    t = cfg.train
    dataset = make_dataset(
        records, labels, tokenizer, t.dev_fraction, min_relevant=t.min_relevant, min_irrelevant=t.min_irrelevant
    )
    if not dataset.train or not dataset.eval:
        raise DataError(
            f"after filtering: {len(dataset.train)} train and {len(dataset.eval)} eval questions; need both nonempty"
        )
    return Workspace(cfg, dataset, tokenizer, cfg.model, reading)


def _train_run(cfg: RunConfig, env, seed: int, checkpoint_dir: str | None = None) -> TrainRun:
    t = cfg.train
    return TrainRun(
        env=env,
        seed=seed,
        base_lr=t.base_lr,
        warmup_steps=t.warmup_steps,
        weight_decay=t.weight_decay,
        max_grad_norm=t.max_grad_norm,
        max_steps=t.max_steps,
        eval_every=t.eval_every,
        batch_size=t.batch_size,
        target_mode=t.target_mode,
        checkpoint_dir=checkpoint_dir,
    )


def _inits(ws: Workspace, seeds: Sequence[int] | None = None) -> dict[int, FidModel] | None:
    if ws.reading is None:
        return None
    p = ws.cfg.pretrain
    inits = {}
    for seed in ws.cfg.seeds if seeds is None else seeds:
        run = TrainRun(
            env=EnvSpec(1, 0), seed=seed, base_lr=p.base_lr, max_steps=p.max_steps, eval_every=p.eval_every,
            batch_size=ws.cfg.train.batch_size, warmup_steps=ws.cfg.train.warmup_steps,
        )
        ck = pretrain_reader(ws.reading[0], ws.reading[1], ws.tokenizer, ws.model_config, run, p.n_dev)
        log.info("pretrained reader seed %d: dev EM %.1f at step %d", seed, ck.dev_em, ck.step)
        inits[seed] = ck.model
    return inits


def _write_csv(rows: Sequence[dict], path: Path) -> None:
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _save_table_checkpoints(table: CrossTable, out: Path) -> None:
    for label, cks in table.checkpoints.items():
        for ck in cks:
            save_checkpoint(out / "checkpoints" / label / f"seed{ck.seed}.fidl", ck.model, ck.meta())


def _write_table(table: CrossTable, out: Path, name: str) -> None:
    _write_csv(table.csv_rows(), out / f"{name}.csv")
    # matrix form for plotting: rows train env, columns eval env
    matrix = [{"train_env": t, **{e: round(table.mean(t, e), 4) for e in table.eval_envs}} for t in table.train_envs]
    _write_csv(matrix, out / f"{name}_matrix.csv")
    _save_table_checkpoints(table, out)


def _checkpoint_paths(cfg: RunConfig) -> list[str]:
    paths = cfg.paths.checkpoints
    if paths is None:
        raise ConfigError("paths.checkpoints is required for this command")
    if isinstance(paths, str):
        paths = [paths]
    if isinstance(paths, dict):
        return [p for group in paths.values() for p in ([group] if isinstance(group, str) else group)]
    return list(paths)


def _load(path: str) -> FidModel:
    try:
        model, _ = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    return model


def _eval_questions(cfg: RunConfig, tokenizer_from: FidModel | None = None):
    records, labels = _load_records(cfg)
    t = cfg.train
    _, held = split_records(records)
    return filter_questions(build_questions(held, labels), t.min_relevant, t.min_irrelevant)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig, out: Path) -> None:
    records, labels = generate_corpus(cfg.corpus)
    write_corpus(records, labels, out)
    if cfg.pretrain.enabled:
        reading, _ = _reading_corpus(cfg)
        (out / "reading_corpus.json").write_text(json.dumps(reading, indent=1, sort_keys=True))
    (out / "corpus_summary.json").write_text(
        json.dumps({"n_questions": len(records), "n_labels": len(labels)}, indent=2)
    )


def cmd_ingest(cfg: RunConfig, out: Path) -> None:
    if cfg.paths.corpus is None:
        raise ConfigError("ingest needs paths.corpus")
    records, labels = _load_records(cfg)
    questions = build_questions(records, labels)
    t = cfg.train
    kept = filter_questions(questions, t.min_relevant, t.min_irrelevant)
    rows = [
        {
            "question_id": q.id,
            "n_relevant": len(q.relevant_pool),
            "n_irrelevant": len(q.irrelevant_pool),
            "n_discarded": len(q.discarded_pool),
            "kept": q in kept,
        }
        for q in questions
    ]
    write_jsonl(rows, out / "pools.jsonl")
    (out / "ingest_summary.json").write_text(
        json.dumps({"n_questions": len(questions), "n_kept": len(kept), "labelled": labels is not None}, indent=2)
    )


def cmd_annotate(cfg: RunConfig, out: Path) -> None:
    records, _ = _load_records(cfg)
    a = cfg.annotate
    env = _env(a.annotator_env, "annotate.annotator_env")
    run = _train_run(cfg, env, cfg.seeds[0])
    init = None
    if cfg.pretrain.enabled:
        reading = _reading_corpus(cfg)
        texts = itertools.chain(_record_texts(records), _record_texts(reading[0]))
        tokenizer = Tokenizer.from_texts(texts, max_size=cfg.model.vocab_size)
        ws = Workspace(cfg, None, tokenizer, cfg.model, reading)
        init = _inits(ws, [cfg.seeds[0]])[cfg.seeds[0]]
    result = cross_annotate(records, a.split_seed, cfg.model, run, env, a.dual_setting, init_model=init)
    write_jsonl(result.labels, out / "relevance_labels.jsonl")
    counts: dict[str, int] = {}
    for row in result.labels:
        counts[row["label"]] = counts.get(row["label"], 0) + 1
    (out / "annotation_summary.json").write_text(
        json.dumps({"split_sizes": result.split_sizes, "dev_em": result.dev_em, "label_counts": counts}, indent=2)
    )


def cmd_train(cfg: RunConfig, out: Path) -> None:
    ws = _workspace(cfg)
    env = _env_or_mixture(cfg.env.train, "env.train")
    inits = _inits(ws) or {}
    summary = []
    for seed in cfg.seeds:
        ck_dir = out / f"seed{seed}"
        ck = train(
            _train_run(cfg, env, seed, str(ck_dir)),
            ws.dataset.train,
            ws.dataset.dev,
            ws.model_config,
            ws.tokenizer,
            init_model=inits.get(seed),
        )
        save_checkpoint(ck_dir / "best.fidl", ck.model, ck.meta())
        write_jsonl(ck.history, ck_dir / "history.jsonl")
        summary.append(ck.meta())
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    paths = _checkpoint_paths(cfg)
    models = [_load(p) for p in paths]
    questions = _eval_questions(cfg)
    rows, records = [], []
    for pair in cfg.env.eval:
        env = _env_or_mixture(pair, "env.eval")
        rep = evaluate(models, env, questions, cfg.eval.n_passage_sets, seed=cfg.eval.seed, records=records)
        rows.append(
            {
                "eval_env": rep.env,
                "em_mean": round(rep.mean, 4),
                "em_std": round(rep.std, 4),
                "cell": rep.cell(),
                "n_checkpoints": len(models),
                "n_sets": cfg.eval.n_passage_sets,
                "n_questions": rep.n_questions,
            }
        )
    _write_csv(rows, out / "eval.csv")
    write_jsonl(records, out / "predictions.jsonl")


def cmd_sweep_quality(cfg: RunConfig, out: Path) -> None:
    ws = _workspace(cfg)
    s = cfg.sweep
    run = _train_run(cfg, EnvSpec(1, 0), cfg.seeds[0])
    table = quality_sweep(
        s.n_values, s.n_plus_values, ws.dataset, ws.model_config, run, cfg.seeds, cfg.eval.n_passage_sets,
        cfg.workers, _inits(ws),
    )
    _write_table(table, out, "quality_sweep")


def cmd_sweep_quantity(cfg: RunConfig, out: Path) -> None:
    ws = _workspace(cfg)
    s = cfg.sweep
    run = _train_run(cfg, EnvSpec(1, 0), cfg.seeds[0])
    table = quantity_sweep(
        s.k_values, s.quantity_n_plus_values, ws.dataset, ws.model_config, run, cfg.seeds,
        cfg.eval.n_passage_sets, workers=cfg.workers, inits=_inits(ws),
    )
    _write_table(table, out, "quantity_sweep")


def cmd_mixture(cfg: RunConfig, out: Path) -> None:
    ws = _workspace(cfg)
    comps = [_env(p, "sweep.mixture_components") for p in cfg.sweep.mixture_components]
    run = _train_run(cfg, comps[0], cfg.seeds[0])
    table = mixture_experiment(
        comps, ws.dataset, ws.model_config, run, cfg.seeds, cfg.eval.n_passage_sets, cfg.workers, _inits(ws)
    )
    _write_table(table, out, "mixture")


def cmd_probe_attention(cfg: RunConfig, out: Path) -> None:
    models = [_load(p) for p in _checkpoint_paths(cfg)]
    questions = _eval_questions(cfg)
    layer_rows, hist_rows = [], []
    for pair in cfg.env.eval:
        env = _env(pair, "env.eval")
        rep = attention_analysis(models, env, questions, cfg.eval.n_passage_sets, seed=cfg.eval.seed)
        for k, (rel, irr) in enumerate(zip(rep.relevant_mass, rep.irrelevant_mass)):
            layer_rows.append(
                {"eval_env": rep.env, "layer": k, "relevant_pct": round(float(rel), 4), "irrelevant_pct": round(float(irr), 4)}
            )
        for k in range(len(rep.relevant_hist)):
            for b in range(len(rep.bins) - 1):
                hist_rows.append(
                    {
                        "eval_env": rep.env,
                        "layer": k,
                        "bin_low": round(float(rep.bins[b]), 6),
                        "bin_high": round(float(rep.bins[b + 1]), 6),
                        "relevant_count": int(rep.relevant_hist[k, b]),
                        "irrelevant_count": int(rep.irrelevant_hist[k, b]),
                    }
                )
    _write_csv(layer_rows, out / "attention_layers.csv")
    _write_csv(hist_rows, out / "attention_histograms.csv")


def cmd_intervene(cfg: RunConfig, out: Path) -> None:
    groups = cfg.paths.checkpoints
    if isinstance(groups, list) or isinstance(groups, str):
        groups = {"model": groups}
    if not isinstance(groups, dict):
        raise ConfigError("paths.checkpoints must map model labels to checkpoint paths")
    checkpoints = {
        label: [_load(p) for p in ([paths] if isinstance(paths, str) else paths)] for label, paths in groups.items()
    }
    envs = [_env(p, "env.eval") for p in cfg.env.eval]
    table = intervention_experiment(
        checkpoints, envs, _eval_questions(cfg), cfg.intervene.r_values, cfg.eval.n_passage_sets, cfg.eval.seed
    )
    _write_csv(table.csv_rows(), out / "intervention.csv")


def cmd_adapt_temperature(cfg: RunConfig, out: Path) -> None:
    models = [_load(p) for p in _checkpoint_paths(cfg)]
    a = cfg.adapt
    result = temperature_search(
        models, _eval_questions(cfg), _env(a.env, "adapt.env"), a.grid, cfg.eval.n_passage_sets, cfg.eval.seed, a.salt
    )
    payload = {"env": _env(a.env, "adapt.env").label(), **result.to_json()}
    (out / "temperature_search.json").write_text(json.dumps(payload, indent=2))


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "ingest": cmd_ingest,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-quality": cmd_sweep_quality,
    "sweep-quantity": cmd_sweep_quantity,
    "mixture": cmd_mixture,
    "probe-attention": cmd_probe_attention,
    "intervene": cmd_intervene,
    "adapt-temperature": cmd_adapt_temperature,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fidlab", description="Desk-scale Fusion-in-Decoder experiments.")
    parser.add_argument("--version", action="version", version=f"fidlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="run a single seed (overrides config seeds)")
        p.add_argument("--out", help="output directory (overrides paths.out)")
        p.add_argument("--workers", type=int, help="parallel training processes")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE", help="override a config value")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.seeds = [args.seed]
        if args.out is not None:
            cfg.paths.out = args.out
        if args.workers is not None:
            cfg.workers = args.workers
        out = _out_dir(cfg, args.command)
        _echo_config(out, cfg, args.command)
        HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, InsufficientPool, InsufficientData, FileNotFoundError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (TrainingAborted, NumericalAbort) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - structured last-resort report
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
