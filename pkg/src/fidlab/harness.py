"""Training, evaluation and the context quality/quantity experiments.

EM values are percentages throughout. Each training step draws fresh
contexts through keyed streams, dev EM is measured every ``eval_every``
steps, and the checkpoint with the best dev EM (earliest on ties) is kept.
"""

from __future__ import annotations

import copy
import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .attention_control import InterventionSpec, TemperatureSpec, make_intervention_transform, make_temperature_transform
from .checkpoint import save_checkpoint
from .corpus import EmConfig, exact_match, pick_target_answer
from .environments import (
    Context,
    EnvSpec,
    MixtureSpec,
    Question,
    Stream,
    build_questions,
    filter_questions,
    hash_partition,
    sample_context,
    sample_env,
    split_records,
)
from .model import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    AttentionTransform,
    FidModel,
    ModelConfig,
    Tokenizer,
    encode_context,
    forward_batch,
    greedy_decode_batch,
    passage_totals,
)

log = logging.getLogger(__name__)

TEMPERATURE_GRID = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


class TrainingAborted(nx.NumericalAbort):
    def __init__(self, message: str, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    train: list[Question]
    dev: list[Question]
    eval: list[Question]
    tokenizer: Tokenizer

    def min_pool(self) -> tuple[int, int]:
        qs = self.train + self.dev + self.eval
        return min(len(q.relevant_pool) for q in qs), min(len(q.irrelevant_pool) for q in qs)


def make_dataset(
    records: Sequence[dict],
    labels: Iterable[dict] | None,
    tokenizer: Tokenizer,
    dev_fraction: float = 0.15,
    salt: str = "dev-split",
    min_relevant: int = 3,
    min_irrelevant: int = 64,
) -> Dataset:
    """Split train-side records into train/dev by salted hash; filter pools."""
    train_side, held = split_records(records)
    labels = list(labels) if labels is not None else None
    questions = filter_questions(build_questions(train_side, labels), min_relevant, min_irrelevant)
    held_q = filter_questions(build_questions(held, labels), min_relevant, min_irrelevant)
    ids = [q.id for q in questions]
    n_dev = int(round(len(ids) * dev_fraction))
    ranked = hash_partition(ids, 1, salt)[0]
    dev_ids = set(ranked[:n_dev])
    return Dataset(
        [q for q in questions if q.id not in dev_ids],
        [q for q in questions if q.id in dev_ids],
        held_q,
        tokenizer,
    )


# ---------------------------------------------------------------------------
# Prediction and EM
# ---------------------------------------------------------------------------


class OracleReader:
    """Answers every question with its first gold answer."""

    def predict(self, items, transform=None) -> list[str]:
        return [q.gold_answers[0] for q, _ in items]


def predict_answers(
    reader,
    items: Sequence[tuple[Question, Context]],
    transform: AttentionTransform | None = None,
    batch_tokens: int = 20000,
) -> list[str]:
    """Greedy answers for (question, context) pairs, batched by passage count."""
    if not isinstance(reader, FidModel):
        return list(reader.predict(items, transform))
    model = reader
    L = model.config.passage_len
    out: list[str | None] = [None] * len(items)
    groups: dict[int, list[int]] = {}
    for i, (_, ctx) in enumerate(items):
        groups.setdefault(len(ctx.passages), []).append(i)
    for n, idx in groups.items():
        per = max(1, batch_tokens // (n * L))
        for lo in range(0, len(idx), per):
            chunk = idx[lo : lo + per]
            enc = np.stack([encode_context(model, items[i][0].text, items[i][1]) for i in chunk])
            rel = np.array([items[i][1].relevance_mask for i in chunk], dtype=bool)
            ids, _ = greedy_decode_batch(model, enc, transform, rel)
            for i, toks in zip(chunk, ids):
                out[i] = model.tokenizer.decode(toks)
    return out  # type: ignore[return-value]


def em_scores(reader, items, transform=None, em: EmConfig = EmConfig()) -> np.ndarray:
    preds = predict_answers(reader, items, transform)
    return np.array([exact_match(p, q.gold_answers, em) for p, (q, _) in zip(preds, items)], dtype=float)


def passage_sets(questions: Sequence[Question], env: EnvSpec | MixtureSpec, n_sets: int, seed: int) -> list[list]:
    """``n_sets`` independent evaluation contexts per question."""
    return [
        [(q, sample_env(q, env, Stream(seed, s, "eval"))) for q in questions] for s in range(n_sets)
    ]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    env: EnvSpec | MixtureSpec
    seed: int = 0
    base_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    max_steps: int = 2000
    eval_every: int = 100
    batch_size: int = 8
    target_mode: str = "first-gold"
    dev_env: EnvSpec | MixtureSpec | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")


@dataclass
class Checkpoint:
    model: FidModel
    step: int
    dev_em: float
    seed: int
    env_label: str
    history: list[dict] = field(default_factory=list)

    def meta(self) -> dict:
        return {"step": self.step, "dev_em": self.dev_em, "seed": self.seed, "env": self.env_label}


def env_label(env: EnvSpec | MixtureSpec) -> str:
    return env.label()


def _encode_target(tokenizer: Tokenizer, answer: str, max_len: int) -> list[int]:
    return tokenizer.encode(answer)[:max_len] + [EOS_ID]


def training_batch(
    model: FidModel, questions: Sequence[Question], run: TrainRun, step: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Sample one batch; returns (enc_ids, dec_in, targets, mask) per passage-count group."""
    picker = Stream(run.seed, step, "batch").rng("batch")
    chosen = picker.choice(len(questions), size=min(run.batch_size, len(questions)), replace=False)
    stream = Stream(run.seed, step, "train")
    groups: dict[int, list] = {}
    for qi in chosen:
        q = questions[int(qi)]
        ctx = sample_env(q, run.env, stream)
        target = pick_target_answer(
            q.gold_answers, [p.text for p in ctx.passages], stream.rng(q.id, "target"), run.target_mode
        )
        groups.setdefault(len(ctx.passages), []).append((q, ctx, target))
    cfg = model.config
    batches = []
    for n in sorted(groups):
        items = groups[n]
        enc = np.stack([encode_context(model, q.text, ctx) for q, ctx, _ in items])
        tgts = [_encode_target(model.tokenizer, t, cfg.max_target_len) for _, _, t in items]
        T = max(len(t) for t in tgts)
        targets = np.full((len(items), T), PAD_ID, dtype=np.int64)
        dec_in = np.full((len(items), T), PAD_ID, dtype=np.int64)
        for i, t in enumerate(tgts):
            targets[i, : len(t)] = t
            dec_in[i, 0] = BOS_ID
            dec_in[i, 1 : len(t)] = t[:-1]
        batches.append((enc, dec_in, targets, targets != PAD_ID))
    return batches


def train_loss(model: FidModel, batches) -> nx.Tensor:
    total_tokens = sum(int(m.sum()) for *_, m in batches)
    loss = None
    for enc, dec_in, targets, mask in batches:
        out = forward_batch(model, enc, dec_in)
        part = nx.cross_entropy(out.logits, targets, mask) * (float(mask.sum()) / total_tokens)
        loss = part if loss is None else loss + part
    return loss


def dev_em(model, questions: Sequence[Question], env, seed: int) -> float:
    if not questions:
        return 0.0
    items = [(q, sample_env(q, env, Stream(seed, 0, "dev"))) for q in questions]
    return 100.0 * float(em_scores(model, items).mean())


def train(
    run: TrainRun,
    train_questions: Sequence[Question],
    dev_questions: Sequence[Question],
    model_config: ModelConfig,
    tokenizer: Tokenizer,
    progress: Callable[[dict], None] | None = None,
    init_model: FidModel | None = None,
) -> Checkpoint:
    """Train one reader and return the best-dev-EM checkpoint.

    ``init_model`` (e.g. a pretrained reader) is copied, not modified; without
    it parameters are initialized from ``run.seed``.
    """
    if not train_questions:
        raise ValueError("no training questions")
    if init_model is not None:
        model = copy.deepcopy(init_model)
    else:
        model = FidModel(dataclasses.replace(model_config, seed=run.seed), tokenizer)
    state = nx.OptimizerState(weight_decay=run.weight_decay, max_grad_norm=run.max_grad_norm)
    dev_env = run.dev_env or run.env
    label = env_label(run.env)
    history: list[dict] = []
    arrays = model.arrays()

    def snapshot(step: int, loss: float | None) -> None:
        nonlocal best
        em = dev_em(model, dev_questions, dev_env, run.seed)
        history.append({"step": step, "dev_em": em, "loss": loss})
        if progress:
            progress(history[-1])
        if best is None or em > best.dev_em:
            best = Checkpoint(copy.deepcopy(model), step, em, run.seed, label, history)
            if run.checkpoint_dir:
                save_checkpoint(Path(run.checkpoint_dir) / "best.fidl", best.model, best.meta())

    best: Checkpoint | None = None
    snapshot(0, None)
    running = []
    for step in range(1, run.max_steps + 1):
        batches = training_batch(model, train_questions, run, step)
        model.zero_grad()
        loss = train_loss(model, batches)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite loss at step {step}", best)
        loss.backward()
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in model.params.items()}
        try:
            nx.optimizer_step(arrays, grads, state, nx.lr_at(step, run.warmup_steps, run.base_lr))
        except nx.NumericalAbort as exc:
            raise TrainingAborted(str(exc), best) from exc
        if not all(np.isfinite(a).all() for a in arrays.values()):
            raise TrainingAborted(f"non-finite parameters after step {step}", best)
        running.append(value)
        if step % run.eval_every == 0 or step == run.max_steps:
            snapshot(step, float(np.mean(running)))
            running = []
    assert best is not None
    best.history = history
    return best


def pretrain_reader(
    records: Sequence[dict],
    labels: Sequence[dict],
    tokenizer: Tokenizer,
    model_config: ModelConfig,
    run: TrainRun,
    n_dev: int = 300,
) -> Checkpoint:
    """Train a single-passage reader (environment (1, 0)) used to initialize FiD readers."""
    questions = build_questions(records, labels)
    if len(questions) <= n_dev:
        raise ValueError(f"need more than {n_dev} pretraining questions")
    run = dataclasses.replace(run, env=EnvSpec(1, 0))
    return train(run, questions[:-n_dev], questions[-n_dev:], model_config, tokenizer)


def train_many(
    runs: Sequence[TrainRun],
    dataset: Dataset,
    model_config: ModelConfig,
    workers: int = 1,
    inits: dict[int, FidModel] | None = None,
) -> list[Checkpoint]:
    """Train independent runs; ``inits`` maps a run seed to its starting reader."""
    inits = inits or {}
    args = [(r, dataset.train, dataset.dev, model_config, dataset.tokenizer, None, inits.get(r.seed)) for r in runs]
    if workers <= 1 or len(runs) <= 1:
        return [train(*a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_star, args))


def _train_star(args):
    return train(*args)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """EM per checkpoint (rows) and passage set (columns)."""

    env: str
    em_by_set: np.ndarray  # (n_checkpoints, n_sets), percent
    n_questions: int
    std_axis: str = "seeds"

    @property
    def em_by_checkpoint(self) -> np.ndarray:
        return self.em_by_set.mean(axis=1)

    @property
    def mean(self) -> float:
        return float(self.em_by_checkpoint.mean())

    @property
    def std(self) -> float:
        return float(self.em_by_checkpoint.std())

    def cell(self) -> str:
        """Table-style ``mean_{std}``."""
        return f"{self.mean:.1f}_{{{self.std:.1f}}}"


def evaluate(
    checkpoints: Sequence,
    env: EnvSpec | MixtureSpec,
    questions: Sequence[Question],
    n_passage_sets: int = 5,
    transform: AttentionTransform | None = None,
    seed: int = 0,
    records: list | None = None,
) -> EvalReport:
    """EM averaged over questions, then over passage sets, per checkpoint.

    For a mixture, each component is evaluated on its own and the component
    scores are averaged. Per-question predictions are appended to
    ``records`` when it is given.
    """
    comps = env.components if isinstance(env, MixtureSpec) else (env,)
    rows = []
    for c, ck in enumerate(checkpoints):
        reader = ck.model if isinstance(ck, Checkpoint) else ck
        per_comp = []
        for comp in comps:
            sets = passage_sets(questions, comp, n_passage_sets, seed)
            scores = []
            for s, items in enumerate(sets):
                preds = predict_answers(reader, items, transform)
                hits = [exact_match(p, q.gold_answers) for p, (q, _) in zip(preds, items)]
                scores.append(100.0 * float(np.mean(hits)))
                if records is not None:
                    records.extend(
                        {"checkpoint": c, "env": comp.label(), "passage_set": s, "question_id": q.id,
                         "prediction": p, "em": bool(h)}
                        for p, h, (q, _) in zip(preds, hits, items)
                    )
            per_comp.append(scores)
        rows.append(np.mean(per_comp, axis=0))
    return EvalReport(env.label(), np.array(rows), len(questions))


@dataclass
class CrossTable:
    """Train environment x evaluation environment results."""

    train_envs: list[str]
    eval_envs: list[str]
    reports: dict[tuple[str, str], EvalReport]
    checkpoints: dict[str, list[Checkpoint]] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)

    def mean(self, train_env: str, eval_env: str) -> float:
        return self.reports[(train_env, eval_env)].mean

    def matrix(self) -> np.ndarray:
        return np.array([[self.mean(t, e) for e in self.eval_envs] for t in self.train_envs])

    def csv_rows(self) -> list[dict]:
        rows = []
        for (t, e), rep in self.reports.items():
            rows.append(
                {
                    "train_env": t,
                    "eval_env": e,
                    "em_mean": round(rep.mean, 4),
                    "em_std": round(rep.std, 4),
                    "n_seeds": rep.em_by_set.shape[0],
                    "n_sets": rep.em_by_set.shape[1],
                    "n_questions": rep.n_questions,
                }
            )
        for env, reason in self.skipped.items():
            rows.append({"train_env": env, "eval_env": "", "skipped": reason})
        return rows


def _cross(
    train_envs: Sequence,
    eval_envs: Sequence,
    dataset: Dataset,
    model_config: ModelConfig,
    run: TrainRun,
    seeds: Sequence[int],
    n_passage_sets: int,
    workers: int,
    skipped: dict[str, str] | None = None,
    inits: dict[int, FidModel] | None = None,
) -> CrossTable:
    runs = [dataclasses.replace(run, env=env, seed=s) for env in train_envs for s in seeds]
    trained = train_many(runs, dataset, model_config, workers, inits)
    ckpts: dict[str, list[Checkpoint]] = {}
    for r, ck in zip(runs, trained):
        ckpts.setdefault(r.env.label(), []).append(ck)
    reports = {}
    for tenv in train_envs:
        for eenv in eval_envs:
            reports[(tenv.label(), eenv.label())] = evaluate(
                ckpts[tenv.label()], eenv, dataset.eval, n_passage_sets, seed=run.seed
            )
    return CrossTable(
        [e.label() for e in train_envs], [e.label() for e in eval_envs], reports, ckpts, skipped or {}
    )


def quality_sweep(
    n_values: Sequence[int],
    n_plus_values: Sequence[int],
    dataset: Dataset,
    model_config: ModelConfig,
    run: TrainRun,
    seeds: Sequence[int] = (0, 1, 2),
    n_passage_sets: int = 5,
    workers: int = 1,
    inits: dict[int, FidModel] | None = None,
) -> CrossTable:
    """Fixed quantity n, varying n+; every model is evaluated in every cell."""
    envs = [EnvSpec(p, n - p) for n in n_values for p in n_plus_values if p <= n]
    return _cross(envs, envs, dataset, model_config, run, seeds, n_passage_sets, workers, inits=inits)


def quantity_sweep(
    k_values: Sequence[int],
    n_plus_values: Sequence[int],
    dataset: Dataset,
    model_config: ModelConfig,
    run: TrainRun,
    seeds: Sequence[int] = (0, 1, 2),
    n_passage_sets: int = 5,
    max_irrelevant: int | None = None,
    workers: int = 1,
    inits: dict[int, FidModel] | None = None,
) -> CrossTable:
    """Fixed quality 1/(1+k), varying n+ (so quantity varies); cells with k*n+ beyond the pool are skipped."""
    cap = max_irrelevant if max_irrelevant is not None else dataset.min_pool()[1]
    envs, skipped = [], {}
    for k in k_values:
        for p in n_plus_values:
            env = EnvSpec(p, k * p)
            if k * p > cap:
                skipped[env.label()] = f"k*n+ = {k * p} exceeds irrelevant pool size {cap}"
                log.info("skipping %s: %s", env.label(), skipped[env.label()])
            else:
                envs.append(env)
    return _cross(envs, envs, dataset, model_config, run, seeds, n_passage_sets, workers, skipped, inits)


def mixture_experiment(
    components: Sequence[EnvSpec],
    dataset: Dataset,
    model_config: ModelConfig,
    run: TrainRun,
    seeds: Sequence[int] = (0, 1, 2),
    n_passage_sets: int = 5,
    workers: int = 1,
    inits: dict[int, FidModel] | None = None,
) -> CrossTable:
    """One model per nonempty subset of components, evaluated on every subset."""
    subsets = [
        MixtureSpec(tuple(c))
        for size in range(1, len(components) + 1)
        for c in itertools.combinations(components, size)
    ]
    runs = [dataclasses.replace(run, env=m, seed=s) for m in subsets for s in seeds]
    trained = train_many(runs, dataset, model_config, workers, inits)
    ckpts: dict[str, list[Checkpoint]] = {}
    for r, ck in zip(runs, trained):
        ckpts.setdefault(r.env.label(), []).append(ck)
    # per-component scores once, then average for each evaluation mixture
    per_comp = {
        (m.label(), c): evaluate(ckpts[m.label()], c, dataset.eval, n_passage_sets, seed=run.seed)
        for m in subsets
        for c in components
    }
    reports = {}
    for m in subsets:
        for e in subsets:
            stacked = np.mean([per_comp[(m.label(), c)].em_by_set for c in e.components], axis=0)
            reports[(m.label(), e.label())] = EvalReport(e.label(), stacked, len(dataset.eval))
    return CrossTable([m.label() for m in subsets], [m.label() for m in subsets], reports, ckpts)


# ---------------------------------------------------------------------------
# Cross-attention analyses
# ---------------------------------------------------------------------------


@dataclass
class AttentionReport:
    env: str
    relevant_mass: np.ndarray  # (K,) percent, per decoder layer
    irrelevant_mass: np.ndarray  # (K,) percent
    bins: np.ndarray
    relevant_hist: np.ndarray  # (K, n_bins) densities of per-passage mass
    irrelevant_hist: np.ndarray
    relevant_values: list[np.ndarray] = field(default_factory=list)  # per layer
    irrelevant_values: list[np.ndarray] = field(default_factory=list)


def first_token_masses(
    model: FidModel,
    items: Sequence[tuple[Question, Context]],
    transform: AttentionTransform | None = None,
    batch_tokens: int = 20000,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per item: (aggregated mass (K, N), relevance mask (N,))."""
    L = model.config.passage_len
    out = []
    n_by = {}
    for i, (_, ctx) in enumerate(items):
        n_by.setdefault(len(ctx.passages), []).append(i)
    results: dict[int, tuple] = {}
    for n, idx in n_by.items():
        per = max(1, batch_tokens // (n * L))
        for lo in range(0, len(idx), per):
            chunk = idx[lo : lo + per]
            enc = np.stack([encode_context(model, items[i][0].text, items[i][1]) for i in chunk])
            rel = np.array([items[i][1].relevance_mask for i in chunk], dtype=bool)
            dec = np.full((len(chunk), 1), BOS_ID, dtype=np.int64)
            with nx.no_grad():
                fo = forward_batch(model, enc, dec, transform, rel, capture=True)
            first = fo.cross_attention[:, :, :, 0, :].mean(axis=2)  # (B, K, S)
            masses = passage_totals(first, fo.passage_offsets)
            for j, i in enumerate(chunk):
                results[i] = (masses[j], rel[j])
    for i in range(len(items)):
        out.append(results[i])
    return out


def attention_analysis(
    checkpoints: Sequence,
    env: EnvSpec,
    questions: Sequence[Question],
    n_passage_sets: int = 5,
    seed: int = 0,
    bins: np.ndarray | None = None,
) -> AttentionReport:
    """Relevant-passage mass per layer and per-passage mass distributions."""
    if bins is None:
        bins = np.linspace(0.0, 1.0, 41)
    rel_mass, irr_mass = [], []
    rel_vals: list[list] = []
    irr_vals: list[list] = []
    for ck in checkpoints:
        model = ck.model if isinstance(ck, Checkpoint) else ck
        for items in passage_sets(questions, env, n_passage_sets, seed):
            for mass, rel in first_token_masses(model, items):
                rel_mass.append(mass[:, rel].sum(axis=1))
                irr_mass.append(mass[:, ~rel].sum(axis=1))
                if not rel_vals:
                    rel_vals = [[] for _ in range(mass.shape[0])]
                    irr_vals = [[] for _ in range(mass.shape[0])]
                for k in range(mass.shape[0]):
                    rel_vals[k].extend(mass[k, rel])
                    irr_vals[k].extend(mass[k, ~rel])
    rv = [np.array(v) for v in rel_vals]
    iv = [np.array(v) for v in irr_vals]
    rh = np.array([np.histogram(v, bins=bins, density=False)[0] for v in rv])
    ih = np.array([np.histogram(v, bins=bins, density=False)[0] for v in iv])
    return AttentionReport(
        env.label(),
        100.0 * np.mean(rel_mass, axis=0),
        100.0 * np.mean(irr_mass, axis=0),
        bins,
        rh,
        ih,
        rv,
        iv,
    )


@dataclass
class InterventionTable:
    envs: list[str]
    models: list[str]
    r_values: list[float | None]  # None = no intervention
    em: dict[tuple[str, str, float | None], float]  # (model, env, r) -> mean over seeds
    em_by_seed: dict[tuple[str, str, float | None], np.ndarray]

    def spread(self, env: str, r: float | None) -> float:
        vals = [self.em[(m, env, r)] for m in self.models]
        return max(vals) - min(vals)

    def csv_rows(self) -> list[dict]:
        rows = []
        for (m, e, r), v in self.em.items():
            rows.append({"model": m, "eval_env": e, "r": "none" if r is None else r, "em_mean": round(v, 4)})
        for e in self.envs:
            for r in self.r_values:
                rows.append({"model": "SPREAD", "eval_env": e, "r": "none" if r is None else r, "em_mean": round(self.spread(e, r), 4)})
        return rows


def intervention_experiment(
    checkpoints: dict[str, Sequence],
    envs: Sequence[EnvSpec],
    questions: Sequence[Question],
    r_values: Sequence[float] = (1.0, 0.1, 0.0),
    n_passage_sets: int = 5,
    seed: int = 0,
) -> InterventionTable:
    """EM with and without the relevance intervention at each ratio r."""
    rs: list[float | None] = [None, *r_values]
    em, by_seed = {}, {}
    for label, cks in checkpoints.items():
        for env in envs:
            for r in rs:
                transform = None if r is None else make_intervention_transform(InterventionSpec(r))
                rep = evaluate(cks, env, questions, n_passage_sets, transform, seed)
                em[(label, env.label(), r)] = rep.mean
                by_seed[(label, env.label(), r)] = rep.em_by_checkpoint
    return InterventionTable([e.label() for e in envs], list(checkpoints), rs, em, by_seed)


# ---------------------------------------------------------------------------
# Temperature adaptation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    select_fold: int
    report_fold: int
    t_star: float
    grid_em: dict[float, float]  # EM on the selection fold for each T
    adapted_em: float  # on the report fold
    unadapted_em: float  # on the report fold
    n_report: int
    adapted_by_seed: list[float] = field(default_factory=list)
    unadapted_by_seed: list[float] = field(default_factory=list)


@dataclass
class TemperatureSearchResult:
    grid: list[float]
    folds: list[FoldResult]

    @property
    def adapted_em(self) -> float:
        n = sum(f.n_report for f in self.folds)
        return sum(f.adapted_em * f.n_report for f in self.folds) / n

    @property
    def unadapted_em(self) -> float:
        n = sum(f.n_report for f in self.folds)
        return sum(f.unadapted_em * f.n_report for f in self.folds) / n

    def to_json(self) -> dict:
        return {
            "grid": self.grid,
            "adapted_em": self.adapted_em,
            "unadapted_em": self.unadapted_em,
            "folds": [
                {**dataclasses.asdict(f), "grid_em": {str(k): v for k, v in f.grid_em.items()}} for f in self.folds
            ],
        }


def select_temperature(grid_em: dict[float, float]) -> float:
    """Best EM; ties go to the smaller temperature."""
    return min(grid_em, key=lambda t: (-grid_em[t], t))


def temperature_search(
    checkpoints,
    questions: Sequence[Question],
    env: EnvSpec,
    grid: Sequence[float] = TEMPERATURE_GRID,
    n_passage_sets: int = 5,
    seed: int = 0,
    salt: str = "temperature-folds",
) -> TemperatureSearchResult:
    """Two-fold cross-validated choice of one temperature per fold.

    ``checkpoints`` may be a single reader or several (seeds); grid EMs are
    averaged over them, so each fold gets a single T* shared by all seeds.
    """
    if isinstance(checkpoints, (Checkpoint, FidModel)) or not isinstance(checkpoints, Sequence):
        checkpoints = [checkpoints]
    models = [ck.model if isinstance(ck, Checkpoint) else ck for ck in checkpoints]
    grid = sorted(float(t) for t in grid)
    folds = hash_partition([q.id for q in questions], 2, (salt, seed))
    if not all(folds):
        raise ValueError("need at least two questions to form two folds")
    position = {q.id: i for i, q in enumerate(questions)}
    sets = passage_sets(questions, env, n_passage_sets, seed)

    def per_question(transform) -> np.ndarray:
        """(n_models, n_questions) EM averaged over passage sets."""
        return np.array(
            [100.0 * np.mean([em_scores(m, items, transform) for items in sets], axis=0) for m in models]
        )

    base = per_question(None)
    scores = {t: per_question(make_temperature_transform(TemperatureSpec(t))) for t in grid}
    results = []
    for a, b in ((0, 1), (1, 0)):
        ia = [position[i] for i in folds[a]]
        ib = [position[i] for i in folds[b]]
        grid_em = {t: float(scores[t][:, ia].mean()) for t in grid}
        t_star = select_temperature(grid_em)
        results.append(
            FoldResult(
                a,
                b,
                t_star,
                grid_em,
                float(scores[t_star][:, ib].mean()),
                float(base[:, ib].mean()),
                len(ib),
                [float(x) for x in scores[t_star][:, ib].mean(axis=1)],
                [float(x) for x in base[:, ib].mean(axis=1)],
            )
        )
    return TemperatureSearchResult(grid, results)
