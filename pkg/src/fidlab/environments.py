"""Relevance pools, controlled context sampling, and context quality/quantity.

Randomness is keyed rather than sequential: every draw comes from a generator
seeded by (global seed, purpose, step, question id, tag), so a context is a
pure function of those values regardless of iteration order or parallelism.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import EmConfig, contains_answer, exact_match

log = logging.getLogger(__name__)

RELEVANT, IRRELEVANT, DISCARDED = "relevant", "irrelevant", "discarded"


class InsufficientPool(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    text: str
    contains_answer: bool = False


@dataclass
class Question:
    id: str
    text: str
    gold_answers: list[str]
    relevant_pool: list[Passage] = field(default_factory=list)
    irrelevant_pool: list[Passage] = field(default_factory=list)
    discarded_pool: list[Passage] = field(default_factory=list)

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError(f"question {self.id} has no gold answers")


@dataclass
class Context:
    passages: list[Passage]
    relevance_mask: list[bool]

    def __post_init__(self):
        if len(self.passages) != len(self.relevance_mask):
            raise ValueError("relevance mask length must equal passage count")

    def permuted(self, order: Sequence[int]) -> Context:
        return Context([self.passages[i] for i in order], [self.relevance_mask[i] for i in order])


@dataclass(frozen=True)
class EnvSpec:
    n_plus: int
    n_minus: int

    def __post_init__(self):
        if self.n_plus < 0 or self.n_minus < 0 or self.n_plus + self.n_minus < 1:
            raise ValueError(f"invalid environment ({self.n_plus}, {self.n_minus})")

    @property
    def n(self) -> int:
        return self.n_plus + self.n_minus

    @property
    def k(self) -> float:
        return self.n_minus / self.n_plus if self.n_plus else float("inf")

    @property
    def quality(self) -> float:
        return self.n_plus / self.n

    def label(self) -> str:
        return f"({self.n_plus},{self.n_minus})"


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[EnvSpec, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        if len(set(self.components)) != len(self.components):
            raise ValueError("mixture components must be distinct")

    def label(self) -> str:
        return "+".join(c.label() for c in self.components)


def _key_entropy(*parts) -> list[int]:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class Stream:
    """Keyed random stream: ``rng(question_id, tag)`` is a pure function of the key."""

    seed: int
    step: int = 0
    purpose: str = "train"

    def rng(self, question_id: str, *tags) -> np.random.Generator:
        return np.random.default_rng(_key_entropy(self.seed, self.purpose, self.step, question_id, *tags))

    def at(self, step: int) -> Stream:
        return Stream(self.seed, step, self.purpose)


def stable_hash(*parts) -> int:
    return _key_entropy(*parts)[0]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_context(question: Question, spec: EnvSpec, stream: Stream) -> Context:
    """Draw n+ relevant and n- irrelevant passages without replacement.

    Relevant and irrelevant draws use separate sub-streams, so the same
    relevant set comes out regardless of n- (and vice versa).
    """
    if len(question.relevant_pool) < spec.n_plus:
        raise InsufficientPool(
            f"question {question.id}: relevant pool has {len(question.relevant_pool)} < {spec.n_plus}"
        )
    if len(question.irrelevant_pool) < spec.n_minus:
        raise InsufficientPool(
            f"question {question.id}: irrelevant pool has {len(question.irrelevant_pool)} < {spec.n_minus}"
        )
    rel_idx = stream.rng(question.id, "relevant").permutation(len(question.relevant_pool))[: spec.n_plus]
    irr_idx = stream.rng(question.id, "irrelevant").permutation(len(question.irrelevant_pool))[: spec.n_minus]
    passages = [question.relevant_pool[i] for i in rel_idx] + [question.irrelevant_pool[i] for i in irr_idx]
    mask = [True] * spec.n_plus + [False] * spec.n_minus
    order = stream.rng(question.id, "order").permutation(len(passages))
    return Context(passages, mask).permuted(order)


def sample_mixture(question: Question, mix: MixtureSpec, stream: Stream) -> Context:
    return sample_context(question, choose_component(question, mix, stream), stream)


def choose_component(question: Question, mix: MixtureSpec, stream: Stream) -> EnvSpec:
    if len(mix.components) == 1:
        return mix.components[0]
    return mix.components[int(stream.rng(question.id, "component").integers(len(mix.components)))]


def sample_env(question: Question, env: EnvSpec | MixtureSpec, stream: Stream) -> Context:
    if isinstance(env, MixtureSpec):
        return sample_mixture(question, env, stream)
    return sample_context(question, env, stream)


def context_quality(ctx: Context) -> float:
    if not ctx.passages:
        raise ValueError("empty context")
    return sum(ctx.relevance_mask) / len(ctx.passages)


def context_quantity(ctx: Context) -> int:
    return len(ctx.passages)


def satisfiable(question: Question, env: EnvSpec | MixtureSpec) -> bool:
    comps = env.components if isinstance(env, MixtureSpec) else (env,)
    return all(
        len(question.relevant_pool) >= c.n_plus and len(question.irrelevant_pool) >= c.n_minus for c in comps
    )


def filter_questions(questions: Iterable[Question], min_relevant: int = 3, min_irrelevant: int = 64) -> list[Question]:
    return [
        q for q in questions if len(q.relevant_pool) >= min_relevant and len(q.irrelevant_pool) >= min_irrelevant
    ]


# ---------------------------------------------------------------------------
# Relevance annotation
# ---------------------------------------------------------------------------


def classify_passages(
    question: Question,
    passages: Sequence[Passage],
    qa_predict: Callable[[Question, Passage], str],
    em: EmConfig = EmConfig(),
) -> tuple[list[Passage], list[Passage], list[Passage]]:
    """Partition passages into (relevant, irrelevant, discarded).

    No gold answer in the passage: irrelevant, without consulting the model.
    Gold present and the single-passage prediction matches a gold: relevant.
    Gold present but the prediction does not match: discarded.
    """
    relevant, irrelevant, discarded = [], [], []
    for p in passages:
        if not contains_answer(p.text, question.gold_answers):
            irrelevant.append(p)
        elif exact_match(qa_predict(question, p), question.gold_answers, em):
            relevant.append(p)
        else:
            discarded.append(p)
    return relevant, irrelevant, discarded


def build_questions(records: Sequence[dict], labels: Iterable[dict] | None = None) -> list[Question]:
    """Turn FiD JSON records plus relevance labels into ``Question`` pools.

    Without labels every passage lacking a gold answer is irrelevant and every
    answer-bearing passage goes to the relevant pool (the naive rule; use the
    annotation pipeline to refine it).
    """
    table: dict[tuple[str, str], str] = {}
    if labels is not None:
        table = {(r["question_id"], r["passage_id"]): r["label"] for r in labels}
    out = []
    for qi, rec in enumerate(records):
        qid = str(rec.get("id", qi))
        golds = list(rec["answers"])
        q = Question(qid, rec["question"], golds)
        for pi, ctx in enumerate(rec.get("ctxs", [])):
            pid = str(ctx.get("id", f"{qid}-p{pi:03d}"))
            has = contains_answer(ctx["text"], golds)
            passage = Passage(pid, ctx.get("title", ""), ctx["text"], has)
            label = table.get((qid, pid)) if table else (RELEVANT if has else IRRELEVANT)
            if label is None:
                label = IRRELEVANT if not has else DISCARDED
            {RELEVANT: q.relevant_pool, IRRELEVANT: q.irrelevant_pool, DISCARDED: q.discarded_pool}[label].append(
                passage
            )
        out.append(q)
    return out


def split_records(records: Sequence[dict]) -> tuple[list[dict], list[dict]]:
    """(train-side records, held-out evaluation records) by the ``split`` field."""
    train = [r for r in records if r.get("split", "train") != "eval"]
    held = [r for r in records if r.get("split", "train") == "eval"]
    return train, held


def hash_partition(ids: Sequence[str], n_parts: int, salt) -> list[list[str]]:
    """Stable partition of ids into ``n_parts`` groups by salted hash rank."""
    ranked = sorted(ids, key=lambda i: (stable_hash(salt, i), i))
    return [ranked[j::n_parts] for j in range(n_parts)]


@dataclass
class AnnotationResult:
    labels: list[dict]
    split_sizes: dict[str, int]
    dev_em: dict[str, float]


def cross_annotate(
    records: Sequence[dict],
    split_seed: int,
    model_config=None,
    run=None,
    annotator_env: EnvSpec = EnvSpec(1, 9),
    dual_setting: bool = False,
    min_train_questions: int = 8,
    em: EmConfig = EmConfig(),
    batch_size: int = 256,
    init_model=None,
) -> AnnotationResult:
    """Annotate relevance with two readers trained on disjoint halves.

    The train-side records are split four ways (D0 train/dev, D1 train/dev).
    M0 is trained on D0 and M1 on D1; D0 is annotated by M1, while D1 and the
    held-out evaluation records are annotated by M0. No question is ever
    annotated by a model that saw it during training.

    Annotator training contexts are drawn from proxy pools (answer-bearing vs
    not), with ``annotator_env`` answer-bearing passages per context. With
    ``dual_setting`` a second pair trained on answer-bearing passages only is
    also run, and a passage is kept relevant only if both pairs agree.

    ``init_model`` (a pretrained reader) is the starting point of every
    annotator; its tokenizer and config are then used as well.
    """
    from .harness import TrainRun, train  # harness depends on this module
    from .model import ModelConfig, Tokenizer

    train_side, held = split_records(records)
    ids = [str(r.get("id", i)) for i, r in enumerate(train_side)]
    d0_train, d0_dev, d1_train, d1_dev = hash_partition(ids, 4, ("annotate", split_seed))
    sizes = {"D0_train": len(d0_train), "D0_dev": len(d0_dev), "D1_train": len(d1_train), "D1_dev": len(d1_dev)}
    for name in ("D0_train", "D1_train"):
        if sizes[name] < min_train_questions:
            raise InsufficientData(f"{name} has {sizes[name]} questions, need {min_train_questions}")
    if min(sizes["D0_dev"], sizes["D1_dev"]) < 1:
        raise InsufficientData("annotation dev splits are empty")

    proxy = {q.id: q for q in build_questions(train_side)}
    if init_model is not None:
        tokenizer, model_config = init_model.tokenizer, init_model.config
    else:
        tokenizer = Tokenizer.from_texts(
            _record_texts(records), max_size=(model_config.vocab_size if model_config else None)
        )
        if model_config is None:
            model_config = ModelConfig(vocab_size=max(len(tokenizer), 8))
    run = run or TrainRun(env=annotator_env)

    settings = [("all", annotator_env)]
    if dual_setting:
        settings.append(("pos", EnvSpec(max(annotator_env.n_plus, 1), 0)))

    verdicts: dict[tuple[str, str], list[str]] = {}
    dev_em: dict[str, float] = {}
    for setting, env in settings:
        models = {}
        for name, tr, dv in (("M0", d0_train, d0_dev), ("M1", d1_train, d1_dev)):
            train_q = [q for q in (proxy[i] for i in tr) if _proxy_ok(q, env)]
            dev_q = [q for q in (proxy[i] for i in dv) if _proxy_ok(q, env)]
            if len(train_q) < min_train_questions:
                raise InsufficientData(f"{name}: only {len(train_q)} trainable questions")
            ckpt = train(
                dataclasses.replace(run, env=env), train_q, dev_q, model_config, tokenizer, init_model=init_model
            )
            models[name] = ckpt.model
            dev_em[f"{setting}:{name}"] = ckpt.dev_em
        jobs = [(models["M1"], d0_train + d0_dev, "M1"), (models["M0"], d1_train + d1_dev, "M0")]
        held_ids = [str(r.get("id", f"eval{i}")) for i, r in enumerate(held)]
        held_q = build_questions(held)
        jobs.append((models["M0"], held_ids, "M0"))
        pool = dict(proxy)
        pool.update({q.id: q for q in held_q})
        for model, qids, who in jobs:
            questions = [pool[i] for i in qids]
            preds = _single_passage_predictions(model, questions, batch_size)
            for q in questions:
                rel, irr, dis = classify_passages(
                    q, q.relevant_pool + q.irrelevant_pool, lambda qq, p: preds[(qq.id, p.id)], em
                )
                for label, group in ((RELEVANT, rel), (IRRELEVANT, irr), (DISCARDED, dis)):
                    for p in group:
                        verdicts.setdefault((q.id, p.id), []).append((label, who))

    labels = []
    for (qid, pid), votes in verdicts.items():
        kinds = [v[0] for v in votes]
        label = RELEVANT if all(k == RELEVANT for k in kinds) else (IRRELEVANT if kinds[0] == IRRELEVANT else DISCARDED)
        labels.append({"question_id": qid, "passage_id": pid, "label": label, "annotator": votes[0][1]})
    labels.sort(key=lambda r: (r["question_id"], r["passage_id"]))
    return AnnotationResult(labels, sizes, dev_em)


def _proxy_ok(q: Question, env: EnvSpec) -> bool:
    return len(q.relevant_pool) >= env.n_plus and len(q.irrelevant_pool) >= env.n_minus


def _record_texts(records: Sequence[dict]) -> Iterable[str]:
    for r in records:
        yield r["question"]
        yield from r["answers"]
        for c in r.get("ctxs", []):
            yield c.get("title", "")
            yield c["text"]


def _single_passage_predictions(model, questions: Sequence[Question], batch_size: int) -> dict[tuple[str, str], str]:
    """Greedy answer for every answer-bearing passage fed alone with its question."""
    from .model import greedy_decode_batch, render_passage

    items = [(q, p) for q in questions for p in q.relevant_pool + q.irrelevant_pool if p.contains_answer]
    cfg = model.config
    out = {}
    for lo in range(0, len(items), batch_size):
        chunk = items[lo : lo + batch_size]
        enc = np.array(
            [[render_passage(q.text, p, model.tokenizer, cfg.passage_len)] for q, p in chunk], dtype=np.int64
        )
        ids, _ = greedy_decode_batch(model, enc)
        for (q, p), toks in zip(chunk, ids):
            out[(q.id, p.id)] = model.tokenizer.decode(toks)
    return out
