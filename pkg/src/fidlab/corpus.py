"""Synthetic key-value lookup corpus in the FiD JSON schema, and exact match.

Every question asks for the value of one key. Its relevant passages state
that key's value; its irrelevant passages state values of other keys; decoy
passages mention the answer value attached to some other key, so they contain
the answer string without entailing it.
"""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

log = logging.getLogger(__name__)

ENTAILING_FRAMES = (
    "key {k} has value {v}",
    "the value of key {k} is {v}",
    "{v} is the value of key {k}",
)
FRAME_WORDS = ("key", "has", "value", "the", "of", "is", "what", "?")


class CorpusConfigError(ValueError):
    pass


@dataclass
class CorpusSpec:
    n_questions: int = 4000
    keys_per_question: int = 20
    n_keys: int = 60
    n_values: int = 60
    n_titles: int = 40
    relevant_pool_size: int = 12
    irrelevant_pool_size: int = 70
    decoy_rate: float = 0.05
    eval_fraction: float = 0.25
    n_frames: int = 3  # how many of the entailing sentence frames are used
    key_tokens: int = 2  # tokens per key name
    hard_negative_rate: float = 0.5  # share of distractor keys overlapping the asked key in all but one token
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.decoy_rate < 1.0:
            raise CorpusConfigError("decoy_rate must lie in [0, 1)")
        if self.key_tokens < 1:
            raise CorpusConfigError("key_tokens must be positive")
        if not 0.0 <= self.hard_negative_rate <= 1.0:
            raise CorpusConfigError("hard_negative_rate must lie in [0, 1]")
        if self.hard_negative_rate > 0 and self.key_tokens < 2:
            raise CorpusConfigError("hard negatives need keys of at least two tokens")
        n_hard = self.n_hard_negatives()
        if n_hard > self.key_tokens * (self.n_keys - 1):
            raise CorpusConfigError(f"cannot form {n_hard} distinct hard-negative keys from {self.n_keys} key tokens")
        if self.key_tokens == 1 and self.keys_per_question + 1 > self.n_keys:
            raise CorpusConfigError(
                f"need {self.keys_per_question + 1} distinct keys per question but only {self.n_keys} exist"
            )
        if self.n_keys < 2 * self.key_tokens:
            raise CorpusConfigError(f"need at least {2 * self.key_tokens} key tokens for disjoint distractor keys")
        if self.n_values < 2:
            raise CorpusConfigError("need at least two values so distractors can differ from the answer")
        if self.relevant_pool_size < 1 or self.irrelevant_pool_size < 1:
            raise CorpusConfigError("pool sizes must be positive")
        if not 1 <= self.n_frames <= len(ENTAILING_FRAMES):
            raise CorpusConfigError(f"n_frames must lie in [1, {len(ENTAILING_FRAMES)}]")
        if self.keys_per_question < 1:
            raise CorpusConfigError("keys_per_question must be positive")

    def n_decoys(self) -> int:
        return int(round(self.irrelevant_pool_size * self.decoy_rate))

    def n_hard_negatives(self) -> int:
        return int(round(self.keys_per_question * self.hard_negative_rate))


def _distractor_keys(spec: CorpusSpec, key: tuple[int, ...], rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Distinct keys other than ``key``: hard negatives first, then keys sharing no token with it."""
    out: list[tuple[int, ...]] = []
    seen = {key}
    n_hard = spec.n_hard_negatives()
    disjoint = [t for t in range(spec.n_keys) if t not in key]
    for attempt in range(100 * spec.keys_per_question):
        if len(out) == spec.keys_per_question:
            break
        if len(out) < n_hard:
            cand = list(key)
            slot = int(rng.integers(spec.key_tokens))
            cand[slot] = int(disjoint[int(rng.integers(len(disjoint)))])
        else:
            cand = [int(t) for t in rng.choice(disjoint, size=spec.key_tokens, replace=False)]
        cand = tuple(cand)
        if cand not in seen:
            seen.add(cand)
            out.append(cand)
    if len(out) < spec.keys_per_question:
        raise CorpusConfigError("key vocabulary too small for the requested distractor keys")
    return out


def key_name(key: tuple[int, ...]) -> str:
    return " ".join(f"k{t}" for t in key)


def synthetic_vocabulary(spec: CorpusSpec) -> list[str]:
    words = list(FRAME_WORDS)
    words += [f"k{i}" for i in range(spec.n_keys)]
    words += [f"v{i}" for i in range(spec.n_values)]
    words += [f"t{i}" for i in range(spec.n_titles)]
    return words


def generate_corpus(spec: CorpusSpec) -> tuple[list[dict], list[dict]]:
    """Return (FiD JSON records, ground-truth relevance labels)."""
    spec.validate()
    records: list[dict] = []
    labels: list[dict] = []
    n_eval = int(round(spec.n_questions * spec.eval_fraction))
    n_decoy = spec.n_decoys()
    for qi in range(spec.n_questions):
        rng = np.random.default_rng([spec.seed, qi])
        qid = f"q{qi:05d}"
        key = tuple(int(t) for t in rng.choice(spec.n_keys, size=spec.key_tokens, replace=False))
        others = _distractor_keys(spec, key, rng)
        value = int(rng.integers(spec.n_values))
        # each distractor key has one consistent value within the question
        other_values = {}
        for k in others:
            v = int(rng.integers(spec.n_values - 1))
            other_values[k] = v + (v >= value)

        ctxs: list[tuple[str, str, str]] = []  # (title, text, label)

        def frame() -> str:
            return ENTAILING_FRAMES[int(rng.integers(spec.n_frames))]

        def title() -> str:
            return f"t{int(rng.integers(spec.n_titles))}"

        for _ in range(spec.relevant_pool_size):
            ctxs.append((title(), frame().format(k=key_name(key), v=f"v{value}"), "relevant"))
        for j in range(spec.irrelevant_pool_size):
            k = others[int(rng.integers(len(others)))]
            if j < n_decoy:
                ctxs.append((title(), frame().format(k=key_name(k), v=f"v{value}"), "discarded"))
            else:
                ctxs.append((title(), frame().format(k=key_name(k), v=f"v{other_values[k]}"), "irrelevant"))
        order = rng.permutation(len(ctxs))
        record = {
            "id": qid,
            "question": f"what is the value of key {key_name(key)} ?",
            "answers": [f"v{value}"],
            "target": f"v{value}",
            "split": "eval" if qi >= spec.n_questions - n_eval else "train",
            "ctxs": [],
        }
        for pos, j in enumerate(order):
            t, text, label = ctxs[j]
            pid = f"{qid}-p{pos:03d}"
            record["ctxs"].append({"id": pid, "title": t, "text": text})
            labels.append({"question_id": qid, "passage_id": pid, "label": label})
        records.append(record)
    return records, labels


NO_ANSWER = "none"


def generate_reading_corpus(
    spec: CorpusSpec, n_questions: int = 20000, seed: int = 1, unanswerable_rate: float = 0.5
) -> tuple[list[dict], list[dict]]:
    """Single-passage reading data for reader pretraining.

    Questions are fresh draws (own seed) from the same vocabulary and frames.
    Each question gets exactly one passage: with probability
    ``unanswerable_rate`` a statement about a different key (hard negatives
    included), answered with ``NO_ANSWER``, otherwise the answering statement.
    A reader trained on this has to decide whether the passage's key is the
    asked key, which is the skill passage selection builds on. The passage is
    labelled relevant either way so the (1, 0) environment can sample it.
    """
    if not 0.0 <= unanswerable_rate <= 1.0:
        raise CorpusConfigError("unanswerable_rate must lie in [0, 1]")
    base = replace(
        spec,
        n_questions=n_questions,
        seed=seed,
        relevant_pool_size=1,
        irrelevant_pool_size=4,
        decoy_rate=0.0,
        eval_fraction=0.0,
    )
    records, labels = generate_corpus(base)
    kinds = {(r["question_id"], r["passage_id"]): r["label"] for r in labels}
    out_records, out_labels = [], []
    for ri, rec in enumerate(records):
        rng = np.random.default_rng([seed, ri, 7])
        rel = [c for c in rec["ctxs"] if kinds[(rec["id"], c["id"])] == "relevant"]
        irr = [c for c in rec["ctxs"] if kinds[(rec["id"], c["id"])] == "irrelevant"]
        if rng.random() < unanswerable_rate:
            ctx, answer = irr[int(rng.integers(len(irr)))], NO_ANSWER
        else:
            ctx, answer = rel[0], rec["target"]
        pid = f"{rec['id']}-r00"
        out_records.append({**rec, "answers": [answer], "target": answer, "ctxs": [{**ctx, "id": pid}]})
        out_labels.append({"question_id": rec["id"], "passage_id": pid, "label": "relevant"})
    return out_records, out_labels


def write_corpus(records: Sequence[dict], labels: Sequence[dict] | None, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "corpus.json").write_text(json.dumps(list(records), indent=1, sort_keys=True))
    if labels is not None:
        write_jsonl(labels, out_dir / "relevance_labels.jsonl")


def write_jsonl(rows: Iterable[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Exact match
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmConfig:
    normalization: Literal["squad-style", "synthetic-exact"] = "squad-style"


_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = re.sub(r"\b(a|an|the)\b", " ", text)
    return " ".join(text.split())


def _normalize(text: str, cfg: EmConfig) -> str:
    if cfg.normalization == "synthetic-exact":
        return " ".join(text.split())
    return normalize_answer(text)


def exact_match(prediction: str, golds: Sequence[str], cfg: EmConfig = EmConfig()) -> bool:
    if not golds:
        raise ValueError("exact_match needs at least one gold answer")
    pred = _normalize(prediction, cfg)
    return any(pred == _normalize(g, cfg) for g in golds)


def contains_answer(text: str, golds: Sequence[str]) -> bool:
    """Normalized substring test on whole-word boundaries ("v1" is not in "v12")."""
    hay = f" {normalize_answer(text)} "
    for g in golds:
        needle = normalize_answer(g)
        if needle and f" {needle} " in hay:
            return True
    return False


def pick_target_answer(
    golds: Sequence[str],
    context_texts: Sequence[str],
    rng: np.random.Generator | None = None,
    mode: Literal["first-gold", "random-gold-in-context"] = "first-gold",
) -> str:
    """Training target: the first gold, or a random gold that occurs in the context."""
    if not golds:
        raise ValueError("question has no gold answers")
    if mode == "first-gold" or len(golds) == 1:
        return golds[0]
    present = [g for g in golds if any(contains_answer(t, [g]) for t in context_texts)]
    if not present:
        log.info("no gold answer occurs in the context; falling back to the first gold")
        return golds[0]
    if rng is None:
        raise ValueError("random-gold-in-context mode needs a random stream")
    return present[int(rng.integers(len(present)))]


def spec_to_dict(spec: CorpusSpec) -> dict:
    return asdict(spec)
