"""Small shared builders for tests."""

from __future__ import annotations

import numpy as np

from fidlab.corpus import CorpusSpec, generate_corpus
from fidlab.environments import Context, Passage, Question, _record_texts, build_questions
from fidlab.model import FidModel, ModelConfig, Tokenizer

# criterion number -> "criterion N: PASS|FAIL ..." line, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[number] = line
    print(line)


TINY_CORPUS = CorpusSpec(n_questions=40, relevant_pool_size=12, irrelevant_pool_size=70, eval_fraction=0.25)


def tiny_setup(dtype=np.float64, seed=0, **model_kw):
    records, labels = generate_corpus(TINY_CORPUS)
    tok = Tokenizer.from_texts(_record_texts(records))
    kw = {"d_model": 16, "n_heads": 2, "ff_dim": 32, **model_kw}
    cfg = ModelConfig(vocab_size=len(tok) + 2, seed=seed, **kw)
    model = FidModel(cfg, tok).astype(dtype)
    return model, build_questions(records, labels), records, labels


def context_of(question: Question, n_plus: int, n_minus: int) -> Context:
    passages = question.relevant_pool[:n_plus] + question.irrelevant_pool[:n_minus]
    return Context(passages, [True] * n_plus + [False] * n_minus)


def passage(text: str, pid: str = "p", title: str = "t0") -> Passage:
    return Passage(pid, title, text)
