from __future__ import annotations

import json
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fidlab.corpus import (
    CorpusConfigError,
    CorpusSpec,
    EmConfig,
    contains_answer,
    exact_match,
    generate_corpus,
    NO_ANSWER,
    generate_reading_corpus,
    normalize_answer,
    pick_target_answer,
    read_jsonl,
    write_corpus,
)

SMALL = CorpusSpec(n_questions=30)


def _statement(text):
    """(key, value) stated by a single-frame passage."""
    m = re.fullmatch(r"key (.+) has value (v\d+)|the value of key (.+) is (v\d+)|(v\d+) is the value of key (.+)", text)
    assert m, text
    g = m.groups()
    if g[0]:
        return g[0], g[1]
    if g[2]:
        return g[2], g[3]
    return g[5], g[4]


def test_generation_is_deterministic(tmp_path):
    a = generate_corpus(SMALL)
    b = generate_corpus(SMALL)
    write_corpus(*a, tmp_path / "a")
    write_corpus(*b, tmp_path / "b")
    assert (tmp_path / "a" / "corpus.json").read_bytes() == (tmp_path / "b" / "corpus.json").read_bytes()
    assert read_jsonl(tmp_path / "a" / "relevance_labels.jsonl") == a[1]


def test_pool_sizes_and_entailment_soundness():
    records, labels = generate_corpus(SMALL)
    kinds = {(r["question_id"], r["passage_id"]): r["label"] for r in labels}
    for rec in records:
        key = re.fullmatch(r"what is the value of key (.+) \?", rec["question"]).group(1)
        counts = {"relevant": 0, "irrelevant": 0, "discarded": 0}
        for ctx in rec["ctxs"]:
            k, v = _statement(ctx["text"])
            label = kinds[(rec["id"], ctx["id"])]
            counts[label] += 1
            assert (label == "relevant") == (k == key)
            if label == "relevant":
                assert [v] == rec["answers"]
            if label == "discarded":
                assert v == rec["answers"][0] and k != key
            if label == "irrelevant":
                assert not contains_answer(ctx["text"], rec["answers"])
        assert counts["relevant"] == SMALL.relevant_pool_size
        assert counts["irrelevant"] + counts["discarded"] == SMALL.irrelevant_pool_size
        assert counts["discarded"] == SMALL.n_decoys()


def test_hard_negatives_share_all_but_one_key_token():
    spec = CorpusSpec(n_questions=10, hard_negative_rate=0.5)
    records, _ = generate_corpus(spec)
    for rec in records:
        key = re.fullmatch(r"what is the value of key (.+) \?", rec["question"]).group(1).split()
        overlaps = {sum(a == b for a, b in zip(key, _statement(c["text"])[0].split())) for c in rec["ctxs"]}
        assert overlaps <= {0, 1, 2}
        assert 1 in overlaps


def test_no_decoys_means_every_answer_bearing_passage_entails():
    records, labels = generate_corpus(CorpusSpec(n_questions=10, decoy_rate=0.0))
    kinds = {(r["question_id"], r["passage_id"]): r["label"] for r in labels}
    for rec in records:
        for ctx in rec["ctxs"]:
            if contains_answer(ctx["text"], rec["answers"]):
                assert kinds[(rec["id"], ctx["id"])] == "relevant"


@pytest.mark.parametrize(
    "kw",
    [
        {"decoy_rate": 1.0},
        {"n_keys": 3, "key_tokens": 2},
        {"key_tokens": 1, "hard_negative_rate": 0.2},
        {"key_tokens": 1, "hard_negative_rate": 0.0, "n_keys": 10, "keys_per_question": 20},
        {"n_values": 1},
    ],
)
def test_config_errors(kw):
    with pytest.raises(CorpusConfigError):
        generate_corpus(CorpusSpec(n_questions=2, **kw))


def test_reading_corpus_mixes_answerable_and_unanswerable_passages():
    records, labels = generate_reading_corpus(SMALL, n_questions=200, unanswerable_rate=0.5)
    assert len(labels) == len(records) == 200
    assert {l["label"] for l in labels} == {"relevant"}
    n_none = 0
    for rec in records:
        key = re.fullmatch(r"what is the value of key (.+) \?", rec["question"]).group(1)
        (ctx,) = rec["ctxs"]
        mentions_key = f"key {key} " in ctx["text"] + " "
        if rec["answers"] == [NO_ANSWER]:
            n_none += 1
            assert not mentions_key
        else:
            assert mentions_key and contains_answer(ctx["text"], rec["answers"])
    assert 70 <= n_none <= 130
    assert all(r["answers"] != [NO_ANSWER] for r in generate_reading_corpus(SMALL, 20, unanswerable_rate=0.0)[0])
    with pytest.raises(CorpusConfigError):
        generate_reading_corpus(SMALL, 5, unanswerable_rate=1.5)


# --- exact match -----------------------------------------------------------


def test_exact_match_examples():
    assert exact_match("v9", ["v9"])
    assert exact_match("The Answer.", ["answer"])
    assert exact_match("v9", ["v3", "v9"])
    assert not exact_match("v9", ["v90"])
    assert not exact_match("The v9", ["v9 ."], EmConfig("synthetic-exact"))
    with pytest.raises(ValueError):
        exact_match("x", [])


def test_normalize_answer():
    assert normalize_answer("  An  Apple, the PIE!  ") == "apple pie"


@given(st.text(max_size=20), st.text(max_size=20))
def test_exact_match_symmetric(a, b):
    assert exact_match(a, [b]) == exact_match(b, [a])


def test_contains_answer_respects_word_boundaries():
    assert contains_answer("key k1 has value v12", ["v12"])
    assert not contains_answer("key k1 has value v12", ["v1"])


def test_pick_target_answer_modes():
    assert pick_target_answer(["a", "b"], ["x"]) == "a"
    rng = np.random.default_rng(0)
    assert pick_target_answer(["a", "b"], ["only b here"], rng, "random-gold-in-context") == "b"
    assert pick_target_answer(["a"], [], rng, "random-gold-in-context") == "a"
    assert pick_target_answer(["a", "b"], ["nothing"], rng, "random-gold-in-context") == "a"
