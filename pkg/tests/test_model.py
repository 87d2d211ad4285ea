from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fidlab import numerics as nx
from fidlab.environments import Context
from fidlab.model import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    AttentionTensor,
    ContractViolation,
    FidModel,
    ModelConfig,
    Tokenizer,
    aggregate_first_token,
    encode_context,
    fid_forward,
    forward_batch,
    greedy_decode,
    greedy_decode_batch,
    passage_totals,
    render_passage,
)

from helpers import context_of, passage, tiny_setup


@pytest.fixture(scope="module")
def setup():
    return tiny_setup()


def test_tokenizer_keeps_specials_first_and_markers_whole():
    tok = Tokenizer(["question:", "key", "k1"])
    assert tok.tokens[:4] == ["<pad>", "<unk>", "<bos>", "<eos>"]
    assert tok.pieces("question: key k1 ?") == ["question:", "key", "k1", "?"]
    assert tok.encode("key zz") == [tok.index["key"], UNK_ID]


def test_tokenizer_decode_stops_at_eos_and_skips_pad():
    tok = Tokenizer(["a", "b"])
    a, b = tok.index["a"], tok.index["b"]
    assert tok.decode([BOS_ID, a, PAD_ID, b, EOS_ID, a]) == "a b"
    assert tok.decode([a, 999]) == "a <unk>"


def test_render_passage_template_and_length():
    tok = Tokenizer(["question:", "title:", "context:", "q", "t", "c"])
    ids = render_passage("q", passage("c c", title="t"), tok, 9)
    assert tok.decode(ids) == "question: q title: t context: c c"
    assert len(ids) == 9 and ids[-2:] == [PAD_ID, PAD_ID]
    assert len(render_passage("q", passage("c " * 20), tok, 5)) == 5


@pytest.mark.parametrize(
    "kw", [{"d_model": 10, "n_heads": 3}, {"encoder_layers": 0}, {"max_target_len": 2, "max_answer_len": 4}]
)
def test_model_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_tokenizer_larger_than_vocab_rejected():
    with pytest.raises(ValueError):
        FidModel(ModelConfig(vocab_size=5), Tokenizer(["a", "b", "c"]))


def test_encode_context_rejects_empty(setup):
    model, *_ = setup
    with pytest.raises(ValueError):
        encode_context(model, "q", Context([], []))


def test_cross_attention_rows_normalized_and_pads_masked(setup):
    model, questions, *_ = setup
    ctx = context_of(questions[0], 2, 3)
    _, attn = fid_forward(model, questions[0].text, ctx, decoder_input=[BOS_ID, 5, 6])
    K, H, T, S = attn.probs.shape
    assert (K, H, T) == (model.config.decoder_layers, model.config.n_heads, 3)
    assert S == 5 * model.config.passage_len
    np.testing.assert_allclose(attn.probs.sum(-1), 1.0, atol=1e-12)
    enc = encode_context(model, questions[0].text, ctx).reshape(-1)
    assert attn.probs[..., enc == PAD_ID].max() < 1e-12


def test_passage_totals_and_first_token_aggregate():
    probs = np.zeros((1, 2, 1, 6))
    probs[0, 0, 0] = [0.1, 0.1, 0.2, 0.2, 0.3, 0.1]
    probs[0, 1, 0] = [0.5, 0.0, 0.0, 0.0, 0.25, 0.25]
    attn = AttentionTensor(probs, np.array([0, 2, 4]))
    assert attn.segment_bounds() == [(0, 2), (2, 4), (4, 6)]
    np.testing.assert_allclose(passage_totals(probs[0, 0, 0], attn.passage_offsets), [0.2, 0.4, 0.4])
    np.testing.assert_allclose(aggregate_first_token(attn).mass[0], [0.35, 0.2, 0.45])


@given(st.permutations(range(5)))
def test_forward_is_permutation_invariant(order):
    model, questions, *_ = _CACHED
    q = questions[1]
    ctx = context_of(q, 2, 3)
    logits, attn = fid_forward(model, q.text, ctx)
    logits_p, attn_p = fid_forward(model, q.text, ctx.permuted(list(order)))
    np.testing.assert_allclose(logits.data, logits_p.data, atol=1e-10)
    mass = aggregate_first_token(attn).mass
    mass_p = aggregate_first_token(attn_p).mass
    np.testing.assert_allclose(mass[:, list(order)], mass_p, atol=1e-10)


_CACHED = tiny_setup()


def test_transform_contract_enforced(setup):
    model, questions, *_ = setup
    ctx = context_of(questions[0], 1, 2)
    with pytest.raises(ContractViolation, match="normalization"):
        fid_forward(model, questions[0].text, ctx, transform=lambda p, site: p * 0.5)
    with pytest.raises(ContractViolation, match="shape"):
        fid_forward(model, questions[0].text, ctx, transform=lambda p, site: p[..., :-1])


def test_transform_sees_every_decoder_layer_and_relevance(setup):
    model, questions, *_ = setup
    ctx = context_of(questions[0], 1, 2)
    seen = []

    def spy(p, site):
        seen.append((site.layer, site.relevance.tolist(), p.shape))
        return p

    fid_forward(model, questions[0].text, ctx, transform=spy)
    assert [s[0] for s in seen] == list(range(model.config.decoder_layers))
    assert seen[0][1] == [[True, False, False]]


def test_identity_transform_changes_nothing(setup):
    model, questions, *_ = setup
    ctx = context_of(questions[2], 2, 4)
    a = greedy_decode(model, questions[2].text, ctx)
    b = greedy_decode(model, questions[2].text, ctx, transform=lambda p, site: p)
    assert a == b


def test_greedy_decode_respects_max_answer_len(setup):
    model, questions, *_ = setup
    ctx = context_of(questions[0], 1, 1)
    enc = encode_context(model, questions[0].text, ctx)[None]
    ids, first = greedy_decode_batch(model, enc, capture_first=True)
    assert len(ids[0]) <= model.config.max_answer_len
    assert first.shape == (1, model.config.decoder_layers, model.config.n_heads, 2 * model.config.passage_len)


def test_full_model_gradient_check():
    model, questions, *_ = tiny_setup(d_model=8, ff_dim=8, passage_len=12)
    ctx = context_of(questions[0], 1, 1)
    enc = encode_context(model, questions[0].text, ctx)[None]
    dec = np.array([[BOS_ID, 7, 8]])
    tgt = np.array([[7, 8, EOS_ID]])
    names = ["dec.0.cross.wq", "enc.1.ff.w1", "lm_head"]
    rng = np.random.default_rng(0)

    for name in names:
        base = model.params[name].data
        sub = (slice(0, 3), slice(0, 2))

        def loss(piece, name=name, sub=sub, base=base):
            full = nx.Tensor(base.copy())
            # splice the checked block into the parameter
            mask = np.zeros(base.shape)
            mask[sub] = 1.0
            model.params[name] = full * (1.0 - mask) + _place(piece, base.shape, sub)
            out = nx.cross_entropy(forward_batch(model, enc, dec).logits, tgt)
            model.params[name] = nx.parameter(base, name)
            return out

        assert nx.grad_check(loss, base[sub] + rng.normal(size=(3, 2)) * 0.01) < 1e-6


def _place(piece, shape, sub):
    """Differentiably embed ``piece`` into zeros of ``shape`` at ``sub``."""
    rows = np.zeros((shape[0], piece.shape[0]))
    rows[np.arange(sub[0].start, sub[0].stop), np.arange(piece.shape[0])] = 1.0
    cols = np.zeros((piece.shape[1], shape[1]))
    cols[np.arange(piece.shape[1]), np.arange(sub[1].start, sub[1].stop)] = 1.0
    return nx.Tensor(rows) @ piece @ nx.Tensor(cols)


def test_astype_and_state_dict_round_trip(setup):
    model, *_ = setup
    m32 = model.astype(np.float32)
    assert m32.dtype == np.float32
    other = FidModel(model.config, model.tokenizer)
    other.load_state_dict(model.state_dict())
    for k in model.params:
        np.testing.assert_array_equal(other.params[k].data, model.params[k].data.astype(other.dtype))
    with pytest.raises(KeyError):
        other.load_state_dict({"embed": model.params["embed"].data})
