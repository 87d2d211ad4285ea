"""Toy Fusion-in-Decoder reader.

Each passage is rendered with the question into a fixed-length token sequence
and encoded independently (the encoder batch axis runs over passages, so no
encoder attention crosses a passage boundary). The encoder outputs are
concatenated along the key axis and the decoder cross-attends over all of
them. Encoder keys carry only within-passage positions, so the decoder is
exactly insensitive to passage order.

Cross-attention probabilities can be captured and rewritten through an
attention transform before they mix the values (see ``attention_control``).
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .environments import Context, Passage
from .numerics import Tensor

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS)
TEMPLATE_TOKENS = ("question:", "title:", "context:")
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(4)

_PIECE = re.compile(r"\w+|[^\w\s]")


class ContractViolation(RuntimeError):
    """An attention transform returned rows that do not sum to one."""


@dataclass
class ModelConfig:
    vocab_size: int = 200
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 128
    passage_len: int = 30
    max_answer_len: int = 8
    max_target_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_heads", "encoder_layers", "decoder_layers", "ff_dim", "passage_len", "max_answer_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_target_len < self.max_answer_len:
            raise ValueError("max_target_len must be >= max_answer_len")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class Tokenizer:
    """Whitespace tokenizer over a closed vocabulary.

    A whitespace piece that is itself in the vocabulary is kept whole (this is
    how the template markers ``question:`` etc. stay single tokens); anything
    else is split into word/punctuation pieces. Unknown pieces map to UNK.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def pieces(self, text: str) -> list[str]:
        out = []
        for piece in text.lower().split():
            if piece in self.index:
                out.append(piece)
            else:
                out.extend(_PIECE.findall(piece))
        return out

    def encode(self, text: str) -> list[int]:
        return [self.index.get(p, UNK_ID) for p in self.pieces(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            # ids past the vocabulary (spare embedding rows) read as UNK
            words.append(self.tokens[i] if i < len(self.tokens) else UNK)
        return " ".join(words)

    @classmethod
    def from_texts(cls, texts: Iterable[str], max_size: int | None = None) -> Tokenizer:
        """Build a vocabulary from corpus text, most frequent pieces first."""
        counts: dict[str, int] = {}
        probe = cls(list(SPECIAL_TOKENS) + list(TEMPLATE_TOKENS))
        for text in texts:
            for p in probe.pieces(text):
                counts[p] = counts.get(p, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        fixed = list(SPECIAL_TOKENS) + list(TEMPLATE_TOKENS)
        ranked = [t for t in ranked if t not in fixed]
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(fixed))]
        return cls(fixed + ranked)


def render_passage(question: str, passage: Passage, tokenizer: Tokenizer, passage_len: int) -> list[int]:
    """Template ``question: {q} title: {t} context: {c}``, padded/truncated to ``passage_len``."""
    text = f"question: {question} title: {passage.title} context: {passage.text}"
    ids = tokenizer.encode(text)[:passage_len]
    return ids + [PAD_ID] * (passage_len - len(ids))


# ---------------------------------------------------------------------------
# Attention records
# ---------------------------------------------------------------------------


@dataclass
class AttentionSite:
    """What a transform sees besides the probabilities themselves."""

    layer: int
    passage_offsets: np.ndarray  # (N,) start of each passage on the key axis
    valid: np.ndarray  # (B, S) non-padding keys
    relevance: np.ndarray | None  # (B, N) ground-truth mask, if known


class AttentionTransform(Protocol):
    def __call__(self, probs: np.ndarray, site: AttentionSite) -> np.ndarray:
        """Map (B, H, T, S) normalized rows to (B, H, T, S) normalized rows."""


@dataclass
class AttentionTensor:
    """Cross-attention of one question: probs[k, h, l, s]."""

    probs: np.ndarray  # (K, H, T, S)
    passage_offsets: np.ndarray  # (N,)

    @property
    def n_passages(self) -> int:
        return len(self.passage_offsets)

    def segment_bounds(self) -> list[tuple[int, int]]:
        ends = list(self.passage_offsets[1:]) + [self.probs.shape[-1]]
        return list(zip(self.passage_offsets.tolist(), [int(e) for e in ends]))


@dataclass
class AggregatedAttention:
    mass: np.ndarray  # (K, N)


def passage_totals(probs: np.ndarray, passage_offsets: np.ndarray) -> np.ndarray:
    """Sum probabilities over each passage's key span: (..., S) -> (..., N)."""
    return np.add.reduceat(probs, np.asarray(passage_offsets, dtype=np.intp), axis=-1)


def aggregate_first_token(attn: AttentionTensor) -> AggregatedAttention:
    """Head-averaged mass per passage from the first generated position."""
    if attn.probs.shape[2] < 1:
        raise ValueError("attention tensor has no decoder positions")
    first = attn.probs[:, :, 0, :].mean(axis=1)  # (K, S)
    return AggregatedAttention(passage_totals(first, attn.passage_offsets))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, f, V = cfg.d_model, cfg.ff_dim, cfg.vocab_size

    def lin(n_in, n_out):
        return rng.normal(0.0, n_in ** -0.5, size=(n_in, n_out))

    p: dict[str, np.ndarray] = {
        "embed": rng.normal(0.0, 1.0, size=(V, d)),
        "enc_pos": rng.normal(0.0, 0.5, size=(cfg.passage_len, d)),
        "dec_pos": rng.normal(0.0, 0.5, size=(cfg.max_target_len + 1, d)),
    }
    for i in range(cfg.encoder_layers):
        pre = f"enc.{i}."
        p[pre + "attn_norm"] = np.ones(d)
        for w in "qkvo":
            p[pre + f"attn.w{w}"] = lin(d, d)
        p[pre + "ff_norm"] = np.ones(d)
        p[pre + "ff.w1"] = lin(d, f)
        p[pre + "ff.w2"] = lin(f, d)
    p["enc.final_norm"] = np.ones(d)
    for i in range(cfg.decoder_layers):
        pre = f"dec.{i}."
        p[pre + "self_norm"] = np.ones(d)
        for w in "qkvo":
            p[pre + f"self.w{w}"] = lin(d, d)
        p[pre + "cross_norm"] = np.ones(d)
        for w in "qkvo":
            p[pre + f"cross.w{w}"] = lin(d, d)
        p[pre + "ff_norm"] = np.ones(d)
        p[pre + "ff.w1"] = lin(d, f)
        p[pre + "ff.w2"] = lin(f, d)
    p["dec.final_norm"] = np.ones(d)
    p["lm_head"] = lin(d, V)
    return {k: v.astype(dtype) for k, v in p.items()}


@dataclass
class FidModel:
    config: ModelConfig
    tokenizer: Tokenizer
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.tokenizer) > self.config.vocab_size:
            raise ValueError(
                f"tokenizer has {len(self.tokenizer)} tokens but vocab_size is {self.config.vocab_size}"
            )
        if not self.params:
            self.params = {k: nx.parameter(v, k) for k, v in _init_params(self.config).items()}

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = nx.parameter(np.array(v, dtype=self.dtype), k)

    def astype(self, dtype) -> FidModel:
        params = {k: nx.parameter(t.data.astype(dtype), k) for k, t in self.params.items()}
        return FidModel(self.config, self.tokenizer, params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention(
    p: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    memory: Tensor,
    bias: np.ndarray,
    n_heads: int,
    on_probs: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    q = _split_heads(x @ p[prefix + "wq"], n_heads)
    k = _split_heads(memory @ p[prefix + "wk"], n_heads)
    v = _split_heads(memory @ p[prefix + "wv"], n_heads)
    scale = np.asarray(q.shape[-1] ** -0.5, dtype=x.dtype)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias.astype(x.dtype)
    probs = nx.softmax(scores)
    if on_probs is not None:
        probs = on_probs(probs)
    return _merge_heads(probs @ v) @ p[prefix + "wo"]


def _ffn(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return nx.relu(x @ p[prefix + "w1"]) @ p[prefix + "w2"]


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, T, V)
    cross_attention: np.ndarray | None  # (B, K, H, T, S)
    passage_offsets: np.ndarray  # (N,)
    encoder_attention: list[np.ndarray] | None = None  # per layer (B*N, H, L, L)

    def attention(self, b: int = 0) -> AttentionTensor:
        if self.cross_attention is None:
            raise ValueError("cross-attention was not captured")
        return AttentionTensor(self.cross_attention[b], self.passage_offsets)


def encode(model: FidModel, enc_ids: np.ndarray, capture: bool = False):
    """Encode (B, N, L) token ids independently per passage -> (B, N*L, d)."""
    cfg, p = model.config, model.params
    B, N, L = enc_ids.shape
    flat = enc_ids.reshape(B * N, L)
    valid = flat != PAD_ID
    bias = np.where(valid, 0.0, nx.MASK_VALUE)[:, None, None, :]
    pos = p["enc_pos"] if L == cfg.passage_len else p["enc_pos"][:L]
    x = nx.embedding(p["embed"], flat) + pos
    captured = [] if capture else None

    def grab(probs):
        captured.append(probs.data.copy())
        return probs

    for i in range(cfg.encoder_layers):
        pre = f"enc.{i}."
        h = nx.rms_norm(x, p[pre + "attn_norm"])
        x = x + _attention(p, pre + "attn.", h, h, bias, cfg.n_heads, grab if capture else None)
        x = x + _ffn(p, pre + "ff.", nx.rms_norm(x, p[pre + "ff_norm"]))
    x = nx.rms_norm(x, p["enc.final_norm"])
    return x.reshape(B, N * L, cfg.d_model), valid.reshape(B, N * L), captured


def decode(
    model: FidModel,
    memory: Tensor,
    memory_valid: np.ndarray,
    dec_ids: np.ndarray,
    passage_offsets: np.ndarray,
    transform: AttentionTransform | None = None,
    relevance: np.ndarray | None = None,
    capture: bool = False,
) -> tuple[Tensor, np.ndarray | None]:
    cfg, p = model.config, model.params
    B, T = dec_ids.shape
    if T > cfg.max_target_len + 1:
        raise ValueError(f"decoder input length {T} exceeds {cfg.max_target_len + 1}")
    causal = np.triu(np.full((T, T), nx.MASK_VALUE), k=1)[None, None]
    cross_bias = np.where(memory_valid, 0.0, nx.MASK_VALUE)[:, None, None, :]
    x = nx.embedding(p["embed"], dec_ids) + p["dec_pos"][:T]
    layers = []

    for i in range(cfg.decoder_layers):
        pre = f"dec.{i}."
        site = AttentionSite(i, passage_offsets, memory_valid, relevance)

        def on_probs(probs: Tensor, site=site) -> Tensor:
            if transform is not None:
                new = np.asarray(transform(probs.data, site), dtype=probs.dtype)
                if new.shape != probs.shape:
                    raise ContractViolation(f"transform changed shape {probs.shape} -> {new.shape}")
                err = np.abs(new.sum(axis=-1) - 1.0).max()
                if not err <= 1e-4:
                    raise ContractViolation(f"transform rows off normalization by {err:.3g} at layer {site.layer}")
                if new is not probs.data:
                    # rewritten probabilities are treated as constants
                    probs = Tensor(new)
            if capture:
                layers.append(probs.data.copy())
            return probs

        h = nx.rms_norm(x, p[pre + "self_norm"])
        x = x + _attention(p, pre + "self.", h, h, causal, cfg.n_heads)
        h = nx.rms_norm(x, p[pre + "cross_norm"])
        x = x + _attention(p, pre + "cross.", h, memory, cross_bias, cfg.n_heads, on_probs)
        x = x + _ffn(p, pre + "ff.", nx.rms_norm(x, p[pre + "ff_norm"]))
    x = nx.rms_norm(x, p["dec.final_norm"])
    logits = x @ p["lm_head"]
    cross = np.stack(layers, axis=1) if capture else None
    return logits, cross


def forward_batch(
    model: FidModel,
    enc_ids: np.ndarray,
    dec_ids: np.ndarray,
    transform: AttentionTransform | None = None,
    relevance: np.ndarray | None = None,
    capture: bool = False,
) -> ForwardOutput:
    B, N, L = enc_ids.shape
    offsets = np.arange(N) * L
    memory, valid, enc_attn = encode(model, enc_ids, capture)
    logits, cross = decode(model, memory, valid, dec_ids, offsets, transform, relevance, capture)
    return ForwardOutput(logits, cross, offsets, enc_attn)


def encode_context(model: FidModel, question: str, context: Context) -> np.ndarray:
    """(N, L) token ids for one question's context."""
    if not context.passages:
        raise ValueError("context must contain at least one passage")
    cfg = model.config
    return np.array(
        [render_passage(question, p, model.tokenizer, cfg.passage_len) for p in context.passages],
        dtype=np.int64,
    )


def fid_forward(
    model: FidModel,
    question: str,
    context: Context,
    transform: AttentionTransform | None = None,
    decoder_input: Sequence[int] | None = None,
) -> tuple[Tensor, AttentionTensor]:
    """Teacher-forced forward pass for one question.

    ``decoder_input`` defaults to ``[BOS]``, i.e. the first generated position.
    Returns (logits of shape (T, V), captured cross-attention).
    """
    enc = encode_context(model, question, context)[None]
    dec = np.array([list(decoder_input) if decoder_input is not None else [BOS_ID]], dtype=np.int64)
    relevance = np.asarray(context.relevance_mask, dtype=bool)[None]
    with nx.no_grad():
        out = forward_batch(model, enc, dec, transform, relevance, capture=True)
    return Tensor(out.logits.data[0]), out.attention(0)


def greedy_decode_batch(
    model: FidModel,
    enc_ids: np.ndarray,
    transform: AttentionTransform | None = None,
    relevance: np.ndarray | None = None,
    capture_first: bool = False,
) -> tuple[list[list[int]], np.ndarray | None]:
    """Greedy decoding for a batch of contexts sharing one passage count.

    Returns token ids per item (EOS excluded) and, when ``capture_first``,
    the cross-attention of the first generated position (B, K, H, S).
    """
    cfg = model.config
    B, N, L = enc_ids.shape
    offsets = np.arange(N) * L
    with nx.no_grad():
        memory, valid, _ = encode(model, enc_ids)
        dec = np.full((B, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        first_attn = None
        for step in range(cfg.max_answer_len):
            logits, cross = decode(
                model, memory, valid, dec, offsets, transform, relevance, capture=capture_first and step == 0
            )
            if cross is not None:
                first_attn = cross[:, :, :, 0, :]
            # np.argmax returns the first maximum: ties go to the lowest id
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, PAD_ID, nxt)
            done |= nxt == EOS_ID
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
            if done.all():
                break
    outputs = []
    for row in dec[:, 1:]:
        ids = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            ids.append(int(t))
        outputs.append(ids)
    return outputs, first_attn


def greedy_decode(
    model: FidModel,
    question: str,
    context: Context,
    transform: AttentionTransform | None = None,
) -> str:
    enc = encode_context(model, question, context)[None]
    relevance = np.asarray(context.relevance_mask, dtype=bool)[None]
    ids, _ = greedy_decode_batch(model, enc, transform, relevance)
    return model.tokenizer.decode(ids[0])


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
