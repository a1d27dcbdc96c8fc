"""The unified network: feature-concatenating embedder, BiLSTM encoder,
attention LSTM decoder with a copy gate.

One code path serves both tasks. The only task-specific piece is how source
tokens are embedded: table inputs concatenate word, field and two position
embeddings per token; passage inputs concatenate the word embedding with the
answer bit. Everything downstream (encoder, attention, decoder, output
mixture) is shared.

The copy mechanism is a gated mixture: a scalar gate ``p_gen`` in (0, 1)
weighs the vocabulary softmax against the attention distribution scattered
onto the source positions, extending the output space with the source's
out-of-vocabulary tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import (QGSourceSequence, TableSourceSequence, UNK_ID, Vocabulary,
                   extend_ids, PAD_ID)

TASKS = ("table2text", "qg")


@dataclass
class ModelConfig:
    task: str
    word_dim: int
    hidden_dim: int
    word_vocab_size: int
    encoder_layers: int = 1
    dropout_p: float = 0.0
    field_dim: int = 0
    pos_dim: int = 0
    field_vocab_size: int = 0
    max_pos: int = 30
    attn_dim: int = 0  # 0 = use hidden_dim

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.attn_dim == 0:
            self.attn_dim = self.hidden_dim
        if self.task == "table2text" and (self.field_dim <= 0 or self.pos_dim <= 0):
            raise ValueError("table2text needs field_dim and pos_dim > 0")

    @property
    def input_dim(self) -> int:
        if self.task == "table2text":
            return self.word_dim + self.field_dim + 2 * self.pos_dim
        return self.word_dim + 1

    @classmethod
    def table2text_defaults(cls, word_vocab_size, field_vocab_size, **over):
        """Published recipe: 400/50/5 embeddings, hidden 500, one layer."""
        base = dict(task="table2text", word_dim=400, field_dim=50, pos_dim=5,
                    hidden_dim=500, encoder_layers=1, dropout_p=0.0,
                    word_vocab_size=word_vocab_size,
                    field_vocab_size=field_vocab_size)
        base.update(over)
        return cls(**base)

    @classmethod
    def qg_defaults(cls, word_vocab_size, split=1, **over):
        """Published recipe: 300-dim words, two encoder layers, hidden 350
        (split 1) or 512 (split 2), dropout 0.1 / 0.3."""
        hidden, drop = (350, 0.1) if split == 1 else (512, 0.3)
        base = dict(task="qg", word_dim=300, hidden_dim=hidden,
                    encoder_layers=2, dropout_p=drop,
                    word_vocab_size=word_vocab_size)
        base.update(over)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DecoderState:
    """Decoder LSTM state plus the attention context fed to the next step."""

    h: T.Tensor  # (1, hidden)
    c: T.Tensor  # (1, hidden)
    context: T.Tensor  # (1, 2*hidden)


@dataclass
class EncodedSource:
    """Encoder output consumed by attention and the copy mixture."""

    H: T.Tensor                 # (T_pad, 2*hidden)
    att_keys: T.Tensor          # (T_pad, attn_dim), cached W_h @ H + b
    init_state: DecoderState
    mask: np.ndarray | None     # None = no padding, else bool per position
    tokens: list[str]
    src_ids: list[int]
    src_ext_ids: list[int]
    oov_tokens: list[str]
    scatter_ids: np.ndarray = field(init=False)

    def __post_init__(self):
        pad = self.H.data.shape[0] - len(self.src_ext_ids)
        self.scatter_ids = np.asarray(self.src_ext_ids + [PAD_ID] * pad, dtype=np.intp)

    @property
    def length(self) -> int:
        return len(self.tokens)


def _lstm_step(x, h, c, W, b, hidden):
    """One LSTM cell update. Gate layout along the 4h axis: i, f, g, o."""
    gates = T.linear(T.concat([x, h], axis=1), W, b)
    i = T.sigmoid(T.slice_cols(gates, 0, hidden))
    f = T.sigmoid(T.slice_cols(gates, hidden, 2 * hidden))
    g = T.tanh(T.slice_cols(gates, 2 * hidden, 3 * hidden))
    o = T.sigmoid(T.slice_cols(gates, 3 * hidden, 4 * hidden))
    c2 = T.add(T.mul(f, c), T.mul(i, g))
    h2 = T.mul(o, T.tanh(c2))
    return h2, c2


class Seq2SeqModel:
    """Encoder-decoder with attention and copy gate, shared by both tasks."""

    def __init__(self, cfg: ModelConfig, word_vocab: Vocabulary,
                 field_vocab: Vocabulary | None = None, seed: int = 0,
                 pretrained_word_emb: T.Tensor | None = None):
        if len(word_vocab) != cfg.word_vocab_size:
            raise ValueError(
                f"vocab size {len(word_vocab)} != cfg.word_vocab_size {cfg.word_vocab_size}")
        if cfg.task == "table2text":
            if field_vocab is None:
                raise ValueError("table2text needs a field vocabulary")
            if len(field_vocab) != cfg.field_vocab_size:
                raise ValueError(
                    f"field vocab size {len(field_vocab)} != {cfg.field_vocab_size}")
        self.cfg = cfg
        self.word_vocab = word_vocab
        self.field_vocab = field_vocab
        self.training = False
        self.drop_rng: np.random.Generator | None = None
        self.params = self._init_params(seed, pretrained_word_emb)

    # ---------------------------------------------------------------- setup

    def _init_params(self, seed, pretrained_word_emb) -> dict[str, T.Tensor]:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        h, a = cfg.hidden_dim, cfg.attn_dim
        p: dict[str, T.Tensor] = {}

        def mat(name, fan_in, fan_out):
            p[name] = T.parameter(T.xavier_uniform(fan_in, fan_out, rng), name)

        def bias(name, n):
            p[name] = T.parameter(np.zeros(n), name)

        def lstm(prefix, in_dim):
            mat(f"{prefix}/W", in_dim + h, 4 * h)
            bias(f"{prefix}/b", 4 * h)
            p[f"{prefix}/b"].data[h:2 * h] = 1.0  # forget-gate bias

        if pretrained_word_emb is not None:
            if pretrained_word_emb.data.shape != (cfg.word_vocab_size, cfg.word_dim):
                raise ValueError(
                    f"pretrained embeddings {pretrained_word_emb.data.shape} != "
                    f"({cfg.word_vocab_size}, {cfg.word_dim})")
            frozen = T.Tensor(pretrained_word_emb.data.copy(), requires_grad=False,
                              name="emb/word")
            p["emb/word"] = frozen
        else:
            p["emb/word"] = T.parameter(
                rng.uniform(-0.1, 0.1, size=(cfg.word_vocab_size, cfg.word_dim)),
                "emb/word")
        if cfg.task == "table2text":
            p["emb/field"] = T.parameter(
                rng.uniform(-0.1, 0.1, size=(cfg.field_vocab_size, cfg.field_dim)),
                "emb/field")
            p["emb/pplus"] = T.parameter(
                rng.uniform(-0.1, 0.1, size=(cfg.max_pos, cfg.pos_dim)), "emb/pplus")
            p["emb/pminus"] = T.parameter(
                rng.uniform(-0.1, 0.1, size=(cfg.max_pos, cfg.pos_dim)), "emb/pminus")

        in_dim = cfg.input_dim
        for layer in range(cfg.encoder_layers):
            lstm(f"enc/l{layer}/fwd", in_dim)
            lstm(f"enc/l{layer}/bwd", in_dim)
            in_dim = 2 * h

        mat("dec/init_h/W", 2 * h, h)
        bias("dec/init_h/b", h)
        mat("dec/init_c/W", 2 * h, h)
        bias("dec/init_c/b", h)
        lstm("dec/lstm", cfg.word_dim + 2 * h)

        mat("att/Wh", 2 * h, a)
        bias("att/b", a)
        mat("att/Ws", h, a)
        mat("att/v", a, 1)

        mat("out/W", h + 2 * h, cfg.word_vocab_size)
        bias("out/b", cfg.word_vocab_size)
        mat("gate/W", 2 * h + h + cfg.word_dim, 1)
        bias("gate/b", 1)
        return p

    def trainable(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def train(self, rng: np.random.Generator):
        """Enter training mode; rng drives dropout masks."""
        self.training = True
        self.drop_rng = rng

    def eval(self):
        self.training = False
        self.drop_rng = None

    def _drop(self, x):
        if self.training and self.cfg.dropout_p > 0.0:
            return T.dropout(x, self.cfg.dropout_p, self.drop_rng)
        return x

    # ------------------------------------------------------------ embedding

    def embed_table_inputs(self, seq: TableSourceSequence) -> T.Tensor:
        """Rows [word ; field ; p+ ; p-] per token, shape (T, input_dim)."""
        p = self.params
        parts = [T.rows(p["emb/word"], seq.word_ids),
                 T.rows(p["emb/field"], seq.field_ids),
                 T.rows(p["emb/pplus"], [k - 1 for k in seq.p_plus]),
                 T.rows(p["emb/pminus"], [k - 1 for k in seq.p_minus])]
        return T.concat(parts, axis=1)

    def embed_qg_inputs(self, seq: QGSourceSequence) -> T.Tensor:
        """Rows [word ; answer bit] per token, shape (T, word_dim + 1)."""
        emb = T.rows(self.params["emb/word"], seq.word_ids)
        bits = T.Tensor(np.asarray(seq.answer_bits, dtype=np.float64).reshape(-1, 1))
        return T.concat([emb, bits], axis=1)

    def embed_inputs(self, seq) -> T.Tensor:
        if self.cfg.task == "table2text":
            if not isinstance(seq, TableSourceSequence):
                raise TypeError(f"table2text model got {type(seq).__name__}")
            return self.embed_table_inputs(seq)
        if not isinstance(seq, QGSourceSequence):
            raise TypeError(f"qg model got {type(seq).__name__}")
        return self.embed_qg_inputs(seq)

    # -------------------------------------------------------------- encoder

    def bilstm_encode(self, X: T.Tensor):
        """Stacked bidirectional pass over (T, d) inputs.

        Returns (H, h_fwd, h_bwd) where H is (T, 2h) from the last layer and
        h_fwd / h_bwd are that layer's final per-direction hidden states.
        """
        Tlen = X.data.shape[0]
        if Tlen == 0:
            raise ValueError("bilstm_encode: empty input sequence")
        h_dim = self.cfg.hidden_dim
        inp = self._drop(X)
        h_fwd = h_bwd = None
        for layer in range(self.cfg.encoder_layers):
            if layer > 0:
                inp = self._drop(inp)
            outs = {}
            for direction, order in (("fwd", range(Tlen)),
                                     ("bwd", range(Tlen - 1, -1, -1))):
                W = self.params[f"enc/l{layer}/{direction}/W"]
                b = self.params[f"enc/l{layer}/{direction}/b"]
                h = T.Tensor(np.zeros((1, h_dim)))
                c = T.Tensor(np.zeros((1, h_dim)))
                steps = [None] * Tlen
                for t in order:
                    h, c = _lstm_step(T.take_row(inp, t), h, c, W, b, h_dim)
                    steps[t] = h
                outs[direction] = steps
                if direction == "fwd":
                    h_fwd = h
                else:
                    h_bwd = h
            inp = T.concat([T.concat(outs["fwd"], axis=0),
                            T.concat(outs["bwd"], axis=0)], axis=1)
        return inp, h_fwd, h_bwd

    def encode(self, seq, pad_to: int | None = None) -> EncodedSource:
        """Embed + encode a source sequence; optionally right-pad to pad_to."""
        H, h_fwd, h_bwd = self.bilstm_encode(self.embed_inputs(seq))
        finals = T.concat([h_fwd, h_bwd], axis=1)
        h0 = T.tanh(T.linear(finals, self.params["dec/init_h/W"],
                             self.params["dec/init_h/b"]))
        c0 = T.tanh(T.linear(finals, self.params["dec/init_c/W"],
                             self.params["dec/init_c/b"]))

        Tlen = H.data.shape[0]
        mask = None
        if pad_to is not None and pad_to > Tlen:
            zeros = T.Tensor(np.zeros((pad_to - Tlen, H.data.shape[1])))
            H = T.concat([H, zeros], axis=0)
            mask = np.arange(pad_to) < Tlen
        att_keys = T.linear(H, self.params["att/Wh"], self.params["att/b"])

        ext_ids, oov = extend_ids(seq.tokens, self.word_vocab)
        ctx0 = T.Tensor(np.zeros((1, 2 * self.cfg.hidden_dim)))
        return EncodedSource(H=H, att_keys=att_keys,
                             init_state=DecoderState(h0, c0, ctx0),
                             mask=mask, tokens=list(seq.tokens),
                             src_ids=list(seq.word_ids),
                             src_ext_ids=ext_ids, oov_tokens=oov)

    # ------------------------------------------------------------- attention

    def attention(self, state: DecoderState, enc: EncodedSource):
        """Additive attention: scores v . tanh(W_h H + W_s s), masked softmax.

        Returns (alpha, context) with alpha (T,) and context (1, 2h).
        """
        q = T.matmul(state.h, self.params["att/Ws"])  # (1, a)
        e = T.matmul(T.tanh(T.add_rowvec(enc.att_keys, T.reshape(q, (-1,)))),
                     self.params["att/v"])            # (T, 1)
        alpha = T.softmax(T.reshape(e, (-1,)), mask=enc.mask)
        context = T.matmul(T.reshape(alpha, (1, -1)), enc.H)
        return alpha, context

    # --------------------------------------------------------------- decoder

    def _embed_prev(self, y_prev: int) -> T.Tensor:
        v = self.cfg.word_vocab_size
        if y_prev < 0:
            raise IndexError(f"invalid previous token id {y_prev}")
        return T.rows(self.params["emb/word"], [y_prev if y_prev < v else UNK_ID])

    def decoder_step(self, state: DecoderState, y_prev: int, enc: EncodedSource):
        """Advance one step on [embed(y_prev) ; previous context].

        Returns (state', vocab_logits (V,), alpha (T,), p_gen (1,1) tensor).
        """
        e_prev = self._embed_prev(y_prev)
        x = T.concat([e_prev, state.context], axis=1)
        h2, c2 = _lstm_step(x, state.h, state.c, self.params["dec/lstm/W"],
                            self.params["dec/lstm/b"], self.cfg.hidden_dim)
        alpha, context = self.attention(DecoderState(h2, c2, state.context), enc)
        readout_in = self._drop(T.concat([h2, context], axis=1))
        logits = T.reshape(T.linear(readout_in, self.params["out/W"],
                                    self.params["out/b"]), (-1,))
        gate_in = T.concat([context, h2, e_prev], axis=1)
        p_gen = T.sigmoid(T.linear(gate_in, self.params["gate/W"],
                                   self.params["gate/b"]))
        return DecoderState(h2, c2, context), logits, alpha, p_gen

    def step_distribution(self, state: DecoderState, y_prev: int,
                          enc: EncodedSource):
        """Inference helper: one step -> (state', P np (V+oov,), alpha np (T,))."""
        state2, logits, alpha, p_gen = self.decoder_step(state, y_prev, enc)
        P = output_distribution(logits, alpha, p_gen, enc)
        return state2, P.data, alpha.data


def output_distribution(vocab_logits: T.Tensor, alpha: T.Tensor, p_gen: T.Tensor,
                        enc: EncodedSource) -> T.Tensor:
    """Mix generation and copy distributions over the extended vocabulary.

    P = p_gen * softmax(logits), extended with zeros for the source's OOV
    tokens, plus (1 - p_gen) * alpha scattered onto source token ids.
    """
    n_ext = vocab_logits.data.shape[0] + len(enc.oov_tokens)
    gen = T.scale_by(T.softmax(vocab_logits), p_gen)
    if enc.oov_tokens:
        gen = T.concat([gen, T.Tensor(np.zeros(len(enc.oov_tokens)))])
    copy_w = T.add_scalar(T.scale(p_gen, -1.0), 1.0)  # 1 - p_gen
    copy = T.scatter_sum(T.scale_by(alpha, copy_w), enc.scatter_ids, n_ext)
    return T.add(gen, copy)
