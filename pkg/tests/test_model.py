import numpy as np
import pytest

from seqgen import data as D
from seqgen import tensor as T
from seqgen.model import ModelConfig, Seq2SeqModel, output_distribution
from conftest import tiny_qg_model, tiny_table_model, table_seq, qg_seq


def _np_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


# ---------------------------------------------------------------- config

def test_table_defaults_follow_recipe():
    cfg = ModelConfig.table2text_defaults(word_vocab_size=100, field_vocab_size=10)
    assert (cfg.word_dim, cfg.field_dim, cfg.pos_dim) == (400, 50, 5)
    assert cfg.hidden_dim == 500 and cfg.encoder_layers == 1
    assert cfg.input_dim == 460


def test_qg_defaults_follow_recipe():
    c1 = ModelConfig.qg_defaults(word_vocab_size=100, split=1)
    c2 = ModelConfig.qg_defaults(word_vocab_size=100, split=2)
    assert (c1.word_dim, c1.hidden_dim, c1.encoder_layers, c1.dropout_p) == (300, 350, 2, 0.1)
    assert (c2.hidden_dim, c2.dropout_p) == (512, 0.3)
    assert c1.input_dim == 301


# ---------------------------------------------------------------- embedding

def test_embed_table_single_token_has_full_feature_width():
    m = tiny_table_model(word_dim=400, field_dim=50, pos_dim=5, hidden=8)
    seq = table_seq(m, fields=[("name", ["bernard"])])
    assert m.embed_table_inputs(seq).data.shape == (1, 460)


def test_embed_table_identical_features_identical_rows():
    m = tiny_table_model()
    seq = table_seq(m, fields=[("name", ["keen"]), ("occupation", ["keen"])])
    seq.field_ids[1] = seq.field_ids[0]
    X = m.embed_table_inputs(seq).data
    assert np.array_equal(X[0], X[1])


def test_embed_table_matches_gather_concat_oracle():
    m = tiny_table_model()
    seq = table_seq(m)
    X = m.embed_table_inputs(seq).data
    p = {k: v.data for k, v in m.params.items()}
    for t in range(len(seq)):
        row = np.concatenate([p["emb/word"][seq.word_ids[t]],
                              p["emb/field"][seq.field_ids[t]],
                              p["emb/pplus"][seq.p_plus[t] - 1],
                              p["emb/pminus"][seq.p_minus[t] - 1]])
        assert np.array_equal(X[t], row)


def test_embed_qg_shape_and_bits():
    m = tiny_qg_model(word_dim=300)
    seq = qg_seq(m, tokens=["a"] * 7, span=(2, 4))
    X = m.embed_qg_inputs(seq).data
    assert X.shape == (7, 301)
    assert np.array_equal(X[:, -1], [0, 0, 1, 1, 1, 0, 0])


def test_embed_qg_all_zero_bits():
    m = tiny_qg_model()
    seq = qg_seq(m, span=(0, 0))
    seq.answer_bits = [0] * len(seq)
    assert (m.embed_qg_inputs(seq).data[:, -1] == 0).all()


def test_embed_qg_bit_flip_is_local():
    m = tiny_qg_model()
    seq = qg_seq(m, span=(1, 1))
    X0 = m.embed_qg_inputs(seq).data.copy()
    seq.answer_bits[1] = 0
    X1 = m.embed_qg_inputs(seq).data
    diff = X0 != X1
    assert diff[1, -1] and diff.sum() == 1


def test_embed_rejects_wrong_sequence_type():
    m = tiny_table_model()
    with pytest.raises(TypeError):
        m.embed_inputs(qg_seq(tiny_qg_model()))


# ---------------------------------------------------------------- encoder

def test_bilstm_single_token_shapes():
    m = tiny_qg_model(hidden=8, layers=1)
    H, h_fwd, h_bwd = m.bilstm_encode(T.tensor(np.random.default_rng(0).normal(size=(1, 7))))
    assert H.data.shape == (1, 16)
    assert h_fwd.data.shape == (1, 8) and h_bwd.data.shape == (1, 8)


def test_bilstm_empty_input_is_error():
    m = tiny_qg_model(layers=1)
    with pytest.raises(ValueError, match="empty"):
        m.bilstm_encode(T.tensor(np.zeros((0, 7))))


def test_bilstm_reversal_swaps_direction_halves():
    m = tiny_qg_model(hidden=5, layers=1)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(4, 7))
    # reversing the input swaps the roles of the two directional stacks
    m.params["enc/l0/bwd/W"].data[:] = m.params["enc/l0/fwd/W"].data
    m.params["enc/l0/bwd/b"].data[:] = m.params["enc/l0/fwd/b"].data
    H, _, _ = m.bilstm_encode(T.tensor(X))
    H_rev, _, _ = m.bilstm_encode(T.tensor(X[::-1]))
    h = 5
    for t in range(4):
        swapped = np.concatenate([H_rev.data[3 - t, h:], H_rev.data[3 - t, :h]])
        assert np.allclose(H.data[t], swapped, atol=1e-12)


def test_bilstm_matches_per_gate_recurrence_oracle():
    m = tiny_qg_model(hidden=4, layers=1)
    rng = np.random.default_rng(2)
    X = rng.normal(size=(3, 7))
    H, h_fwd, h_bwd = m.bilstm_encode(T.tensor(X))

    def sigmoid(z):
        return 1.0 / (1.0 + np.exp(-z))

    def run(order, W, b):
        h, c, hs = np.zeros(4), np.zeros(4), {}
        for t in order:
            z = np.concatenate([X[t], h]) @ W + b
            i, f, g, o = sigmoid(z[0:4]), sigmoid(z[4:8]), np.tanh(z[8:12]), sigmoid(z[12:16])
            c = f * c + i * g
            h = o * np.tanh(c)
            hs[t] = h.copy()
        return hs, h

    fw, f_last = run(range(3), m.params["enc/l0/fwd/W"].data, m.params["enc/l0/fwd/b"].data)
    bw, b_last = run(range(2, -1, -1), m.params["enc/l0/bwd/W"].data, m.params["enc/l0/bwd/b"].data)
    for t in range(3):
        assert np.abs(H.data[t] - np.concatenate([fw[t], bw[t]])).max() < 1e-10
    assert np.abs(h_fwd.data[0] - f_last).max() < 1e-10
    assert np.abs(h_bwd.data[0] - b_last).max() < 1e-10


def test_two_layer_encoder_runs_and_differs_from_one_layer():
    m2 = tiny_qg_model(hidden=4, layers=2)
    seq = qg_seq(m2)
    enc = m2.encode(seq)
    assert enc.H.data.shape == (len(seq), 8)


# ---------------------------------------------------------------- attention

def test_attention_single_position():
    m = tiny_table_model()
    enc = m.encode(table_seq(m, fields=[("name", ["bernard"])]))
    alpha, ctx = m.attention(enc.init_state, enc)
    assert np.array_equal(alpha.data, [1.0])
    assert np.array_equal(ctx.data[0], enc.H.data[0])


def test_attention_uniform_over_identical_rows():
    m = tiny_table_model()
    enc = m.encode(table_seq(m))
    enc.H.data[:] = enc.H.data[0]
    enc.att_keys.data[:] = enc.att_keys.data[0]
    alpha, _ = m.attention(enc.init_state, enc)
    assert np.allclose(alpha.data, 1.0 / len(alpha.data), atol=1e-12)


def test_attention_matches_direct_formula():
    m = tiny_table_model(hidden=6)
    enc = m.encode(table_seq(m, fields=[("name", ["bernard", "keen", "ada", "rees"])]))
    state = enc.init_state
    alpha, ctx = m.attention(state, enc)
    Wh, batt = m.params["att/Wh"].data, m.params["att/b"].data
    Ws, v = m.params["att/Ws"].data, m.params["att/v"].data
    scores = np.tanh(enc.H.data @ Wh + batt + state.h.data[0] @ Ws) @ v
    expect = _np_softmax(scores[:, 0])
    assert np.abs(alpha.data - expect).max() < 1e-12
    assert np.abs(ctx.data[0] - expect @ enc.H.data).max() < 1e-12


def test_attention_mass_on_padding_is_exactly_zero():
    m = tiny_table_model()
    seq = table_seq(m)
    enc = m.encode(seq, pad_to=len(seq) + 3)
    alpha, _ = m.attention(enc.init_state, enc)
    assert (alpha.data[len(seq):] == 0.0).all()
    assert abs(alpha.data.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------- decoder

def test_decoder_step_deterministic_in_eval_mode():
    m = tiny_table_model()
    m.eval()
    enc = m.encode(table_seq(m))
    out1 = m.decoder_step(enc.init_state, D.SOS_ID, enc)
    out2 = m.decoder_step(enc.init_state, D.SOS_ID, enc)
    assert np.array_equal(out1[1].data, out2[1].data)
    assert np.array_equal(out1[3].data, out2[3].data)


def test_decoder_step_logit_width_is_vocab_size():
    m = tiny_table_model()
    enc = m.encode(table_seq(m))
    _, logits, alpha, p_gen = m.decoder_step(enc.init_state, D.SOS_ID, enc)
    assert logits.data.shape == (len(m.word_vocab),)
    assert alpha.data.shape == (enc.H.data.shape[0],)
    assert 0.0 < p_gen.item() < 1.0


def test_decoder_step_invalid_token_is_index_error():
    m = tiny_table_model()
    enc = m.encode(table_seq(m))
    with pytest.raises(IndexError):
        m.decoder_step(enc.init_state, -2, enc)


def test_decoder_step_matches_composed_oracle():
    m = tiny_table_model(hidden=5)
    enc = m.encode(table_seq(m))
    y = m.word_vocab.id("bernard")
    state2, logits, alpha, p_gen = m.decoder_step(enc.init_state, y, enc)

    p = {k: v.data for k, v in m.params.items()}
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    e_prev = p["emb/word"][y]
    x = np.concatenate([e_prev, enc.init_state.context.data[0]])
    z = np.concatenate([x, enc.init_state.h.data[0]]) @ p["dec/lstm/W"] + p["dec/lstm/b"]
    h = 5
    i, f, g, o = sig(z[:h]), sig(z[h:2*h]), np.tanh(z[2*h:3*h]), sig(z[3*h:])
    c2 = f * enc.init_state.c.data[0] + i * g
    h2 = o * np.tanh(c2)
    scores = np.tanh(enc.H.data @ p["att/Wh"] + p["att/b"] + h2 @ p["att/Ws"]) @ p["att/v"]
    a = _np_softmax(scores[:, 0])
    ctx = a @ enc.H.data
    want_logits = np.concatenate([h2, ctx]) @ p["out/W"] + p["out/b"]
    want_gate = sig(np.concatenate([ctx, h2, e_prev]) @ p["gate/W"] + p["gate/b"])

    assert np.abs(state2.h.data[0] - h2).max() < 1e-12
    assert np.abs(alpha.data - a).max() < 1e-12
    assert np.abs(logits.data - want_logits).max() < 1e-12
    assert abs(p_gen.item() - want_gate[0]) < 1e-12


# ------------------------------------------------------ output distribution

def _fake_enc(m, tokens):
    ext, oov = D.extend_ids(tokens, m.word_vocab)
    enc = m.encode(table_seq(m))
    enc.tokens = tokens
    enc.src_ext_ids = ext
    enc.oov_tokens = oov
    enc.scatter_ids = np.asarray(ext, dtype=np.intp)
    return enc


def test_output_distribution_gate_fully_open_generation():
    m = tiny_table_model()
    enc = m.encode(table_seq(m))
    V = len(m.word_vocab)
    logits = T.tensor(np.random.default_rng(0).normal(size=V))
    alpha = T.tensor(np.full(enc.H.data.shape[0], 1.0 / enc.H.data.shape[0]))
    P = output_distribution(logits, alpha, T.tensor([[1.0]]), enc).data
    assert np.allclose(P[:V], _np_softmax(logits.data), atol=1e-12)
    assert (P[V:] == 0.0).all()


def test_output_distribution_gate_closed_single_oov_source():
    m = tiny_table_model()
    enc = _fake_enc(m, ["zzz-oov"])
    assert enc.oov_tokens == ["zzz-oov"]
    V = len(m.word_vocab)
    logits = T.tensor(np.zeros(V))
    alpha = T.tensor(np.array([1.0]))
    P = output_distribution(logits, alpha, T.tensor([[0.0]]), enc).data
    assert P[V] == 1.0
    assert abs(P.sum() - 1.0) < 1e-12


def test_output_distribution_repeated_token_mass_adds():
    m = tiny_table_model()
    tokens = ["bernard", "zzz", "bernard", "qqq", "zzz"]
    enc = _fake_enc(m, tokens)
    V = len(m.word_vocab)
    rng = np.random.default_rng(4)
    logits = rng.normal(size=V)
    raw = rng.random(len(tokens))
    alpha = raw / raw.sum()
    p_gen = 0.37
    P = output_distribution(T.tensor(logits), T.tensor(alpha),
                            T.tensor([[p_gen]]), enc).data
    # brute-force scatter oracle
    expect = np.zeros(V + 2)
    expect[:V] = p_gen * _np_softmax(logits)
    for pos, ext in enumerate(enc.src_ext_ids):
        expect[ext] += (1 - p_gen) * alpha[pos]
    assert np.abs(P - expect).max() < 1e-12
    b = m.word_vocab.id("bernard")
    assert abs(P[b] - (p_gen * _np_softmax(logits)[b] + (1 - p_gen) * (alpha[0] + alpha[2]))) < 1e-12


def test_output_distribution_is_probability_for_random_triples():
    m = tiny_table_model()
    enc = _fake_enc(m, ["bernard", "zzz", "keen"])
    V = len(m.word_vocab)
    rng = np.random.default_rng(9)
    for trial in range(200):
        logits = rng.normal(size=V) * 10
        raw = rng.random(3)
        alpha = raw / raw.sum()
        pg = rng.choice([0.0, 1.0, rng.random()])
        P = output_distribution(T.tensor(logits), T.tensor(alpha),
                                T.tensor([[pg]]), enc).data
        assert (P >= 0).all()
        assert abs(P.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------- unified

def test_single_code_path_for_both_tasks():
    mt, mq = tiny_table_model(), tiny_qg_model()
    assert type(mt) is type(mq)
    # everything past embedding is literally the same function object
    assert type(mt).encode is type(mq).encode
    assert type(mt).decoder_step is type(mq).decoder_step
    assert type(mt).attention is type(mq).attention


# ---------------------------------------------------------------- gradients

def _step_loss(model, seq, target_token):
    def f(params):
        enc = model.encode(seq)
        state, logits, alpha, p_gen = model.decoder_step(enc.init_state, D.SOS_ID, enc)
        P = output_distribution(logits, alpha, p_gen, enc)
        return T.scale(T.log(T.pick(P, model.word_vocab.id(target_token))), -1.0)
    return f


@pytest.mark.parametrize("build,seqmaker", [
    (tiny_table_model, table_seq),
    (lambda: tiny_qg_model(layers=2), qg_seq),
])
def test_full_step_loss_passes_finite_difference_check(build, seqmaker):
    model = build()
    model.eval()
    seq = seqmaker(model)
    f = _step_loss(model, seq, "keen")
    err = T.finite_difference_check(f, model.trainable(), sample=150,
                                    rng=np.random.default_rng(0))
    assert err < 1e-4
