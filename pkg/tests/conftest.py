import numpy as np
import pytest

from seqgen import data as D
from seqgen.model import ModelConfig, Seq2SeqModel

WORDS = ("bernard keen ada lovelace mina rees british turkish canadian "
         "chemist pianist sailor is was a the and in of to what who where "
         "how does did likes plays red blue green ? . ,").split()
FIELDS = ["name", "occupation", "nationality", "known_for"]


def tiny_table_model(seed=0, hidden=8, word_dim=6, field_dim=3, pos_dim=2,
                     words=WORDS, max_vocab=None):
    wv = D.build_vocab(words, max_size=max_vocab or len(set(words)))
    fv = D.build_vocab(FIELDS, max_size=len(FIELDS))
    cfg = ModelConfig(task="table2text", word_dim=word_dim, hidden_dim=hidden,
                      word_vocab_size=len(wv), field_dim=field_dim,
                      pos_dim=pos_dim, field_vocab_size=len(fv),
                      encoder_layers=1)
    return Seq2SeqModel(cfg, wv, fv, seed=seed)


def tiny_qg_model(seed=0, hidden=8, word_dim=6, layers=2, words=WORDS,
                  max_vocab=None, dropout=0.0):
    wv = D.build_vocab(words, max_size=max_vocab or len(set(words)))
    cfg = ModelConfig(task="qg", word_dim=word_dim, hidden_dim=hidden,
                      word_vocab_size=len(wv), encoder_layers=layers,
                      dropout_p=dropout)
    return Seq2SeqModel(cfg, wv, seed=seed)


def table_seq(model, fields=None):
    rec = D.InfoboxRecord(fields or [("name", ["bernard", "keen"]),
                                     ("occupation", ["chemist"])], ["r"])
    return D.encode_table_source(rec, model.word_vocab, model.field_vocab)


def qg_seq(model, tokens=None, span=(1, 2)):
    tokens = tokens or "bernard likes red and blue .".split()
    ex = D.QGExample(tokens, span, ["q"])
    return D.encode_qg_source(ex, model.word_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
