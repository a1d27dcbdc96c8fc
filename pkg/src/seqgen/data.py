"""Vocabularies, dataset ingestion, and feature-annotated source sequences.

Two input flavors share one downstream pipeline:

* infobox tables -- every value token carries its field name and its 1-based
  position counted from the field start (p+) and from the field end (p-),
  both clipped at ``MAX_POS``;
* passages with a marked answer span -- every token carries a single 0/1 bit
  saying whether it lies inside the answer.

On-disk formats (see README for full examples):

* ``<prefix>.box``   one record per line, space-separated ``field_k:token``
  items, k = 1-based position of the token within its field;
* ``<prefix>.sent``  one sentence per line; ``<prefix>.nb`` gives the number
  of consecutive ``.sent`` lines belonging to each record, the first of which
  is the reference description;
* question data uses the public hierarchical JSON schema
  (data -> paragraphs -> qas -> answers with ``answer_start`` char offsets);
* pretrained embeddings: ``token v1 ... vdim`` per line, UTF-8.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, SOS, EOS)
PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3

MAX_POS = 30


class ParseError(ValueError):
    """Malformed record or file; message carries location information."""


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    toks = text.split()
    return [t.lower() for t in toks] if lowercase else toks


class Vocabulary:
    """Frequency-ranked token table with four reserved ids (0..3).

    Built from a corpus stream: the ``max_size`` most frequent tokens are
    kept, ties broken lexicographically. Lookup of an unseen token returns
    the UNK id.
    """

    def __init__(self, tokens: list[str], max_size: int):
        if max_size < 1:
            raise ValueError(f"max_size must be >= 1, got {max_size}")
        self.max_size = max_size
        self._id2tok = list(RESERVED) + list(tokens)
        if len(set(self._id2tok)) != len(self._id2tok):
            raise ValueError("duplicate tokens in vocabulary")
        if len(tokens) > max_size:
            raise ValueError(f"{len(tokens)} tokens exceed max_size {max_size}")
        self._tok2id = {t: i for i, t in enumerate(self._id2tok)}

    def __len__(self):
        return len(self._id2tok)

    def __contains__(self, token):
        return token in self._tok2id

    def id(self, token: str) -> int:
        return self._tok2id.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self._id2tok[i]

    @property
    def tokens(self) -> list[str]:
        return list(self._id2tok)

    def to_dict(self) -> dict:
        return {"tokens": self._id2tok[len(RESERVED):], "max_size": self.max_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["max_size"])


def build_vocab(token_stream, max_size: int) -> Vocabulary:
    """Vocabulary of the max_size most frequent tokens (ties lexicographic)."""
    counts = Counter(token_stream)
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[:max_size]], max_size)


# --------------------------------------------------------------------------
# Infobox records
# --------------------------------------------------------------------------

@dataclass
class InfoboxRecord:
    """Ordered (field, value tokens) pairs plus the reference description."""

    fields: list[tuple[str, list[str]]]
    reference: list[str]

    def __post_init__(self):
        for name, toks in self.fields:
            if not name:
                raise ValueError("empty field name")
            if not toks:
                raise ValueError(f"field {name!r} has no value tokens")


_BOX_ITEM = re.compile(r"^(?P<field>.+)_(?P<k>[1-9][0-9]*)$")


def parse_box_line(line: str, lineno: int = 1) -> list[tuple[str, list[str]]]:
    """Parse one ``field_k:token`` line into ordered (field, tokens) groups."""
    groups: "OrderedDict[str, list[str]]" = OrderedDict()
    col = 1
    for item in line.strip().split(" "):
        if not item:
            col += 1
            continue
        head, sep, token = item.partition(":")
        if not sep:
            raise ParseError(f"line {lineno}, col {col}: missing ':' in {item!r}")
        if not token:
            raise ParseError(f"line {lineno}, col {col}: empty value in {item!r}")
        m = _BOX_ITEM.match(head)
        if not m:
            raise ParseError(
                f"line {lineno}, col {col}: field {head!r} lacks a _k position suffix")
        name, k = m.group("field"), int(m.group("k"))
        bucket = groups.setdefault(name, [])
        if k != len(bucket) + 1:
            raise ParseError(
                f"line {lineno}, col {col}: field {name!r} position {k} out of order "
                f"(expected {len(bucket) + 1})")
        bucket.append(token)
        col += len(item) + 1
    return list(groups.items())


def parse_wikibio_record(raw: str) -> InfoboxRecord:
    """Parse a standalone two-line record: box line, then reference sentence."""
    lines = raw.strip("\n").split("\n")
    if len(lines) != 2:
        raise ParseError(f"record must be 2 lines (box, reference), got {len(lines)}")
    fields = parse_box_line(lines[0])
    if not fields:
        raise ParseError("line 1: record has no fields")
    return InfoboxRecord(fields=fields, reference=lines[1].split())


def serialize_wikibio_record(rec: InfoboxRecord) -> str:
    items = [f"{name}_{k}:{tok}"
             for name, toks in rec.fields for k, tok in enumerate(toks, 1)]
    return " ".join(items) + "\n" + " ".join(rec.reference)


def load_wikibio(prefix: str, lowercase: bool = True) -> list[InfoboxRecord]:
    """Load aligned ``<prefix>.box`` / ``.sent`` / ``.nb`` files."""
    with open(prefix + ".box", encoding="utf-8") as f:
        box_lines = f.read().splitlines()
    with open(prefix + ".sent", encoding="utf-8") as f:
        sents = f.read().splitlines()
    with open(prefix + ".nb", encoding="utf-8") as f:
        nbs = [int(x) for x in f.read().split()]
    if len(nbs) != len(box_lines):
        raise ParseError(f"{prefix}.nb has {len(nbs)} entries for {len(box_lines)} records")

    records, at = [], 0
    for i, line in enumerate(box_lines):
        fields = parse_box_line(line, lineno=i + 1)
        if at + nbs[i] > len(sents) or nbs[i] < 1:
            raise ParseError(f"{prefix}.sent exhausted at record {i + 1}")
        ref = tokenize(sents[at], lowercase)
        at += nbs[i]
        if lowercase:
            fields = [(n.lower(), [t.lower() for t in toks]) for n, toks in fields]
        records.append(InfoboxRecord(fields=fields, reference=ref))
    return records


# --------------------------------------------------------------------------
# Question-generation records
# --------------------------------------------------------------------------

@dataclass
class QGExample:
    """(passage, answer span, question) triple; span is inclusive token indices."""

    passage_tokens: list[str]
    answer_span: tuple[int, int]
    question_tokens: list[str]

    def __post_init__(self):
        s, e = self.answer_span
        if not (0 <= s <= e < len(self.passage_tokens)):
            raise ValueError(
                f"answer span ({s}, {e}) out of range for passage of "
                f"{len(self.passage_tokens)} tokens")


def _token_char_spans(text: str) -> list[tuple[int, int]]:
    return [(m.start(), m.end()) for m in re.finditer(r"\S+", text)]


def parse_squad_record(article: dict, lowercase: bool = True) -> tuple[list[QGExample], int]:
    """Expand one article dict into QGExamples; returns (examples, n_skipped).

    Character offsets are converted to the minimal covering token span.
    Offsets that fall inside a token are realigned (warning logged); offsets
    beyond the passage cause the answer to be skipped and counted.
    """
    examples, skipped = [], 0
    for para in article["paragraphs"]:
        context = para["context"]
        spans = _token_char_spans(context)
        passage = [context[a:b] for a, b in spans]
        if lowercase:
            passage = [t.lower() for t in passage]
        for qa in para["qas"]:
            question = tokenize(qa["question"], lowercase)
            for ans in qa["answers"]:
                start_char = ans["answer_start"]
                end_char = start_char + len(ans["text"])
                if start_char < 0 or start_char >= len(context) or not spans:
                    skipped += 1
                    continue
                covering = [i for i, (a, b) in enumerate(spans)
                            if b > start_char and a < end_char]
                if not covering:
                    skipped += 1
                    continue
                s, e = covering[0], covering[-1]
                if spans[s][0] != start_char or spans[e][1] != end_char:
                    log.warning("answer %r realigned to covering tokens %d..%d",
                                ans["text"], s, e)
                examples.append(QGExample(passage_tokens=passage,
                                           answer_span=(s, e),
                                           question_tokens=question))
    return examples, skipped


def load_squad(path: str, lowercase: bool = True) -> tuple[list[QGExample], int]:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    examples, skipped = [], 0
    for article in payload["data"]:
        ex, sk = parse_squad_record(article, lowercase)
        examples.extend(ex)
        skipped += sk
    return examples, skipped


# --------------------------------------------------------------------------
# Source sequences
# --------------------------------------------------------------------------

@dataclass
class TableSourceSequence:
    """Per-token (word, field, p+, p-) features in field order."""

    tokens: list[str]
    word_ids: list[int]
    field_ids: list[int]
    p_plus: list[int]
    p_minus: list[int]

    def __len__(self):
        return len(self.tokens)


@dataclass
class QGSourceSequence:
    """Per-token (word, answer-bit) features."""

    tokens: list[str]
    word_ids: list[int]
    answer_bits: list[int]

    def __len__(self):
        return len(self.tokens)


def encode_table_source(rec: InfoboxRecord, wv: Vocabulary, fv: Vocabulary,
                        max_pos: int = MAX_POS) -> TableSourceSequence:
    """Flatten a record to per-token features; positions 1-based, clipped."""
    tokens, word_ids, field_ids, p_plus, p_minus = [], [], [], [], []
    for name, toks in rec.fields:
        fid = fv.id(name)
        n = len(toks)
        for j, tok in enumerate(toks):
            tokens.append(tok)
            word_ids.append(wv.id(tok))
            field_ids.append(fid)
            p_plus.append(min(j + 1, max_pos))
            p_minus.append(min(n - j, max_pos))
    return TableSourceSequence(tokens, word_ids, field_ids, p_plus, p_minus)


def encode_qg_source(ex: QGExample, wv: Vocabulary) -> QGSourceSequence:
    s, e = ex.answer_span
    if not (0 <= s <= e < len(ex.passage_tokens)):
        raise ValueError(f"answer span ({s}, {e}) out of range")
    bits = [1 if s <= i <= e else 0 for i in range(len(ex.passage_tokens))]
    return QGSourceSequence(tokens=list(ex.passage_tokens),
                            word_ids=[wv.id(t) for t in ex.passage_tokens],
                            answer_bits=bits)


def extend_ids(tokens: list[str], wv: Vocabulary) -> tuple[list[int], list[str]]:
    """Extended-vocabulary ids for source tokens.

    In-vocabulary tokens keep their id; each distinct out-of-vocabulary token
    gets a temporary id len(wv) + k in order of first appearance. Returns the
    per-position ids and the ordered list of out-of-vocabulary tokens.
    """
    ext_ids, oov = [], []
    oov_index: dict[str, int] = {}
    for tok in tokens:
        i = wv.id(tok)
        if i == UNK_ID and tok != UNK:
            if tok not in oov_index:
                oov_index[tok] = len(oov)
                oov.append(tok)
            i = len(wv) + oov_index[tok]
        ext_ids.append(i)
    return ext_ids, oov


def target_ids(target_tokens: list[str], wv: Vocabulary,
               oov_tokens: list[str]) -> tuple[list[int], int]:
    """Extended ids for target tokens; source OOVs resolve to their copy id.

    Tokens absent from both the vocabulary and the source fall back to UNK;
    the count of such fallbacks is returned alongside.
    """
    lookup = {t: len(wv) + k for k, t in enumerate(oov_tokens)}
    ids, fallbacks = [], 0
    for tok in target_tokens:
        i = wv.id(tok)
        if i == UNK_ID and tok != UNK:
            if tok in lookup:
                i = lookup[tok]
            else:
                fallbacks += 1
        ids.append(i)
    return ids, fallbacks


@dataclass
class Example:
    """One training pair: an encoded source and its target token sequence."""

    src: TableSourceSequence | QGSourceSequence
    target_tokens: list[str] = field(default_factory=list)


def prepare_table_examples(records: list[InfoboxRecord], wv: Vocabulary,
                           fv: Vocabulary, max_pos: int = MAX_POS) -> list[Example]:
    return [Example(encode_table_source(r, wv, fv, max_pos), list(r.reference))
            for r in records]


def prepare_qg_examples(examples: list[QGExample], wv: Vocabulary) -> list[Example]:
    return [Example(encode_qg_source(e, wv), list(e.question_tokens))
            for e in examples]


# --------------------------------------------------------------------------
# Pretrained embeddings
# --------------------------------------------------------------------------

def load_pretrained_embeddings(path: str, vocab: Vocabulary, dim: int,
                               seed: int = 0) -> T.Tensor:
    """(|V|, dim) matrix: file rows where available, uniform(-0.1, 0.1) else.

    The returned tensor is non-trainable (frozen) -- pretrained rows are kept
    fixed during training. Raises ParseError on a dimension mismatch.
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            tok, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise ParseError(
                    f"{path}: line {lineno}: expected {dim} values, got {len(vals)}")
            if tok in vocab:
                vectors[tok] = np.array([float(v) for v in vals])

    rng = np.random.default_rng(seed)
    mat = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    for tok, vec in vectors.items():
        mat[vocab.id(tok)] = vec
    out = T.Tensor(mat, requires_grad=False, name="emb/word")
    return out
