"""Corpus parsing, BIO span codecs, vocabularies, external embeddings.

Column corpus format (UTF-8): three whitespace-separated columns per line —
token, predicate bit (0/1), tag — with blank lines separating sentences and
comments on lines starting with '#'.  The serializer writes a ``# id: <name>``
comment before each block so that parse -> serialize -> parse is the identity;
a block without one gets the id ``<filestem>-<block index>``.
"""

from __future__ import annotations

import os
import sys
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CoverageError, DomainError, FormatError, ParseError

UNK = "<unk>"
PAD = "<pad>"
UNK_ID = 0
PAD_ID = 1

SCHEMES = ("bio-span", "per-token-role")
NULL_ROLE = "_"


@dataclass(frozen=True)
class Instance:
    """One sentence paired with one predicate position and per-token gold labels."""

    sentence_id: str
    tokens: tuple[str, ...]
    predicate_index: int
    predicate_bits: tuple[int, ...]
    gold_labels: tuple[str, ...]
    tag_scheme: str = "bio-span"

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Vocabulary:
    """Word table with reserved UNK/PAD ids plus the tag label inventory.

    Tag ordering is the training file's first-occurrence order and is
    persisted verbatim by the vocab file.
    """

    word_to_id: dict[str, int]
    id_to_word: list[str]
    tag_labels: list[str]
    min_frequency: int = 2
    scheme: str = "bio-span"
    tag_to_id: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.tag_to_id = {t: i for i, t in enumerate(self.tag_labels)}

    @property
    def n_words(self) -> int:
        return len(self.id_to_word)

    @property
    def n_tags(self) -> int:
        return len(self.tag_labels)

    def word_ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.word_to_id.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def tag_ids(self, labels: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.tag_to_id[t] for t in labels], dtype=np.int64)
        except KeyError as exc:
            raise DomainError(f"unknown tag label {exc.args[0]!r}") from None

    def tag_strings(self, ids: Sequence[int]) -> list[str]:
        return [self.tag_labels[i] for i in ids]


def parse_conll_file(
    path: str, scheme: str = "bio-span", allow_missing_predicate: bool = False
) -> list[Instance]:
    """Parse a column corpus into instances, one per blank-line block.

    A block must mark exactly one predicate bit.  Zero-predicate blocks are
    accepted only with ``allow_missing_predicate`` (a warning is printed and
    ``predicate_index`` is set to -1); multiple bits always fail.
    """
    if scheme not in SCHEMES:
        raise DomainError(f"unknown tag scheme {scheme!r}")
    stem = os.path.splitext(os.path.basename(path))[0]
    instances: list[Instance] = []
    tokens: list[str] = []
    bits: list[int] = []
    labels: list[str] = []
    pending_id: str | None = None
    block_start_line = 0

    def flush(line_no: int) -> None:
        nonlocal tokens, bits, labels, pending_id
        if not tokens:
            pending_id = None
            return
        ones = [i for i, b in enumerate(bits) if b == 1]
        if len(ones) > 1:
            raise ParseError(
                f"{path}:{block_start_line}: block marks {len(ones)} predicate bits, expected 1"
            )
        if not ones:
            if not allow_missing_predicate:
                raise ParseError(
                    f"{path}:{block_start_line}: block marks no predicate bit"
                )
            print(
                f"warning: {path}:{block_start_line}: block has no predicate bit",
                file=sys.stderr,
            )
            pred = -1
        else:
            pred = ones[0]
        sid = pending_id if pending_id is not None else f"{stem}-{len(instances)}"
        instances.append(
            Instance(
                sentence_id=sid,
                tokens=tuple(tokens),
                predicate_index=pred,
                predicate_bits=tuple(bits),
                gold_labels=tuple(labels),
                tag_scheme=scheme,
            )
        )
        tokens, bits, labels = [], [], []
        pending_id = None

    with open(path, "r", encoding="utf-8") as fh:
        line_no = 0
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("id:"):
                    pending_id = body[3:].strip()
                continue
            if not line:
                flush(line_no)
                continue
            cols = line.split()
            if len(cols) != 3:
                raise ParseError(f"{path}:{line_no}: expected 3 columns, got {len(cols)}")
            if not tokens:
                block_start_line = line_no
            tok, bit, tag = cols
            if bit not in ("0", "1"):
                raise ParseError(f"{path}:{line_no}: predicate bit must be 0 or 1, got {bit!r}")
            tokens.append(tok)
            bits.append(int(bit))
            labels.append(tag)
        flush(line_no + 1)
    return instances


def write_conll_file(path: str, instances: Iterable[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(f"# id: {inst.sentence_id}\n")
            for tok, bit, tag in zip(inst.tokens, inst.predicate_bits, inst.gold_labels):
                fh.write(f"{tok} {bit} {tag}\n")
            fh.write("\n")


def format_predictions(instance: Instance, predicted: Sequence[str]) -> str:
    """One output block: the instance columns with the tag column replaced."""
    lines = [f"# id: {instance.sentence_id}"]
    for tok, bit, tag in zip(instance.tokens, instance.predicate_bits, predicted):
        lines.append(f"{tok} {bit} {tag}")
    lines.append("")
    return "\n".join(lines) + "\n"


def bio_decode_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Decode BIO labels to a set of (start, end, role) with inclusive ends.

    Lenient rule: an I-x not preceded by B-x or I-x of the same role starts
    a new span of role x, so every sequence is decodable.
    """
    spans: set[tuple[int, int, str]] = set()
    start = None
    role = None
    for i, tag in enumerate(tags):
        if tag == "O" or tag == NULL_ROLE:
            if start is not None:
                spans.add((start, i - 1, role))
                start, role = None, None
            continue
        if "-" not in tag:
            raise DomainError(f"bio_decode_spans: malformed tag {tag!r} at position {i}")
        marker, r = tag.split("-", 1)
        if marker == "B" or (marker == "I" and r != role):
            if start is not None:
                spans.add((start, i - 1, role))
            start, role = i, r
        elif marker == "I":
            continue
        else:
            raise DomainError(f"bio_decode_spans: malformed tag {tag!r} at position {i}")
    if start is not None:
        spans.add((start, len(tags) - 1, role))
    return spans


def bio_encode_spans(spans: Iterable[tuple[int, int, str]], length: int) -> list[str]:
    """Inverse of ``bio_decode_spans`` for non-overlapping spans."""
    tags = ["O"] * length
    for start, end, role in sorted(spans):
        if start < 0 or end >= length or start > end:
            raise DomainError(f"bio_encode_spans: span ({start},{end}) outside [0,{length})")
        for i in range(start, end + 1):
            if tags[i] != "O":
                raise DomainError(f"bio_encode_spans: overlapping span at position {i}")
            tags[i] = ("B-" if i == start else "I-") + role
    return tags


def build_vocab(
    instances: Sequence[Instance], min_frequency: int = 2, scheme: str = "bio-span"
) -> Vocabulary:
    """Count-thresholded, case-preserving word table plus ordered tag labels."""
    if min_frequency < 1:
        raise DomainError(f"build_vocab: min_frequency must be >= 1, got {min_frequency}")
    counts: Counter[str] = Counter()
    tag_labels: list[str] = []
    seen_tags: set[str] = set()
    for inst in instances:
        counts.update(inst.tokens)
        for tag in inst.gold_labels:
            if tag not in seen_tags:
                seen_tags.add(tag)
                tag_labels.append(tag)
    id_to_word = [UNK, PAD]
    word_to_id = {UNK: UNK_ID, PAD: PAD_ID}
    for inst in instances:
        for tok in inst.tokens:
            if counts[tok] >= min_frequency and tok not in word_to_id:
                word_to_id[tok] = len(id_to_word)
                id_to_word.append(tok)
    return Vocabulary(
        word_to_id=word_to_id,
        id_to_word=id_to_word,
        tag_labels=tag_labels,
        min_frequency=min_frequency,
        scheme=scheme,
    )


def save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# pnma vocabulary v1\n")
        fh.write(f"min_frequency\t{vocab.min_frequency}\n")
        fh.write(f"scheme\t{vocab.scheme}\n")
        fh.write(f"words\t{vocab.n_words}\n")
        for word in vocab.id_to_word:
            fh.write(f"{word}\n")
        fh.write(f"tags\t{vocab.n_tags}\n")
        for tag in vocab.tag_labels:
            fh.write(f"{tag}\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "# pnma vocabulary v1":
        raise FormatError(f"{path}: not a pnma vocabulary file")
    try:
        min_frequency = int(lines[1].split("\t")[1])
        scheme = lines[2].split("\t")[1]
        n_words = int(lines[3].split("\t")[1])
        words = lines[4 : 4 + n_words]
        tag_line = lines[4 + n_words]
        n_tags = int(tag_line.split("\t")[1])
        tags = lines[5 + n_words : 5 + n_words + n_tags]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: truncated or malformed vocabulary file") from exc
    if len(words) != n_words or len(tags) != n_tags:
        raise FormatError(f"{path}: truncated vocabulary file")
    if words[:2] != [UNK, PAD]:
        raise FormatError(f"{path}: reserved ids 0/1 must be {UNK}/{PAD}")
    return Vocabulary(
        word_to_id={w: i for i, w in enumerate(words)},
        id_to_word=list(words),
        tag_labels=list(tags),
        min_frequency=min_frequency,
        scheme=scheme,
    )


@dataclass
class ExternalEmbeddings:
    """Precomputed per-token vectors keyed by (sentence_id, token_index)."""

    dim: int
    by_sentence: dict[str, np.ndarray]

    def vectors(self, sentence_id: str) -> np.ndarray:
        try:
            return self.by_sentence[sentence_id]
        except KeyError:
            raise CoverageError(f"no external embeddings for sentence {sentence_id!r}") from None


def load_external_embeddings(path: str, instances: Sequence[Instance]) -> ExternalEmbeddings:
    """Read a plain-text embedding file and check it covers every token.

    Row format: sentence_id, token_index, then the vector values, all
    whitespace-separated.  Every row must share one dimension; every token of
    every instance must be covered.
    """
    table: dict[tuple[str, int], np.ndarray] = {}
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = line.split()
            if len(cols) < 3:
                raise FormatError(f"{path}:{line_no}: expected sentence_id, token_index, values")
            sid, tix = cols[0], cols[1]
            try:
                tix = int(tix)
            except ValueError:
                raise FormatError(f"{path}:{line_no}: bad token index {cols[1]!r}") from None
            vec = np.array([float(v) for v in cols[2:]], dtype=np.float32)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise FormatError(
                    f"{path}:{line_no}: dimension {vec.shape[0]} != {dim} of earlier rows"
                )
            table[(sid, tix)] = vec
    if dim is None:
        raise FormatError(f"{path}: no embedding rows")
    by_sentence: dict[str, np.ndarray] = {}
    for inst in instances:
        rows = []
        for i in range(len(inst)):
            key = (inst.sentence_id, i)
            if key not in table:
                raise CoverageError(
                    f"{path}: missing embedding for (sentence {inst.sentence_id!r}, token {i})"
                )
            rows.append(table[key])
        by_sentence[inst.sentence_id] = np.stack(rows)
    return ExternalEmbeddings(dim=dim, by_sentence=by_sentence)
