"""Evaluation metrics and diagnostics: span/token PRF, rank histograms,
confusion-matrix differences, disagreement scenarios, neighbor dumps.

All report writers emit tab-separated text with a header line; the data files
are the contract and any plot rendering is best-effort on top of them.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .crf import CrfParams
from .dataio import Instance, Vocabulary, bio_decode_spans
from .encoder import EncoderParams, encode_corpus
from .errors import CoverageError, DimensionError
from .inference import predict_base_corpus
from .memory import ActivationMemory, knn_entry_ids, knn_query


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    matched: int
    n_predicted: int
    n_gold: int
    scheme: str
    per_label: dict[str, tuple[int, int, int]] = field(default_factory=dict)


def _prf(matched: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    # 0/0 counts as 0 throughout
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, f


def span_prf(
    gold_spans: Sequence[set[tuple[int, int, str]]],
    pred_spans: Sequence[set[tuple[int, int, str]]],
) -> EvalReport:
    """Micro P/R/F1 over exact (start, end, role) matches."""
    if len(gold_spans) != len(pred_spans):
        raise DimensionError(f"span_prf: {len(gold_spans)} gold vs {len(pred_spans)} predicted")
    matched = n_pred = n_gold = 0
    per_label: dict[str, list[int]] = {}
    for g, p in zip(gold_spans, pred_spans):
        hit = g & p
        matched += len(hit)
        n_pred += len(p)
        n_gold += len(g)
        for _, _, role in hit:
            per_label.setdefault(role, [0, 0, 0])[0] += 1
        for _, _, role in p:
            per_label.setdefault(role, [0, 0, 0])[1] += 1
        for _, _, role in g:
            per_label.setdefault(role, [0, 0, 0])[2] += 1
    prec, rec, f1 = _prf(matched, n_pred, n_gold)
    return EvalReport(
        precision=prec,
        recall=rec,
        f1=f1,
        matched=matched,
        n_predicted=n_pred,
        n_gold=n_gold,
        scheme="bio-span",
        per_label={k: tuple(v) for k, v in sorted(per_label.items())},
    )


def token_accuracy(
    gold: Sequence[Sequence[str]],
    predicted: Sequence[Sequence[str]],
    null_label: str = "_",
) -> EvalReport:
    """P/R/F1 over non-null labels (dependency-style argument classification)."""
    if len(gold) != len(predicted):
        raise DimensionError(f"token_accuracy: {len(gold)} gold vs {len(predicted)} predicted")
    matched = n_pred = n_gold = 0
    per_label: dict[str, list[int]] = {}
    for g_seq, p_seq in zip(gold, predicted):
        if len(g_seq) != len(p_seq):
            raise DimensionError(
                f"token_accuracy: sequence lengths {len(g_seq)} vs {len(p_seq)}"
            )
        for g, p in zip(g_seq, p_seq):
            if p != null_label:
                n_pred += 1
                per_label.setdefault(p, [0, 0, 0])[1] += 1
            if g != null_label:
                n_gold += 1
                per_label.setdefault(g, [0, 0, 0])[2] += 1
            if g == p and g != null_label:
                matched += 1
                per_label.setdefault(g, [0, 0, 0])[0] += 1
    prec, rec, f1 = _prf(matched, n_pred, n_gold)
    return EvalReport(
        precision=prec,
        recall=rec,
        f1=f1,
        matched=matched,
        n_predicted=n_pred,
        n_gold=n_gold,
        scheme="per-token-role",
        per_label={k: tuple(v) for k, v in sorted(per_label.items())},
    )


def evaluate_labels(
    gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]], scheme: str
) -> EvalReport:
    """Scheme dispatch: span matching for bio-span, non-null token PRF otherwise."""
    if scheme == "bio-span":
        return span_prf(
            [bio_decode_spans(g) for g in gold],
            [bio_decode_spans(p) for p in predicted],
        )
    return token_accuracy(gold, predicted)


ABSENT = "absent"


@dataclass
class RankHistogram:
    """Rank of the first correct-label neighbor, split by base-model correctness."""

    k: int
    correct: Counter = field(default_factory=Counter)
    incorrect: Counter = field(default_factory=Counter)

    def normalized(self, which: str) -> list[tuple[str, float]]:
        counts = self.correct if which == "correct" else self.incorrect
        total = sum(counts.values())
        rows: list[tuple[str, float]] = []
        for rank in range(1, self.k + 1):
            rows.append((str(rank), counts.get(rank, 0) / total if total else 0.0))
        rows.append((ABSENT, counts.get(ABSENT, 0) / total if total else 0.0))
        return rows

    def median_rank(self, which: str) -> float:
        """Median rank with absent counted beyond K."""
        counts = self.correct if which == "correct" else self.incorrect
        values: list[float] = []
        for rank, c in counts.items():
            v = float(self.k + 1) if rank == ABSENT else float(rank)
            values.extend([v] * c)
        if not values:
            return math.nan
        return float(np.median(values))


def rank_distribution(
    encoder: EncoderParams,
    crf: CrfParams,
    vocab: Vocabulary,
    memory: ActivationMemory,
    instances: Sequence[Instance],
    k: int,
    exclude_self: bool = False,
    external=None,
    threads: int = 1,
) -> RankHistogram:
    """For each token, the rank of the first neighbor carrying its gold label.

    Tokens are split by whether the base model tagged them correctly; tokens
    with no correct-label neighbor within K land in the ``absent`` bucket.
    """
    hist = RankHistogram(k=k)
    preds = predict_base_corpus(instances, encoder, crf, vocab, external=external)
    encoded = encode_corpus(instances, encoder, vocab, external=external, threads=threads)
    for inst, pred in zip(instances, preds):
        gold_ids = vocab.tag_ids(inst.gold_labels)
        h = encoded[inst.sentence_id].astype(np.float32, copy=False)
        exclude = None
        if exclude_self:
            exclude = [[(inst.sentence_id, t)] for t in range(len(inst))]
        ids, _ = knn_entry_ids(h, memory, k, exclude=exclude, threads=threads)
        labels = memory.labels[ids]  # (n, k)
        for t in range(len(inst)):
            hits = np.nonzero(labels[t] == gold_ids[t])[0]
            key = int(hits[0]) + 1 if hits.size else ABSENT
            if int(pred[t]) == int(gold_ids[t]):
                hist.correct[key] += 1
            else:
                hist.incorrect[key] += 1
    return hist


def confusion_diff(
    gold: Sequence[Sequence[str]],
    preds_a: Sequence[Sequence[str]],
    preds_b: Sequence[Sequence[str]],
    top_n_labels: int = 10,
) -> tuple[np.ndarray, list[str]]:
    """confusion(preds_b) - confusion(preds_a) over the most frequent gold labels.

    Rows index gold labels, columns predicted labels, both restricted to the
    ``top_n_labels`` most frequent gold labels (descending frequency order).
    """
    freq: Counter[str] = Counter()
    for seq in gold:
        freq.update(seq)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    labels = [lab for lab, _ in ranked[:top_n_labels]]
    index = {lab: i for i, lab in enumerate(labels)}
    mat = np.zeros((len(labels), len(labels)), dtype=np.int64)

    def accumulate(preds, sign: int) -> None:
        for g_seq, p_seq in zip(gold, preds):
            if len(g_seq) != len(p_seq):
                raise DimensionError(
                    f"confusion_diff: sequence lengths {len(g_seq)} vs {len(p_seq)}"
                )
            for g, p in zip(g_seq, p_seq):
                gi = index.get(g)
                pi = index.get(p)
                if gi is not None and pi is not None:
                    mat[gi, pi] += sign

    accumulate(preds_b, +1)
    accumulate(preds_a, -1)
    return mat, labels


@dataclass
class DisagreementReport:
    """Scenario counts: 1 corrected, 2 both wrong, 3 both correct, 4 regressed."""

    scenario_counts: tuple[int, int, int, int]
    ratio: float  # scenario1 / scenario4, inf when nothing regressed
    freq_buckets: list[tuple[str, tuple[int, int, int, int]]]
    nbr_buckets: list[tuple[str, tuple[int, int, int, int]]]

    @property
    def total(self) -> int:
        return sum(self.scenario_counts)


def power_of_two_bucket(value: int) -> str:
    """0, 1, 2-3, 4-7, 8-15, ... (log-scale frequency buckets)."""
    if value <= 0:
        return "0"
    lo = 1 << (value.bit_length() - 1)
    hi = 2 * lo - 1
    return str(lo) if lo == hi else f"{lo}-{hi}"


def _scenario(base_ok: bool, pnma_ok: bool) -> int:
    if not base_ok and pnma_ok:
        return 0  # corrected
    if not base_ok and not pnma_ok:
        return 1  # both wrong
    if base_ok and pnma_ok:
        return 2  # both correct
    return 3  # regressed


def disagreement_report(
    instances: Sequence[Instance],
    gold: Sequence[Sequence[str]],
    base_preds: Sequence[Sequence[str]],
    pnma_preds: Sequence[Sequence[str]],
    predicate_freq: Mapping[str, int],
    neighborhood_counts: Sequence[np.ndarray] | None = None,
    nbr_bucket_width: int = 8,
) -> DisagreementReport:
    """Token-level base-vs-adapted outcome analysis.

    Buckets by training-corpus predicate frequency (powers of two) and, when
    ``neighborhood_counts`` (per-token count of same-gold-label neighbors) is
    given, by that count in fixed-width bins.

    The corrected/regressed ratio is reported, never asserted: as a reference
    point, on full-scale news-text SRL benchmarks memory adaptation lands
    near 4 (a correction is about four times likelier than a regression).
    """
    if not (len(gold) == len(base_preds) == len(pnma_preds) == len(instances)):
        raise DimensionError(
            f"disagreement_report: {len(instances)} instances, {len(gold)} gold, "
            f"{len(base_preds)} base, {len(pnma_preds)} adapted"
        )
    counts = [0, 0, 0, 0]
    freq_buckets: dict[str, list[int]] = {}
    nbr_buckets: dict[str, list[int]] = {}
    for i, inst in enumerate(instances):
        if not (len(gold[i]) == len(base_preds[i]) == len(pnma_preds[i]) == len(inst)):
            raise DimensionError(f"disagreement_report: length mismatch at instance {i}")
        pred_word = inst.tokens[inst.predicate_index] if inst.predicate_index >= 0 else ""
        pf = predicate_freq.get(pred_word, 0)
        fb = power_of_two_bucket(pf)
        for t in range(len(inst)):
            s = _scenario(base_preds[i][t] == gold[i][t], pnma_preds[i][t] == gold[i][t])
            counts[s] += 1
            freq_buckets.setdefault(fb, [0, 0, 0, 0])[s] += 1
            if neighborhood_counts is not None:
                c = int(neighborhood_counts[i][t])
                lo = (c // nbr_bucket_width) * nbr_bucket_width
                nb = f"{lo}-{lo + nbr_bucket_width - 1}"
                nbr_buckets.setdefault(nb, [0, 0, 0, 0])[s] += 1
    ratio = counts[0] / counts[3] if counts[3] else math.inf

    def bucket_sort_key(name: str):
        return int(name.split("-")[0])

    return DisagreementReport(
        scenario_counts=tuple(counts),
        ratio=ratio,
        freq_buckets=[
            (b, tuple(freq_buckets[b])) for b in sorted(freq_buckets, key=bucket_sort_key)
        ],
        nbr_buckets=[
            (b, tuple(nbr_buckets[b])) for b in sorted(nbr_buckets, key=bucket_sort_key)
        ],
    )


def neighborhood_label_counts(
    encoder: EncoderParams,
    vocab: Vocabulary,
    memory: ActivationMemory,
    instances: Sequence[Instance],
    k: int,
    external=None,
    threads: int = 1,
) -> list[np.ndarray]:
    """Per token: how many of its K neighbors carry the token's gold label."""
    encoded = encode_corpus(instances, encoder, vocab, external=external, threads=threads)
    out = []
    for inst in instances:
        gold_ids = vocab.tag_ids(inst.gold_labels)
        h = encoded[inst.sentence_id].astype(np.float32, copy=False)
        ids, _ = knn_entry_ids(h, memory, k, threads=threads)
        labels = memory.labels[ids]
        out.append((labels == gold_ids[:, None]).sum(axis=1))
    return out


@dataclass
class NeighborContext:
    label: str
    snippet: str
    distance: float


def neighbor_dump(
    encoder: EncoderParams,
    vocab: Vocabulary,
    memory: ActivationMemory,
    instance: Instance,
    token_index: int,
    k: int,
    context_window: int = 5,
    sources: Mapping[str, Instance] | None = None,
    external=None,
) -> list[NeighborContext]:
    """Top-k neighbors of one token with context snippets from their sentences.

    The neighbor token is bracketed and the predicate of its sentence starred;
    snippets are clamped at sentence boundaries.
    """
    if sources is None:
        raise CoverageError("neighbor_dump: provenance sentences required")
    if not (0 <= token_index < len(instance)):
        raise CoverageError(
            f"neighbor_dump: token index {token_index} outside sentence of length {len(instance)}"
        )
    enc = encode_corpus([instance], encoder, vocab, external=external)
    h = enc[instance.sentence_id][token_index].astype(np.float32, copy=False)
    neighbors = knn_query(h, memory, k)
    out: list[NeighborContext] = []
    for rank in range(len(neighbors)):
        sid, tix = memory.provenance[int(neighbors.entry_ids[rank])]
        src = sources.get(sid)
        if src is None:
            raise CoverageError(f"neighbor_dump: no source sentence for id {sid!r}")
        lo = max(0, tix - context_window)
        hi = min(len(src), tix + context_window + 1)
        words = []
        for t in range(lo, hi):
            w = src.tokens[t]
            if t == src.predicate_index:
                w = f"*{w}*"
            if t == tix:
                w = f"[{w}]"
            words.append(w)
        label = vocab.tag_labels[int(neighbors.labels[rank])]
        out.append(
            NeighborContext(
                label=label,
                snippet=" ".join(words),
                distance=float(neighbors.distances[rank]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# report writers (tab-separated, header line naming columns)

def write_eval_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("precision\trecall\tf1\tmatched\tpredicted\tgold\tscheme\n")
        fh.write(
            f"{report.precision:.6f}\t{report.recall:.6f}\t{report.f1:.6f}\t"
            f"{report.matched}\t{report.n_predicted}\t{report.n_gold}\t{report.scheme}\n"
        )
        fh.write("\nlabel\tmatched\tpredicted\tgold\n")
        for label, (m, p, g) in report.per_label.items():
            fh.write(f"{label}\t{m}\t{p}\t{g}\n")


def read_eval_report(path: str) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    vals = lines[1].split("\t")
    per_label: dict[str, tuple[int, int, int]] = {}
    for line in lines[4:]:
        if not line:
            continue
        lab, m, p, g = line.split("\t")
        per_label[lab] = (int(m), int(p), int(g))
    return EvalReport(
        precision=float(vals[0]),
        recall=float(vals[1]),
        f1=float(vals[2]),
        matched=int(vals[3]),
        n_predicted=int(vals[4]),
        n_gold=int(vals[5]),
        scheme=vals[6],
        per_label=per_label,
    )


def write_histogram(rows: Sequence[tuple[str, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank\tnormalized_frequency\n")
        for rank, freq in rows:
            fh.write(f"{rank}\t{freq:.6f}\n")


def write_matrix(mat: np.ndarray, labels: Sequence[str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label\t" + "\t".join(labels) + "\n")
        for i, lab in enumerate(labels):
            fh.write(lab + "\t" + "\t".join(str(int(v)) for v in mat[i]) + "\n")


def write_disagreement(report: DisagreementReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scenario\tcount\n")
        names = ("corrected", "both_wrong", "both_correct", "regressed")
        for name, c in zip(names, report.scenario_counts):
            fh.write(f"{name}\t{c}\n")
        ratio = "inf" if math.isinf(report.ratio) else f"{report.ratio:.6f}"
        fh.write(f"corrected_over_regressed\t{ratio}\n")
        fh.write("\npredicate_frequency\tcorrected\tboth_wrong\tboth_correct\tregressed\n")
        for bucket, cs in report.freq_buckets:
            fh.write(bucket + "\t" + "\t".join(str(c) for c in cs) + "\n")
        if report.nbr_buckets:
            fh.write("\nneighborhood_samples\tcorrected\tboth_wrong\tboth_correct\tregressed\n")
            for bucket, cs in report.nbr_buckets:
                fh.write(bucket + "\t" + "\t".join(str(c) for c in cs) + "\n")


def write_neighbor_dump(rows: Sequence[NeighborContext], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank\tlabel\tdistance\tcontext\n")
        for i, row in enumerate(rows, start=1):
            fh.write(f"{i}\t{row.label}\t{row.distance:.6f}\t{row.snippet}\n")
