"""Activation memory: build, exact batched Euclidean K-NN, binary persistence.

The memory holds final-layer activations of a sampled subset of training
tokens together with their gold labels and provenance.  Retrieval is exact
brute force over blocked distance computations; ties are broken toward the
lower entry id, and batched queries return exactly what a naive one-at-a-time
scan would.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import Instance, Vocabulary
from .encoder import EncoderParams, encode_corpus
from .errors import CapacityError, DimensionError, DomainError, FormatError
from .numeric import make_rng

MEMORY_MAGIC = b"PNMAMEM1"

# rng stream ids (keep distinct from the training streams)
_STREAM_SAMPLE = 101

# block sizes keep the (Q, N, d) difference tensor inside the cache hierarchy
_QUERY_BLOCK = 128
_ENTRY_BLOCK = 512


@dataclass
class NeighborSet:
    """K nearest entries of one query, ascending by distance."""

    entry_ids: np.ndarray  # (K,) int64
    distances: np.ndarray  # (K,) float64, true Euclidean
    vectors: np.ndarray  # (K, d) float32
    labels: np.ndarray  # (K,) int64

    def __len__(self) -> int:
        return len(self.entry_ids)


@dataclass
class ActivationMemory:
    """Immutable collection of (vector, gold label, provenance) entries."""

    vectors: np.ndarray  # (N, d) float32
    labels: np.ndarray  # (N,) int64
    provenance: list[tuple[str, int]]
    seed: int = 0
    fraction: float = 1.0
    source_digest: str = ""
    _prov_to_id: dict[tuple[str, int], int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"memory vectors {self.vectors.shape} vs labels {self.labels.shape}"
            )
        if len(self.provenance) != self.vectors.shape[0]:
            raise DimensionError(
                f"memory provenance length {len(self.provenance)} vs {self.vectors.shape[0]} entries"
            )
        self.vectors.setflags(write=False)
        self.labels.setflags(write=False)
        self._prov_to_id = {p: i for i, p in enumerate(self.provenance)}

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def entry_ids_for(self, provenance: Sequence[tuple[str, int]]) -> list[int]:
        """Entry ids of the given provenance keys that are present in the memory."""
        out = []
        for key in provenance:
            hit = self._prov_to_id.get(key)
            if hit is not None:
                out.append(hit)
        return out


def build_memory(
    encoder: EncoderParams,
    vocab: Vocabulary,
    instances: Sequence[Instance],
    fraction: float = 0.15,
    seed: int = 0,
    stratified: bool = False,
    source_digest: str = "",
    external=None,
) -> ActivationMemory:
    """Encode the training set in evaluation mode and sample token activations.

    Sampling is uniform without replacement over all tokens (or proportional
    per gold label with ``stratified``), driven entirely by ``seed``.
    """
    if not instances:
        raise DomainError("build_memory: empty training set")
    if not (0.0 < fraction <= 1.0):
        raise DomainError(f"build_memory: fraction must be in (0, 1], got {fraction}")

    encoded = encode_corpus(instances, encoder, vocab, external=external)
    activations: list[np.ndarray] = []
    token_meta: list[tuple[str, int, int]] = []  # (sentence_id, token_index, label id)
    for inst in instances:
        h = encoded[inst.sentence_id]
        tag_ids = vocab.tag_ids(inst.gold_labels)
        for t in range(len(inst)):
            activations.append(h[t])
            token_meta.append((inst.sentence_id, t, int(tag_ids[t])))

    total = len(token_meta)
    rng = make_rng(seed, _STREAM_SAMPLE)
    if stratified:
        by_label: dict[int, list[int]] = {}
        for idx, (_, _, lab) in enumerate(token_meta):
            by_label.setdefault(lab, []).append(idx)
        chosen: list[int] = []
        for lab in sorted(by_label):
            group = by_label[lab]
            count = max(1, int(round(fraction * len(group))))
            picks = rng.choice(len(group), size=count, replace=False)
            chosen.extend(group[i] for i in picks)
        chosen.sort()
    else:
        count = max(1, int(round(fraction * total)))
        chosen = sorted(rng.choice(total, size=count, replace=False).tolist())

    vectors = np.stack([activations[i] for i in chosen]).astype(np.float32)
    labels = np.array([token_meta[i][2] for i in chosen], dtype=np.int64)
    provenance = [(token_meta[i][0], token_meta[i][1]) for i in chosen]
    return ActivationMemory(
        vectors=vectors,
        labels=labels,
        provenance=provenance,
        seed=seed,
        fraction=fraction,
        source_digest=source_digest,
    )


def _squared_distances(queries: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances (Q, N) in double precision.

    Computed as an explicit difference (never the dot-product expansion) so
    batched results are bit-identical to a naive per-pair scan.
    """
    q = queries.astype(np.float64, copy=False)
    m = entries.astype(np.float64, copy=False)
    diff = q[:, None, :] - m[None, :, :]
    np.square(diff, out=diff)
    return diff.sum(axis=2)


def _resolve_exclusions(exclude, memory: ActivationMemory, n_q: int) -> list[list[int]]:
    """Normalize the ``exclude`` argument to one entry-id list per query."""
    if exclude is None:
        return [[] for _ in range(n_q)]
    items = list(exclude)
    if not items:
        return [[] for _ in range(n_q)]
    first = items[0]
    is_provenance = (
        isinstance(first, tuple) and len(first) == 2 and isinstance(first[0], str)
    )
    if is_provenance:
        shared = memory.entry_ids_for(items)
        return [shared for _ in range(n_q)]
    if len(items) != n_q:
        raise DimensionError(f"per-query exclusions: {len(items)} lists for {n_q} queries")
    return [memory.entry_ids_for(list(e)) for e in items]


def knn_query(
    queries: np.ndarray,
    memory: ActivationMemory,
    k: int,
    exclude: Sequence[tuple[str, int]] | Sequence[Sequence[tuple[str, int]]] | None = None,
    threads: int = 1,
) -> NeighborSet | list[NeighborSet]:
    """Exact top-k by Euclidean distance; ties broken by lower entry id.

    ``queries`` is one vector (d,) or a batch (Q, d).  ``exclude`` is either
    one provenance collection applied to every query or a per-query sequence
    of collections; excluded entries are never returned.
    """
    queries = np.asarray(queries)
    single = queries.ndim == 1
    if single:
        queries = queries[None, :]
    if queries.ndim != 2 or queries.shape[1] != memory.d:
        raise DimensionError(f"queries {queries.shape} vs memory width {memory.d}")
    n_q = queries.shape[0]
    n_m = len(memory)

    excluded_ids = _resolve_exclusions(exclude, memory, n_q)

    for qi, ids in enumerate(excluded_ids):
        usable = n_m - len(ids)
        if k > usable:
            raise CapacityError(
                f"knn_query: K={k} exceeds usable memory size {usable} "
                f"(|M|={n_m}, excluded={len(ids)}) for query {qi}"
            )
    if k < 1:
        raise DomainError(f"knn_query: K must be >= 1, got {k}")

    def run_chunk(q_start: int, q_stop: int):
        qs = queries[q_start:q_stop]
        nq = q_stop - q_start
        best_d = np.full((nq, 0), np.inf)
        best_i = np.full((nq, 0), -1, dtype=np.int64)
        for m_start in range(0, n_m, _ENTRY_BLOCK):
            m_stop = min(m_start + _ENTRY_BLOCK, n_m)
            d2 = _squared_distances(qs, memory.vectors[m_start:m_stop])
            for row in range(nq):
                for eid in excluded_ids[q_start + row]:
                    if m_start <= eid < m_stop:
                        d2[row, eid - m_start] = np.inf
            ids = np.broadcast_to(np.arange(m_start, m_stop, dtype=np.int64), d2.shape)
            take = min(k, m_stop - m_start)
            order = np.lexsort((ids, d2), axis=1)[:, :take]
            cand_d = np.concatenate([best_d, np.take_along_axis(d2, order, axis=1)], axis=1)
            cand_i = np.concatenate([best_i, np.take_along_axis(ids, order, axis=1)], axis=1)
            merge = np.lexsort((cand_i, cand_d), axis=1)[:, : min(k, cand_d.shape[1])]
            best_d = np.take_along_axis(cand_d, merge, axis=1)
            best_i = np.take_along_axis(cand_i, merge, axis=1)
        return best_d, best_i

    chunks = [(s, min(s + _QUERY_BLOCK, n_q)) for s in range(0, n_q, _QUERY_BLOCK)]
    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: run_chunk(*c), chunks))
    else:
        parts = [run_chunk(*c) for c in chunks]

    out: list[NeighborSet] = []
    for (d2s, ids) in parts:
        for row in range(d2s.shape[0]):
            sel = ids[row]
            out.append(
                NeighborSet(
                    entry_ids=sel.copy(),
                    distances=np.sqrt(d2s[row]),
                    vectors=memory.vectors[sel].copy(),
                    labels=memory.labels[sel].copy(),
                )
            )
    if single:
        return out[0]
    return out


def knn_entry_ids(
    queries: np.ndarray,
    memory: ActivationMemory,
    k: int,
    exclude=None,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Compact batch variant: returns (ids (Q, k) int64, distances (Q, k) float64)."""
    sets = knn_query(queries, memory, k, exclude=exclude, threads=threads)
    if isinstance(sets, NeighborSet):
        sets = [sets]
    ids = np.stack([s.entry_ids for s in sets])
    dists = np.stack([s.distances for s in sets])
    return ids, dists


def _metadata_blob(memory: ActivationMemory) -> bytes:
    text = (
        f"seed={memory.seed}\n"
        f"fraction={memory.fraction!r}\n"
        f"source_digest={memory.source_digest}\n"
    )
    return text.encode("utf-8")


def serialize_memory(memory: ActivationMemory, path: str) -> None:
    """Write the documented binary format; round-trips bit-identically."""
    payload = bytearray()
    payload += MEMORY_MAGIC
    payload += struct.pack("<I", memory.d)
    payload += struct.pack("<Q", len(memory))
    for i in range(len(memory)):
        payload += memory.vectors[i].astype("<f4").tobytes()
        payload += struct.pack("<I", int(memory.labels[i]))
        sid, tix = memory.provenance[i]
        sid_b = sid.encode("utf-8")
        payload += struct.pack("<I", len(sid_b))
        payload += sid_b
        payload += struct.pack("<I", tix)
    meta = _metadata_blob(memory)
    payload += struct.pack("<I", len(meta))
    payload += meta
    digest = hashlib.sha256(bytes(payload)).digest()
    payload += digest
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def deserialize_memory(path: str) -> ActivationMemory:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MEMORY_MAGIC) + 32:
        raise FormatError(f"{path}: truncated memory file")
    if blob[: len(MEMORY_MAGIC)] != MEMORY_MAGIC:
        if blob[:7] == MEMORY_MAGIC[:7]:
            raise FormatError(f"{path}: unsupported memory format version")
        raise FormatError(f"{path}: not a memory file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: memory content digest mismatch")
    off = len(MEMORY_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise FormatError(f"{path}: truncated memory file")
        out = body[off : off + n]
        off += n
        return out

    d = struct.unpack("<I", take(4))[0]
    count = struct.unpack("<Q", take(8))[0]
    vectors = np.empty((count, d), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    provenance: list[tuple[str, int]] = []
    for i in range(count):
        vectors[i] = np.frombuffer(take(4 * d), dtype="<f4")
        labels[i] = struct.unpack("<I", take(4))[0]
        sid_len = struct.unpack("<I", take(4))[0]
        sid = take(sid_len).decode("utf-8")
        tix = struct.unpack("<I", take(4))[0]
        provenance.append((sid, tix))
    meta_len = struct.unpack("<I", take(4))[0]
    meta = take(meta_len).decode("utf-8")
    if off != len(body):
        raise FormatError(f"{path}: trailing bytes in memory file")
    fields = dict(line.split("=", 1) for line in meta.splitlines() if line)
    return ActivationMemory(
        vectors=vectors,
        labels=labels,
        provenance=provenance,
        seed=int(fields.get("seed", "0")),
        fraction=float(fields.get("fraction", "1.0")),
        source_digest=fields.get("source_digest", ""),
    )
