"""Parameterized neighborhood representation and memory-adapted prediction.

For a query representation h and its K nearest memory vectors m_1..m_K, the
weights are a softmax over per-neighbor scores <n_i, |m_i - h|> computed from
learned vectors n_1..n_K, and the neighborhood representation is the convex
combination sum_i eta_i m_i.  That representation replaces h as the
classifier input.

Weighting modes:
  * ``distinct`` (default): one learned n_i per neighbor rank.
  * ``shared``: a single learned vector used for every rank.
  * ``distance``: no learned vectors; eta is a softmax over negative
    Euclidean distances (heuristic baseline, nothing to train here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .crf import CrfParams, emission_scores, viterbi_decode
from .dataio import Instance, Vocabulary
from .encoder import EncoderParams, encode_sequence
from .errors import DimensionError, DomainError
from .memory import ActivationMemory, NeighborSet, knn_query
from .numeric import softmax

MODES = ("distinct", "shared", "distance")


@dataclass
class NeighborhoodParams:
    """Learned neighbor-rank vectors: (K, d) for distinct mode, (1, d) for shared."""

    n: np.ndarray
    mode: str = "distinct"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise DomainError(f"unknown neighborhood mode {self.mode!r}")
        if self.n.ndim != 2:
            raise DimensionError(f"neighborhood parameters must be 2-D, got {self.n.shape}")

    @property
    def k(self) -> int:
        return self.n.shape[0]

    @property
    def d(self) -> int:
        return self.n.shape[1]


def init_neighborhood_params(
    k: int, d: int, rng: np.random.Generator, mode: str = "distinct", dtype=np.float32
) -> NeighborhoodParams:
    # small init keeps the initial weights near uniform
    rows = 1 if mode == "shared" else k
    n = rng.normal(0.0, 0.02, size=(rows, d)).astype(dtype)
    return NeighborhoodParams(n=n, mode=mode)


@dataclass
class NeighborhoodCache:
    h: np.ndarray
    m: np.ndarray
    sep: np.ndarray  # |m - h|
    sign: np.ndarray  # sign(m - h)
    eta: np.ndarray


def _rank_vectors(params: NeighborhoodParams, k: int) -> np.ndarray:
    if params.mode == "shared":
        return np.broadcast_to(params.n, (k, params.d))
    if params.n.shape[0] != k:
        raise DimensionError(
            f"neighborhood parameters for K={params.n.shape[0]} used with K={k} neighbors"
        )
    return params.n


def _exact_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax whose normalizer is exactly rounded (fsum), so the result is
    invariant under any permutation of the inputs, bit for bit."""
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / math.fsum(e)


def neighborhood_forward(
    h: np.ndarray,
    m: np.ndarray,
    params: NeighborhoodParams,
    distances: np.ndarray | None = None,
    want_cache: bool = False,
):
    """Weights eta (..., K) and representation (..., d) for queries h (..., d)
    with neighbor vectors m (..., K, d).

    ``distances`` (..., K) is only consulted in ``distance`` mode.  On a
    single query (1-D ``h``) the two reductions use exactly rounded
    summation, which makes the result bit-identical under a joint
    permutation of the neighbors and their rank vectors; the batched path
    trades that for vectorized reductions (differences stay at round-off).
    """
    h = np.asarray(h)
    m = np.asarray(m)
    if m.shape[-1] != h.shape[-1] or m.shape[:-2] != h.shape[:-1]:
        raise DimensionError(f"neighbor vectors {m.shape} vs query {h.shape}")
    k = m.shape[-2]
    single = h.ndim == 1
    sep = np.abs(m - h[..., None, :])
    if params.mode == "distance":
        if distances is None:
            raise DomainError("distance mode requires the neighbor distances")
        neg = -np.asarray(distances, dtype=sep.dtype)
        eta = _exact_softmax(neg) if single else softmax(neg, axis=-1)
    else:
        rank_vecs = _rank_vectors(params, k)
        logits = np.einsum("...kd,kd->...k", sep, rank_vecs)
        eta = _exact_softmax(logits) if single else softmax(logits, axis=-1)
    if single:
        weighted = eta[:, None] * m
        repr_ = np.array([math.fsum(weighted[:, j]) for j in range(m.shape[-1])],
                         dtype=m.dtype)
    else:
        repr_ = np.einsum("...k,...kd->...d", eta, m)
    if not want_cache:
        return eta, repr_
    cache = NeighborhoodCache(h=h, m=m, sep=sep, sign=np.sign(m - h[..., None, :]), eta=eta)
    return eta, repr_, cache


def neighborhood_backward(
    d_repr: np.ndarray, cache: NeighborhoodCache, params: NeighborhoodParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_n, d_h, d_m) of a scalar loss given d_loss/d_repr.

    The memory is frozen during training, so callers typically discard d_m;
    at |m - h| = 0 the absolute value's subgradient 0 is used.
    """
    eta, m, sep, sign = cache.eta, cache.m, cache.sep, cache.sign
    k = m.shape[-2]
    d_eta = np.einsum("...d,...kd->...k", d_repr, m)
    d_m = eta[..., None] * d_repr[..., None, :]
    if params.mode == "distance":
        d_n = np.zeros_like(params.n)
        d_h = np.zeros_like(cache.h)
        return d_n, d_h, d_m
    inner = np.sum(eta * d_eta, axis=-1, keepdims=True)
    d_logits = eta * (d_eta - inner)
    rank_vecs = _rank_vectors(params, k)
    d_rank = np.einsum(
        "bk,bkd->kd", d_logits.reshape(-1, k), sep.reshape(-1, k, sep.shape[-1])
    )
    if params.mode == "shared":
        d_n = d_rank.sum(axis=0, keepdims=True)
    else:
        d_n = d_rank
    d_sep = d_logits[..., None] * rank_vecs
    d_h = -np.sum(d_sep * sign, axis=-2)
    d_m = d_m + d_sep * sign
    return d_n.astype(params.n.dtype, copy=False), d_h, d_m


def neighborhood_weights(
    h: np.ndarray,
    neighbors: NeighborSet,
    params: NeighborhoodParams,
) -> np.ndarray:
    """Distribution over the K neighbors of one query (sums to 1)."""
    eta, _ = neighborhood_forward(
        h,
        neighbors.vectors.astype(h.dtype, copy=False),
        params,
        distances=neighbors.distances,
    )
    return eta


def neighborhood_repr(
    h: np.ndarray,
    neighbors: NeighborSet,
    params: NeighborhoodParams,
) -> np.ndarray:
    """Convex combination of the neighbor vectors under the learned weights."""
    _, repr_ = neighborhood_forward(
        h,
        neighbors.vectors.astype(h.dtype, copy=False),
        params,
        distances=neighbors.distances,
    )
    return repr_


def pnma_predict(
    instance: Instance,
    encoder: EncoderParams,
    crf: CrfParams,
    nbr: NeighborhoodParams,
    memory: ActivationMemory,
    vocab: Vocabulary,
    k: int,
    external=None,
    exclude_self: bool = False,
) -> np.ndarray:
    """Memory-adapted tag prediction for one instance.

    encode -> per-token K-NN -> neighborhood representation -> emission
    scores on that representation (not on the encoder output) -> Viterbi.
    """
    enc = encode_sequence(instance, encoder, vocab, external=external)
    h = enc.h_final
    exclude = None
    if exclude_self:
        exclude = [[(instance.sentence_id, t)] for t in range(len(instance))]
    sets = knn_query(h.astype(np.float32, copy=False), memory, k, exclude=exclude)
    m = np.stack([s.vectors for s in sets]).astype(h.dtype)
    dists = np.stack([s.distances for s in sets])
    _, repr_ = neighborhood_forward(h, m, nbr, distances=dists)
    em = emission_scores(repr_, crf)
    return viterbi_decode(em, crf)
