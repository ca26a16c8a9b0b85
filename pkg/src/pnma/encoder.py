"""Base representation pipeline: embeddings, alternating LSTM stack, connection layers.

The stack is: token/predicate embedding concat -> LSTM layer 1 (forward) ->
connection -> LSTM layer 2 (backward) -> ... -> final LSTM layer, whose
per-token outputs are the sequence representation consumed by the CRF head
and stored in the activation memory.  Directions alternate starting forward.

All kernels operate on same-length batches (B, n, ...); a single sequence is
the batch-of-one case.  Each forward has an explicit backward that is
verified by finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import ExternalEmbeddings, Instance, Vocabulary
from .errors import DimensionError, DomainError
from .numeric import make_rng

D_PRED_DEFAULT = 50
D_WORD_DEFAULT = 64
D_HIDDEN_DEFAULT = 300
N_LAYERS_DEFAULT = 4


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # 0.5*(1+tanh(z/2)) is the overflow-safe form
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


@dataclass
class LstmWeights:
    """Gate weights in i, f, g, o order: wx (4d, d_in), wh (4d, d), b (4d,)."""

    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray

    @property
    def d_hidden(self) -> int:
        return self.wh.shape[1]

    @property
    def d_in(self) -> int:
        return self.wx.shape[1]


@dataclass
class EncoderParams:
    """All learnable encoder state.  ``word_emb`` is None when the run ingests
    precomputed external embeddings instead of a trained table."""

    word_emb: np.ndarray | None
    pred_emb: np.ndarray
    layers: list[LstmWeights]
    connections: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_hidden(self) -> int:
        return self.layers[-1].d_hidden

    @property
    def d_word(self) -> int:
        if self.word_emb is not None:
            return self.word_emb.shape[1]
        return self.layers[0].d_in - self.pred_emb.shape[1]

    def to_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.word_emb is not None:
            out["embed.word"] = self.word_emb
        out["embed.pred"] = self.pred_emb
        for l, w in enumerate(self.layers):
            out[f"lstm{l}.wx"] = w.wx
            out[f"lstm{l}.wh"] = w.wh
            out[f"lstm{l}.b"] = w.b
        for l, w in enumerate(self.connections):
            out[f"conn{l}.w"] = w
        return out

    @staticmethod
    def from_dict(params: dict[str, np.ndarray]) -> "EncoderParams":
        n_layers = sum(1 for k in params if k.endswith(".wx"))
        layers = [
            LstmWeights(params[f"lstm{l}.wx"], params[f"lstm{l}.wh"], params[f"lstm{l}.b"])
            for l in range(n_layers)
        ]
        connections = [params[f"conn{l}.w"] for l in range(n_layers - 1)]
        return EncoderParams(
            word_emb=params.get("embed.word"),
            pred_emb=params["embed.pred"],
            layers=layers,
            connections=connections,
        )


def layer_direction(layer_index: int) -> str:
    """Directions alternate starting forward: f, b, f, b, ..."""
    return "f" if layer_index % 2 == 0 else "b"


def init_encoder_params(
    vocab_size: int,
    d_word: int = D_WORD_DEFAULT,
    d_pred: int = D_PRED_DEFAULT,
    d_hidden: int = D_HIDDEN_DEFAULT,
    n_layers: int = N_LAYERS_DEFAULT,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
    external_dim: int | None = None,
) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in)) matrices, normal(0, 0.1) embeddings, forget bias +1.

    With ``external_dim`` set, no word table is allocated and the first layer
    consumes vectors of that width instead.
    """
    if rng is None:
        rng = make_rng(0)
    if external_dim is not None:
        word_emb = None
        d_word = external_dim
    else:
        word_emb = rng.normal(0.0, 0.1, size=(vocab_size, d_word)).astype(dtype)
    pred_emb = rng.normal(0.0, 0.1, size=(2, d_pred)).astype(dtype)
    layers: list[LstmWeights] = []
    connections: list[np.ndarray] = []
    d_in = d_word + d_pred
    for l in range(n_layers):
        rx = 1.0 / np.sqrt(d_in)
        rh = 1.0 / np.sqrt(d_hidden)
        wx = rng.uniform(-rx, rx, size=(4 * d_hidden, d_in)).astype(dtype)
        wh = rng.uniform(-rh, rh, size=(4 * d_hidden, d_hidden)).astype(dtype)
        b = np.zeros(4 * d_hidden, dtype=dtype)
        b[d_hidden : 2 * d_hidden] = 1.0  # forget gate
        layers.append(LstmWeights(wx, wh, b))
        if l < n_layers - 1:
            rc = 1.0 / np.sqrt(d_hidden + d_in)
            connections.append(
                rng.uniform(-rc, rc, size=(d_hidden, d_hidden + d_in)).astype(dtype)
            )
        d_in = d_hidden
    return EncoderParams(word_emb, pred_emb, layers, connections)


def embed_tokens(
    word_ids: np.ndarray,
    pred_bits: np.ndarray,
    params: EncoderParams,
    external_vectors: np.ndarray | None = None,
) -> np.ndarray:
    """Row i is [word embedding; predicate-bit embedding] for token i.

    Accepts (n,) ids for one sequence or (B, n) for a batch.
    """
    word_ids = np.asarray(word_ids)
    pred_bits = np.asarray(pred_bits)
    if word_ids.shape != pred_bits.shape:
        raise DimensionError(f"word_ids {word_ids.shape} vs pred_bits {pred_bits.shape}")
    if pred_bits.size and (pred_bits.min() < 0 or pred_bits.max() > 1):
        raise DomainError("predicate bits must be 0 or 1")
    if external_vectors is not None:
        e = external_vectors
    else:
        if params.word_emb is None:
            raise DomainError("encoder has no word table; external vectors required")
        if word_ids.size and word_ids.max() >= params.word_emb.shape[0]:
            raise DomainError(
                f"word id {int(word_ids.max())} out of range "
                f"[0, {params.word_emb.shape[0]})"
            )
        e = params.word_emb[word_ids]
    p = params.pred_emb[pred_bits]
    return np.concatenate([e, p], axis=-1)


@dataclass
class LstmCache:
    direction: str
    x: np.ndarray  # in recurrence order (already reversed for backward layers)
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray


def lstm_layer_forward(
    x: np.ndarray, direction: str, weights: LstmWeights, want_cache: bool = False
):
    """Standard LSTM recurrence with zero initial state over (B, n, d_in).

    The backward direction is the forward recurrence on the reversed sequence
    with the output reversed back.
    """
    if direction not in ("f", "b"):
        raise DomainError(f"direction must be 'f' or 'b', got {direction!r}")
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, :, :]
    if x.ndim != 3 or x.shape[2] != weights.d_in:
        raise DimensionError(f"lstm input {x.shape} vs wx {weights.wx.shape}")
    if direction == "b":
        x = x[:, ::-1]
    bsz, n, _ = x.shape
    d = weights.d_hidden
    pre_x = x @ weights.wx.T + weights.b
    h = np.zeros((bsz, d), dtype=pre_x.dtype)
    c = np.zeros((bsz, d), dtype=pre_x.dtype)
    hs = np.empty((bsz, n, d), dtype=pre_x.dtype)
    if want_cache:
        gi = np.empty_like(hs)
        gf = np.empty_like(hs)
        gg = np.empty_like(hs)
        go = np.empty_like(hs)
        tc = np.empty_like(hs)
        hp = np.empty_like(hs)
        cp = np.empty_like(hs)
    for t in range(n):
        pre = pre_x[:, t] + h @ weights.wh.T
        i = _sigmoid(pre[:, :d])
        f = _sigmoid(pre[:, d : 2 * d])
        g = np.tanh(pre[:, 2 * d : 3 * d])
        o = _sigmoid(pre[:, 3 * d :])
        if want_cache:
            hp[:, t] = h
            cp[:, t] = c
        c = f * c + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        hs[:, t] = h
        if want_cache:
            gi[:, t], gf[:, t], gg[:, t], go[:, t], tc[:, t] = i, f, g, o, tanh_c
    out = hs[:, ::-1] if direction == "b" else hs
    if squeeze:
        out = out[0]
    if not want_cache:
        return out
    cache = LstmCache(direction, x, gi, gf, gg, go, tc, hp, cp)
    return out, cache


def lstm_layer_backward(
    d_out: np.ndarray, cache: LstmCache, weights: LstmWeights
) -> tuple[np.ndarray, LstmWeights]:
    """Gradients of a scalar loss given d_loss/d_output: returns (d_x, weight grads)."""
    d_out = np.asarray(d_out)
    squeeze = d_out.ndim == 2
    if squeeze:
        d_out = d_out[None, :, :]
    if cache.direction == "b":
        d_out = d_out[:, ::-1]
    bsz, n, d = d_out.shape
    d_wx = np.zeros_like(weights.wx, dtype=np.float64)
    d_wh = np.zeros_like(weights.wh, dtype=np.float64)
    d_b = np.zeros_like(weights.b, dtype=np.float64)
    d_x = np.empty_like(cache.x)
    dh_next = np.zeros((bsz, d), dtype=d_out.dtype)
    dc_next = np.zeros((bsz, d), dtype=d_out.dtype)
    for t in range(n - 1, -1, -1):
        i, f, g, o = cache.i[:, t], cache.f[:, t], cache.g[:, t], cache.o[:, t]
        tanh_c = cache.tanh_c[:, t]
        dh = d_out[:, t] + dh_next
        do = dh * tanh_c
        dct = dh * o * (1.0 - tanh_c * tanh_c) + dc_next
        di = dct * g
        df = dct * cache.c_prev[:, t]
        dg = dct * i
        dc_next = dct * f
        dpre = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        d_wx += dpre.T @ cache.x[:, t]
        d_wh += dpre.T @ cache.h_prev[:, t]
        d_b += dpre.sum(axis=0)
        d_x[:, t] = dpre @ weights.wx
        dh_next = dpre @ weights.wh
    if cache.direction == "b":
        d_x = d_x[:, ::-1]
    if squeeze:
        d_x = d_x[0]
    dt = weights.wx.dtype
    grads = LstmWeights(d_wx.astype(dt), d_wh.astype(dt), d_b.astype(dt))
    return d_x, grads


def connection_forward(h: np.ndarray, x: np.ndarray, w: np.ndarray, want_cache: bool = False):
    """x_next = ReLU(W [h; x]); no bias term."""
    h, x = np.asarray(h), np.asarray(x)
    if h.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"connection_forward: h {h.shape} vs x {x.shape}")
    cat = np.concatenate([h, x], axis=-1)
    if cat.shape[-1] != w.shape[1]:
        raise DimensionError(f"connection_forward: concat {cat.shape} vs W {w.shape}")
    pre = cat @ w.T
    out = np.maximum(pre, 0.0)
    if want_cache:
        return out, (cat, pre)
    return out


def connection_backward(
    d_out: np.ndarray, cache: tuple[np.ndarray, np.ndarray], w: np.ndarray, d_hidden: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_h, d_x, d_w) given d_loss/d_output."""
    cat, pre = cache
    dpre = d_out * (pre > 0)
    flat_p = dpre.reshape(-1, dpre.shape[-1])
    flat_c = cat.reshape(-1, cat.shape[-1])
    d_w = (flat_p.T @ flat_c).astype(w.dtype)
    d_cat = dpre @ w
    return d_cat[..., :d_hidden], d_cat[..., d_hidden:], d_w


@dataclass
class EncodedSequence:
    """Final-layer activations, one row per token; cache retained when training."""

    h_final: np.ndarray
    cache: "EncoderCache | None" = None


@dataclass
class EncoderCache:
    word_ids: np.ndarray
    pred_bits: np.ndarray
    x_inputs: list[np.ndarray] = field(default_factory=list)
    lstm_caches: list[LstmCache] = field(default_factory=list)
    conn_caches: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    embed_mask: np.ndarray | None = None
    layer_masks: list[np.ndarray | None] = field(default_factory=list)
    external: bool = False


def _dropout_mask(rng: np.random.Generator, shape, rate: float, dtype) -> np.ndarray:
    # inverted scaling: evaluation needs no rescaling
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def encode_batch(
    word_ids: np.ndarray,
    pred_bits: np.ndarray,
    params: EncoderParams,
    training: bool = False,
    dropout_embed: float = 0.0,
    dropout_layer: float = 0.0,
    drop_rng: np.random.Generator | None = None,
    external_vectors: np.ndarray | None = None,
    want_cache: bool = False,
):
    """Run the full stack on a same-length batch; returns h_L (B, n, d) [+ cache].

    Dropout (training mode only) is applied to the embedding concat and to
    each LSTM output feeding a connection layer; evaluation mode is a pure
    function of the inputs.
    """
    if training and (dropout_embed > 0 or dropout_layer > 0) and drop_rng is None:
        raise DomainError("training-mode dropout requires a generator")
    x = embed_tokens(word_ids, pred_bits, params, external_vectors)
    dtype = np.dtype(x.dtype)
    cache = EncoderCache(
        word_ids=np.asarray(word_ids),
        pred_bits=np.asarray(pred_bits),
        external=external_vectors is not None,
    )
    if training and dropout_embed > 0:
        cache.embed_mask = _dropout_mask(drop_rng, x.shape, dropout_embed, dtype)
        x = x * cache.embed_mask
    n_layers = params.n_layers
    h = None
    for l in range(n_layers):
        cache.x_inputs.append(x)
        if want_cache:
            h, lc = lstm_layer_forward(x, layer_direction(l), params.layers[l], want_cache=True)
            cache.lstm_caches.append(lc)
        else:
            h = lstm_layer_forward(x, layer_direction(l), params.layers[l])
        if l == n_layers - 1:
            break
        if training and dropout_layer > 0:
            mask = _dropout_mask(drop_rng, h.shape, dropout_layer, dtype)
            cache.layer_masks.append(mask)
            h_in = h * mask
        else:
            cache.layer_masks.append(None)
            h_in = h
        if want_cache:
            x, cc = connection_forward(h_in, x, params.connections[l], want_cache=True)
            cache.conn_caches.append(cc)
        else:
            x = connection_forward(h_in, x, params.connections[l])
    if want_cache:
        return h, cache
    return h


def encode_backward(
    d_h_final: np.ndarray, cache: EncoderCache, params: EncoderParams
) -> dict[str, np.ndarray]:
    """Backpropagate through the whole stack; returns grads keyed like ``to_dict``."""
    grads: dict[str, np.ndarray] = {}
    n_layers = params.n_layers
    d = params.d_hidden
    d_x, lg = lstm_layer_backward(d_h_final, cache.lstm_caches[-1], params.layers[-1])
    grads[f"lstm{n_layers - 1}.wx"] = lg.wx
    grads[f"lstm{n_layers - 1}.wh"] = lg.wh
    grads[f"lstm{n_layers - 1}.b"] = lg.b
    for l in range(n_layers - 2, -1, -1):
        d_h, d_x_direct, d_w = connection_backward(
            d_x, cache.conn_caches[l], params.connections[l], d
        )
        grads[f"conn{l}.w"] = d_w
        if cache.layer_masks[l] is not None:
            d_h = d_h * cache.layer_masks[l]
        d_x, lg = lstm_layer_backward(d_h, cache.lstm_caches[l], params.layers[l])
        grads[f"lstm{l}.wx"] = lg.wx
        grads[f"lstm{l}.wh"] = lg.wh
        grads[f"lstm{l}.b"] = lg.b
        d_x = d_x + d_x_direct
    if cache.embed_mask is not None:
        d_x = d_x * cache.embed_mask
    d_word_part = d_x[..., : params.d_word]
    d_pred_part = d_x[..., params.d_word :]
    if not cache.external and params.word_emb is not None:
        g_word = np.zeros_like(params.word_emb)
        np.add.at(g_word, cache.word_ids, d_word_part)
        grads["embed.word"] = g_word
    g_pred = np.zeros_like(params.pred_emb)
    np.add.at(g_pred, cache.pred_bits, d_pred_part)
    grads["embed.pred"] = g_pred
    return grads


def encode_corpus(
    instances: Sequence[Instance],
    params: EncoderParams,
    vocab: Vocabulary,
    external: ExternalEmbeddings | None = None,
    batch_size: int = 256,
    threads: int = 1,
) -> dict[str, np.ndarray]:
    """Evaluation-mode final activations for every instance, keyed by sentence id.

    Instances are grouped by length and encoded in batches; sentence ids must
    be unique within the corpus.
    """
    groups: dict[int, list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault(len(inst), []).append(i)
    jobs: list[list[int]] = []
    for length in sorted(groups):
        idxs = groups[length]
        for s in range(0, len(idxs), batch_size):
            jobs.append(idxs[s : s + batch_size])

    def run(job: list[int]):
        word_ids = np.stack([vocab.word_ids(instances[i].tokens) for i in job])
        bits = np.stack([np.array(instances[i].predicate_bits, dtype=np.int64) for i in job])
        ext = None
        if external is not None:
            ext = np.stack([external.vectors(instances[i].sentence_id) for i in job])
        h = encode_batch(word_ids, bits, params, training=False, external_vectors=ext)
        return job, h

    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    out: dict[str, np.ndarray] = {}
    for job, h in results:
        for row, i in enumerate(job):
            out[instances[i].sentence_id] = h[row]
    return out


def encode_sequence(
    instance: Instance,
    params: EncoderParams,
    vocab: Vocabulary,
    training: bool = False,
    dropout_embed: float = 0.0,
    dropout_layer: float = 0.0,
    drop_rng: np.random.Generator | None = None,
    external: ExternalEmbeddings | None = None,
) -> EncodedSequence:
    """Encode one instance; deterministic in evaluation mode given (instance, params)."""
    word_ids = vocab.word_ids(instance.tokens)[None, :]
    pred_bits = np.array(instance.predicate_bits, dtype=np.int64)[None, :]
    ext = None
    if external is not None:
        vecs = external.vectors(instance.sentence_id)
        ext = vecs[None, :, :]
    h, cache = encode_batch(
        word_ids,
        pred_bits,
        params,
        training=training,
        dropout_embed=dropout_embed,
        dropout_layer=dropout_layer,
        drop_rng=drop_rng,
        external_vectors=ext,
        want_cache=True,
    )
    return EncodedSequence(h_final=h[0], cache=cache)
