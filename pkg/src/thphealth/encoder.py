"""Event embedding and the causally masked self-attention history encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import EventSequence, GapStats, normalize_gap

MASK_FILL = -1e9


def temporal_encoding(dt_norm, d: int) -> np.ndarray:
    """Sinusoidal encoding of a (normalized) gap.

    Component ``2m`` is ``sin(x / 10000**(2m/d))`` and ``2m+1`` the matching
    cosine. ``dt_norm`` may be a scalar or an array; the encoding is added as
    a trailing axis of size ``d``.
    """
    if d <= 0 or d % 2:
        raise ValueError(f"temporal encoding dimension must be even and positive, got {d}")
    x = np.asarray(dt_norm, dtype=np.float64)[..., None]
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    out = np.empty(x.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(x * freq)
    out[..., 1::2] = np.cos(x * freq)
    return out


@dataclass
class EncoderLayer:
    ln1_scale: Parameter
    ln1_shift: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    ln2_scale: Parameter
    ln2_shift: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def parameters(self):
        return list(vars(self).values())


@dataclass
class EncoderParams:
    type_embeddings: Parameter  # (K, d)
    layers: list
    final_scale: Parameter
    final_shift: Parameter
    n_heads: int

    def __post_init__(self):
        d = self.d
        if d % self.n_heads:
            raise ValueError(f"d={d} is not divisible by n_heads={self.n_heads}")

    @property
    def d(self) -> int:
        return self.type_embeddings.shape[1]

    @property
    def K(self) -> int:
        return self.type_embeddings.shape[0]

    def parameters(self):
        out = [self.type_embeddings]
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend([self.final_scale, self.final_shift])
        return out


def make_encoder_params(K, d, n_layers, n_heads, d_ff, rng) -> EncoderParams:
    """Glorot-uniform weights, unit layer-norm scales, zero biases."""

    def glorot(name, fan_in, fan_out, shape=None):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return Parameter(rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)), name)

    layers = []
    for i in range(n_layers):
        pre = f"encoder.layer{i}."
        layers.append(
            EncoderLayer(
                ln1_scale=Parameter(np.ones(d), pre + "ln1_scale"),
                ln1_shift=Parameter(np.zeros(d), pre + "ln1_shift"),
                wq=glorot(pre + "wq", d, d),
                wk=glorot(pre + "wk", d, d),
                wv=glorot(pre + "wv", d, d),
                wo=glorot(pre + "wo", d, d),
                ln2_scale=Parameter(np.ones(d), pre + "ln2_scale"),
                ln2_shift=Parameter(np.zeros(d), pre + "ln2_shift"),
                w1=glorot(pre + "w1", d, d_ff),
                b1=Parameter(np.zeros(d_ff), pre + "b1"),
                w2=glorot(pre + "w2", d_ff, d),
                b2=Parameter(np.zeros(d), pre + "b2"),
            )
        )
    return EncoderParams(
        type_embeddings=glorot("encoder.type_embeddings", K, d),
        layers=layers,
        final_scale=Parameter(np.ones(d), "encoder.final_scale"),
        final_shift=Parameter(np.zeros(d), "encoder.final_shift"),
        n_heads=n_heads,
    )


def embed_arrays(types: np.ndarray, gaps: np.ndarray, stats: GapStats, p: EncoderParams) -> Tensor:
    """Type embedding plus temporal encoding of the normalized gap, for any
    leading batch shape. Gaps at padded slots should be 0."""
    te = temporal_encoding(normalize_gap(gaps, stats), p.d)
    return ad.embedding(p.type_embeddings, types) + te


def embed_events(seq: EventSequence, stats: GapStats, p: EncoderParams) -> Tensor:
    """n x d event representations; the first event uses a gap of 0."""
    return embed_arrays(seq.types, seq.gaps, stats, p)


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, n, d) or (n, d)
    attention: np.ndarray  # (B, L, h, n, n) or (L, h, n, n)


def encode_history(X: Tensor, p: EncoderParams, pad_mask=None, *, training=False, dropout=0.0, rng=None) -> EncoderOutput:
    """Pre-norm causal transformer over event representations.

    ``pad_mask`` is True at padded slots. Accepts (n, d) or (B, n, d) input
    and returns the same leading layout.
    """
    unbatched = X.ndim == 2
    if unbatched:
        X = X.reshape((1,) + X.shape)
        pad_mask = None if pad_mask is None else np.asarray(pad_mask, bool)[None]
    B, n, d = X.shape
    valid = np.ones((B, n), bool) if pad_mask is None else ~np.asarray(pad_mask, bool)
    if not valid.any():
        raise ValueError("encode_history: input contains only padding")
    if training and dropout > 0 and rng is None:
        raise ValueError("dropout in training mode needs an rng")

    h_heads = p.n_heads
    dh = d // h_heads
    allowed = np.tril(np.ones((n, n), bool))[None] & valid[:, None, :]
    blocked = ~allowed[:, None]  # (B, 1, n, n)
    pad_query = ~valid[:, None, :, None]
    scale = 1.0 / np.sqrt(dh)

    def split(t):
        return t.reshape((B, n, h_heads, dh)).transpose(0, 2, 1, 3)

    attn_maps = []
    for layer in p.layers:
        y = ad.layer_norm(X, layer.ln1_scale, layer.ln1_shift)
        q, k, v = split(y @ layer.wq), split(y @ layer.wk), split(y @ layer.wv)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = ad.softmax(ad.masked_fill(scores, blocked, MASK_FILL))
        attn = ad.masked_fill(attn, pad_query, 0.0)
        attn_maps.append(attn.data)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape((B, n, d))
        X = X + ad.dropout(ctx @ layer.wo, dropout, rng, training)
        y = ad.layer_norm(X, layer.ln2_scale, layer.ln2_shift)
        ff = ad.gelu(y @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
        X = X + ad.dropout(ff, dropout, rng, training)
    hidden = ad.layer_norm(X, p.final_scale, p.final_shift)

    attention = np.stack(attn_maps, axis=1) if attn_maps else np.zeros((B, 0, h_heads, n, n))
    if unbatched:
        return EncoderOutput(hidden.reshape((n, d)), attention[0])
    return EncoderOutput(hidden, attention)


def mean_attention(attention: np.ndarray) -> np.ndarray:
    """Average an (L, h, n, n) attention tensor over layers and heads."""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.shape[0] == 0:
        n = attention.shape[-1]
        return np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
    return attention.mean(axis=(0, 1))


def attention_recency(attention, times, bucket_width: float = 7.0) -> list[tuple[float, float]]:
    """Mean attention weight as a function of lag t_query - t_key.

    ``attention`` is (L, h, n, n) (averaged over layers and heads) or an
    already averaged (n, n) matrix. Lags are bucketed into
    ``[m * width, (m + 1) * width)`` and reported by their lower edge.
    """
    if bucket_width <= 0:
        raise ValueError("bucket_width must be positive")
    A = np.asarray(attention, dtype=np.float64)
    if A.ndim == 4:
        A = mean_attention(A)
    times = np.asarray(times, dtype=np.float64)
    n = times.size
    qi, kj = np.tril_indices(n)
    lags = times[qi] - times[kj]
    buckets = np.floor(lags / bucket_width + 1e-12).astype(np.int64)
    weights = A[qi, kj]
    out = []
    for b in np.unique(buckets):
        sel = buckets == b
        out.append((float(b * bucket_width), float(weights[sel].mean())))
    return out
