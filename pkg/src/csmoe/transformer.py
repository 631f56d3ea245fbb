"""Transformer pieces shared by every encoder and decoder stack.

Parameters are nested dicts of :class:`~csmoe.numerics.Tensor`.  All block
functions accept ``[T, D]`` or batched ``[B, T, D]`` inputs; masks are boolean
arrays where True means *may attend*.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import NEG, Tensor


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_ff <= 0:
            raise ValueError("block dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class Dropout:
    """Dropout masks drawn from per-site named streams.

    Keying each site by ``(seed, step, site)`` means computing an extra branch
    never shifts the masks used anywhere else.
    """

    def __init__(self, p: float, seed: int, step: int):
        self.p, self.seed, self.step = p, seed, step

    def __call__(self, x: Tensor, site: str) -> Tensor:
        if self.p <= 0.0:
            return x
        return nx.dropout(x, self.p, nx.rng_stream(self.seed, "dropout", self.step, site))


def _drop(x: Tensor, drop: Dropout | None, site: str) -> Tensor:
    return x if drop is None else drop(x, site)


# -- masks -------------------------------------------------------------------
def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """``[B, 1, max_len]`` key mask blocking frames beyond each length."""
    lengths = np.asarray(lengths)
    return (np.arange(max_len)[None, :] < lengths[:, None])[:, None, :]


# -- initialisation ------------------------------------------------------------
def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)


def zeros(*shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(*shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_linear(rng, d_in: int, d_out: int, dtype=np.float64) -> dict:
    return {"w": xavier(rng, d_in, d_out, dtype), "b": zeros(d_out, dtype=dtype)}


def init_norm(d: int, dtype=np.float64) -> dict:
    return {"g": ones(d, dtype=dtype), "b": zeros(d, dtype=dtype)}


def init_attention(rng, d: int, dtype=np.float64) -> dict:
    return {k: init_linear(rng, d, d, dtype) for k in ("q", "k", "v", "o")}


def init_ffn(rng, d: int, d_ff: int, dtype=np.float64) -> dict:
    return {"w1": xavier(rng, d, d_ff, dtype), "b1": zeros(d_ff, dtype=dtype),
            "w2": xavier(rng, d_ff, d, dtype), "b2": zeros(d, dtype=dtype)}


def init_encoder_block(rng, cfg: BlockConfig, dtype=np.float64) -> dict:
    return {"ln1": init_norm(cfg.d_model, dtype),
            "attn": init_attention(rng, cfg.d_model, dtype),
            "ffn": init_ffn(rng, cfg.d_model, cfg.d_ff, dtype),
            "ln2": init_norm(cfg.d_model, dtype)}


def init_decoder_block(rng, cfg: BlockConfig, dtype=np.float64) -> dict:
    return {"ln1": init_norm(cfg.d_model, dtype),
            "self_attn": init_attention(rng, cfg.d_model, dtype),
            "ln2": init_norm(cfg.d_model, dtype),
            "cross_attn": init_attention(rng, cfg.d_model, dtype),
            "ffn": init_ffn(rng, cfg.d_model, cfg.d_ff, dtype),
            "ln3": init_norm(cfg.d_model, dtype)}


def init_subsample(rng, n_feats: int, d_model: int, dtype=np.float64) -> dict:
    return {"conv1": init_linear(rng, 2 * n_feats, d_model, dtype),
            "conv2": init_linear(rng, 2 * d_model, d_model, dtype)}


# -- primitives ----------------------------------------------------------------
def linear(x: Tensor, p: dict) -> Tensor:
    return x @ p["w"] + p["b"]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return nx.layer_norm(x, gain, bias, eps)


def _norm(x: Tensor, p: dict) -> Tensor:
    return nx.layer_norm(x, p["g"], p["b"])


def mhsa(q: Tensor, k: Tensor, v: Tensor, params: dict, cfg: BlockConfig,
         mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention with input/output projections.

    ``q`` is ``[.., Tq, D]``; ``k`` and ``v`` are ``[.., Tk, D]``.  ``mask`` is
    broadcastable to ``[B, Tq, Tk]``.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    _, tq, d = q.shape
    tk = k.shape[1]
    h = cfg.n_heads
    dh = d // h
    if mask is not None:
        if not np.broadcast_to(mask, (max(q.shape[0], k.shape[0]), tq, tk)).any(axis=-1).all():
            raise ValueError("fully masked query")

    def heads(x: Tensor) -> Tensor:
        # batch sizes may differ (1 vs B) and broadcast in the products below
        return nx.transpose(x.reshape(x.shape[0], x.shape[1], h, dh), (0, 2, 1, 3))

    qh = heads(linear(q, params["q"]))
    kh = heads(linear(k, params["k"]))
    vh = heads(linear(v, params["v"]))
    scores = (qh @ nx.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        blocked = ~(mask if mask.ndim == 3 else mask[None])
        scores = nx.masked_fill(scores, blocked[:, None, :, :], NEG)
    weights = nx.softmax(scores, axis=-1)
    mixed = weights @ vh
    ctx = nx.transpose(mixed, (0, 2, 1, 3)).reshape(mixed.shape[0], tq, d)
    out = linear(ctx, params["o"])
    return out.reshape(tq, d) if squeeze else out


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return nx.relu(x @ w1 + b1) @ w2 + b2


def _ffn(x: Tensor, p: dict) -> Tensor:
    return ffn(x, p["w1"], p["b1"], p["w2"], p["b2"])


def attention_sublayer(x: Tensor, ln: dict, attn: dict, cfg: BlockConfig,
                       mask=None, drop: Dropout | None = None, site: str = "") -> Tensor:
    """``x + MHSA(LNorm(x))``."""
    hx = _norm(x, ln)
    return x + _drop(mhsa(hx, hx, hx, attn, cfg, mask), drop, site + ".attn")


def ffn_sublayer(a: Tensor, ffn_p: dict, ln: dict, drop: Dropout | None = None,
                 site: str = "") -> Tensor:
    """``LNorm(a + FFN(a))``."""
    return _norm(a + _drop(_ffn(a, ffn_p), drop, site + ".ffn"), ln)


def encoder_block(x: Tensor, params: dict, cfg: BlockConfig, mask=None,
                  drop: Dropout | None = None, site: str = "enc") -> Tensor:
    a = attention_sublayer(x, params["ln1"], params["attn"], cfg, mask, drop, site)
    return ffn_sublayer(a, params["ffn"], params["ln2"], drop, site)


def decoder_block(y: Tensor, memory: Tensor, params: dict, cfg: BlockConfig,
                  self_mask=None, memory_mask=None, drop: Dropout | None = None,
                  site: str = "dec") -> Tensor:
    """Causal self-attention, cross-attention over ``memory``, then FFN."""
    if self_mask is None:
        self_mask = causal_mask(y.shape[-2])
    a = attention_sublayer(y, params["ln1"], params["self_attn"], cfg, self_mask, drop, site)
    ha = _norm(a, params["ln2"])
    c = a + _drop(mhsa(ha, memory, memory, params["cross_attn"], cfg, memory_mask),
                  drop, site + ".cross")
    return ffn_sublayer(c, params["ffn"], params["ln3"], drop, site)


# -- front end -------------------------------------------------------------------
def sinusoid_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def _pairwise(x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    b, t, f = x.shape
    if t % 2:
        x = nx.concat([x, Tensor(np.zeros((b, 1, f), dtype=x.dtype))], axis=1)
        t += 1
    return x.reshape(b, t // 2, 2 * f), (lengths + 1) // 2


def subsample(x: Tensor, params: dict, lengths=None) -> tuple[Tensor, np.ndarray]:
    """Two stride-2 windowed linear+ReLU stages, then sinusoidal positions.

    Returns ``(h, out_lengths)`` with ``out_len = ceil(ceil(T/2)/2)``.
    Frames past each length are zeroed between stages so batched and
    unbatched inputs see identical windows.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    lengths = np.full(x.shape[0], x.shape[1]) if lengths is None else np.asarray(lengths)
    if lengths.min() < 4:
        raise ValueError("utterance too short")
    h, l1 = _pairwise(x, lengths)
    h = nx.relu(linear(h, params["conv1"]))
    keep = (np.arange(h.shape[1])[None, :] < l1[:, None])[..., None]
    if not keep.all():
        h = h * Tensor(keep.astype(h.dtype))
    h, l2 = _pairwise(h, l1)
    h = nx.relu(linear(h, params["conv2"]))
    d = h.shape[-1]
    h = h + Tensor(sinusoid_table(h.shape[1], d).astype(h.dtype))
    if squeeze:
        h = h.reshape(h.shape[1], d)
    return h, l2
