"""Task-routed FFN mixture of experts.

Each block shares one attention stream between two feed-forward experts, one
for recognition and one for translation.  Routing is fixed by task; there is
no gate network.
"""

from __future__ import annotations

import numpy as np

from .numerics import Tensor
from .transformer import (BlockConfig, Dropout, attention_sublayer, ffn_sublayer,
                          init_attention, init_ffn, init_norm)


def init_moe_block(rng: np.random.Generator, cfg: BlockConfig, with_st: bool = True,
                   dtype=np.float64) -> dict:
    """Attention plus an ``experts`` dict; the ST expert is omitted when ``with_st`` is False."""
    d = cfg.d_model
    # draw order matches init_encoder_block so the ASR view of a MoE block equals
    # a plain block initialised from the same stream
    attn = init_attention(rng, d, dtype)
    experts = {"asr": {"ffn": init_ffn(rng, d, cfg.d_ff, dtype), "ln2": init_norm(d, dtype)}}
    if with_st:
        experts["st"] = {"ffn": init_ffn(rng, d, cfg.d_ff, dtype), "ln2": init_norm(d, dtype)}
    return {"ln1": init_norm(d, dtype), "attn": attn, "experts": experts}


def expert_view(params: dict, task: str = "asr") -> dict:
    """The plain encoder block obtained by routing through one expert."""
    return {"ln1": params["ln1"], "attn": params["attn"], **params["experts"][task]}


def moe_block_forward(h: Tensor, params: dict, cfg: BlockConfig, mask=None,
                      drop: Dropout | None = None, site: str = "moe",
                      tap_st: bool = True) -> tuple[Tensor, Tensor | None]:
    """Return ``(h_asr, h_st)``; the attention stream is computed once."""
    a = attention_sublayer(h, params["ln1"], params["attn"], cfg, mask, drop, site)
    asr = params["experts"]["asr"]
    h_asr = ffn_sublayer(a, asr["ffn"], asr["ln2"], drop, site + ".asr")
    h_st = None
    if tap_st:
        st = params["experts"]["st"]
        h_st = ffn_sublayer(a, st["ffn"], st["ln2"], drop, site + ".st")
    return h_asr, h_st


def moe_attention_stream(h: Tensor, params: dict, cfg: BlockConfig, mask=None) -> Tensor:
    """The shared hybrid ASR-ST representation ``h + MHSA(LNorm(h))``."""
    return attention_sublayer(h, params["ln1"], params["attn"], cfg, mask)


def stack_moe_blocks(h_share: Tensor, blocks: list[dict], cfg: BlockConfig, mask=None,
                     drop: Dropout | None = None, site: str = "moe",
                     return_stream: bool = False):
    """Chain ASR experts through every block and tap ST at the final block.

    Returns ``(h0_asr, h_st)``, prefixed by the final block's shared attention
    stream when ``return_stream`` is set.
    """
    if not blocks:
        raise ValueError("configuration error: an ST-bearing variant needs at least one MoE block")
    h = h_share
    for i, blk in enumerate(blocks[:-1]):
        h, _ = moe_block_forward(h, blk, cfg, mask, drop, f"{site}.{i}", tap_st=False)
    last = blocks[-1]
    site = f"{site}.{len(blocks) - 1}"
    a = attention_sublayer(h, last["ln1"], last["attn"], cfg, mask, drop, site)
    asr, st = last["experts"]["asr"], last["experts"]["st"]
    h0_asr = ffn_sublayer(a, asr["ffn"], asr["ln2"], drop, site + ".asr")
    h_st = ffn_sublayer(a, st["ffn"], st["ln2"], drop, site + ".st")
    return (a, h0_asr, h_st) if return_stream else (h0_asr, h_st)
