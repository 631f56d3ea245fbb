"""Inference: global ASR decoding, autoregressive ST decoding, ST rescoring, n-gram LM.

All searches run on float64 copies of the network outputs and break score
ties lexicographically on token ids, so results are deterministic.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import VocabSpec
from .ctc import BLANK, CTCPrefixScorer, NBestEntry, ctc_prefix_beam
from .model import EOS, SOS, Model, ctc_log_probs, decoder_log_probs, forward
from .numerics import NEG

SPECIAL_IDS = (0, 1, 2, 3, 4, 5)  # blank, <man>, <eng>, <sos>, <eos>, <unk>
ST_TAPS = {"man2en": "en", "en2man": "man"}


# -- n-gram language model ----------------------------------------------------------------------
@dataclass
class NGramLM:
    """Add-k smoothed n-gram counts with stupid backoff.

    ``vocab`` lists the predictable token ids (language tokens, ``<eos>`` and
    ``<unk>``).  For a context seen ``c(h) > 0`` times as a history,
    ``p(w | h) = (c(h w) + k) / (c(h) + k |vocab|)``; an unseen history backs
    off to its suffix with a factor ``backoff`` per step.
    """

    order: int
    vocab: tuple[int, ...]
    k: float = 0.1
    backoff: float = 0.4
    unk: int = 5
    counts: Counter = field(default_factory=Counter)
    history: Counter = field(default_factory=Counter)

    def _map(self, t: int) -> int:
        return t if t in self._vocab_set else self.unk

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        self._vocab_set = frozenset(self.vocab)

    def score(self, context: Sequence[int], token: int) -> float:
        """Natural-log conditional probability of ``token`` after ``context``."""
        ctx = tuple(self._map(t) if t != SOS else t for t in context)[-(self.order - 1):] \
            if self.order > 1 else ()
        w = self._map(token)
        penalty = 0.0
        while True:
            c_h = self.history.get(ctx, 0)
            if c_h > 0 or not ctx:
                num = self.counts.get(ctx + (w,), 0) + self.k
                return penalty + math.log(num / (c_h + self.k * len(self.vocab)))
            ctx = ctx[1:]
            penalty += math.log(self.backoff)

    def sentence_logp(self, tokens: Sequence[int]) -> float:
        seq = (SOS,) + tuple(tokens)
        return math.fsum(self.score(seq[:i + 1], t) for i, t in enumerate(tuple(tokens) + (EOS,)))

    def perplexity(self, sentences: Iterable[Sequence[int]]) -> float:
        total, n = 0.0, 0
        for s in sentences:
            total += self.sentence_logp(s)
            n += len(s) + 1
        return math.exp(-total / n)


def ngram_train(sentences: Iterable[Sequence[int]], vocab: Sequence[int], order: int = 4,
                k: float = 0.1, backoff: float = 0.4, unk: int = 5) -> NGramLM:
    """Count every n-gram (n <= order) of ``<sos> sentence <eos>``.

    History counts are the number of times a context is followed by a token,
    so each seen context's distribution sums to one.
    """
    lm = NGramLM(order, tuple(vocab), k, backoff, unk)
    for s in sentences:
        seq = (SOS,) + tuple(lm._map(t) for t in s) + (EOS,)
        for i in range(1, len(seq)):
            for n in range(0, order):
                if i - n < 0:
                    break
                h = seq[i - n:i]
                lm.counts[h + (seq[i],)] += 1
                lm.history[h] += 1
    return lm


def ngram_score(lm: NGramLM, context: Sequence[int], token: int) -> float:
    return lm.score(context, token)


class LMScorer:
    """Shallow-fusion adapter: scores hypotheses as ``<sos> prefix``."""

    field = "lm"

    def __init__(self, lm: NGramLM):
        self.lm = lm

    def score(self, prefix: tuple[int, ...], token: int) -> float:
        return self.lm.score((SOS,) + prefix, token)

    def final(self, prefix: tuple[int, ...]) -> float:
        return self.lm.score((SOS,) + prefix, EOS)


# -- parameters -----------------------------------------------------------------------------------
@dataclass(frozen=True)
class DecodeParams:
    beam: int = 10
    gamma_lm: float = 0.3
    gamma_st: float = 0.3
    st_direction: str = "none"

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.gamma_lm < 0 or self.gamma_st < 0:
            raise ValueError("fusion weights must be >= 0")
        if self.st_direction not in ("none", "man2en", "en2man"):
            raise ValueError(f"unknown ST direction {self.st_direction!r}")


def _encode(model: Model, x):
    feats = x.features if hasattr(x, "features") else x
    with nx.no_grad():
        return forward(model, np.asarray(feats, dtype=model.dtype)[None])


def _allowed_mask(v: int) -> np.ndarray:
    """Tokens a transcript may contain: everything except the specials."""
    ok = np.ones(v, dtype=bool)
    ok[list(SPECIAL_IDS)] = False
    return ok


def asr_lattice(model: Model, x, state=None) -> np.ndarray:
    """Global CTC log-probabilities ``[T', V]`` with non-blank specials masked to NEG."""
    state = state or _encode(model, x)
    with nx.no_grad():
        lp = ctc_log_probs(state.h_global_asr, model.params["ctc"]).data[0].astype(np.float64)
    keep = _allowed_mask(lp.shape[1])
    keep[BLANK] = True
    lp[:, ~keep] = NEG
    return lp


# -- ASR -------------------------------------------------------------------------------------------
def decode_asr(model: Model, x, params: DecodeParams = DecodeParams(), lm: NGramLM | None = None,
               state=None) -> list[NBestEntry]:
    """N-best list from the global decoder only."""
    state = state or _encode(model, x)
    lattice = asr_lattice(model, x, state)
    scorers = [(LMScorer(lm), params.gamma_lm)] if lm is not None and params.gamma_lm > 0 else []
    if not model.cfg.is_aed:
        return ctc_prefix_beam(lattice, params.beam, scorers)
    return _joint_aed_beam(model, state, lattice, params, lm)


def _decoder_step(model: Model, dec: dict, memory, prefixes: list[tuple[int, ...]]) -> np.ndarray:
    """Next-token log-probs ``[n, V]`` (float64) for equal-length prefixes."""
    ys_in = np.array([(SOS,) + p for p in prefixes], dtype=int)
    with nx.no_grad():
        lp = decoder_log_probs(dec, memory, None, ys_in, model.cfg)
    return lp.data[:, -1, :].astype(np.float64)


def _joint_aed_beam(model: Model, state, lattice: np.ndarray, params: DecodeParams,
                    lm: NGramLM | None) -> list[NBestEntry]:
    """Attention beam search with CTC prefix scores mixed in by ``lambda_ctc``."""
    lam = model.cfg.lambda_ctc
    ctc = CTCPrefixScorer(lattice)
    use_lm = lm is not None and params.gamma_lm > 0
    allowed = np.flatnonzero(_allowed_mask(lattice.shape[1]))
    max_len = lattice.shape[0]
    # hypothesis -> (attention log-prob, lm log-prob)
    live: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, 0.0)}
    ended: list[NBestEntry] = []

    def acoustic(att: float, ctc_score: float) -> float:
        return (1.0 - lam) * att + lam * ctc_score

    for _ in range(max_len + 1):
        prefixes = sorted(live)
        step = _decoder_step(model, model.params["att"], state.h_global_asr, prefixes)
        cands = []
        for row, g in zip(step, prefixes):
            att_g, lm_g = live[g]
            lm_eos = lm.score((SOS,) + g, EOS) if use_lm else 0.0
            ac = acoustic(att_g + row[EOS], ctc.full_logp(g))
            cands.append((ac + params.gamma_lm * (lm_g + lm_eos), g, EOS, att_g + row[EOS], lm_g + lm_eos))
            if len(g) >= max_len:
                continue
            for c in allowed:
                c = int(c)
                h = g + (c,)
                lm_h = lm_g + (lm.score((SOS,) + g, c) if use_lm else 0.0)
                ac = acoustic(att_g + row[c], ctc.prefix_logp(h))
                cands.append((ac + params.gamma_lm * lm_h, h, None, att_g + row[c], lm_h))
        cands.sort(key=lambda e: (-e[0], e[1], e[2] is None))
        live = {}
        for total, h, end, att, lm_s in cands[:params.beam]:
            if end == EOS:
                ended.append(NBestEntry(h, acoustic(att, ctc.full_logp(h)), lm_logp=lm_s,
                                        gamma_lm=params.gamma_lm if use_lm else 0.0))
            else:
                live[h] = (att, lm_s)
        if not live:
            break
    if not ended:
        ended = [NBestEntry(h, acoustic(a, ctc.full_logp(h)), lm_logp=s,
                            gamma_lm=params.gamma_lm if use_lm else 0.0) for h, (a, s) in live.items()]
    ended.sort(key=lambda e: (-e.total, e.tokens))
    return ended[:params.beam]


# -- ST ------------------------------------------------------------------------------------------------
def _st_memory(model: Model, state, direction: str):
    if not model.cfg.has_st:
        raise ValueError(f"{model.cfg.variant} has no ST decoders")
    if direction not in ST_TAPS:
        raise ValueError(f"invalid ST direction {direction!r}; expected man2en or en2man")
    return model.params["st"][direction], state.branches[ST_TAPS[direction]].h_st


def decode_st(model: Model, x, direction: str, beam: int = 10, state=None) -> tuple[int, ...]:
    """Beam search from ``<sos>`` to ``<eos>`` with length-normalised scores.

    The search ends once ``beam`` hypotheses have emitted ``<eos>`` or after
    ``2 T' + 5`` steps; if nothing finished, the best unfinished hypothesis is
    returned.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    state = state or _encode(model, x)
    dec, memory = _st_memory(model, state, direction)
    max_len = 2 * int(state.lengths[0]) + 5
    allowed = np.flatnonzero(_allowed_mask(model.cfg.vocab_size))
    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    ended: list[tuple[float, tuple[int, ...]]] = []

    def norm(score: float, n: int) -> float:
        return score / n

    for _ in range(max_len):
        step = _decoder_step(model, dec, memory, [g for _, g in live])
        cands = []
        for (s, g), row in zip(live, step):
            cands.append((norm(s + row[EOS], len(g) + 1), s + row[EOS], g, True))
            for c in allowed:
                cands.append((norm(s + row[c], len(g) + 1), s + row[c], g + (int(c),), False))
        cands.sort(key=lambda e: (-e[0], e[2], e[3]))
        live = []
        for ns, s, g, done in cands[:beam]:
            if done:
                ended.append((ns, g))
            else:
                live.append((s, g))
        if not live or len(ended) >= beam:
            break
    if ended:
        ended.sort(key=lambda e: (-e[0], e[1]))
        return ended[0][1]
    live.sort(key=lambda e: (-norm(e[0], len(e[1])), e[1]))
    return live[0][1]


def st_sequence_logp(model: Model, state, direction: str, hyps: Sequence[Sequence[int]]) -> list[float]:
    """Teacher-forced log-probability of each hypothesis including ``<eos>``."""
    dec, memory = _st_memory(model, state, direction)
    if not hyps:
        return []
    lens = [len(h) + 1 for h in hyps]
    l_max = max(lens)
    ys_in = np.full((len(hyps), l_max), EOS, dtype=int)
    ys_out = np.full((len(hyps), l_max), EOS, dtype=int)
    for i, h in enumerate(hyps):
        ys_in[i, 0] = SOS
        ys_in[i, 1:len(h) + 1] = h
        ys_out[i, :len(h)] = h
    with nx.no_grad():
        lp = decoder_log_probs(dec, memory, None, ys_in, model.cfg, np.array(lens)).data.astype(np.float64)
    out = []
    for i, n in enumerate(lens):
        out.append(math.fsum(lp[i, j, ys_out[i, j]] for j in range(n)))
    return out


def rescore_with_st(nbest: Sequence[NBestEntry], model: Model, x, direction: str, gamma_st: float,
                    vocab=None, state=None) -> list[NBestEntry]:
    """Attach teacher-forced ST scores and re-rank (stable) by the fused total.

    Entries holding tokens outside the direction's target language are still
    scored, and flagged ``source-language``.
    """
    if gamma_st < 0:
        raise ValueError("gamma_st must be >= 0")
    vocab = vocab or VocabSpec()
    state = state or _encode(model, x)
    scores = st_sequence_logp(model, state, direction, [e.tokens for e in nbest])
    target_lang = "MAN" if direction == "en2man" else "EN"
    out = []
    for e, s in zip(nbest, scores):
        flags = e.flags
        if any(vocab.lang(t) not in (target_lang, None) for t in e.tokens):
            flags = tuple(flags) + ("source-language",)
        out.append(replace(e, rescore_logp=s, gamma_st=gamma_st, flags=flags))
    out.sort(key=lambda e: -e.total)
    return out


# -- n-best files -------------------------------------------------------------------------------------
def format_nbest(utt_id: str, entries: Sequence[NBestEntry]) -> list[str]:
    """``utt_id rank total ctc lm st tokens...`` with floats in repr form."""
    lines = []
    for rank, e in enumerate(entries, 1):
        toks = " ".join(str(t) for t in e.tokens)
        line = f"{utt_id} {rank} {e.total!r} {e.ctc_logp!r} {e.lm_logp!r} {e.rescore_logp!r}"
        lines.append(line + (" " + toks if toks else ""))
    return lines


def parse_nbest(lines: Iterable[str]) -> list[dict]:
    out = []
    for ln in lines:
        parts = ln.split()
        if not parts:
            continue
        out.append({"utt_id": parts[0], "rank": int(parts[1]), "total": float(parts[2]),
                    "ctc": float(parts[3]), "lm": float(parts[4]), "st": float(parts[5]),
                    "tokens": tuple(int(t) for t in parts[6:])})
    return out
