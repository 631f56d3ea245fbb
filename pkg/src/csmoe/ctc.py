"""Connectionist temporal classification: loss, oracle, greedy and beam decoding.

The loss runs the forward recursion over the blank-interleaved state graph in
log space using differentiable tensor ops, so gradients come from reverse
mode rather than a hand-written backward pass.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .numerics import NEG, Tensor, logaddexp

BLANK = 0


def collapse(path: Sequence[int], blank: int = BLANK) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for z in path:
        if z != prev and z != blank:
            out.append(int(z))
        prev = z
    return tuple(out)


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target`` (repeats need a blank between)."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _lattice_array(lattice) -> np.ndarray:
    return lattice.data if isinstance(lattice, Tensor) else np.asarray(lattice, dtype=np.float64)


# -- loss ----------------------------------------------------------------------------
def ctc_loss_batch(log_probs: Tensor, lengths, targets: Sequence[Sequence[int]],
                   blank: int = BLANK) -> tuple[Tensor, np.ndarray]:
    """Per-utterance CTC negative log-likelihoods.

    ``log_probs`` is ``[B, T, V]`` of per-frame log distributions.  A single
    target with its length is broadcast across all B lattices.  Returns
    ``(losses[B], reachable[B])``; unreachable targets contribute a constant 0
    to ``losses`` and are reported through ``reachable``.
    """
    b, t_max, _ = log_probs.shape
    lengths = np.asarray(lengths, dtype=int)
    if len(targets) == 1 and b > 1:
        # one utterance scored under b stacked lattices
        targets = list(targets) * b
        lengths = np.repeat(lengths, b)
    u = np.array([len(y) for y in targets], dtype=int)
    s_len = 2 * u + 1
    s_max = int(s_len.max())
    ext = np.full((b, s_max), blank, dtype=int)
    for i, y in enumerate(targets):
        if len(y):
            if blank in y:
                raise ValueError("target contains the blank symbol")
            ext[i, 1:2 * len(y):2] = y
    reachable = np.array([min_frames(y) <= lengths[i] for i, y in enumerate(targets)])

    s_idx = np.arange(s_max)
    prev2 = np.zeros((b, s_max), dtype=bool)
    prev2[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    # predecessor k of state s is s - k; blocked moves get a NEG additive mask
    src = np.maximum(s_idx[None, :] - np.arange(3)[:, None], 0)
    allowed = np.stack([np.ones((b, s_max), bool),
                        np.broadcast_to(s_idx >= 1, (b, s_max)),
                        prev2], axis=1)
    block = Tensor(np.where(allowed, 0.0, NEG).astype(log_probs.dtype))

    bi = np.arange(b)[:, None, None]
    ti = np.arange(t_max)[None, :, None]
    emit = nx.transpose(log_probs[bi, ti, ext[:, None, :]], (1, 0, 2))  # [T, B, S]

    init = (s_idx[None, :] == 0) | ((s_idx[None, :] == 1) & (u[:, None] >= 1))
    alpha = nx.masked_fill(emit[0], ~init, NEG)
    for t in range(1, t_max):
        cand = alpha[:, src] + block  # [B, 3, S]
        new = nx.logsumexp_t(cand, axis=1) + emit[t]
        live = t < lengths
        alpha = new if live.all() else nx.where(live[:, None], new, alpha)

    last = s_len - 1
    ends = alpha[np.arange(b)[:, None], np.stack([last, np.maximum(last - 1, 0)], axis=1)]
    ends = ends + Tensor(np.where(np.stack([np.ones(b, bool), u >= 1], axis=1), 0.0, NEG)
                         .astype(log_probs.dtype))
    nll = -nx.logsumexp_t(ends, axis=1)
    if not reachable.all():
        nll = nx.where(reachable, nll, Tensor(np.zeros(b, dtype=log_probs.dtype)))
    return nll, reachable


def ctc_loss(lattice, target: Sequence[int], blank: int = BLANK) -> Tensor:
    """Negative log-likelihood of ``target`` under a ``[T, V]`` log-prob lattice.

    An unreachable target (too long for T) yields a constant ``inf`` tensor.
    """
    lp = lattice if isinstance(lattice, Tensor) else Tensor(np.asarray(lattice, dtype=np.float64))
    if min_frames(target) > lp.shape[0]:
        return Tensor(np.array(math.inf))
    nll, _ = ctc_loss_batch(lp.reshape(1, *lp.shape), [lp.shape[0]], [list(target)], blank)
    return nll.reshape(())


# -- enumeration oracle --------------------------------------------------------------------
MAX_PATHS = 10**7


def ctc_label_posteriors(lattice, blank: int = BLANK) -> dict[tuple[int, ...], float]:
    """P(label sequence | X) for every label sequence, by enumerating all paths."""
    lp = _lattice_array(lattice)
    t, v = lp.shape
    if v ** t > MAX_PATHS:
        raise ValueError(f"instance too large for enumeration ({v}^{t} paths)")
    buckets: dict[tuple[int, ...], list[float]] = defaultdict(list)
    for path in itertools.product(range(v), repeat=t):
        buckets[collapse(path, blank)].append(math.exp(math.fsum(lp[i, z] for i, z in enumerate(path))))
    return {k: math.fsum(ps) for k, ps in buckets.items()}


def ctc_brute_force(lattice, target: Sequence[int], blank: int = BLANK) -> float:
    """-log sum over every length-T path that collapses to ``target``."""
    lp = _lattice_array(lattice)
    t, v = lp.shape
    if v ** t > MAX_PATHS:
        raise ValueError(f"instance too large for enumeration ({v}^{t} paths)")
    target = tuple(target)
    if min_frames(target) > t:
        return math.inf
    probs = [math.exp(math.fsum(lp[i, z] for i, z in enumerate(path)))
             for path in itertools.product(range(v), repeat=t)
             if collapse(path, blank) == target]
    total = math.fsum(probs)
    return math.inf if total == 0.0 else -math.log(total)


# -- decoding ---------------------------------------------------------------------------------
def ctc_greedy(lattice, blank: int = BLANK, length: int | None = None) -> tuple[int, ...]:
    lp = _lattice_array(lattice)
    if length is not None:
        lp = lp[:length]
    return collapse(np.argmax(lp, axis=-1).tolist(), blank)


class FusionScorer(Protocol):
    field: str

    def score(self, prefix: tuple[int, ...], token: int) -> float: ...

    def final(self, prefix: tuple[int, ...]) -> float: ...


@dataclass
class NBestEntry:
    """A hypothesis with its score decomposition.

    ``total`` is always ``ctc_logp + gamma_lm * lm_logp + gamma_st * rescore_logp``.
    For attention decoders ``ctc_logp`` holds the combined acoustic score.
    """

    tokens: tuple[int, ...]
    ctc_logp: float
    lm_logp: float = 0.0
    rescore_logp: float = 0.0
    gamma_lm: float = 0.0
    gamma_st: float = 0.0
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def total(self) -> float:
        return self.ctc_logp + self.gamma_lm * self.lm_logp + self.gamma_st * self.rescore_logp


def _rank_key(score: float, tokens: tuple[int, ...]):
    return (-score, tokens)


def ctc_prefix_beam(lattice, beam: int | None = 10,
                    scorers: Sequence[tuple[FusionScorer, float]] = (),
                    blank: int = BLANK, length: int | None = None) -> list[NBestEntry]:
    """Prefix beam search keeping (blank, non-blank) log-probs per prefix.

    ``beam=None`` never prunes.  Fusion scorers add ``weight * score`` each
    time a prefix is extended, and ``weight * final`` at the end.
    """
    if beam is not None and beam < 1:
        raise ValueError("beam must be >= 1")
    lp = _lattice_array(lattice).astype(np.float64)
    if length is not None:
        lp = lp[:length]
    t_len, v = lp.shape
    tokens = [c for c in range(v) if c != blank]

    # per-prefix accumulated fusion scores, keyed by scorer field
    fused: dict[tuple[int, ...], dict[str, float]] = {(): defaultdict(float)}
    weights = defaultdict(float)
    for s, w in scorers:
        weights[s.field] += w

    def fusion_of(prefix):
        return sum(weights[f] * val for f, val in fused[prefix].items())

    def extend(prefix, c):
        new = prefix + (c,)
        if new not in fused:
            acc = defaultdict(float, fused[prefix])
            for s, _ in scorers:
                acc[s.field] += s.score(prefix, c)
            fused[new] = acc
        return new

    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG)}
    for t in range(t_len):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG, NEG])
        for prefix, (pb, pnb) in beams.items():
            ptot = logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = logaddexp(cell[0], ptot + row[blank])
            last = prefix[-1] if prefix else None
            for c in tokens:
                p = row[c]
                if p <= NEG / 2:
                    # a masked token contributes exp(NEG) = 0 to every path
                    continue
                new = extend(prefix, c)
                if c == last:
                    cell[1] = logaddexp(cell[1], pnb + p)
                    ncell = nxt[new]
                    ncell[1] = logaddexp(ncell[1], pb + p)
                else:
                    ncell = nxt[new]
                    ncell[1] = logaddexp(ncell[1], ptot + p)
        ranked = sorted(nxt.items(),
                        key=lambda kv: _rank_key(logaddexp(*kv[1]) + fusion_of(kv[0]), kv[0]))
        if beam is not None:
            ranked = ranked[:beam]
        beams = {k: (val[0], val[1]) for k, val in ranked}

    out = []
    for prefix, (pb, pnb) in beams.items():
        if logaddexp(pb, pnb) <= NEG / 2:
            continue  # no alignment reaches this prefix (e.g. repeats without room for a blank)
        acc = defaultdict(float, fused[prefix])
        for s, _ in scorers:
            acc[s.field] += s.final(prefix)
        out.append(NBestEntry(prefix, logaddexp(pb, pnb), lm_logp=acc.get("lm", 0.0),
                              rescore_logp=acc.get("st", 0.0),
                              gamma_lm=weights.get("lm", 0.0), gamma_st=weights.get("st", 0.0)))
    out.sort(key=lambda e: _rank_key(e.total, e.tokens))
    return out if beam is None else out[:beam]


class CTCPrefixScorer:
    """Prefix probabilities under a CTC lattice for attention-decoder fusion.

    ``prefix_logp(g)`` is the log-probability that the label sequence starts
    with ``g``; ``full_logp(g)`` is the probability that it equals ``g``.
    Forward variables are cached per prefix.
    """

    def __init__(self, lattice, blank: int = BLANK, length: int | None = None):
        lp = _lattice_array(lattice).astype(np.float64)
        self.lp = lp[:length] if length is not None else lp
        self.blank = blank
        t_len = self.lp.shape[0]
        r_b = np.cumsum(self.lp[:, blank])
        self._fwd: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {
            (): (np.full(t_len, NEG), r_b)}
        self._psi: dict[tuple[int, ...], float] = {(): 0.0}

    def _extend(self, prefix: tuple[int, ...], c: int) -> None:
        g = prefix
        if g not in self._fwd:
            self._extend(g[:-1], g[-1])
        r_n_g, r_b_g = self._fwd[g]
        lp, t_len = self.lp, self.lp.shape[0]
        last = g[-1] if g else None
        phi = np.logaddexp(r_b_g, r_n_g) if c != last else r_b_g.copy()
        r_n = np.full(t_len, NEG)
        r_b = np.full(t_len, NEG)
        r_n[0] = lp[0, c] if not g else NEG
        psi = r_n[0]
        for t in range(1, t_len):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + lp[t, c]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + lp[t, self.blank]
            psi = np.logaddexp(psi, phi[t - 1] + lp[t, c])
        h = g + (c,)
        self._fwd[h] = (np.maximum(r_n, NEG), np.maximum(r_b, NEG))
        self._psi[h] = float(max(psi, NEG))

    def prefix_logp(self, prefix: Sequence[int]) -> float:
        prefix = tuple(prefix)
        if prefix not in self._psi:
            self._extend(prefix[:-1], prefix[-1])
        return self._psi[prefix]

    def full_logp(self, prefix: Sequence[int]) -> float:
        prefix = tuple(prefix)
        if prefix not in self._fwd:
            self._extend(prefix[:-1], prefix[-1])
        r_n, r_b = self._fwd[prefix]
        return float(logaddexp(r_n[-1], r_b[-1]))
