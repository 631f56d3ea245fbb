"""Error rates for recognition and BLEU / TER for translation.

Mix error rate treats every token as one unit: a Mandarin-side token plays
the role of a character and an English-side token the role of a word, which
is how the real scoring script tokenises mixed text.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

MAN, EN = "MAN", "EN"


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def empty_reference(self) -> bool:
        """True when the rate had to be taken over a reference length of one."""
        return self.ref_len == 0 and self.errors > 0

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            return float(self.errors)
        return self.errors / self.ref_len

    def __add__(self, other: ErrorCounts) -> ErrorCounts:
        return ErrorCounts(self.substitutions + other.substitutions, self.deletions + other.deletions,
                           self.insertions + other.insertions, self.ref_len + other.ref_len)


def align(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Minimum-edit alignment as ``(op, ref_index, hyp_index)`` with op in C/S/D/I.

    Among alignments with the fewest edits, the one with the fewest
    deletions plus insertions wins (a substitution beats a D+I pair).
    """
    n, m = len(ref), len(hyp)
    # cost[i][j] = (edits, deletions + insertions)
    cost = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    back = [[""] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0], back[i][0] = (i, i), "D"
    for j in range(1, m + 1):
        cost[0][j], back[0][j] = (j, j), "I"
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, di = cost[i - 1][j - 1]
            same = ref[i - 1] == hyp[j - 1]
            best, op = ((e, di), "C") if same else ((e + 1, di), "S")
            e, di = cost[i - 1][j]
            if (e + 1, di + 1) < best:
                best, op = (e + 1, di + 1), "D"
            e, di = cost[i][j - 1]
            if (e + 1, di + 1) < best:
                best, op = (e + 1, di + 1), "I"
            cost[i][j], back[i][j] = best, op
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        op = back[i][j]
        if op in ("C", "S"):
            ops.append((op, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif op == "D":
            ops.append((op, i - 1, None))
            i -= 1
        else:
            ops.append((op, None, j - 1))
            j -= 1
    return ops[::-1]


def _count(ops, ref_len: int) -> ErrorCounts:
    c = Counter(op for op, _, _ in ops)
    return ErrorCounts(c["S"], c["D"], c["I"], ref_len)


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorCounts:
    return _count(align(ref, hyp), len(ref))


@dataclass(frozen=True)
class MixedErrors:
    all: ErrorCounts
    cn: ErrorCounts
    en: ErrorCounts

    def rates(self) -> dict[str, float]:
        return {"ALL": self.all.rate, "CN": self.cn.rate, "EN": self.en.rate}

    def __add__(self, other: MixedErrors) -> MixedErrors:
        return MixedErrors(self.all + other.all, self.cn + other.cn, self.en + other.en)


def mixed_errors(ref: Sequence, ref_langs: Sequence[str], hyp: Sequence,
                 hyp_langs: Sequence[str]) -> MixedErrors:
    """Error counts overall and split by language.

    Substitutions and deletions count against the reference token's
    language, insertions against the hypothesis token's language.
    """
    if len(ref) != len(ref_langs) or len(hyp) != len(hyp_langs):
        raise ValueError("every token needs a language tag")
    for tag in list(ref_langs) + list(hyp_langs):
        if tag not in (MAN, EN):
            raise ValueError(f"untagged token (tag {tag!r})")
    ops = align(ref, hyp)
    split = {MAN: Counter(), EN: Counter()}
    for op, i, j in ops:
        if op == "C":
            continue
        lang = hyp_langs[j] if op == "I" else ref_langs[i]
        split[lang][op] += 1
    n_man = sum(1 for t in ref_langs if t == MAN)
    per = {lang: ErrorCounts(c["S"], c["D"], c["I"], n_man if lang == MAN else len(ref) - n_man)
           for lang, c in split.items()}
    return MixedErrors(_count(ops, len(ref)), per[MAN], per[EN])


def mix_error_rate(ref: Sequence, ref_langs: Sequence[str], hyp: Sequence,
                   hyp_langs: Sequence[str]) -> dict[str, float]:
    """``{"ALL", "CN", "EN"}`` rates as fractions."""
    return mixed_errors(ref, ref_langs, hyp, hyp_langs).rates()


# -- translation -------------------------------------------------------------------------------
def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(refs: Sequence[Sequence], hyps: Sequence[Sequence], max_order: int = 4) -> float:
    """Corpus BLEU in [0, 100] over parallel reference / hypothesis lists.

    Clipped n-gram precisions for orders 1..max_order, geometric mean, times
    the brevity penalty.  Orders >= 2 use add-one smoothing
    ``(matches + 1) / (candidates + 1)``; the unigram precision is unsmoothed.
    """
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must be parallel")
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_order + 1):
        match = cand = 0
        for r, h in zip(refs, hyps):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match += sum(min(c, rc[g]) for g, c in hc.items())
            cand += sum(hc.values())
        if n == 1:
            if match == 0:
                return 0.0
            p = match / cand
        else:
            p = (match + 1) / (cand + 1)
        log_p += math.log(p) / max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def ter(ref: Sequence, hyp: Sequence) -> float:
    """Edit operations (no shifts) per reference token, times 100."""
    return 100.0 * edit_distance(ref, hyp).rate


def corpus_ter(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    total = ErrorCounts()
    for r, h in zip(refs, hyps):
        total = total + edit_distance(r, h)
    return 100.0 * total.rate
