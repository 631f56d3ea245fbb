"""Exact check of the conditionally factorised code-switching posterior.

A toy joint ``P(Z, Z_man, Z_en | X)`` over frame-level alignments is given
explicitly.  The label posterior is computed twice: by summing the joint over
the three alignment sets, and through the factorised form that assumes
``Z`` depends on ``X`` only through the monolingual alignments and that the
two monolingual alignments are independent given ``X``.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .ctc import BLANK, collapse

Alignment = tuple[int, ...]
Triple = tuple[Alignment, Alignment, Alignment]


@dataclass
class ToyJoint:
    """Explicit joint over (CS, Mandarin-side, English-side) alignments of length ``frames``."""

    target: tuple[int, ...]
    man_vocab: tuple[int, ...]
    en_vocab: tuple[int, ...]
    frames: int
    probs: dict[Triple, float]
    blank: int = BLANK

    def man_target(self) -> tuple[int, ...]:
        return tuple(y for y in self.target if y in self.man_vocab)

    def en_target(self) -> tuple[int, ...]:
        return tuple(y for y in self.target if y in self.en_vocab)

    def alignment_sets(self) -> tuple[set, set, set]:
        b = self.blank
        cs = all_alignments((b, *self.man_vocab, *self.en_vocab), self.frames)
        man = all_alignments((b, *self.man_vocab), self.frames)
        en = all_alignments((b, *self.en_vocab), self.frames)
        return ({z for z in cs if collapse(z, b) == self.target},
                {z for z in man if collapse(z, b) == self.man_target()},
                {z for z in en if collapse(z, b) == self.en_target()})


@dataclass
class FactorizationReport:
    lhs: float
    rhs: float
    tolerance: float = 1e-12

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def exact(self) -> bool:
        return self.gap < self.tolerance


def all_alignments(alphabet: Sequence[int], frames: int) -> list[Alignment]:
    return list(itertools.product(alphabet, repeat=frames))


def factorization_check(joint: ToyJoint,
                        composition: Callable[[Alignment, Alignment, Alignment], float] | None = None,
                        tolerance: float = 1e-12) -> FactorizationReport:
    """Compare the direct triple sum with the factorised posterior.

    ``composition(z, zm, ze)`` is an X-free ``P(Z | Z_man, Z_en)``; by default
    it is read off the joint itself.
    """
    if any(p < 0 for p in joint.probs.values()):
        raise ValueError("unnormalized joint: negative probability")
    if abs(math.fsum(joint.probs.values()) - 1.0) > 1e-9:
        raise ValueError("unnormalized joint")
    z_set, zm_set, ze_set = joint.alignment_sets()

    lhs = math.fsum(p for (z, zm, ze), p in joint.probs.items()
                    if z in z_set and zm in zm_set and ze in ze_set)

    p_man: dict[Alignment, list[float]] = defaultdict(list)
    p_en: dict[Alignment, list[float]] = defaultdict(list)
    p_pair: dict[tuple[Alignment, Alignment], list[float]] = defaultdict(list)
    p_in: dict[tuple[Alignment, Alignment], list[float]] = defaultdict(list)
    for (z, zm, ze), p in joint.probs.items():
        p_man[zm].append(p)
        p_en[ze].append(p)
        p_pair[(zm, ze)].append(p)
        if z in z_set:
            p_in[(zm, ze)].append(p)
    marg_man = {k: math.fsum(v) for k, v in p_man.items()}
    marg_en = {k: math.fsum(v) for k, v in p_en.items()}

    terms = []
    for zm in zm_set:
        pm = marg_man.get(zm, 0.0)
        if pm == 0.0:
            continue
        for ze in ze_set:
            pe = marg_en.get(ze, 0.0)
            if pe == 0.0:
                continue
            if composition is None:
                pair = math.fsum(p_pair.get((zm, ze), ()))
                if pair == 0.0:
                    continue
                k = math.fsum(p_in.get((zm, ze), ())) / pair
            else:
                k = math.fsum(composition(z, zm, ze) for z in z_set)
            terms.append(pm * pe * k)
    return FactorizationReport(lhs, math.fsum(terms), tolerance)


# -- constructors for tests ---------------------------------------------------------------
def merge_alignments(zm: Alignment, ze: Alignment, blank: int = BLANK) -> Alignment:
    """Frame-wise composition: the Mandarin symbol wins, otherwise the English one."""
    return tuple(m if m != blank else e for m, e in zip(zm, ze))


def _dirichlet(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n))


def independent_joint(rng: np.random.Generator, target, man_vocab=(1, 2), en_vocab=(3, 4),
                      frames: int = 4, deterministic: bool = True) -> ToyJoint:
    """A joint satisfying both assumptions.

    Monolingual posteriors are independent random distributions.  Composition
    is the deterministic frame-wise merge, or a random X-free kernel mixing the
    Mandarin-first and English-first merges.
    """
    man = all_alignments((BLANK, *man_vocab), frames)
    en = all_alignments((BLANK, *en_vocab), frames)
    pm, pe = _dirichlet(rng, len(man)), _dirichlet(rng, len(en))
    mix = rng.random((len(man), len(en)))
    probs: dict[Triple, float] = defaultdict(float)
    for i, zm in enumerate(man):
        for j, ze in enumerate(en):
            base = pm[i] * pe[j]
            if deterministic:
                probs[(merge_alignments(zm, ze), zm, ze)] += base
            else:
                w = mix[i, j]
                probs[(merge_alignments(zm, ze), zm, ze)] += base * w
                probs[(merge_alignments(ze, zm), zm, ze)] += base * (1.0 - w)
    return ToyJoint(tuple(target), tuple(man_vocab), tuple(en_vocab), frames, dict(probs))


def correlated_joint(rng: np.random.Generator, target, man_vocab=(1, 2), en_vocab=(3, 4),
                     frames: int = 4) -> ToyJoint:
    """A joint whose monolingual alignments are dependent given X."""
    man = all_alignments((BLANK, *man_vocab), frames)
    en = all_alignments((BLANK, *en_vocab), frames)
    pm, pe = _dirichlet(rng, len(man)), _dirichlet(rng, len(en))
    coupled = _dirichlet(rng, min(len(man), len(en)))
    probs: dict[Triple, float] = defaultdict(float)
    for i, zm in enumerate(man):
        for j, ze in enumerate(en):
            p = 0.5 * pm[i] * pe[j] + (0.5 * coupled[i] if i == j else 0.0)
            probs[(merge_alignments(zm, ze), zm, ze)] += p
    return ToyJoint(tuple(target), tuple(man_vocab), tuple(en_vocab), frames, dict(probs))


def single_alignment_joint(z: Alignment, zm: Alignment, ze: Alignment, target,
                           man_vocab=(1, 2), en_vocab=(3, 4)) -> ToyJoint:
    return ToyJoint(tuple(target), tuple(man_vocab), tuple(en_vocab), len(z), {(z, zm, ze): 1.0})


def as_composition(kernel: Mapping[Triple, float]):
    """Wrap a dict ``{(z, zm, ze): P(z | zm, ze)}`` as a composition callable."""
    return lambda z, zm, ze: kernel.get((z, zm, ze), 0.0)
