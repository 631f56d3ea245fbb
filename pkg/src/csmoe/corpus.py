"""Synthetic bilingual code-switching corpus.

Two disjoint toy languages stand in for Mandarin and English.  Each utterance
carries five label views: the mixed transcript, the two masked monolingual
transcripts and the two token-level translations.  Features are regenerated
from a seed, so a manifest line fully determines its utterance.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import rng_stream

MAN, EN = "MAN", "EN"

SPECIALS = ("<blank>", "<man>", "<eng>", "<sos>", "<eos>", "<unk>")

DEFAULT_MAN = tuple("真正做到我们今天很好学习中文朋友家里工作")
DEFAULT_EN = ("happy", "every", "day", "we", "go", "to", "school", "work", "home", "good",
              "friend", "learn", "study", "music", "play", "read", "write", "time", "people",
              "world")


@dataclass(frozen=True)
class VocabSpec:
    """Token ids: specials first, then the Mandarin-side block, then the English-side block."""

    man_surfaces: tuple[str, ...] = DEFAULT_MAN
    en_surfaces: tuple[str, ...] = DEFAULT_EN

    blank = 0
    man_mask = 1  # <man>
    eng_mask = 2  # <eng>
    sos = 3
    eos = 4
    unk = 5

    def __post_init__(self):
        all_s = list(SPECIALS) + list(self.man_surfaces) + list(self.en_surfaces)
        if len(set(all_s)) != len(all_s):
            raise ValueError("vocabulary surfaces must be unique")

    @property
    def man_tokens(self) -> tuple[int, ...]:
        start = len(SPECIALS)
        return tuple(range(start, start + len(self.man_surfaces)))

    @property
    def en_tokens(self) -> tuple[int, ...]:
        start = len(SPECIALS) + len(self.man_surfaces)
        return tuple(range(start, start + len(self.en_surfaces)))

    @property
    def specials(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIALS)))

    @property
    def size(self) -> int:
        return len(SPECIALS) + len(self.man_surfaces) + len(self.en_surfaces)

    def surfaces(self) -> list[str]:
        return list(SPECIALS) + list(self.man_surfaces) + list(self.en_surfaces)

    def surface(self, token: int) -> str:
        return self.surfaces()[token]

    def id_of(self, surface: str) -> int:
        try:
            return self.surfaces().index(surface)
        except ValueError:
            return self.unk

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(w) for w in words)

    def decode(self, tokens: Iterable[int]) -> list[str]:
        s = self.surfaces()
        return [s[t] for t in tokens]

    def lang(self, token: int) -> str | None:
        if token in self.man_tokens:
            return MAN
        if token in self.en_tokens:
            return EN
        return None

    def write(self, path) -> None:
        kinds = ["special"] * len(SPECIALS) + ["man"] * len(self.man_surfaces) + ["en"] * len(self.en_surfaces)
        lines = [f"{i}\t{s}\t{k}\n" for i, (s, k) in enumerate(zip(self.surfaces(), kinds))]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def read(cls, path) -> VocabSpec:
        man, en = [], []
        rows = [ln.split("\t") for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
        for i, (idx, surface, kind) in enumerate(rows):
            if int(idx) != i:
                raise ValueError(f"vocabulary ids must be dense and ascending (line {i})")
            if kind == "special":
                if i >= len(SPECIALS) or surface != SPECIALS[i]:
                    raise ValueError(f"unexpected special {surface!r} at id {i}")
            elif kind == "man":
                man.append(surface)
            elif kind == "en":
                en.append(surface)
            else:
                raise ValueError(f"unknown token kind {kind!r}")
        return cls(tuple(man), tuple(en))


# -- label views -------------------------------------------------------------------
def toy_translate(y: Sequence[int], direction: str, vocab: VocabSpec) -> tuple[int, ...]:
    """Map every source-side token through the index-aligned bilingual dictionary."""
    if direction not in (MAN, EN):
        raise ValueError(f"unknown direction {direction!r}")
    man, en = vocab.man_tokens, vocab.en_tokens
    out = []
    for t in y:
        if t in man:
            out.append(t if direction == MAN else en[man.index(t)])
        elif t in en:
            out.append(t if direction == EN else man[en.index(t)])
        else:
            raise ValueError(f"unknown token {t}")
    return tuple(out)


def mask_monolingual(y: Sequence[int], keep: str, vocab: VocabSpec) -> tuple[int, ...]:
    """Replace every other-language token by that language's mask token.

    Mask tokens already present pass through unchanged, which makes masking
    idempotent; any other special is rejected.
    """
    if keep not in (MAN, EN):
        raise ValueError(f"unknown language {keep!r}")
    mask_tok = vocab.eng_mask if keep == MAN else vocab.man_mask
    own = set(vocab.man_tokens if keep == MAN else vocab.en_tokens)
    other = set(vocab.en_tokens if keep == MAN else vocab.man_tokens)
    out = []
    for t in y:
        if t in own or t in (vocab.eng_mask, vocab.man_mask):
            out.append(t)
        elif t in other:
            out.append(mask_tok)
        else:
            raise ValueError(f"special token {t} in input")
    return tuple(out)


# -- features ----------------------------------------------------------------------
@dataclass(frozen=True)
class FeatureSpec:
    corpus_seed: int = 7
    frames_per_token: int = 8
    feature_dim: int = 8
    noise_sigma: float = 0.1
    vocab_size: int = 46


def token_embeddings(spec: FeatureSpec) -> np.ndarray:
    return rng_stream(spec.corpus_seed, "token-embeddings").standard_normal((spec.vocab_size, spec.feature_dim))


def featurize(y: Sequence[int], spec: FeatureSpec, utt_seed: int) -> np.ndarray:
    """``frames_per_token`` copies of each token's embedding plus Gaussian noise."""
    emb = token_embeddings(spec)
    frames = np.repeat(emb[np.asarray(y, dtype=int)], spec.frames_per_token, axis=0)
    frames = frames.reshape(len(y) * spec.frames_per_token, spec.feature_dim)
    if spec.noise_sigma > 0:
        noise = rng_stream(spec.corpus_seed, "utterance-noise", utt_seed).standard_normal(frames.shape)
        frames = frames + spec.noise_sigma * noise
    return frames


# -- utterances ---------------------------------------------------------------------------
@dataclass
class Utterance:
    id: str
    features: np.ndarray
    y_cs: tuple[int, ...]
    y_man_spec: tuple[int, ...]
    y_en_spec: tuple[int, ...]
    y_man: tuple[int, ...]
    y_en: tuple[int, ...]
    lang: tuple[str, ...]
    gen: FeatureSpec = field(default_factory=FeatureSpec)
    utt_seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def kind(self) -> str:
        langs = set(self.lang)
        return "cs" if len(langs) > 1 else ("man" if langs == {MAN} else "en")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.id == other.id and np.array_equal(self.features, other.features)
                and self.y_cs == other.y_cs and self.y_man_spec == other.y_man_spec
                and self.y_en_spec == other.y_en_spec and self.y_man == other.y_man
                and self.y_en == other.y_en and self.lang == other.lang
                and self.gen == other.gen and self.utt_seed == other.utt_seed)


def make_utterance(uid: str, y_cs: Sequence[int], vocab: VocabSpec, gen: FeatureSpec,
                   utt_seed: int | None = None) -> Utterance:
    y_cs = tuple(int(t) for t in y_cs)
    seed = zlib.crc32(uid.encode("utf-8")) if utt_seed is None else utt_seed
    lang = tuple(vocab.lang(t) for t in y_cs)
    if None in lang:
        raise ValueError("transcripts may only contain language tokens")
    return Utterance(uid, featurize(y_cs, gen, seed), y_cs,
                     mask_monolingual(y_cs, MAN, vocab), mask_monolingual(y_cs, EN, vocab),
                     toy_translate(y_cs, MAN, vocab), toy_translate(y_cs, EN, vocab),
                     lang, gen, seed)


# -- manifests ------------------------------------------------------------------------------
def _ids(seq: Sequence[int]) -> str:
    return " ".join(str(t) for t in seq)


def _parse_ids(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split())


def utterance_to_record(u: Utterance) -> str:
    rec = {"id": u.id, "n_frames": u.n_frames,
           "gen": {"utt_seed": u.utt_seed, **asdict(u.gen)},
           "y_cs": _ids(u.y_cs), "y_man_spec": _ids(u.y_man_spec), "y_en_spec": _ids(u.y_en_spec),
           "y_man": _ids(u.y_man), "y_en": _ids(u.y_en),
           "lang": " ".join(u.lang)}
    return json.dumps(rec, ensure_ascii=False)


def utterance_from_record(line: str) -> Utterance:
    rec = json.loads(line)
    gen = dict(rec["gen"])
    seed = int(gen.pop("utt_seed"))
    spec = FeatureSpec(**gen)
    y_cs = _parse_ids(rec["y_cs"])
    feats = featurize(y_cs, spec, seed)
    if feats.shape[0] != rec["n_frames"]:
        raise ValueError(f"{rec['id']}: n_frames mismatch")
    return Utterance(rec["id"], feats, y_cs, _parse_ids(rec["y_man_spec"]), _parse_ids(rec["y_en_spec"]),
                     _parse_ids(rec["y_man"]), _parse_ids(rec["y_en"]), tuple(rec["lang"].split()),
                     spec, seed)


def write_manifest(path, utts: Iterable[Utterance]) -> None:
    text = "".join(utterance_to_record(u) + "\n" for u in utts)
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path) -> list[Utterance]:
    return [utterance_from_record(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


# -- generation ------------------------------------------------------------------------------
@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 50
    n_eval: int = 20
    cs_fraction: float = 0.6
    min_len: int = 3
    max_len: int = 8
    switch_prob: float = 0.35
    frames_per_token: int = 8
    feature_dim: int = 8
    noise_sigma: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.min_len * self.frames_per_token < 4:
            raise ValueError("min_len * frames_per_token must be >= 4 for subsampling")
        if not 0.0 <= self.cs_fraction <= 1.0 or not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")

    def features(self, vocab: VocabSpec) -> FeatureSpec:
        return FeatureSpec(self.seed, self.frames_per_token, self.feature_dim, self.noise_sigma, vocab.size)


@dataclass
class Corpus:
    train: list[Utterance]
    eval: dict[str, list[Utterance]]
    vocab: VocabSpec
    spec: CorpusSpec


def _draw_tokens(rng: np.random.Generator, langs: Sequence[str], vocab: VocabSpec) -> list[int]:
    out: list[int] = []
    for lang in langs:
        pool = [t for t in (vocab.man_tokens if lang == MAN else vocab.en_tokens) if not out or t != out[-1]]
        out.append(int(pool[rng.integers(len(pool))]))
    return out


def _draw_langs(rng: np.random.Generator, kind: str, length: int, switch_prob: float) -> list[str]:
    if kind in ("man", "en"):
        return [MAN if kind == "man" else EN] * length
    while True:
        cur = MAN if rng.random() < 0.5 else EN
        langs = [cur]
        for _ in range(length - 1):
            if rng.random() < switch_prob:
                cur = EN if cur == MAN else MAN
            langs.append(cur)
        if len(set(langs)) == 2:
            return langs


def draw_transcript(spec: CorpusSpec, vocab: VocabSpec, kind: str, *stream) -> list[int]:
    rng = rng_stream(spec.seed, "text", *stream)
    lo = max(spec.min_len, 2) if kind == "cs" else spec.min_len
    length = int(rng.integers(lo, max(lo, spec.max_len) + 1))
    return _draw_tokens(rng, _draw_langs(rng, kind, length, spec.switch_prob), vocab)


def gen_corpus(spec: CorpusSpec, vocab: VocabSpec | None = None) -> Corpus:
    """Train set plus CS / Mandarin-only / English-only evaluation sets.

    Evaluation transcripts never repeat a training transcript.
    """
    vocab = vocab or VocabSpec()
    feats = spec.features(vocab)
    train = []
    for i in range(spec.n_train):
        rng = rng_stream(spec.seed, "kind", "train", i)
        if rng.random() < spec.cs_fraction:
            kind = "cs"
        else:
            kind = "man" if rng.random() < 0.5 else "en"
        y = draw_transcript(spec, vocab, kind, "train", i)
        train.append(make_utterance(f"train-{i:05d}", y, vocab, feats))

    seen = {u.y_cs for u in train}
    evals: dict[str, list[Utterance]] = {}
    for kind in ("cs", "man", "en"):
        n = spec.n_eval if (kind != "cs" or spec.cs_fraction > 0) else 0
        utts = []
        attempt = 0
        while len(utts) < n:
            y = tuple(draw_transcript(spec, vocab, kind, "eval", kind, attempt))
            attempt += 1
            if y in seen:
                continue
            seen.add(y)
            utts.append(make_utterance(f"{kind}-{len(utts):04d}", y, vocab, feats))
        evals[kind] = utts
    if spec.cs_fraction == 0:
        warnings.warn("cs_fraction=0: the code-switching evaluation set is empty", stacklevel=2)
    return Corpus(train, evals, vocab, spec)


def write_corpus(corpus: Corpus, out_dir, force: bool = False) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"vocab": out / "vocab.txt", "train": out / "train.jsonl",
             "cs": out / "eval_cs.jsonl", "man": out / "eval_man.jsonl", "en": out / "eval_en.jsonl",
             "spec": out / "corpus.json"}
    if not force and any(p.exists() for p in paths.values()):
        raise FileExistsError(f"{out} already holds a corpus; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.write(paths["vocab"])
    write_manifest(paths["train"], corpus.train)
    for k in ("cs", "man", "en"):
        write_manifest(paths[k], corpus.eval[k])
    paths["spec"].write_text(json.dumps(asdict(corpus.spec), indent=2) + "\n", encoding="utf-8")
    return paths


def read_corpus(out_dir) -> Corpus:
    out = Path(out_dir)
    vocab = VocabSpec.read(out / "vocab.txt")
    spec = CorpusSpec(**json.loads((out / "corpus.json").read_text(encoding="utf-8")))
    evals = {k: read_manifest(out / f"eval_{k}.jsonl") for k in ("cs", "man", "en")}
    return Corpus(read_manifest(out / "train.jsonl"), evals, vocab, spec)
