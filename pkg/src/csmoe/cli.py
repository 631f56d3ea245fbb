"""Command-line entry points: ``gen``, ``train``, ``eval``, ``translate``, ``ablate``.

Every command reads one JSON run configuration (see :class:`RunConfig`; all
keys are optional except ``seed``, which may also come from ``--seed``),
applies flag overrides, and writes its outputs under ``out``.  Reports embed
the resolved configuration, so feeding the embedded ``config`` object back
through ``--config`` reproduces every number bitwise on the same platform.

Output layout under ``out``::

    corpus/                      gen (unless corpus_dir is set)
    run_config.json              resolved configuration of the last command
    loss_log.jsonl               train: one LossBreakdown record per step
    checkpoints/step_NNNNNN.ckpt train: every checkpoint_every steps
    model.ckpt                   train: final checkpoint
    eval/report.{txt,jsonl}      eval: metric table, human and machine form
    eval/nbest_<set>_<row>.txt   eval: n-best lists per decoding row
    translate/translations.{txt,jsonl}
    ablate/ablate.{txt,jsonl}

Failures print one JSON object ``{"error": <kind>, "message": <text>}`` on
stderr and exit nonzero (2 for configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import EN, MAN, Corpus, CorpusSpec, Utterance, gen_corpus, read_corpus, write_corpus
from .decode import DecodeParams, NGramLM, _encode, decode_asr, decode_st, format_nbest, ngram_train, \
    rescore_with_st
from .metrics import ErrorCounts, MixedErrors, bleu, corpus_ter, mixed_errors
from .model import EOS, VARIANTS, AdamState, ConfigError, LossBreakdown, Model, ModelConfig, TrainConfig, \
    TrainingError, build_model, train
from .transformer import BlockConfig

EVAL_SETS = ("cs", "man", "en")
SET_TITLES = {"cs": "CS", "man": "mono-CN", "en": "mono-EN"}
ST_ROWS = (("baseline", None), ("en2man_rescore", "en2man"), ("man2en_rescore", "man2en"))
ROW_TITLES = {"baseline": "no rescoring", "en2man_rescore": "+ En2Man ST rescoring",
              "man2en_rescore": "+ Man2En ST rescoring"}
ST_TITLES = {"man2en": "CS->EN", "en2man": "CS->CN"}


# -- configuration ----------------------------------------------------------------------------
@dataclass(frozen=True)
class DecodeSettings:
    beam: int = 10
    gamma_lm: float = 0.3
    gamma_st: float = 0.3
    lm_order: int = 4
    st_beam: int = 10

    def params(self, direction: str = "none") -> DecodeParams:
        return DecodeParams(self.beam, self.gamma_lm, self.gamma_st, direction)


@dataclass(frozen=True)
class AblateSettings:
    """Variant grid, sweeps and the zero-weight consistency check.

    Sweeps train the full model only, once per ``sweep_seeds`` entry.  The
    ``n_mono`` sweep keeps the per-language depth (``n_encoder - n_share``)
    at ``branch_depth`` so that every setting still has an MoE block.
    """

    variants: tuple[str, ...] = ("VANILLA_CTC", "LAE_CTC", "LAE_ST_CTC", "LAE_ST_MOE_CTC")
    seeds: tuple[int, ...] = (0, 1, 2)
    betas: tuple[float, ...] = (0.4, 0.6, 0.8, 1.0)
    n_mono: tuple[int, ...] = (0, 1, 2)
    sweep_seeds: tuple[int, ...] = (0,)
    branch_depth: int = 3
    beam: int = 1
    check_steps: int = 20


@dataclass(frozen=True)
class TranslateSettings:
    sets: tuple[str, ...] = ("cs",)
    directions: tuple[str, ...] = ("man2en", "en2man")


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs.  ``seed`` drives initialisation, batching and dropout."""

    seed: int
    out: str = "run"
    corpus_dir: str | None = None
    checkpoint: str | None = None
    checkpoint_every: int = 100
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    translate: TranslateSettings = field(default_factory=TranslateSettings)
    ablate: AblateSettings = field(default_factory=AblateSettings)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("configuration error: seed must be an integer")
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if self.checkpoint_every < 1:
            raise ConfigError("configuration error: checkpoint_every must be >= 1")
        for name in self.ablate.variants:
            if name not in VARIANTS:
                raise ConfigError(f"configuration error: unknown ablation variant {name!r}")
        for s in self.translate.sets:
            if s not in EVAL_SETS:
                raise ConfigError(f"configuration error: unknown evaluation set {s!r}")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def corpus_path(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else self.out_dir / "corpus"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out_dir / "model.ckpt"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        if "seed" not in d:
            raise ConfigError("configuration error: seed is mandatory (config key or --seed)")
        sections = {"corpus": CorpusSpec, "train": TrainConfig, "decode": DecodeSettings,
                    "translate": TranslateSettings, "ablate": AblateSettings}
        for key, sub in sections.items():
            if key in d:
                d[key] = _section(sub, d[key], key)
        if "model" in d:
            m = dict(d["model"])
            if isinstance(m.get("block"), dict):
                m["block"] = _section(BlockConfig, m["block"], "model.block")
            d["model"] = ModelConfig.from_dict(m)
        return _section(cls, d, "config")


def _section(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"configuration error: {where} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"configuration error: unknown keys in {where}: {unknown}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"configuration error in {where}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply flag overrides.

    ``overrides`` keys: seed, out, checkpoint, beam, beta, variant.  ``None``
    values are ignored.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"configuration error: {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration error: {path} is not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("configuration error: top level must be an object")
        if "config" in raw and isinstance(raw["config"], dict) and "seed" in raw["config"]:
            raw = raw["config"]  # a report header record
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in ("seed", "out", "checkpoint"):
        if key in ov:
            raw[key] = ov[key]
    if "beam" in ov:
        raw["decode"] = {**raw.get("decode", {}), "beam": ov["beam"]}
    for key in ("beta", "variant"):
        if key in ov:
            raw["model"] = {**raw.get("model", {}), key: ov[key]}
    return RunConfig.from_dict(raw)


# -- shared helpers -------------------------------------------------------------------------
def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def _load_corpus(cfg: RunConfig) -> Corpus:
    path = cfg.corpus_path
    if not (path / "train.jsonl").exists():
        raise FileNotFoundError(f"no corpus at {path}; run gen first")
    return read_corpus(path)


def _check_compatible(model_cfg: ModelConfig, corpus: Corpus) -> None:
    if model_cfg.vocab_size != corpus.vocab.size:
        raise ConfigError(f"vocab mismatch: model has {model_cfg.vocab_size} tokens, "
                          f"corpus has {corpus.vocab.size}")
    if model_cfg.n_feats != corpus.spec.feature_dim:
        raise ConfigError(f"feature mismatch: model expects {model_cfg.n_feats} dims, "
                          f"corpus has {corpus.spec.feature_dim}")


def _hyp_langs(tokens, corpus: Corpus) -> list[str]:
    return [corpus.vocab.lang(t) or EN for t in tokens]


def score_asr(hyps: Sequence[Sequence[int]], utts: Sequence[Utterance], corpus: Corpus) -> MixedErrors:
    total = MixedErrors(ErrorCounts(), ErrorCounts(), ErrorCounts())
    for h, u in zip(hyps, utts):
        total = total + mixed_errors(u.y_cs, u.lang, h, _hyp_langs(h, corpus))
    return total


def _mer_record(errs: MixedErrors) -> dict:
    return {k: 100.0 * v for k, v in errs.rates().items()}


def build_lm(corpus: Corpus, order: int) -> NGramLM:
    vocab = corpus.vocab.man_tokens + corpus.vocab.en_tokens + (EOS, corpus.vocab.unk)
    return ngram_train((u.y_cs for u in corpus.train), vocab, order=order)


# -- commands ------------------------------------------------------------------------------
def cmd_gen(cfg: RunConfig, force: bool = False) -> dict[str, Path]:
    """Generate the synthetic corpus and write its manifests."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        corpus = gen_corpus(cfg.corpus)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    paths = write_corpus(corpus, cfg.corpus_path, force=force)
    _write_json(cfg.out_dir / "run_config.json", cfg.to_dict())
    return paths


def _loss_record(step: int, bd: LossBreakdown) -> dict:
    rec = {"step": step}
    rec.update(bd.as_dict())
    rec["skipped"] = list(bd.skipped)
    return rec


def cmd_train(cfg: RunConfig) -> Path:
    """Train on the corpus manifests; returns the final checkpoint path.

    With ``checkpoint`` set, training resumes from that file and appends to
    the existing loss log; the result matches an uninterrupted run bitwise.
    """
    corpus = _load_corpus(cfg)
    _check_compatible(cfg.model, corpus)
    out = cfg.out_dir
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    if cfg.checkpoint:
        model, opt, header = load_checkpoint(cfg.checkpoint)
        if model.cfg != cfg.model or header["seed"] != cfg.seed:
            raise ConfigError("checkpoint does not match the configured model and seed")
        kept = []
        if log_path.exists():
            kept = [ln for ln in log_path.read_text(encoding="utf-8").splitlines()
                    if ln and json.loads(ln)["step"] <= opt.step]
        log_path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")
    else:
        model, opt = build_model(cfg.model, cfg.seed), AdamState()
        log_path.write_text("", encoding="utf-8")
    extra = {"run_config": cfg.to_dict()}
    with open(log_path, "a", encoding="utf-8") as log:
        def on_step(step: int, bd: LossBreakdown) -> None:
            log.write(json.dumps(_loss_record(step, bd), sort_keys=True) + "\n")
            if step % cfg.checkpoint_every == 0:
                log.flush()
                save_checkpoint(ck_dir / f"step_{step:06d}.ckpt", model, opt, extra)

        train(model, corpus.train, cfg.train, opt, on_step=on_step)
    final = out / "model.ckpt"
    save_checkpoint(final, model, opt, extra)
    _write_json(out / "run_config.json", cfg.to_dict())
    return final


def _load_for_eval(cfg: RunConfig) -> tuple[Model, Corpus, dict]:
    path = cfg.checkpoint_path
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    model, _, header = load_checkpoint(path)
    corpus = _load_corpus(cfg)
    _check_compatible(model.cfg, corpus)
    stamp = {"checkpoint": str(path), "checkpoint_sha256": _sha256(path), "step": header["step"],
             "corpus_dir": str(cfg.corpus_path), "version": __version__}
    return model, corpus, stamp


def evaluate_asr(model: Model, corpus: Corpus, settings: DecodeSettings, lm: NGramLM | None,
                 sets: Sequence[str] = EVAL_SETS) -> tuple[dict, dict]:
    """Decode each set with and without ST rescoring.

    Returns ``(errors, nbest)`` keyed by ``(set, row)``; rescoring rows are
    only produced for models with ST decoders.
    """
    params = settings.params()
    rows = ST_ROWS if model.cfg.has_st else ST_ROWS[:1]
    errors, nbest = {}, {}
    for s in sets:
        utts = corpus.eval[s]
        hyps = {r: [] for r, _ in rows}
        for r, _ in rows:
            nbest[(s, r)] = []
        for u in utts:
            state = _encode(model, u)
            base = decode_asr(model, u, params, lm, state)
            for r, direction in rows:
                lst = base if direction is None else rescore_with_st(
                    base, model, u, direction, settings.gamma_st, corpus.vocab, state)
                hyps[r].append(lst[0].tokens if lst else ())
                nbest[(s, r)].extend(format_nbest(u.id, lst))
        for r, _ in rows:
            errors[(s, r)] = score_asr(hyps[r], utts, corpus)
    return errors, nbest


def evaluate_st(model: Model, corpus: Corpus, beam: int, set_name: str = "cs") -> dict[str, dict]:
    """BLEU / TER of both translation directions on one evaluation set."""
    utts = corpus.eval[set_name]
    out = {}
    for direction in ("man2en", "en2man"):
        refs = [u.y_en if direction == "man2en" else u.y_man for u in utts]
        hyps = [decode_st(model, u, direction, beam) for u in utts]
        out[direction] = {"BLEU": bleu(refs, hyps), "TER": corpus_ter(refs, hyps)}
    return out


def cmd_eval(cfg: RunConfig) -> dict:
    """Score a checkpoint on every evaluation manifest; writes ``out/eval``."""
    model, corpus, stamp = _load_for_eval(cfg)
    lm = build_lm(corpus, cfg.decode.lm_order) if cfg.decode.gamma_lm > 0 else None
    errors, nbest = evaluate_asr(model, corpus, cfg.decode, lm)
    st = evaluate_st(model, corpus, cfg.decode.st_beam) if model.cfg.has_st and corpus.eval["cs"] else {}
    records = [{"type": "header", "command": "eval", "config": cfg.to_dict(), **stamp,
                "variant": model.cfg.variant}]
    for (s, r), e in errors.items():
        records.append({"type": "asr", "set": s, "row": r, **_mer_record(e),
                        "ref_tokens": e.all.ref_len, "errors": e.all.errors})
    for direction, v in st.items():
        records.append({"type": "st", "set": "cs", "direction": ST_TITLES[direction], **v})
    out = cfg.out_dir / "eval"
    _write_jsonl(out / "report.jsonl", records)
    (out / "report.txt").write_text(_eval_text(records), encoding="utf-8")
    for (s, r), lines in nbest.items():
        (out / f"nbest_{s}_{r}.txt").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    return {"records": records, "errors": errors, "st": st}


def _eval_text(records: list[dict]) -> str:
    head = records[0]
    parts = [f"variant {head['variant']}  checkpoint {head['checkpoint']} (step {head['step']})",
             f"sha256 {head['checkpoint_sha256']}  version {head['version']}", ""]
    asr = [r for r in records if r["type"] == "asr"]
    rows = []
    for r in asr:
        rows.append([f"{SET_TITLES[r['set']]} / {ROW_TITLES[r['row']]}", r["ALL"], r["CN"], r["EN"]])
    parts.append("MER (%)")
    parts.append(_table(["set / decoding", "ALL", "CN", "EN"], rows))
    st = [r for r in records if r["type"] == "st"]
    if st:
        parts += ["", "Speech translation (CS set)",
                  _table(["direction", "BLEU", "TER"], [[r["direction"], r["BLEU"], r["TER"]] for r in st])]
    parts += ["", "config " + json.dumps(head["config"], sort_keys=True)]
    return "\n".join(parts) + "\n"


def cmd_translate(cfg: RunConfig) -> list[dict]:
    """Decode translations for the configured sets and directions; writes ``out/translate``."""
    model, corpus, stamp = _load_for_eval(cfg)
    if not model.cfg.has_st:
        raise ConfigError(f"{model.cfg.variant} has no ST decoders")
    records = [{"type": "header", "command": "translate", "config": cfg.to_dict(), **stamp}]
    lines = []
    for s in cfg.translate.sets:
        for u in corpus.eval[s]:
            state = _encode(model, u)
            for d in cfg.translate.directions:
                hyp = decode_st(model, u, d, cfg.decode.st_beam, state)
                ref = u.y_en if d == "man2en" else u.y_man
                words = corpus.vocab.decode(hyp)
                records.append({"type": "translation", "set": s, "id": u.id, "direction": d,
                                "tokens": list(hyp), "text": " ".join(words), "reference": list(ref)})
                lines.append(f"{u.id}\t{d}\t{' '.join(words)}")
    out = cfg.out_dir / "translate"
    _write_jsonl(out / "translations.jsonl", records)
    (out / "translations.txt").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    return records


# -- ablation ---------------------------------------------------------------------------------
def _train_and_score(cfg: RunConfig, corpus: Corpus, model_cfg: ModelConfig, seed: int) -> dict:
    model = build_model(model_cfg, seed)
    tcfg = replace(cfg.train, seed=seed)
    _, log = train(model, corpus.train, tcfg)
    settings = replace(cfg.decode, beam=cfg.ablate.beam, gamma_lm=0.0)
    errors, _ = evaluate_asr(model, corpus, settings, None, sets=[s for s in EVAL_SETS if corpus.eval[s]])
    rec = {"variant": model_cfg.variant, "seed": seed, "beta": model_cfg.beta, "n_mono": model_cfg.n_mono,
           "n_share": model_cfg.n_share, "final_l_asr": log[-1].l_asr if log else None}
    for (s, _), e in errors.items():
        rec[s] = _mer_record(e)
    return rec


def _win_counts(grid: list[dict], seeds: Sequence[int]) -> list[dict]:
    by = {(r["variant"], r["seed"]): r["cs"]["ALL"] for r in grid if "cs" in r}
    claims = [("LAE_ST_MOE_CTC <= LAE_CTC <= VANILLA_CTC", ("LAE_ST_MOE_CTC", "LAE_CTC", "VANILLA_CTC")),
              ("LAE_ST_MOE_CTC <= LAE_ST_CTC", ("LAE_ST_MOE_CTC", "LAE_ST_CTC"))]
    out = []
    for name, chain in claims:
        if not all((v, s) in by for v in chain for s in seeds):
            continue
        wins = [s for s in seeds if all(by[(a, s)] <= by[(b, s)] for a, b in zip(chain, chain[1:]))]
        out.append({"type": "wins", "claim": name, "wins": len(wins), "of": len(seeds), "seeds": wins})
    return out


def beta_zero_check(cfg: RunConfig, corpus: Corpus, steps: int) -> dict:
    """Train with beta = 0 and with ASR-only for ``steps`` steps; compare the loss logs."""
    model_cfg = replace(cfg.model, variant="LAE_ST_MOE_CTC", beta=0.0)
    logs = []
    for asr_only in (False, True):
        model = build_model(model_cfg, cfg.seed)
        _, log = train(model, corpus.train, replace(cfg.train, steps=steps, asr_only=asr_only))
        logs.append([{k: getattr(b, k) for k in ("l_asr", "l_st", "l_final")} for b in log])
    return {"type": "beta_zero_check", "steps": steps, "identical": logs[0] == logs[1]}


def cmd_ablate(cfg: RunConfig, progress=None) -> list[dict]:
    """Variant grid over seeds, beta and n_mono sweeps, win counts; writes ``out/ablate``."""
    a = cfg.ablate
    corpus = read_corpus(cfg.corpus_path) if (cfg.corpus_path / "train.jsonl").exists() \
        else gen_corpus(cfg.corpus)
    _check_compatible(cfg.model, corpus)
    say = progress or (lambda msg: None)
    records = [{"type": "header", "command": "ablate", "config": cfg.to_dict(), "version": __version__}]
    grid = []
    for seed in a.seeds:
        for v in a.variants:
            rec = _train_and_score(cfg, corpus, replace(cfg.model, variant=v), seed)
            grid.append(rec)
            say(f"grid {v} seed {seed}: CS ALL {rec.get('cs', {}).get('ALL')}")
    records += [{"type": "grid", **r} for r in grid]
    records += _win_counts(grid, a.seeds)
    full = replace(cfg.model, variant="LAE_ST_MOE_CTC")
    for seed in a.sweep_seeds:
        for beta in a.betas:
            rec = _train_and_score(cfg, corpus, replace(full, beta=beta), seed)
            records.append({"type": "beta_sweep", **rec})
            say(f"beta {beta} seed {seed}: CS ALL {rec.get('cs', {}).get('ALL')}")
        for n_mono in a.n_mono:
            depth_cfg = replace(full, n_share=full.n_encoder - a.branch_depth, n_mono=n_mono)
            rec = _train_and_score(cfg, corpus, depth_cfg, seed)
            records.append({"type": "n_mono_sweep", **rec})
            say(f"n_mono {n_mono} seed {seed}: CS ALL {rec.get('cs', {}).get('ALL')}")
    if a.check_steps > 0:
        records.append(beta_zero_check(cfg, corpus, a.check_steps))
    out = cfg.out_dir / "ablate"
    _write_jsonl(out / "ablate.jsonl", records)
    (out / "ablate.txt").write_text(_ablate_text(records), encoding="utf-8")
    return records


def _mer_cells(r: dict) -> list:
    return [r.get(s, {}).get("ALL", "-") for s in EVAL_SETS] + [r.get("cs", {}).get(k, "-") for k in ("CN", "EN")]


def _ablate_text(records: list[dict]) -> str:
    cols = ["CS ALL", "CN-only", "EN-only", "CS CN", "CS EN"]
    parts = ["Variant grid, MER (%) on held-out sets",
             _table(["variant", "seed"] + cols,
                    [[r["variant"], r["seed"]] + _mer_cells(r) for r in records if r["type"] == "grid"])]
    wins = [r for r in records if r["type"] == "wins"]
    if wins:
        parts += ["", "Directional claims (CS ALL MER, per seed)",
                  _table(["claim", "wins"], [[w["claim"], f"{w['wins']}/{w['of']}"] for w in wins])]
    for kind, key, title in (("beta_sweep", "beta", "beta sweep"), ("n_mono_sweep", "n_mono", "n_mono sweep")):
        rows = [[r[key], r["seed"]] + _mer_cells(r) for r in records if r["type"] == kind]
        if rows:
            parts += ["", title, _table([key, "seed"] + cols, rows)]
    chk = [r for r in records if r["type"] == "beta_zero_check"]
    if chk:
        parts += ["", f"beta=0 vs ASR-only loss logs over {chk[0]['steps']} steps: "
                      f"{'identical' if chk[0]['identical'] else 'DIFFERENT'}"]
    parts += ["", "config " + json.dumps(records[0]["config"], sort_keys=True)]
    return "\n".join(parts) + "\n"


# -- entry point ------------------------------------------------------------------------------
class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="python -m csmoe", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("gen", "train", "eval", "translate", "ablate"))
    p.add_argument("--config", help="JSON run configuration (a report header record also works)")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="checkpoint to evaluate, translate with, or resume from")
    p.add_argument("--beam", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="gen: overwrite an existing corpus")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message.replace("\n", " ")}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "checkpoint": args.checkpoint,
                                        "beam": args.beam, "beta": args.beta, "variant": args.variant})
        if args.command == "gen":
            cmd_gen(cfg, force=args.force)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "translate":
            cmd_translate(cfg)
        else:
            cmd_ablate(cfg, progress=lambda msg: print(msg, file=sys.stderr, flush=True))
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except (FileNotFoundError, FileExistsError, CheckpointError) as exc:
        return _fail("io", str(exc), 1)
    except TrainingError as exc:
        return _fail("training", str(exc), 1)
    except (ValueError, FloatingPointError) as exc:
        return _fail("runtime", str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
