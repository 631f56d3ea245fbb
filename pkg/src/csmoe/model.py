"""Model assembly for every variant, the joint ASR + ST objective and training.

Parameter trees are nested dicts and lists of tensors.  ``named_parameters``
flattens them into dotted names such as ``branches.man.tail.0.experts.st.ffn.w1``;
the same names key checkpoints and gradient reports.

Forward passes are batched: features ``[B, T, F]`` plus per-utterance frame
counts.  Every loss field is the mean over reachable utterances of the
per-utterance losses, and the composed fields are built from those means so
that the composition identities hold as exact floating-point arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .ctc import BLANK, ctc_loss_batch
from .moe import init_moe_block, stack_moe_blocks
from .numerics import Tensor, rng_stream
from .transformer import (BlockConfig, Dropout, causal_mask, decoder_block, encoder_block,
                          init_decoder_block, init_encoder_block, init_linear, init_subsample,
                          linear, padding_mask, sinusoid_table, subsample, xavier)

VARIANTS = ("VANILLA_CTC", "LAE_CTC", "LAE_ST_CTC", "LAE_ST_MOE_CTC",
            "VANILLA_AED", "LAE_AED", "LAE_ST_MOE_AED")
LANGS = ("man", "en")
ST_DIRECTIONS = ("man2en", "en2man")

# ids the model relies on; they match corpus.VocabSpec
SOS, EOS = 3, 4


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "LAE_ST_MOE_CTC"
    n_encoder: int = 6
    n_share: int = 4
    n_mono: int = 1
    block: BlockConfig = field(default_factory=BlockConfig)
    n_st_dec_blocks: int = 2
    n_asr_dec_blocks: int = 2
    lambda_spec: float = 0.3
    lambda_ctc: float = 0.3
    beta: float = 0.6
    label_smoothing: float = 0.1
    vocab_size: int = 46
    n_feats: int = 8

    def __post_init__(self):
        if isinstance(self.block, dict):
            object.__setattr__(self, "block", BlockConfig(**self.block))
        problems = self.violations()
        if problems:
            raise ConfigError("configuration error: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {', '.join(VARIANTS)}")
            return out
        if min(self.n_encoder, self.n_share, self.n_mono) < 0:
            out.append("n_encoder, n_share, n_mono must be non-negative")
        if self.n_moe < 0:
            out.append("n_moe = n_encoder - n_share - n_mono must be >= 0")
        if self.has_st and self.n_moe < 1:
            out.append("n_moe >= 1 required for ST-bearing variants")
        if self.is_lae and self.n_encoder - self.n_share < 1:
            out.append("language-aware variants need n_encoder - n_share >= 1")
        if self.is_vanilla and self.n_encoder < 1:
            out.append("n_encoder >= 1 required")
        if self.n_st_dec_blocks < 1 or self.n_asr_dec_blocks < 1:
            out.append("decoder block counts must be positive")
        for name in ("lambda_spec", "lambda_ctc", "label_smoothing"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                out.append(f"{name} must lie in [0, 1]")
        if not self.beta >= 0.0:
            out.append("beta must be >= 0")
        if self.vocab_size <= SOS + 3 or self.n_feats < 1:
            out.append("vocab_size and n_feats too small")
        return out

    @property
    def n_moe(self) -> int:
        return self.n_encoder - self.n_share - self.n_mono

    @property
    def is_vanilla(self) -> bool:
        return self.variant.startswith("VANILLA")

    @property
    def is_lae(self) -> bool:
        return not self.is_vanilla

    @property
    def has_st(self) -> bool:
        return "_ST_" in self.variant

    @property
    def has_moe(self) -> bool:
        return "_MOE_" in self.variant

    @property
    def is_aed(self) -> bool:
        return self.variant.endswith("_AED")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"configuration error: unknown model keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("block"), dict):
            d["block"] = BlockConfig(**d["block"])
        return cls(**d)


# -- parameters -------------------------------------------------------------------------
def named_parameters(tree, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a parameter tree in insertion order."""
    out: dict[str, Tensor] = {}
    if isinstance(tree, Tensor):
        out[prefix] = tree
    elif isinstance(tree, dict):
        for k, v in tree.items():
            out.update(named_parameters(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            out.update(named_parameters(v, f"{prefix}.{i}" if prefix else str(i)))
    else:
        raise TypeError(f"unexpected node {type(tree).__name__} at {prefix!r}")
    return out


@dataclass
class Model:
    cfg: ModelConfig
    params: dict
    seed: int = 0

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params)

    @property
    def dtype(self):
        return self.params["subsample"]["conv1"]["w"].dtype

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def astype(self, dtype) -> Model:
        """A deep copy with every parameter cast to ``dtype``."""
        return Model(self.cfg, _map_tree(self.params, lambda t: Tensor(t.data.astype(dtype), requires_grad=True)),
                     self.seed)

    def copy(self) -> Model:
        return self.astype(self.dtype)


def _map_tree(tree, fn):
    if isinstance(tree, Tensor):
        return fn(tree)
    if isinstance(tree, dict):
        return {k: _map_tree(v, fn) for k, v in tree.items()}
    return [_map_tree(v, fn) for v in tree]


def _init_decoder(rng, cfg: ModelConfig, n_blocks: int, dtype) -> dict:
    d = cfg.block.d_model
    return {"embed": xavier(rng, cfg.vocab_size, d, dtype),
            "blocks": [init_decoder_block(rng, cfg.block, dtype) for _ in range(n_blocks)],
            "out": init_linear(rng, d, cfg.vocab_size, dtype)}


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Xavier-uniform weights, zero biases, unit norm gains.

    Each component draws from its own named stream, so components common to
    two variants start identical under the same seed.
    """
    bc, d, v = cfg.block, cfg.block.d_model, cfg.vocab_size

    def stream(*names):
        return rng_stream(seed, "init", *names)

    params: dict = {"subsample": init_subsample(stream("subsample"), cfg.n_feats, d, dtype)}
    n_shared = cfg.n_encoder if cfg.is_vanilla else cfg.n_share
    params["shared"] = [init_encoder_block(stream("shared", i), bc, dtype) for i in range(n_shared)]
    if cfg.is_lae:
        branches = {}
        for lang in LANGS:
            tail = []
            for i in range(cfg.n_moe):
                rng = stream(lang, "tail", i)
                if cfg.has_moe:
                    tail.append(init_moe_block(rng, bc, with_st=(i == cfg.n_moe - 1), dtype=dtype))
                else:
                    tail.append(init_encoder_block(rng, bc, dtype))
            branches[lang] = {"tail": tail,
                              "mono": [init_encoder_block(stream(lang, "mono", i), bc, dtype)
                                       for i in range(cfg.n_mono)],
                              "ctc": init_linear(stream(lang, "ctc"), d, v, dtype)}
        params["branches"] = branches
    params["ctc"] = init_linear(stream("ctc"), d, v, dtype)
    if cfg.has_st:
        params["st"] = {k: _init_decoder(stream("st", k), cfg, cfg.n_st_dec_blocks, dtype)
                        for k in ST_DIRECTIONS}
    if cfg.is_aed:
        params["att"] = _init_decoder(stream("att"), cfg, cfg.n_asr_dec_blocks, dtype)
    return Model(cfg, params, seed)


# -- batches ----------------------------------------------------------------------------------
@dataclass
class Batch:
    ids: list[str]
    feats: np.ndarray  # [B, T, F], zero padded
    lengths: np.ndarray
    y_cs: list[tuple[int, ...]]
    y_man_spec: list[tuple[int, ...]]
    y_en_spec: list[tuple[int, ...]]
    y_man: list[tuple[int, ...]]
    y_en: list[tuple[int, ...]]

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(utts: Sequence, dtype=np.float32) -> Batch:
    if not utts:
        raise ValueError("empty batch")
    lengths = np.array([u.features.shape[0] for u in utts])
    f = utts[0].features.shape[1]
    feats = np.zeros((len(utts), int(lengths.max()), f), dtype=dtype)
    for i, u in enumerate(utts):
        feats[i, :lengths[i]] = u.features
    return Batch([u.id for u in utts], feats, lengths,
                 [tuple(u.y_cs) for u in utts], [tuple(u.y_man_spec) for u in utts],
                 [tuple(u.y_en_spec) for u in utts], [tuple(u.y_man) for u in utts],
                 [tuple(u.y_en) for u in utts])


def as_batch(data, dtype) -> Batch:
    if isinstance(data, Batch):
        return data
    if hasattr(data, "features"):
        data = [data]
    return make_batch(data, dtype)


# -- forward ------------------------------------------------------------------------------------
@dataclass
class BranchState:
    h_asr_st: Tensor | None  # shared attention stream of the final MoE block
    h0_asr: Tensor
    h_st: Tensor | None
    h_asr: Tensor


@dataclass
class ForwardState:
    h_share: Tensor
    branches: dict[str, BranchState]
    h_global_asr: Tensor
    lengths: np.ndarray
    mask: np.ndarray | None


def forward(model: Model, feats, lengths=None, drop: Dropout | None = None) -> ForwardState:
    """Shared stack, per-language branches and their elementwise sum.

    ``feats`` is ``[B, T, F]`` (or a single ``[T, F]`` sequence, treated as a
    batch of one).
    """
    cfg = model.cfg
    p = model.params
    x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=model.dtype))
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    h, lens = subsample(x, p["subsample"], lengths)
    mask = None if (lens == h.shape[1]).all() else padding_mask(lens, h.shape[1])
    for i, blk in enumerate(p["shared"]):
        h = encoder_block(h, blk, cfg.block, mask, drop, f"shared.{i}")
    h_share = h
    if cfg.is_vanilla:
        return ForwardState(h_share, {}, h_share, lens, mask)

    branches = {}
    for lang in LANGS:
        br = p["branches"][lang]
        a = h_st = None
        h = h_share
        if cfg.has_moe:
            a, h, h_st = stack_moe_blocks(h_share, br["tail"], cfg.block, mask, drop,
                                          f"{lang}.tail", return_stream=True)
        else:
            for i, blk in enumerate(br["tail"]):
                h = encoder_block(h, blk, cfg.block, mask, drop, f"{lang}.tail.{i}")
            if cfg.has_st:
                h_st = h
        h0 = h
        for i, blk in enumerate(br["mono"]):
            h = encoder_block(h, blk, cfg.block, mask, drop, f"{lang}.mono.{i}")
        branches[lang] = BranchState(a, h0, h_st, h)
    h_global = branches["man"].h_asr + branches["en"].h_asr
    return ForwardState(h_share, branches, h_global, lens, mask)


def ctc_log_probs(h: Tensor, head: dict) -> Tensor:
    return nx.log_softmax(linear(h, head), axis=-1)


def decoder_log_probs(dec: dict, memory: Tensor, memory_mask, ys_in: np.ndarray, cfg: ModelConfig,
                      in_lengths=None, drop: Dropout | None = None, site: str = "dec") -> Tensor:
    """Teacher-forced ``[B, L, V]`` log-probabilities for decoder inputs ``ys_in``."""
    ys_in = np.asarray(ys_in, dtype=int)
    b, l_in = ys_in.shape
    d = cfg.block.d_model
    emb = dec["embed"]
    # a stacked [B, V, D] table gives every batch row its own embedding
    rows = emb[np.arange(emb.shape[0])[:, None], ys_in] if emb.ndim == 3 else emb[ys_in]
    h = rows * math.sqrt(d) + Tensor(sinusoid_table(l_in, d).astype(memory.dtype))
    if drop is not None:
        h = drop(h, site + ".embed")
    self_mask = causal_mask(l_in)
    if in_lengths is not None and (np.asarray(in_lengths) < l_in).any():
        self_mask = self_mask[None] & padding_mask(in_lengths, l_in)
    for i, blk in enumerate(dec["blocks"]):
        h = decoder_block(h, memory, blk, cfg.block, self_mask, memory_mask, drop, f"{site}.{i}")
    return nx.log_softmax(linear(h, dec["out"]), axis=-1)


def teacher_forcing(targets: Sequence[Sequence[int]]):
    """``<sos> y`` inputs, ``y <eos>`` outputs, both padded, plus the output mask."""
    lens = np.array([len(y) + 1 for y in targets])
    l_max = int(lens.max())
    ys_in = np.full((len(targets), l_max), EOS, dtype=int)
    ys_out = np.full((len(targets), l_max), EOS, dtype=int)
    for i, y in enumerate(targets):
        ys_in[i, 0] = SOS
        ys_in[i, 1:len(y) + 1] = y
        ys_out[i, :len(y)] = y
    mask = np.arange(l_max)[None, :] < lens[:, None]
    return ys_in, ys_out, mask, lens


def smoothed_ce(log_probs: Tensor, ys_out: np.ndarray, mask: np.ndarray, smoothing: float) -> Tensor:
    """Per-utterance label-smoothed loss summed over target tokens.

    Computed as KL(q || p) with ``q = (1 - s) onehot + s / V``, which is the
    cross-entropy minus the entropy of ``q``; it is zero for a perfect fit and
    equals plain cross-entropy when ``s = 0``.
    """
    b, l_out, v = log_probs.shape
    bi = np.arange(b)[:, None]
    li = np.arange(l_out)[None, :]
    gold = log_probs[bi, li, ys_out]
    tok = gold * (-(1.0 - smoothing))
    if smoothing > 0.0:
        on, off = 1.0 - smoothing + smoothing / v, smoothing / v
        entropy_term = on * math.log(on) + (v - 1) * off * math.log(off)
        # q . log p = (1 - s) log p[gold] + (s / V) sum_v log p[v]
        tok = tok - nx.tsum(log_probs, axis=-1) * (smoothing / v) + entropy_term
    return nx.tsum(tok * Tensor(mask.astype(log_probs.dtype)), axis=-1)


# -- losses ---------------------------------------------------------------------------------
LOSS_FIELDS = ("l_man_ctc", "l_en_ctc", "l_spec", "l_global_ctc", "l_global_att",
               "l_global_decoder", "l_asr", "l_st_man2en", "l_st_en2man", "l_st", "l_final")


@dataclass
class LossBreakdown:
    """Batch-mean losses plus the weights that composed them.

    ``lambda_spec``/``lambda_ctc``/``beta`` are the weights actually in force:
    vanilla variants have no language branches (weight 0 on ``l_spec``), CTC
    variants put weight 1 on ``l_global_ctc``, and non-ST or ASR-only runs put
    weight 0 on ``l_st``.
    """

    l_man_ctc: float = 0.0
    l_en_ctc: float = 0.0
    l_spec: float = 0.0
    l_global_ctc: float = 0.0
    l_global_att: float = 0.0
    l_global_decoder: float = 0.0
    l_asr: float = 0.0
    l_st_man2en: float = 0.0
    l_st_en2man: float = 0.0
    l_st: float = 0.0
    l_final: float = 0.0
    lambda_spec: float = 0.0
    lambda_ctc: float = 1.0
    beta: float = 0.0
    dtype: str = "float32"
    n_utts: int = 0
    skipped: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return asdict(self)

    def identity_errors(self) -> list[str]:
        """Composition identities that do not hold bitwise in ``dtype``."""
        f = np.dtype(self.dtype).type
        g = {k: f(getattr(self, k)) for k in LOSS_FIELDS}
        lam_s, lam_c = f(self.lambda_spec), f(self.lambda_ctc)
        checks = {
            "l_spec": (g["l_man_ctc"] + g["l_en_ctc"]) * f(0.5),
            "l_global_decoder": lam_c * g["l_global_ctc"] + f(1.0 - self.lambda_ctc) * g["l_global_att"],
            "l_asr": lam_s * g["l_spec"] + f(1.0 - self.lambda_spec) * g["l_global_decoder"],
            "l_st": (g["l_st_man2en"] + g["l_st_en2man"]) * f(0.5),
            "l_final": g["l_asr"] + f(self.beta) * g["l_st"],
        }
        return [k for k, v in checks.items() if not np.array_equal(v, g[k])]


@dataclass
class LossTerms:
    """Differentiable counterparts of the breakdown fields."""

    values: dict[str, Tensor]
    breakdown: LossBreakdown
    per_utt: dict[str, Tensor] = field(default_factory=dict)
    reachable: np.ndarray | None = None

    @property
    def final(self) -> Tensor:
        return self.values["l_final"]


def _masked_mean(vec: Tensor, weights: np.ndarray) -> Tensor:
    return nx.tsum(vec * Tensor(weights.astype(vec.dtype)))


def compute_losses(model: Model, data, drop: Dropout | None = None, beta: float | None = None,
                   asr_only: bool = False, state: ForwardState | None = None) -> LossTerms:
    """Every loss field for a batch (or a single utterance).

    ``asr_only`` keeps the ST losses as monitored values but leaves them out of
    ``l_final``.  Utterances with an unreachable CTC target are dropped from
    all means and listed in ``breakdown.skipped``.
    """
    cfg = model.cfg
    beta = cfg.beta if beta is None else beta
    batch = as_batch(data, model.dtype)
    st = state or forward(model, batch.feats, batch.lengths, drop)
    lens = st.lengths
    p = model.params
    zero = Tensor(np.zeros((), dtype=model.dtype))

    glob, reach = ctc_loss_batch(ctc_log_probs(st.h_global_asr, p["ctc"]), lens, batch.y_cs, BLANK)
    spec_losses = {}
    if cfg.is_lae:
        for lang, targets in (("man", batch.y_man_spec), ("en", batch.y_en_spec)):
            lp = ctc_log_probs(st.branches[lang].h_asr, p["branches"][lang]["ctc"])
            spec_losses[lang], r = ctc_loss_batch(lp, lens, targets, BLANK)
            reach = reach & r
    n_ok = int(reach.sum())
    skipped = tuple(uid for uid, ok in zip(batch.ids, reach) if not ok)
    if n_ok == 0:
        raise TrainingError("no utterance in the batch has a reachable CTC target")
    w = reach / n_ok

    raw: dict[str, Tensor] = {"l_global_ctc": glob}
    lam_c = 1.0
    if cfg.is_aed:
        lam_c = cfg.lambda_ctc
        ys_in, ys_out, m, in_lens = teacher_forcing(batch.y_cs)
        lp = decoder_log_probs(p["att"], st.h_global_asr, st.mask, ys_in, cfg, in_lens, drop, "att")
        raw["l_global_att"] = smoothed_ce(lp, ys_out, m, cfg.label_smoothing)
    lam_s = 0.0
    if cfg.is_lae:
        lam_s = cfg.lambda_spec
        raw["l_man_ctc"], raw["l_en_ctc"] = spec_losses["man"], spec_losses["en"]
    beta_eff = 0.0
    if cfg.has_st:
        # Man2En reads the English-side branch tap and emits English; En2Man mirrors it
        for key, lang, targets in (("man2en", "en", batch.y_en), ("en2man", "man", batch.y_man)):
            ys_in, ys_out, m, in_lens = teacher_forcing(targets)
            lp = decoder_log_probs(p["st"][key], st.branches[lang].h_st, st.mask, ys_in, cfg,
                                   in_lens, drop, f"st.{key}")
            raw[f"l_st_{key}"] = smoothed_ce(lp, ys_out, m, cfg.label_smoothing)
        if not asr_only:
            beta_eff = beta
    with_st = cfg.has_st and not asr_only

    v = _compose({k: _masked_mean(t, w) for k, t in raw.items()}, zero, cfg, lam_c, lam_s, beta_eff, with_st)
    per_utt = _compose(raw, zero, cfg, lam_c, lam_s, beta_eff, with_st)
    bd = LossBreakdown(**{k: float(t.data) for k, t in v.items()}, lambda_spec=lam_s, lambda_ctc=lam_c,
                       beta=beta_eff, dtype=np.dtype(model.dtype).name, n_utts=n_ok, skipped=skipped)
    return LossTerms(v, bd, per_utt, reach)


def _compose(raw: dict[str, Tensor], zero: Tensor, cfg: ModelConfig, lam_c: float, lam_s: float,
             beta: float, with_st: bool) -> dict[str, Tensor]:
    """Build the composed fields from the leaf losses, in the documented order."""
    v = {k: raw.get(k, zero) for k in LOSS_FIELDS}
    v["l_global_decoder"] = v["l_global_ctc"] * lam_c + v["l_global_att"] * (1.0 - lam_c)
    if cfg.is_lae:
        v["l_spec"] = (v["l_man_ctc"] + v["l_en_ctc"]) * 0.5
    v["l_asr"] = v["l_spec"] * lam_s + v["l_global_decoder"] * (1.0 - lam_s)
    if cfg.has_st:
        v["l_st"] = (v["l_st_man2en"] + v["l_st_en2man"]) * 0.5
    # a zero weight drops the term so beta = 0 builds exactly the ASR-only graph; the extra
    # zero-gradient branch would otherwise reorder gradient accumulation in the shared encoder
    v["l_final"] = v["l_asr"] + v["l_st"] * beta if with_st and beta != 0 else v["l_asr"]
    return v


def asr_loss(model: Model, utt) -> LossBreakdown:
    return compute_losses(model, utt, asr_only=True).breakdown


def st_loss(model: Model, utt) -> LossBreakdown:
    if not model.cfg.has_st:
        raise ConfigError(f"configuration error: {model.cfg.variant} has no ST decoders")
    return compute_losses(model, utt).breakdown


def final_loss(model: Model, utt, beta: float | None = None) -> LossBreakdown:
    return compute_losses(model, utt, beta=beta).breakdown


# -- optimisation ----------------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup: int = 200
    clip_norm: float = 5.0
    adam_b1: float = 0.9
    adam_b2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0
    asr_only: bool = False
    log_every: int = 1


def lr_at(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``warmup`` steps, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("steps are 1-based")
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: AdamState,
                lr: float, tcfg: TrainConfig) -> None:
    """One Adam step.  Parameter arrays are replaced, never written in place."""
    opt.step += 1
    b1, b2 = tcfg.adam_b1, tcfg.adam_b2
    c1, c2 = 1.0 - b1 ** opt.step, 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        m = opt.m.get(name)
        v = opt.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + tcfg.adam_eps)


def _find_bad_utterance(model: Model, batch: Batch, drop, beta, asr_only) -> str:
    for i, uid in enumerate(batch.ids):
        one = Batch([uid], batch.feats[i:i + 1, :batch.lengths[i]], batch.lengths[i:i + 1],
                    batch.y_cs[i:i + 1], batch.y_man_spec[i:i + 1], batch.y_en_spec[i:i + 1],
                    batch.y_man[i:i + 1], batch.y_en[i:i + 1])
        try:
            with nx.no_grad():
                compute_losses(model, one, drop, beta, asr_only)
        except (FloatingPointError, TrainingError):
            return uid
    return batch.ids[0]


def train_step(model: Model, data, opt: AdamState, tcfg: TrainConfig,
               beta: float | None = None) -> LossBreakdown:
    """Forward, backward, clip and Adam-update in place on ``model``."""
    batch = as_batch(data, model.dtype)
    step = opt.step + 1
    drop = Dropout(model.cfg.block.dropout, tcfg.seed, step) if model.cfg.block.dropout > 0 else None
    params = model.named_parameters()
    for t in params.values():
        t.grad = None
    try:
        terms = compute_losses(model, batch, drop, beta, tcfg.asr_only)
        terms.final.backward()
    except FloatingPointError as exc:
        uid = _find_bad_utterance(model, batch, drop, beta, tcfg.asr_only)
        raise TrainingError(f"non-finite loss at step {step}, utterance {uid}: {exc}") from exc
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    norm = grad_norm(grads)
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient at step {step}, utterance {batch.ids[0]}")
    if norm > tcfg.clip_norm:
        scale = tcfg.clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    adam_update(params, grads, opt, lr_at(step, tcfg.peak_lr, tcfg.warmup), tcfg)
    for t in params.values():
        t.grad = None
    return terms.breakdown


def batch_order(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Indices of the batch used at 1-based ``step``.

    Each epoch is a fresh permutation from a named stream; a trailing partial
    batch is dropped unless the corpus is smaller than one batch.
    """
    per_epoch = max(1, n // batch_size)
    epoch, k = divmod(step - 1, per_epoch)
    perm = rng_stream(seed, "batches", epoch).permutation(n)
    size = min(batch_size, n)
    return perm[k * size:(k + 1) * size].tolist()


def train(model: Model, utts: Sequence, tcfg: TrainConfig, opt: AdamState | None = None,
          beta: float | None = None,
          on_step: Callable[[int, LossBreakdown], None] | None = None) -> tuple[AdamState, list[LossBreakdown]]:
    """Run ``tcfg.steps`` steps from ``opt.step`` onward; returns the optimiser and per-step losses."""
    opt = opt or AdamState()
    log = []
    while opt.step < tcfg.steps:
        idx = batch_order(len(utts), tcfg.batch_size, tcfg.seed, opt.step + 1)
        bd = train_step(model, [utts[i] for i in idx], opt, tcfg, beta)
        log.append(bd)
        if on_step is not None:
            on_step(opt.step, bd)
    return opt, log


def with_beta(cfg: ModelConfig, beta: float) -> ModelConfig:
    return replace(cfg, beta=beta)


# -- gradient checking support --------------------------------------------------------------
def perturbation_evaluator(model: Model, utt, beta: float | None = None):
    """Callable for ``numerics.grad_check(perturbed=...)`` on one utterance.

    The stacked copies are laid out as a leading batch axis (matrices become
    ``[K, d_in, d_out]``, vectors ``[K, 1, D]``) while the utterance stays a
    batch of one.  Broadcasting then evaluates everything upstream of the
    perturbed parameter once and everything downstream K times.
    """
    params = model.named_parameters()
    batch = make_batch([utt], model.dtype)

    def evaluate(name: str, stacked: np.ndarray) -> np.ndarray:
        t = params[name]
        k = stacked.shape[0]
        saved = t.data
        t.data = stacked.reshape(k, 1, *saved.shape) if saved.ndim == 1 else stacked
        try:
            with nx.no_grad():
                terms = compute_losses(model, batch, beta=beta)
        finally:
            t.data = saved
        return np.broadcast_to(terms.per_utt["l_final"].data, (k,))

    return evaluate
