"""Train the tiny model on 50 synthetic utterances, then recognise and translate.

About a minute on one CPU core.  Run with
``python3 demos/03_overfit_and_rescore.py``.
"""

from __future__ import annotations

import time

from csmoe.cli import DecodeSettings, build_lm, score_asr
from csmoe.corpus import CorpusSpec, gen_corpus
from csmoe.decode import decode_asr, decode_st, rescore_with_st
from csmoe.metrics import bleu
from csmoe.model import ModelConfig, TrainConfig, build_model, train

corpus = gen_corpus(CorpusSpec())
model = build_model(ModelConfig(), seed=0)
t0 = time.perf_counter()


def show(step, bd):
    if step % 200 == 0:
        print(f"step {step:4d}  L_ASR {bd.l_asr:7.3f}  L_ST {bd.l_st:7.3f}  L_final {bd.l_final:7.3f}  "
              f"({time.perf_counter() - t0:.0f} s)")


train(model, corpus.train, TrainConfig(steps=1000, seed=0), on_step=show)

# %% Recognition with n-gram shallow fusion
settings = DecodeSettings()
lm = build_lm(corpus, settings.lm_order)
hyps = [decode_asr(model, u, settings.params(), lm)[0].tokens for u in corpus.train]
errs = score_asr(hyps, corpus.train, corpus)
print(f"\ntrain MER {100 * errs.all.rate:.2f}%  (CN {100 * errs.cn.rate:.2f}%, EN {100 * errs.en.rate:.2f}%)")

# %% Translation from the code-switching input into each language
for direction, ref in (("man2en", "y_en"), ("en2man", "y_man")):
    out = [decode_st(model, u, direction) for u in corpus.train]
    print(f"{direction} BLEU {bleu([getattr(u, ref) for u in corpus.train], out):.1f}")

u = corpus.train[0]
words = corpus.vocab.decode
print("\nexample  :", " ".join(words(u.y_cs)))
print("-> EN    :", " ".join(words(decode_st(model, u, "man2en"))))
print("-> CN    :", " ".join(words(decode_st(model, u, "en2man"))))

# %% Rescoring an n-best list with the Mandarin-output translation decoder
nbest = decode_asr(model, u, settings.params(), lm)
for e in rescore_with_st(nbest, model, u, "en2man", settings.gamma_st)[:3]:
    print(f"{' '.join(words(e.tokens)):<40} total {e.total:8.3f}  ctc {e.ctc_logp:8.3f}  st {e.rescore_logp:8.3f}")
