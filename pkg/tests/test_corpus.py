from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csmoe.corpus import (EN, MAN, CorpusSpec, FeatureSpec, VocabSpec, featurize, gen_corpus, make_utterance,
                          mask_monolingual, read_corpus, read_manifest, toy_translate, utterance_from_record,
                          utterance_to_record, write_corpus)

V = VocabSpec()
M, E = V.man_tokens, V.en_tokens
mixed = st.lists(st.sampled_from(M + E), min_size=1, max_size=10)


def test_vocabulary_layout():
    assert set(M).isdisjoint(E)
    assert set(V.specials).isdisjoint(M + E)
    assert V.size == 46 and V.blank == 0 and V.specials == (0, 1, 2, 3, 4, 5)


def test_vocab_file_round_trip(tmp_path):
    V.write(tmp_path / "vocab.txt")
    assert VocabSpec.read(tmp_path / "vocab.txt") == V


# -- translation ------------------------------------------------------------------------
def test_translate_identity_direction():
    y = (M[0], M[5], M[2])
    assert toy_translate(y, MAN, V) == y


def test_translate_index_aligned():
    assert toy_translate((M[3], E[7], M[1]), EN, V) == (E[3], E[7], E[1])


@given(mixed)
def test_translate_round_trip(y):
    assert toy_translate(toy_translate(y, EN, V), MAN, V) == toy_translate(y, MAN, V)
    assert len(toy_translate(y, EN, V)) == len(y)


def test_translate_is_a_bijection_per_language():
    assert sorted(toy_translate(M, EN, V)) == sorted(E)
    assert sorted(toy_translate(E, MAN, V)) == sorted(M)


def test_translate_rejects_unknown_tokens():
    with pytest.raises(ValueError):
        toy_translate((0,), EN, V)


# -- masking ----------------------------------------------------------------------------------
def test_mask_worked_example():
    y = V.encode(["真", "正", "做", "到", "happy", "every", "day"])
    out = mask_monolingual(y, MAN, V)
    assert V.decode(out) == ["真", "正", "做", "到", "<eng>", "<eng>", "<eng>"]


def test_mask_all_kept_language_is_identity():
    assert mask_monolingual(M[:4], MAN, V) == M[:4]


@given(mixed)
def test_mask_properties(y):
    m, e = mask_monolingual(y, MAN, V), mask_monolingual(y, EN, V)
    assert m.count(V.eng_mask) == sum(t in E for t in y)
    assert mask_monolingual(m, MAN, V) == m and mask_monolingual(e, EN, V) == e
    assert all(a != b for a, b in zip(m, e))
    assert len(m) == len(e) == len(y)


def test_mask_rejects_specials():
    with pytest.raises(ValueError, match="special"):
        mask_monolingual((V.sos, M[0]), MAN, V)


# -- features ----------------------------------------------------------------------------------
def test_noise_free_features_depend_only_on_tokens():
    spec = FeatureSpec(noise_sigma=0.0)
    y = (M[0], E[1])
    np.testing.assert_array_equal(featurize(y, spec, 1), featurize(y, spec, 2))


@given(st.lists(st.sampled_from(M + E), min_size=1, max_size=6), st.integers(1, 9))
def test_feature_length_law(y, fpt):
    spec = FeatureSpec(frames_per_token=fpt)
    assert featurize(y, spec, 0).shape == (len(y) * fpt, spec.feature_dim)


def test_features_are_regenerated_byte_identically():
    spec = FeatureSpec()
    a = featurize((M[1], E[2], M[3]), spec, 42)
    b = featurize((M[1], E[2], M[3]), spec, 42)
    assert a.tobytes() == b.tobytes()


# -- generation ----------------------------------------------------------------------------------
def test_default_spec():
    s = CorpusSpec()
    assert (s.n_train, s.cs_fraction, s.min_len, s.max_len, s.frames_per_token, s.feature_dim,
            s.noise_sigma) == (50, 0.6, 3, 8, 8, 8, 0.1)


def test_generation_is_deterministic(tmp_path):
    write_corpus(gen_corpus(CorpusSpec()), tmp_path / "a")
    write_corpus(gen_corpus(CorpusSpec()), tmp_path / "b")
    for name in ("train.jsonl", "eval_cs.jsonl", "eval_man.jsonl", "eval_en.jsonl", "vocab.txt", "corpus.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_all_label_views_are_consistent(small_corpus):
    for u in small_corpus.train + [x for v in small_corpus.eval.values() for x in v]:
        assert u.y_man_spec == mask_monolingual(u.y_cs, MAN, V)
        assert u.y_en_spec == mask_monolingual(u.y_cs, EN, V)
        assert u.y_man == toy_translate(u.y_cs, MAN, V) and u.y_en == toy_translate(u.y_cs, EN, V)
        assert len(u.lang) == len(u.y_cs)
        assert u.n_frames == len(u.y_cs) * 8


def test_eval_sets_mirror_three_way_split(small_corpus):
    assert set(small_corpus.eval) == {"cs", "man", "en"}
    assert all(u.kind == "cs" for u in small_corpus.eval["cs"])
    assert all(u.kind == "man" for u in small_corpus.eval["man"])
    assert all(u.kind == "en" for u in small_corpus.eval["en"])


def test_eval_disjoint_from_train(small_corpus):
    train_ids = {u.id for u in small_corpus.train}
    train_seqs = {u.y_cs for u in small_corpus.train}
    for utts in small_corpus.eval.values():
        assert not train_ids & {u.id for u in utts}
        assert not train_seqs & {u.y_cs for u in utts}


def test_zero_cs_fraction_is_monolingual_and_warns():
    with pytest.warns(UserWarning, match="empty"):
        c = gen_corpus(CorpusSpec(n_train=20, n_eval=3, cs_fraction=0.0))
    assert c.eval["cs"] == []
    assert all(u.kind != "cs" for u in c.train)


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(min_len=0)
    with pytest.raises(ValueError):
        CorpusSpec(cs_fraction=1.5)


# -- manifests -----------------------------------------------------------------------------------
@given(mixed, st.integers(0, 2**31 - 1))
def test_manifest_record_round_trip(y, seed):
    u = make_utterance("u-1", y, V, FeatureSpec(), seed)
    assert utterance_from_record(utterance_to_record(u)) == u


def test_corpus_round_trip_and_overwrite_guard(tmp_path, small_corpus):
    write_corpus(small_corpus, tmp_path)
    back = read_corpus(tmp_path)
    assert back.train == small_corpus.train and back.eval == small_corpus.eval
    assert back.spec == small_corpus.spec and back.vocab == small_corpus.vocab
    with pytest.raises(FileExistsError):
        write_corpus(small_corpus, tmp_path)
    write_corpus(small_corpus, tmp_path, force=True)
    assert read_manifest(tmp_path / "train.jsonl") == small_corpus.train
