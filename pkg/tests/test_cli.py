from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from csmoe.checkpoint import read_header
from csmoe.cli import ConfigError, RunConfig, load_config, main

SMALL = {
    "seed": 5,
    "corpus": {"n_train": 12, "n_eval": 4},
    "train": {"steps": 20, "batch_size": 4},
    "checkpoint_every": 10,
    "decode": {"beam": 2, "st_beam": 2},
}


def write_config(tmp_path: Path, **extra) -> Path:
    cfg = {**SMALL, "out": str(tmp_path / "run"), **extra}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv) -> int:
    return main([str(a) for a in argv])


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln]


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert run("gen", "--config", cfg) == 0
    assert run("train", "--config", cfg) == 0
    return tmp, cfg


# -- configuration -------------------------------------------------------------------------------
def test_seed_is_mandatory(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        load_config(None, {})
    assert load_config(None, {"seed": 3}).train.seed == 3


def test_flag_overrides(tmp_path):
    cfg = load_config(write_config(tmp_path), {"beam": 7, "beta": 0.8, "variant": "LAE_CTC", "seed": 9})
    assert (cfg.decode.beam, cfg.model.beta, cfg.model.variant, cfg.seed, cfg.train.seed) == (7, 0.8, "LAE_CTC", 9, 9)


def test_config_round_trip():
    cfg = RunConfig.from_dict(SMALL)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        RunConfig.from_dict({"seed": 1, "train": {"stepz": 3}})


# -- gen -----------------------------------------------------------------------------------------
def test_gen_is_byte_reproducible_and_guarded(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("gen", "--config", write_config(tmp_path), "--out", d) == 0
    assert snapshot(a / "corpus") == snapshot(b / "corpus")
    assert {"train.jsonl", "eval_cs.jsonl", "eval_man.jsonl", "eval_en.jsonl"} <= set(snapshot(a / "corpus"))
    capsys.readouterr()
    assert run("gen", "--config", write_config(tmp_path), "--out", a) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "io"
    assert run("gen", "--config", write_config(tmp_path), "--out", a, "--force") == 0


def test_gen_without_code_switching_warns(tmp_path, capsys):
    cfg = write_config(tmp_path, corpus={"n_train": 6, "n_eval": 2, "cs_fraction": 0.0})
    assert run("gen", "--config", cfg) == 0
    assert "warning" in capsys.readouterr().err
    assert (tmp_path / "run" / "corpus" / "eval_cs.jsonl").read_text() == ""


# -- train ---------------------------------------------------------------------------------------
def test_vanilla_smoke_run(tmp_path):
    cfg = write_config(tmp_path)
    assert run("gen", "--config", cfg) == 0
    assert run("train", "--config", cfg, "--variant", "VANILLA_CTC") == 0
    log = read_jsonl(tmp_path / "run" / "loss_log.jsonl")
    assert [r["step"] for r in log] == list(range(1, 21))
    assert all(r["l_final"] == r["l_asr"] for r in log)


def test_train_outputs(trained):
    tmp, _ = trained
    out = tmp / "run"
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["step_000010.ckpt", "step_000020.ckpt"]
    assert (out / "model.ckpt").read_bytes() == (out / "checkpoints" / "step_000020.ckpt").read_bytes()
    fields = set(read_jsonl(out / "loss_log.jsonl")[0])
    assert {"l_man_ctc", "l_en_ctc", "l_spec", "l_global_ctc", "l_asr", "l_st_man2en", "l_st_en2man",
            "l_st", "l_final"} <= fields


def test_resume_matches_uninterrupted_run(trained, tmp_path):
    src, cfg = trained
    cfg_path = write_config(tmp_path)
    assert run("gen", "--config", cfg_path) == 0
    mid = src / "run" / "checkpoints" / "step_000010.ckpt"
    lines = (src / "run" / "loss_log.jsonl").read_text().splitlines()
    (tmp_path / "run" / "loss_log.jsonl").write_text("".join(ln + "\n" for ln in lines[:10]))
    assert run("train", "--config", cfg_path, "--checkpoint", mid) == 0
    # headers differ in the embedded output path; the array data must not
    data = []
    for root in (tmp_path, src):
        path = root / "run" / "model.ckpt"
        data.append(path.read_bytes()[read_header(path)["_data_start"]:])
    assert data[0] == data[1]
    assert (tmp_path / "run" / "loss_log.jsonl").read_text() == (src / "run" / "loss_log.jsonl").read_text()


# -- eval / translate --------------------------------------------------------------------------
def test_eval_report(trained, tmp_path):
    tmp, cfg = trained
    before = snapshot(tmp / "run" / "corpus") | {"model.ckpt": (tmp / "run" / "model.ckpt").read_bytes()}
    assert run("eval", "--config", cfg) == 0
    after = snapshot(tmp / "run" / "corpus") | {"model.ckpt": (tmp / "run" / "model.ckpt").read_bytes()}
    assert before == after
    recs = read_jsonl(tmp / "run" / "eval" / "report.jsonl")
    head = recs[0]
    assert head["type"] == "header" and head["config"]["seed"] == 5 and len(head["checkpoint_sha256"]) == 64
    rows = {(r["set"], r["row"]) for r in recs if r["type"] == "asr"}
    assert rows == {(s, r) for s in ("cs", "man", "en") for r in ("baseline", "en2man_rescore", "man2en_rescore")}
    assert {r["direction"] for r in recs if r["type"] == "st"} == {"CS->EN", "CS->CN"}
    text = (tmp / "run" / "eval" / "report.txt").read_text()
    assert "CS->EN" in text and "CS->CN" in text and "MER (%)" in text


def test_zero_rescore_weight_rows_equal_baseline(trained, tmp_path):
    tmp, _ = trained
    cfg = write_config(tmp_path, corpus_dir=str(tmp / "run" / "corpus"),
                       checkpoint=str(tmp / "run" / "model.ckpt"),
                       decode={"beam": 3, "st_beam": 2, "gamma_st": 0.0})
    assert run("eval", "--config", cfg) == 0
    recs = [r for r in read_jsonl(tmp_path / "run" / "eval" / "report.jsonl") if r["type"] == "asr"]
    by = {(r["set"], r["row"]): (r["ALL"], r["CN"], r["EN"]) for r in recs}
    for s in ("cs", "man", "en"):
        assert by[(s, "en2man_rescore")] == by[(s, "baseline")] == by[(s, "man2en_rescore")]
    out = tmp_path / "run" / "eval"
    tops = [(out / f"nbest_cs_{r}.txt").read_text().splitlines() for r in ("baseline", "en2man_rescore")]
    assert [ln.split()[6:] for ln in tops[0]] == [ln.split()[6:] for ln in tops[1]]


def test_rerun_from_embedded_config_is_bitwise(trained, tmp_path):
    tmp, cfg = trained
    assert run("eval", "--config", cfg) == 0
    first = snapshot(tmp / "run" / "eval")
    header = read_jsonl(tmp / "run" / "eval" / "report.jsonl")[0]
    (tmp_path / "header.json").write_text(json.dumps(header))
    assert run("eval", "--config", tmp_path / "header.json") == 0
    assert snapshot(tmp / "run" / "eval") == first


def test_translate(trained):
    tmp, cfg = trained
    assert run("translate", "--config", cfg) == 0
    recs = read_jsonl(tmp / "run" / "translate" / "translations.jsonl")
    assert recs[0]["type"] == "header"
    assert len(recs) == 1 + 2 * 4
    assert {r["direction"] for r in recs[1:]} == {"man2en", "en2man"}


def test_vocab_mismatch_is_reported(trained, tmp_path, capsys):
    tmp, _ = trained
    cfg = write_config(tmp_path, corpus={"n_train": 4, "n_eval": 1, "feature_dim": 6},
                       checkpoint=str(tmp / "run" / "model.ckpt"))
    assert run("gen", "--config", cfg) == 0
    capsys.readouterr()
    assert run("eval", "--config", cfg) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config"


# -- ablate --------------------------------------------------------------------------------------
def test_ablate_small_grid(tmp_path):
    cfg = write_config(tmp_path, train={"steps": 3, "batch_size": 4},
                       ablate={"variants": ["VANILLA_CTC", "LAE_CTC", "LAE_ST_CTC", "LAE_ST_MOE_CTC"],
                               "seeds": [0, 1, 2], "betas": [0.4, 1.0], "n_mono": [0, 1],
                               "check_steps": 4})
    assert run("ablate", "--config", cfg) == 0
    recs = read_jsonl(tmp_path / "run" / "ablate" / "ablate.jsonl")
    grid = [r for r in recs if r["type"] == "grid"]
    assert len(grid) == 12 and {r["variant"] for r in grid if r["seed"] == 2} == {
        "VANILLA_CTC", "LAE_CTC", "LAE_ST_CTC", "LAE_ST_MOE_CTC"}
    assert [w["of"] for w in recs if w["type"] == "wins"] == [3, 3]
    assert [r["beta"] for r in recs if r["type"] == "beta_sweep"] == [0.4, 1.0]
    assert [(r["n_mono"], r["n_share"]) for r in recs if r["type"] == "n_mono_sweep"] == [(0, 3), (1, 3)]
    assert [r["identical"] for r in recs if r["type"] == "beta_zero_check"] == [True]


# -- errors ----------------------------------------------------------------------------------------
def test_usage_errors_are_json(capsys):
    assert run("frobnicate") == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "usage"


def test_missing_checkpoint(tmp_path, capsys):
    assert run("eval", "--seed", 1, "--out", tmp_path / "nowhere") == 1
    assert json.loads(capsys.readouterr().err)["error"] == "io"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "csmoe", "train"], capture_output=True, text=True,
                          cwd=tmp_path)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "config"
