from dataclasses import replace
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cli import _split_faces, main
from config import REGIONS, load_config
from errors import DegenerateConfiguration
from synthface import load_png


def run(*argv):
    return main([str(a) for a in argv])


def test_version(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["--version"])
    assert exit_info.value.code == 0
    assert "regionmakeup config schema" in capsys.readouterr().out


def test_unknown_flag_is_one_line(capsys, tmp_path):
    with pytest.raises(SystemExit) as exit_info:
        main(["synth", "styles", "--out", str(tmp_path), "--bogus"])
    assert exit_info.value.code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error type=UsageError")


def test_missing_checkpoint(capsys, tmp_path):
    code = run("infer", "transfer", "--data", tmp_path, "--face-id", 0, "--reference", tmp_path / "r.png",
               "--style-encoder", tmp_path / "none.safetensors", "--denoiser", tmp_path / "none.safetensors",
               "--transfer", tmp_path / "none.safetensors", "--out", tmp_path / "out")
    assert code == 2
    assert "error type=CheckpointError" in capsys.readouterr().err


def test_bad_config_key(capsys, tmp_path):
    (tmp_path / "bad.yaml").write_text("sampler:\n  stepz: 3\n")
    assert run("synth", "styles", "--config", tmp_path / "bad.yaml", "--out", tmp_path / "o") == 2
    assert "stepz" in capsys.readouterr().err


@pytest.mark.parametrize("holdout", [0.0, 0.25, 0.5, 1.0])
def test_split_keeps_faces_apart(dataset, holdout):
    train, held_out = _split_faces(dataset, holdout)
    assert train and held_out
    assert not train & held_out
    assert train | held_out == {r["face_id"] for r in dataset.records}


def test_split_needs_two_faces(dataset):
    one_face = replace(dataset, records=[r for r in dataset.records if r["face_id"] == 0])
    with pytest.raises(DegenerateConfiguration):
        _split_faces(one_face, 0.2)


def test_pairs_build_flags(tmp_path, tiny_config_file, dataset):
    manifest = Path(dataset.root) / "manifest.json"
    assert run("pairs", "build", "--manifest", manifest, "--iou-threshold", 0.5, "--misalign-rate", 0.3,
               "--seed", 0, "--out", tmp_path / "pairs", "--config", tiny_config_file) == 0
    saved = load_config(tmp_path / "pairs" / "config.yaml")
    assert saved["pairs"]["iou_threshold"] == 0.5
    assert saved["pairs"]["misalignment_rate"] == 0.3
    entries = json.loads((tmp_path / "pairs" / "pairs_manifest.json").read_text())
    assert entries["iou_threshold"] == 0.5
    assert len(entries["pairs"]) == len(dataset.records)


def test_style_encoder_flags(tmp_path, tiny_config_file, dataset):
    assert run("train", "style-encoder", "--data", dataset.root, "--steps", 3, "--tau", 0.2, "--seed", 0,
               "--out", tmp_path / "ckpt", "--config", tiny_config_file) == 0
    saved = load_config(tmp_path / "ckpt" / "config.yaml")
    assert (saved["stage1"]["steps"], saved["stage1"]["tau"]) == (3, 0.2)
    assert len(pd.read_csv(tmp_path / "ckpt" / "history.csv")) == 3
    assert (tmp_path / "ckpt" / "style_encoder.safetensors").exists()


@pytest.mark.slow
def test_tiny_pipeline(tmp_path, tiny_config_file, capsys):
    cfg = ("--config", tiny_config_file)
    s = tmp_path
    assert run("synth", "styles", "--out", s / "styles", *cfg) == 0
    assert run("synth", "faces", "--styles", s / "styles" / "styles.json", "--count", 4, "--out", s / "data", *cfg) == 0
    assert run("pairs", "build", "--data", s / "data", "--out", s / "pairs", *cfg) == 0
    assert run("train", "style-encoder", "--data", s / "data", "--out", s / "stage1", *cfg) == 0
    enc = s / "stage1" / "style_encoder.safetensors"
    assert run("train", "base-denoiser", "--data", s / "data", "--style-encoder", enc, "--out", s / "base", *cfg) == 0
    den = s / "base" / "denoiser.safetensors"
    models = ("--style-encoder", enc, "--denoiser", den)
    assert run("train", "transfer", "--data", s / "data", "--pairs", s / "pairs", *models,
               "--out", s / "stage2", *cfg) == 0
    models += ("--transfer", s / "stage2" / "transfer.safetensors")

    reference = s / "data" / json.loads((s / "data" / "manifest.json").read_text())["records"][-1]["after"]
    assert run("infer", "transfer", "--data", s / "data", "--face-id", 0, "--reference", reference, *models,
               "--out", s / "infer", *cfg) == 0
    assert load_png(s / "infer" / "transfer.png").shape == (32, 32, 3)

    (s / "mix.json").write_text(json.dumps({r: str(reference) for r in REGIONS}))
    assert run("infer", "regional", "--data", s / "data", "--face-id", 0, "--assignment", s / "mix.json", *models,
               "--out", s / "regional", *cfg) == 0
    assert np.array_equal(load_png(s / "regional" / "regional.png"), load_png(s / "infer" / "transfer.png"))

    assert run("eval", "--data", s / "data", "--count", 2, *models, "--out", s / "eval", *cfg) == 0
    assert len(pd.read_csv(s / "eval" / "metrics.csv")) == 2
    assert run("report", "--eval", s / "eval", "--history", s / "stage2" / "history.csv", "--out", s / "report",
               *cfg) == 0
    assert (s / "report" / "transfer_grid.png").exists()
    assert (s / "report" / "curves_stage2.png").exists()

    assert run("ablate", "--data", s / "data", "--pairs", s / "pairs", *models[:4], "--tables", "alignment",
               "--out", s / "ablation", *cfg) == 0
    assert (s / "ablation" / "alignment.csv").exists()

    # a denoiser trained on another style encoder is refused
    assert run("train", "style-encoder", "--data", s / "data", "--seed", 5, "--out", s / "other", *cfg) == 0
    capsys.readouterr()
    assert run("train", "transfer", "--data", s / "data", "--pairs", s / "pairs",
               "--style-encoder", s / "other" / "style_encoder.safetensors", "--denoiser", den,
               "--out", s / "mismatch", *cfg) == 2
    assert "type=CheckpointMismatch" in capsys.readouterr().err
