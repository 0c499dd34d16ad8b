import pytest
import torch

from checkpoint import load_checkpoint, require_parent, save_checkpoint, split_prefix, state_hash, with_prefix
from config import DEFAULTS, OUTPUT_ROOT_ENV, load_config, output_dir, save_config
from errors import CheckpointError, CheckpointMismatch, ConfigError


# ====== CONFIG ======

def test_defaults_are_copied():
    config = load_config()
    config["pairs"]["iou_threshold"] = 0.1
    assert DEFAULTS["pairs"]["iou_threshold"] == 0.6


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("pairs:\n  iou_threshold: 0.5\nsampler:\n  steps: 10\n")
    config = load_config(path, overrides={"sampler": {"steps": 5}})
    assert config["pairs"]["iou_threshold"] == 0.5
    assert config["sampler"]["steps"] == 5
    assert config["sampler"]["eta"] == 0.0


def test_saved_config_reloads(tmp_path):
    config = load_config(overrides={"transfer": {"lambda_attn": 0.5}})
    save_config(config, tmp_path / "config.yaml")
    assert load_config(tmp_path / "config.yaml") == config


@pytest.mark.parametrize("overrides", [{"pairs": {"unknown": 1}}, {"nope": {}}, {"pairs": 3}])
def test_bad_keys_rejected(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("does/not/exist.yaml")


def test_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert output_dir("run1") == tmp_path / "run1"
    assert (tmp_path / "run1").is_dir()


# ====== CHECKPOINTS ======

def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": torch.randn(3, 4), "a.bias": torch.zeros(3), "b": torch.tensor(2.0)}
    digest = save_checkpoint(tmp_path / "x.safetensors", tensors, {"kind": "sample", "parents": {}})
    loaded, header, loaded_digest = load_checkpoint(tmp_path / "x.safetensors", kind="sample")
    assert loaded_digest == digest == state_hash(tensors)
    assert header == {"kind": "sample", "parents": {}}
    assert all(torch.equal(loaded[k], tensors[k]) for k in tensors)


def test_hash_tracks_content():
    a = {"w": torch.ones(2, 2)}
    assert state_hash(a) == state_hash({"w": torch.ones(2, 2)})
    assert state_hash(a) != state_hash({"w": torch.ones(2, 2) * 2})
    assert state_hash(a) != state_hash({"v": torch.ones(2, 2)})


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.safetensors")
    save_checkpoint(tmp_path / "x.safetensors", {"w": torch.ones(1)}, {"kind": "sample"})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.safetensors", kind="transfer")
    (tmp_path / "junk.safetensors").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.safetensors")


def test_parent_check():
    header = {"parents": {"denoiser": "abc"}}
    require_parent(header, "denoiser", "abc", "denoiser")
    with pytest.raises(CheckpointMismatch):
        require_parent(header, "denoiser", "xyz", "denoiser")


@pytest.mark.parametrize("header, actual", [
    ({"parents": {"denoiser": "abc"}}, None),
    ({"parents": {}}, "abc"),
    ({"parents": {}}, None),
])
def test_parent_check_without_hash(header, actual):
    with pytest.raises(CheckpointMismatch):
        require_parent(header, "denoiser", actual, "denoiser")


def test_prefixes():
    state = {"w": 1, "b": 2}
    assert split_prefix({**with_prefix(state, "net"), "other.w": 3}, "net") == state
