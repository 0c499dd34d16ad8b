import numpy as np
import pytest
import torch

from config import load_config, save_config
from denoiser import DenoiserBundle, DenoiserConfig, DenoisingUNet
from pairs import build_pairs
from styleenc import StyleEncoderBundle, StyleEncoderConfig, build_text_embedder, init_style_encoder
from synthface import make_style_catalog, render_face, sample_face_spec, synthesize_dataset

TINY = {
    "data": {"image_size": 32, "num_styles": 4, "num_faces": 6},
    "style_encoder": {"image_size": 32, "patch_size": 8, "width": 32, "depth": 2, "heads": 2, "embed_dim": 16,
                      "text_width": 16},
    "stage1": {"steps": 2, "batch_size": 4, "log_every": 1},
    "denoiser": {"image_size": 32, "channels": [8, 16, 16], "heads": 2, "time_dim": 16, "timesteps": 100},
    "base_training": {"steps": 2, "batch_size": 4, "log_every": 1},
    "transfer": {"query_dim": 16, "region_dim": 16, "projector_heads": 2, "lora_rank": 2, "steps": 2,
                 "batch_size": 2, "log_every": 1},
    "sampler": {"steps": 3},
    "eval": {"num_eval_pairs": 2, "knn_k": 1},
}


@pytest.fixture
def tiny_config():
    return load_config(overrides=TINY)


@pytest.fixture(scope="session")
def styles():
    return make_style_catalog(4, seed=0)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory, styles):
    root = tmp_path_factory.mktemp("dataset")
    return synthesize_dataset(6, styles, seed=0, out_dir=root, size=32)


@pytest.fixture
def face():
    return render_face(sample_face_spec(7), 64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def bundles(tiny_config):
    """Untrained tiny style encoder and base denoiser, with fake content hashes."""
    cfg = StyleEncoderConfig.from_config(tiny_config["style_encoder"])
    encoder = init_style_encoder(cfg, seed=0)
    text = build_text_embedder(["red lips"], cfg, seed=0, extra_texts=[tiny_config["denoiser"]["prompt"]])
    style = StyleEncoderBundle(encoder=encoder, text=text, history=[], content_hash="style-hash")
    dcfg = DenoiserConfig.from_config(tiny_config)
    torch.manual_seed(0)
    unet = DenoisingUNet(dcfg).eval()
    for p in unet.parameters():
        p.requires_grad_(False)
    denoiser = DenoiserBundle(unet=unet, prompt_tokens=text.token_embeddings(dcfg.prompt).detach(),
                              schedule=dcfg.schedule(), history=[], content_hash="denoiser-hash")
    return style, denoiser


@pytest.fixture(scope="session")
def pairs(dataset):
    return build_pairs(dataset, misalignment_rate=0.0)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.yaml"
    save_config(tiny_config, path)
    return path
