import math

import numpy as np
import pytest
import torch

from config import load_config
from errors import DegenerateConfiguration, EmptyInput
from styleenc import (
    PROMPT_TEMPLATE, StyleEncoderConfig, TextEmbedder, init_style_encoder, knn_accuracy_from_embeddings,
    load_style_encoder, loss_ssl, loss_text, samples_from_manifest, save_style_encoder, to_tensor,
    train_style_encoder,
)

ORACLE = math.log(1.0 + 2.0 / math.e)


@pytest.fixture
def two_styles():
    e1, e2 = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    return e1, e2


# ====== LOSSES ======

def test_ssl_oracle(two_styles):
    e1, e2 = two_styles
    z = torch.stack([e1, e2, e1, e2])
    assert float(loss_ssl(z, tau=1.0)) == pytest.approx(ORACLE, abs=1e-4)
    assert float(loss_ssl(z, tau=1.0, symmetric=False)) == pytest.approx(ORACLE, abs=1e-4)


def test_ssl_single_pair_is_zero(rng):
    z = torch.from_numpy(rng.normal(size=(2, 8)))
    assert float(loss_ssl(z)) == pytest.approx(0.0, abs=1e-12)


def test_ssl_is_scale_invariant(rng):
    z = torch.from_numpy(rng.normal(size=(6, 8)))
    assert float(loss_ssl(z)) == pytest.approx(float(loss_ssl(3.7 * z)), abs=1e-9)


def test_text_oracle(two_styles):
    e1, e2 = two_styles
    images = torch.stack([e1, e2])
    assert float(loss_text(images, images.clone(), [0, 1], tau=1.0)) == pytest.approx(ORACLE, abs=1e-4)


def test_text_flat_limit(rng):
    images = torch.from_numpy(rng.normal(size=(2, 8)))
    texts = torch.from_numpy(rng.normal(size=(2, 8)))
    assert float(loss_text(images, texts, [0, 1], tau=1e6)) == pytest.approx(math.log(3.0), abs=1e-4)


def test_text_anchor_without_positive():
    images = torch.eye(2)
    with pytest.raises(EmptyInput):
        loss_text(images, torch.eye(2), [0, 1], text_style_ids=[0, 0])


def test_losses_gradcheck(rng):
    z = torch.from_numpy(rng.normal(size=(4, 5))).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda x: loss_ssl(x, tau=0.5), (z,))
    t = torch.from_numpy(rng.normal(size=(2, 5)))
    x = torch.from_numpy(rng.normal(size=(2, 5))).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda a: loss_text(a, t, [0, 1], tau=0.5), (x,))


# ====== KNN ======

def test_knn_separated_clusters(rng):
    centers = np.eye(3) * 10.0
    labels = np.repeat(np.arange(3), 5)
    embeddings = centers[labels] + rng.normal(scale=0.1, size=(15, 3))
    assert knn_accuracy_from_embeddings(embeddings, labels, k=3) == 1.0


def test_knn_needs_more_samples_than_k(rng):
    with pytest.raises(EmptyInput):
        knn_accuracy_from_embeddings(rng.normal(size=(3, 4)), [0, 1, 0], k=3)


# ====== MODELS ======

def test_text_prompt_and_unknown_words():
    text = TextEmbedder.build([PROMPT_TEMPLATE.format(makeup="red lips")], width=8, embed_dim=4)
    assert text.token_embeddings(PROMPT_TEMPLATE.format(makeup="red lips")).shape == (11, 4)
    assert text.token_ids("zzz").tolist() == [0]
    assert not any(p.requires_grad for p in text.parameters())


def test_encoder_output_shapes(tiny_config):
    cfg = StyleEncoderConfig.from_config(tiny_config["style_encoder"])
    encoder = init_style_encoder(cfg, seed=0)
    x = to_tensor(np.zeros((3, 64, 64, 3)))
    assert encoder(x).shape == (3, cfg.embed_dim)
    assert encoder.features(x).shape == (3, 1 + (cfg.image_size // cfg.patch_size) ** 2, cfg.width)


def test_training_keeps_frozen_layers(tiny_config, dataset):
    samples = samples_from_manifest(dataset)
    cfg = StyleEncoderConfig.from_config(tiny_config["style_encoder"])
    before = init_style_encoder(cfg, seed=0).frozen_hash()
    bundle = train_style_encoder(samples, tiny_config, seed=0)
    assert bundle.encoder.frozen_hash() == before
    assert len(bundle.history) == tiny_config["stage1"]["steps"]
    assert all(np.isfinite(h["loss_clip"]) for h in bundle.history)


def test_training_needs_two_styles(tiny_config, dataset):
    samples = [s for s in samples_from_manifest(dataset) if s.style_id == 0]
    with pytest.raises(DegenerateConfiguration):
        train_style_encoder(samples, tiny_config)
    with pytest.raises(DegenerateConfiguration):
        train_style_encoder(samples_from_manifest(dataset), tiny_config, use_ssl=False, use_text=False)


def test_checkpoint_round_trip(tmp_path, tiny_config, dataset):
    samples = samples_from_manifest(dataset)
    bundle = train_style_encoder(samples, tiny_config, seed=1)
    digest = save_style_encoder(tmp_path / "enc.safetensors", bundle, tiny_config, seed=1)
    loaded = load_style_encoder(tmp_path / "enc.safetensors")
    assert loaded.content_hash == digest
    x = to_tensor([s.image for s in samples[:3]])
    with torch.no_grad():
        torch.testing.assert_close(loaded.encoder(x), bundle.encoder(x))
    assert loaded.text.vocab == bundle.text.vocab


def test_default_config_matches_dataclass():
    section = load_config()["style_encoder"]
    assert StyleEncoderConfig.from_config(section).embed_dim == section["embed_dim"]
