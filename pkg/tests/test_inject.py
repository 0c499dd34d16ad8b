import math

import numpy as np
import pytest
import torch

from denoiser import AttentionRecord, CrossAttention
from errors import CheckpointMismatch, EmptyInput, ShapeMismatch
from evalsuite import l2_nonface
from inject import (
    IdentityBranch, LoRALinear, Projector, RegionEmbeddingSet, TransferBundle, TransferConfig, TransferModel,
    decoupled_cross_attention, downsample_masks, extract_region_embeddings, focal_term, load_transfer, loss_attention,
    save_transfer, structure_tensor, train_transfer, transfer, transfer_attention,
)
from styleenc import to_tensor


@pytest.fixture
def layer():
    return CrossAttention("layer", channels=8, context_dim=6, image_dim=6, heads=2)


@pytest.fixture
def model(bundles, tiny_config):
    style, denoiser = bundles
    return TransferModel(style, denoiser, TransferConfig.from_config(tiny_config["transfer"])).eval()


def one_hot_maps():
    maps = torch.zeros(1, 4, 4, 4)
    maps[0, 0, :, :2] = 1.0
    maps[0, 1, :2, 2:] = 1.0
    maps[0, 2, 2:, 2] = 1.0
    maps[0, 3, 2:, 3] = 1.0
    return maps


# ====== DECOUPLED CROSS-ATTENTION ======

def test_identical_tokens_split_attention_evenly(layer):
    hidden = torch.randn(1, 8, 4, 4)
    tokens = torch.ones(1, 2, 6)
    _, record = decoupled_cross_attention(layer, hidden, torch.randn(1, 3, 6), tokens)
    torch.testing.assert_close(record.maps["layer"], torch.full((1, 2, 4, 4), 0.5))


def test_softmax_oracle(layer):
    with torch.no_grad():
        layer.ip_q.weight.copy_(torch.eye(8))
        layer.ip_k.weight.zero_()
        layer.ip_k.weight[:, 0] = 1.0
        layer.norm = torch.nn.Identity()
    hidden = torch.ones(1, 8, 1, 1)
    tokens = torch.zeros(1, 2, 6)
    tokens[0, 0, 0] = 1.0
    _, record = decoupled_cross_attention(layer, hidden, torch.randn(1, 3, 6), tokens)
    # per head q.k = 4 against 0, scaled by 1/sqrt(4)
    expected = math.exp(2.0) / (math.exp(2.0) + 1.0)
    torch.testing.assert_close(record.maps["layer"][0, :, 0, 0], torch.tensor([expected, 1.0 - expected]))


def test_maps_sum_to_one_over_regions(layer):
    _, record = decoupled_cross_attention(layer, torch.randn(2, 8, 4, 4), torch.randn(2, 3, 6), torch.randn(2, 4, 6))
    torch.testing.assert_close(record.maps["layer"].sum(dim=1), torch.ones(2, 4, 4))


def test_embedding_set_input(layer):
    vectors = torch.randn(4, 6)
    out, record = decoupled_cross_attention(layer, torch.randn(2, 8, 4, 4), torch.randn(2, 3, 6),
                                            RegionEmbeddingSet(vectors))
    assert out.shape == (2, 8, 4, 4)
    assert record.maps["layer"].shape == (2, 4, 4, 4)


def test_embedding_set_validation():
    with pytest.raises(ShapeMismatch):
        RegionEmbeddingSet(torch.randn(3, 6))
    with pytest.raises(ValueError):
        RegionEmbeddingSet(torch.full((4, 6), float("nan")))


# ====== LORA AND IDENTITY BRANCH ======

def test_fresh_lora_is_exact_identity():
    base = torch.nn.Linear(6, 5, bias=False)
    wrapped = LoRALinear(base, rank=2)
    x = torch.randn(3, 6)
    assert torch.equal(wrapped(x), base(x))
    assert not base.weight.requires_grad
    assert wrapped.lora_down.requires_grad and wrapped.lora_up.requires_grad


def test_fresh_branch_outputs_zeros(model):
    residuals = model.identity_branch(torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32))
    assert [tuple(r.shape[1:]) for r in residuals] == [(c, s, s) for c, s in model.unet.port_shapes(32)]
    assert all(torch.count_nonzero(r) == 0 for r in residuals)


def test_branch_ignores_disabled_channels():
    branch = IdentityBranch([8, 16, 16, 16], 8, use_pixel=False)
    for p in branch.parameters():
        torch.nn.init.normal_(p)
    structure = torch.rand(1, 1, 32, 32)
    a = branch(torch.rand(1, 3, 32, 32), structure)
    b = branch(torch.rand(1, 3, 32, 32), structure)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_fresh_model_matches_base_unet(model, bundles):
    _, denoiser = bundles
    x, t = torch.randn(1, 3, 32, 32), torch.tensor([20])
    conditions = model.conditions(torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32), torch.zeros(1, 4, 16))
    with torch.no_grad():
        assert torch.equal(model.unet(x, t, conditions), denoiser.unet(x, t, denoiser.text_conditions(1)))


def test_shared_bundle_is_not_wrapped(model, bundles):
    _, denoiser = bundles
    assert not isinstance(denoiser.unet.mid_attn.ip_q, LoRALinear)
    assert isinstance(model.unet.mid_attn.ip_q, LoRALinear)


# ====== ATTENTION LOSS ======

def test_focal_values_at_half():
    p = torch.full((2,), 0.5)
    values = focal_term(p, torch.tensor([1.0, 0.0]))
    torch.testing.assert_close(values, torch.tensor([0.0433, 0.1300]), atol=1e-4, rtol=0)


def test_perfect_maps_cost_nothing():
    maps = one_hot_maps()
    assert float(loss_attention(maps, maps.clone())) == pytest.approx(0.0, abs=1e-6)
    assert float(loss_attention(maps, maps.clone(), dice_reduction="pixel")) == pytest.approx(0.0, abs=1e-6)


def test_disjoint_maps_have_full_dice():
    maps = one_hot_maps()
    shuffled = maps[:, [1, 0, 3, 2]]
    loss = float(loss_attention(shuffled, maps, focal_gamma=0.0, focal_alpha=0.5))
    assert loss > 1.0


def test_empty_region_is_skipped(caplog):
    maps = torch.softmax(torch.randn(1, 4, 4, 4), dim=1)
    masks = one_hot_maps()
    masks[0, 3] = 0.0
    with caplog.at_level("WARNING"):
        full = loss_attention(maps, masks)
    assert "mouth" in caplog.text
    assert torch.isfinite(full)


def test_masks_downsample_by_area():
    masks = torch.zeros(1, 1, 8, 8)
    masks[..., :4, :4] = 1.0
    masks[..., 4, 4] = 1.0
    pooled = downsample_masks(masks, (2, 2))
    assert pooled[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_attention_loss_gradcheck():
    logits = torch.randn(1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    masks = one_hot_maps().double()
    assert torch.autograd.gradcheck(lambda x: loss_attention(torch.softmax(x, dim=1), masks), (logits,))


def test_attention_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_attention(torch.rand(2, 4, 4, 4), torch.zeros(3, 4, 4, 4))


# ====== PROJECTOR ======

def test_projector_outputs_one_token_per_region(model, face):
    embeddings = extract_region_embeddings(model.style_encoder, face.image, model.query_bank, model.projector, "ref")
    assert embeddings.vectors.shape == (4, 16)
    assert embeddings.reference_id == "ref"
    assert embeddings["mouth"].shape == (16,)


def test_projector_width_mismatch():
    projector = Projector(encoder_width=32, query_dim=16, out_dim=16, heads=2)
    with pytest.raises(ShapeMismatch):
        projector(torch.randn(1, 5, 24), torch.randn(1, 4, 16))


# ====== TRAINING AND CHECKPOINTS ======

def test_training_keeps_the_base_frozen(bundles, tiny_config, pairs):
    style, denoiser = bundles
    bundle = train_transfer(pairs, style, denoiser, tiny_config, seed=0)
    assert bundle.model.frozen_base_hash() == bundle.model.base_hash
    assert [sorted(h) for h in bundle.history] == [["loss", "loss_attn", "loss_diff", "step"]] * 2
    assert all(np.isfinite(h["loss"]) for h in bundle.history)


def test_training_needs_accepted_pairs(bundles, tiny_config, pairs):
    style, denoiser = bundles
    rejected = [type(p)(**{**p.__dict__, "accepted": False}) for p in pairs[:2]]
    with pytest.raises(EmptyInput):
        train_transfer(rejected, style, denoiser, tiny_config)


def test_ablation_flags_drop_modules(bundles, tiny_config):
    style, denoiser = bundles
    cfg = TransferConfig.from_config(tiny_config["transfer"], use_lora=False, use_pixel=False, use_structure=False)
    model = TransferModel(style, denoiser, cfg)
    assert model.lora is None and model.identity_branch is None
    assert model.conditions(torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32), None).control_residuals is None


def test_checkpoint_refuses_other_parents(tmp_path, model, bundles):
    style, denoiser = bundles
    path = tmp_path / "transfer.safetensors"
    save_transfer(path, TransferBundle(model=model, history=[]), style.content_hash, denoiser.content_hash)
    loaded = load_transfer(path, style, denoiser).model
    for name, tensor in model.trainable_state().items():
        assert torch.equal(loaded.trainable_state()[name], tensor)
    style.content_hash = "another-hash"
    with pytest.raises(CheckpointMismatch):
        load_transfer(path, style, denoiser)


# ====== INFERENCE ======

def test_transfer_keeps_background(model, tiny_config, face):
    small = face.image[::2, ::2]
    structure = face.structure[::2, ::2]
    masks = face.masks.face_mask[::2, ::2]
    out = transfer(small, structure, small, model, tiny_config["sampler"], face_mask=masks, seed=1)
    assert out.shape == small.shape
    assert l2_nonface(out, small, ~masks) == 0.0
    again = transfer(small, structure, small, model, tiny_config["sampler"], face_mask=masks, seed=1)
    assert np.array_equal(out, again)


def test_transfer_attention_shape(model, face):
    small = face.image[::2, ::2]
    maps = transfer_attention(model, small, face.structure[::2, ::2], small)
    assert maps.shape == (4, 8, 8)
    torch.testing.assert_close(maps.sum(dim=0), torch.ones(8, 8))


def test_structure_tensor_layouts():
    assert structure_tensor(np.zeros((8, 8))).shape == (1, 1, 8, 8)
    assert structure_tensor(np.zeros((2, 8, 8))).shape == (2, 1, 8, 8)
    assert to_tensor(np.zeros((8, 8, 3))).shape == (1, 3, 8, 8)


def test_record_collects_every_layer(model, face):
    record = AttentionRecord()
    small = to_tensor(face.image[::2, ::2])
    conditions = model.conditions(small, structure_tensor(face.structure[::2, ::2]), model.region_tokens(small))
    with torch.no_grad():
        model.unet(small, torch.tensor([5]), conditions, record=record)
    assert len(record.maps) == len(model.unet.cross_attention_layers())
