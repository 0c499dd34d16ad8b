import numpy as np
import pandas as pd
import pytest
import torch

from config import REGIONS
from errors import EmptyInput, ShapeMismatch
from evalsuite import (
    AblationInputs, attention_region_iou, check_tables, eval_records, evaluate_transfer, expected_after,
    identity_ssim, l2_nonface, psnr, region_style_error, run_ablation, ssim,
)
from inject import TransferConfig, TransferModel
from synthface import MakeupStyle, MouthEdit, region_means


def quadrant_masks(size=8):
    masks = np.zeros((4, size, size), bool)
    half = size // 2
    masks[0, :half, :half] = True
    masks[1, :half, half:] = True
    masks[2, half:, :half] = True
    masks[3, half:, half:] = True
    return masks


# ====== IMAGE METRICS ======

def test_ssim_of_identical_images(rng):
    image = rng.random((16, 16, 3))
    assert ssim(image, image) == pytest.approx(1.0)


def test_ssim_single_window_oracle(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    c1, c2 = 0.01**2, 0.03**2
    cov = np.mean(a * b) - a.mean() * b.mean()
    expected = ((2 * a.mean() * b.mean() + c1) * (2 * cov + c2)) / (
        (a.mean() ** 2 + b.mean() ** 2 + c1) * (a.var() + b.var() + c2))
    assert ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_ssim_of_inverted_image_is_negative(rng):
    image = rng.random((16, 16))
    assert ssim(image, 1.0 - image) < 0.0


def test_ssim_input_checks(rng):
    with pytest.raises(ShapeMismatch):
        ssim(rng.random((16, 16)), rng.random((16, 12)))
    with pytest.raises(ShapeMismatch):
        ssim(rng.random((6, 6)), rng.random((6, 6)))


def test_l2_over_non_face():
    generated, source = np.full((4, 4, 3), 0.6), np.full((4, 4, 3), 0.5)
    outside = np.zeros((4, 4), bool)
    outside[0] = True
    assert l2_nonface(generated, source, outside) == pytest.approx(0.01)
    with pytest.raises(EmptyInput):
        l2_nonface(generated, source, np.zeros((4, 4), bool))


def test_psnr_limits(rng):
    image = rng.random((8, 8, 3))
    assert psnr(image, image) == float("inf")
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)


def test_identity_ssim_ignores_color(face):
    recolored = face.image[..., ::-1]
    assert identity_ssim(face.image, face.image) == pytest.approx(1.0)
    assert identity_ssim(recolored, face.image) > 0.5


# ====== ATTENTION AND STYLE METRICS ======

def test_attention_iou_of_matching_maps():
    masks = quadrant_masks()
    ious = attention_region_iou(masks.astype(np.float32), masks)
    assert ious == {region: 1.0 for region in REGIONS}


def test_attention_iou_of_uniform_maps():
    masks = quadrant_masks()
    ious = attention_region_iou(np.full((4, 8, 8), 0.25, dtype=np.float32), masks)
    assert ious["skin"] == pytest.approx(0.25)
    assert [ious[r] for r in REGIONS[1:]] == [0.0, 0.0, 0.0]


def test_style_error_of_the_oracle(face, styles):
    for style in styles:
        errors = region_style_error(expected_after(face.image, face.masks, style), face.masks, style, face.image)
        assert max(errors.values()) == pytest.approx(0.0, abs=1e-12)


def test_style_error_is_local_to_the_edited_region(face):
    style = MakeupStyle(0, "red", "red lips", mouth_edit=MouthEdit((1.0, 0.0, 0.0), 1.0))
    errors = region_style_error(face.image, face.masks, style, face.image)
    assert [errors[r] for r in ("skin", "eyes", "nose")] == [0.0, 0.0, 0.0]
    mouth = region_means(face.image, face.masks)[3]
    assert errors["mouth"] == pytest.approx(np.max(np.abs(mouth - [1.0, 0.0, 0.0])))


# ====== EVALUATION ======

def test_eval_records_use_another_face(dataset):
    records = eval_records(dataset, 5, seed=1)
    assert len(records) == 5
    assert all(r.reference_face != r.face_id for r in records)
    assert all(r.source.shape == r.reference.shape == r.oracle.shape for r in records)
    with pytest.raises(EmptyInput):
        eval_records(dataset, 2, face_ids=[-1])


def test_evaluate_transfer_columns(bundles, tiny_config, dataset):
    style, denoiser = bundles
    model = TransferModel(style, denoiser, TransferConfig.from_config(tiny_config["transfer"])).eval()
    records = eval_records(dataset, 2, seed=0)
    frame, outputs = evaluate_transfer(model, records, dataset.styles, tiny_config["sampler"], keep_outputs=True)
    expected = {"psnr", "ssim", "id_ssim", "l2_m", "style_error", "attn_iou"}
    expected |= {f"style_error_{r}" for r in REGIONS} | {f"attn_iou_{r}" for r in REGIONS}
    assert expected <= set(frame.columns)
    assert len(frame) == len(outputs) == 2
    assert (frame["l2_m"] == 0.0).all()


# ====== ABLATIONS ======

def test_alignment_ablation_writes_its_table(tmp_path, tiny_config, dataset):
    inputs = AblationInputs(dataset, [], [], [], [], None, None)
    results = run_ablation(tiny_config, inputs, tmp_path, tables=["alignment"])
    frame = pd.read_csv(tmp_path / "alignment.csv")
    assert list(frame.columns) == ["aligned_iou", "unaligned_iou", "aligned_wins"]
    assert results["alignment"]["aligned_iou"].iloc[0] == pytest.approx(frame["aligned_iou"].iloc[0])


def test_trend_flags():
    results = {
        "encoder": pd.DataFrame({"SSL": [False, True], "Text": [False, True], "Acc": [0.3, 0.9]}),
        "attention": pd.DataFrame({"Attn": [False, True], "attn_iou": [0.2, 0.5]}),
    }
    assert check_tables(results) == {"encoder_full_beats_untrained": True, "attn_loss_helps": True}


def test_metrics_csv_is_reproducible(tmp_path, bundles, tiny_config, dataset):
    style, denoiser = bundles
    records = eval_records(dataset, 2, seed=0)
    written = []
    for run in ("a", "b"):
        torch.manual_seed(0)
        model = TransferModel(style, denoiser, TransferConfig.from_config(tiny_config["transfer"])).eval()
        frame, _ = evaluate_transfer(model, records, dataset.styles, tiny_config["sampler"], seed=3)
        frame.to_csv(tmp_path / f"{run}.csv", index=False)
        written.append((tmp_path / f"{run}.csv").read_bytes())
    assert written[0] == written[1]
