"""Metrics and the ablation harness.

Pure metrics (SSIM, L2 over the non-face region, PSNR, argmax-attention IoU,
per-region style error, structure SSIM as the identity analogue), the
evaluation of a trained transfer model on held-out records, and the ablation
tables: encoder objectives, injection modules, attention loss, pair alignment.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from automate import ablation_jobs, run_jobs
from config import REGIONS
from errors import EmptyInput, ShapeMismatch
from inject import AttentionRecord, downsample_masks, train_transfer, transfer, transfer_attention
from pairs import alignment_gain, iou
from styleenc import StyleEncoderConfig, init_style_encoder, knn_accuracy, train_style_encoder
from synthface import RegionMaskSet, apply_makeup, load_record, region_means

logger = logging.getLogger(__name__)

SSIM_K1, SSIM_K2 = 0.01, 0.03


# ====== IMAGE METRICS ======

def luminance(image):
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=-1) if image.ndim == 3 else image


def ssim(img_a, img_b, window=8, data_range=1.0):
    """Mean SSIM over every window x window patch (population statistics) of the luminance images."""
    a, b = luminance(img_a), luminance(img_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim inputs disagree: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ShapeMismatch(f"images {a.shape} are smaller than the {window}x{window} window")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a, mu_b = pa.mean(axis=(-2, -1)), pb.mean(axis=(-2, -1))
    var_a = pa.var(axis=(-2, -1))
    var_b = pb.var(axis=(-2, -1))
    cov = (pa * pb).mean(axis=(-2, -1)) - mu_a * mu_b
    value = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(value.mean())


def l2_nonface(generated, source, non_face_mask):
    mask = np.asarray(non_face_mask).astype(bool)
    if not mask.any():
        raise EmptyInput("non-face mask is empty")
    diff = np.asarray(generated, dtype=np.float64)[mask] - np.asarray(source, dtype=np.float64)[mask]
    return float(np.mean(diff**2))


def psnr(img_a, img_b, data_range=1.0):
    mse = float(np.mean((np.asarray(img_a, dtype=np.float64) - np.asarray(img_b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / mse))


def structure_map(image):
    """Sobel gradient magnitude of the luminance, scaled to [0,1]."""
    lum = luminance(image)
    magnitude = np.hypot(ndimage.sobel(lum, axis=0), ndimage.sobel(lum, axis=1))
    peak = magnitude.max()
    return magnitude / peak if peak > 0 else magnitude


def identity_ssim(generated, source, window=8):
    """SSIM between structure maps: geometry only, colors ignored."""
    return ssim(structure_map(generated), structure_map(source), window)


# ====== ATTENTION AND STYLE METRICS ======

def argmax_regions(maps):
    """(N, U, V) maps -> (N, U, V) one-hot of the winning region per location (ties to the first)."""
    maps = torch.as_tensor(maps)
    winner = maps.argmax(dim=0)
    return torch.stack([winner == n for n in range(maps.shape[0])]).numpy()


def attention_region_iou(record, masks):
    """IoU between the argmax-region map of Abar and each region mask, at the attention resolution."""
    maps = record.averaged()[0] if isinstance(record, AttentionRecord) else torch.as_tensor(record)
    if maps.ndim == 4:
        maps = maps[0]
    target = downsample_masks(masks, maps.shape[-2:])[0].numpy().astype(bool)
    winners = argmax_regions(maps)
    return {region: iou(winners[n], target[n]) for n, region in enumerate(REGIONS)}


def expected_after(source, masks, style):
    """Analytic post-makeup image of ``source`` under ``style``."""
    return apply_makeup(np.asarray(source, dtype=np.float64), masks, style)


def region_style_error(generated, masks, style, source):
    """Per region, max over channels of |mean generated color - analytic post-makeup mean color|."""
    got = region_means(np.asarray(generated, dtype=np.float64), masks)
    want = region_means(expected_after(source, masks, style), masks)
    return {region: float(np.nanmax(np.abs(got[n] - want[n]))) if masks.masks[n].any() else float("nan")
            for n, region in enumerate(REGIONS)}


# ====== TRANSFER EVALUATION ======

@dataclass
class EvalRecord:
    face_id: int
    style_id: int
    reference_face: int
    source: np.ndarray
    structure: np.ndarray
    masks: RegionMaskSet
    reference: np.ndarray
    oracle: np.ndarray


def eval_records(manifest, count, seed=0, face_ids=None):
    """
    ``count`` held-out (source, reference, oracle) triplets. The reference shows the
    style on another face when the dataset has one; the oracle is the source face with it.
    """
    records = manifest.records
    if face_ids is not None:
        records = [r for r in records if r["face_id"] in set(face_ids)]
    if not records:
        raise EmptyInput("no records to evaluate")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(records), size=min(count, len(records)), replace=False)
    by_style = {}
    for r in manifest.records:
        by_style.setdefault(r["style_id"], []).append(r)

    out = []
    for i in sorted(picks):
        record = records[i]
        others = [r for r in by_style[record["style_id"]] if r["face_id"] != record["face_id"]]
        donor = others[int(rng.integers(len(others)))] if others else record
        images = load_record(manifest, record)
        out.append(EvalRecord(
            face_id=record["face_id"],
            style_id=record["style_id"],
            reference_face=donor["face_id"],
            source=images.before,
            structure=images.structure,
            masks=images.masks,
            reference=load_record(manifest, donor).after,
            oracle=images.after,
        ))
    return out


def record_metrics(output, record, style, attention=None, window=8):
    errors = region_style_error(output, record.masks, style, record.source)
    row = {
        "face_id": record.face_id,
        "style_id": record.style_id,
        "reference_face": record.reference_face,
        "psnr": psnr(output, record.oracle),
        "ssim": ssim(output, record.oracle, window),
        "id_ssim": identity_ssim(output, record.source, window),
        "l2_m": l2_nonface(output, record.source, record.masks.non_face_mask),
        "style_error": float(np.nanmean(list(errors.values()))),
        **{f"style_error_{r}": v for r, v in errors.items()},
    }
    if attention is not None:
        ious = attention_region_iou(attention, record.masks)
        row["attn_iou"] = float(np.mean(list(ious.values())))
        row.update({f"attn_iou_{r}": v for r, v in ious.items()})
    return row


def evaluate_transfer(model, records, styles, sampler, seed=0, window=8, keep_outputs=False):
    """
    Transfer every record and score it.
    Returns:
        (DataFrame one row per record, list of (output, attention maps) when keep_outputs)
    """
    rows, outputs = [], []
    for i, record in enumerate(records):
        output = transfer(record.source, record.structure, record.reference, model, sampler,
                          face_mask=record.masks.face_mask, seed=seed + i)
        attention = transfer_attention(model, record.source, record.structure, record.reference, seed=seed + i)
        rows.append(record_metrics(output, record, styles[record.style_id], attention, window))
        if keep_outputs:
            outputs.append((output, attention.numpy()))
    frame = pd.DataFrame(rows)
    logger.info("Evaluated %d records : PSNR %.2f  SSIM %.3f  ID-SSIM %.3f  L2-M %.2e  style err %.3f",
                len(frame), frame["psnr"].replace(np.inf, np.nan).mean(), frame["ssim"].mean(),
                frame["id_ssim"].mean(), frame["l2_m"].mean(), frame["style_error"].mean())
    return frame, outputs


# ====== ABLATIONS ======

@dataclass
class AblationInputs:
    """Everything the ablation grid trains and evaluates on."""
    manifest: object
    train_samples: list        # StyleSample list for stage 1
    eval_samples: list         # held-out StyleSample list for KNN accuracy
    pairs: list                # accepted TrainingPairs for stage 2
    eval_records: list
    style_bundle: object
    denoiser_bundle: object


def _encoder_row(job, inputs, config, seed):
    variant = job.params["variant"]
    if variant == "none":
        encoder = init_style_encoder(StyleEncoderConfig.from_config(config["style_encoder"]), seed)
    else:
        bundle = train_style_encoder(inputs.train_samples, config, seed,
                                     use_ssl="ssl" in variant, use_text="text" in variant)
        encoder = bundle.encoder
    accuracy = knn_accuracy(encoder, inputs.eval_samples, config["eval"]["knn_k"])
    return {"SSL": "ssl" in variant, "Text": "text" in variant, "Acc": accuracy}


def _transfer_row(model, inputs, config, seed):
    frame, _ = evaluate_transfer(model, inputs.eval_records, inputs.manifest.styles, config["sampler"], seed,
                                 config["eval"]["ssim_window"])
    return {
        "style_error": frame["style_error"].mean(),
        "id_ssim": frame["id_ssim"].mean(),
        "psnr": frame["psnr"].replace(np.inf, np.nan).mean(),
        "l2_m": frame["l2_m"].mean(),
        "attn_iou": frame["attn_iou"].mean(),
    }


def _injection_row(job, inputs, config, seed):
    flags = job.params
    bundle = train_transfer(inputs.pairs, inputs.style_bundle, inputs.denoiser_bundle, config, seed,
                            use_lora=flags["lora"], use_pixel=flags["pixel"], use_structure=flags["structure"])
    return {"LoRA": flags["lora"], "Pixel": flags["pixel"], "Structure": flags["structure"],
            **_transfer_row(bundle.model, inputs, config, seed)}


def _attention_row(job, inputs, config, seed):
    attn = job.params["attn"]
    weight = config["transfer"]["lambda_attn"] if attn else 0.0
    bundle = train_transfer(inputs.pairs, inputs.style_bundle, inputs.denoiser_bundle, config, seed,
                            lambda_attn=weight)
    return {"Attn": attn, **_transfer_row(bundle.model, inputs, config, seed)}


def _alignment_row(job, inputs, config, seed):
    section = config["pairs"]
    drift = {k: section[k] for k in ("max_rotation_deg", "max_scale", "max_translation", "min_translation")}
    aligned, unaligned = alignment_gain(inputs.manifest, seed, drift, tuple(section["iou_regions"]))
    return {
        "aligned_iou": float(aligned.mean()),
        "unaligned_iou": float(unaligned.mean()),
        "aligned_wins": float(np.mean(aligned > unaligned)),
    }


ROW_BUILDERS = {"encoder": _encoder_row, "injection": _injection_row, "attention": _attention_row, "alignment": _alignment_row}


def run_ablation(config, inputs, out_dir, seed=0, tables=None):
    """
    Train and evaluate the configured grid; write one CSV per table.
    Returns:
        {table name: DataFrame}, rows in grid order (failed jobs are left out and logged)
    """
    jobs = ablation_jobs(config["ablation"], tables)
    out = Path(out_dir)

    def runner(job, job_dir):
        return ROW_BUILDERS[job.table](job, inputs, config, seed)

    rows, failures = run_jobs(jobs, runner, out)
    results = {}
    for table in dict.fromkeys(job.table for job in jobs):
        frame = pd.DataFrame([row for job, row in rows if job.table == table])
        if table == "encoder" and not frame.empty:
            frame = frame.sort_values("Acc", kind="stable").reset_index(drop=True)
        frame.to_csv(out / f"{table}.csv", index=False)
        logger.info("%s\n%s", table, frame.to_string(index=False))
        results[table] = frame
    if failures:
        logger.warning("%d ablation job(s) failed: %s", len(failures), ", ".join(j.name for j in failures))
    return results


def check_tables(results):
    """Trend flags of the ablation tables; recorded next to them, never raised."""
    flags = {}
    encoder = results.get("encoder")
    if encoder is not None and not encoder.empty:
        acc = {(bool(r.SSL), bool(r.Text)): r.Acc for r in encoder.itertuples()}
        if (False, False) in acc and (True, True) in acc:
            flags["encoder_full_beats_untrained"] = acc[(True, True)] > acc[(False, False)]
    attention = results.get("attention")
    if attention is not None and len(attention) == 2:
        by_attn = {bool(r.Attn): r.attn_iou for r in attention.itertuples()}
        flags["attn_loss_helps"] = by_attn.get(True, np.nan) >= by_attn.get(False, np.nan)
    return flags
