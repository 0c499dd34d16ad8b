"""Command suite: data synthesis, pairs, both training stages, transfer, evaluation, ablations, report.

    python cli.py synth styles --out runs/styles
    python cli.py synth faces --styles runs/styles/styles.json --out runs/data
    python cli.py pairs build --manifest runs/data/manifest.json --iou-threshold 0.6 --misalign-rate 0.3 --out runs/pairs
    python cli.py train style-encoder --data runs/data --steps 400 --tau 0.1 --out runs/stage1
    python cli.py train base-denoiser --data runs/data --style-encoder runs/stage1/style_encoder.safetensors --out runs/base
    python cli.py train transfer --data runs/data --pairs runs/pairs --style-encoder ... --denoiser ... --out runs/stage2
    python cli.py infer transfer --data runs/data --face-id 0 --reference ref.png --style-encoder ... --denoiser ... --transfer ... --out runs/infer
    python cli.py infer regional --assignment assign.json ...
    python cli.py eval ... --out runs/eval
    python cli.py ablate --data runs/data --pairs runs/pairs --style-encoder ... --denoiser ... --out runs/ablation
    python cli.py report --eval runs/eval --out runs/report

Every subcommand takes --seed, --config and --out. Failures print one line
``error type=<ClassName> message="<text>"`` on stderr and exit nonzero.
"""
import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd
import torch

from checkpoint import require_parent
from config import CONFIG_SCHEMA_VERSION, device_of, load_config, output_dir, save_config, seed_everything
from denoiser import load_denoiser, save_denoiser, train_base_denoiser
from errors import DatasetError, DegenerateConfiguration, RegionMakeupError
from evalsuite import AblationInputs, check_tables, eval_records, evaluate_transfer, run_ablation
from inject import load_transfer, save_transfer, train_transfer, transfer
from pairs import build_pairs, load_pairs, save_pairs
from regional import load_assignment, load_references, regional_transfer
from report import make_report, sample_paths
from styleenc import (
    load_style_encoder, samples_from_manifest, save_style_encoder, to_tensor, train_style_encoder,
)
from synthface import (
    load_manifest, load_png, load_record, load_styles, make_style_catalog, save_png, save_styles, synthesize_dataset,
)

logger = logging.getLogger("regionmakeup")

EXIT_USAGE = 2
EXIT_DOMAIN = 2
EXIT_UNEXPECTED = 1


def error_line(kind, message):
    text = str(message).replace("\n", " ").replace('"', "'")
    return f'error type={kind} message="{text}"'


class Parser(argparse.ArgumentParser):
    def error(self, message):
        print(error_line("UsageError", message), file=sys.stderr)
        sys.exit(EXIT_USAGE)


# ====== COMMANDS ======

def _history_csv(history, path):
    pd.DataFrame(history).to_csv(path, index=False)


def _load_models(args, with_transfer=True):
    style = load_style_encoder(args.style_encoder)
    base, header = load_denoiser(args.denoiser)
    require_parent(header, "style_encoder", style.content_hash, "style encoder checkpoint")
    if not with_transfer:
        return style, base, None
    return style, base, load_transfer(args.transfer, style, base).model


def cmd_synth_styles(args, config, seed, out):
    count = args.count or config["data"]["num_styles"]
    styles = make_style_catalog(count, seed, config["data"]["style_margin"])
    save_styles(styles, out / "styles.json")
    logger.info("Styles written : %d in %s", len(styles), out / "styles.json")


def cmd_synth_faces(args, config, seed, out):
    data = config["data"]
    styles = load_styles(args.styles)
    synthesize_dataset(args.count or data["num_faces"], styles, seed, out,
                       styles_per_face=data["styles_per_face"], size=data["image_size"], workers=data["workers"])


def cmd_pairs_build(args, config, seed, out):
    section = config["pairs"]
    manifest = load_manifest(args.data)
    drift = {k: section[k] for k in ("max_rotation_deg", "max_scale", "max_translation", "min_translation")}
    pairs = build_pairs(manifest, section["iou_threshold"], section["misalignment_rate"], seed, section["align"],
                        section["feather_radius"], tuple(section["iou_regions"]), drift, config["data"]["workers"])
    save_pairs(pairs, out, section["iou_threshold"])


def cmd_train_style_encoder(args, config, seed, out):
    samples = samples_from_manifest(load_manifest(args.data))
    bundle = train_style_encoder(samples, config, seed, extra_texts=[config["denoiser"]["prompt"]])
    save_style_encoder(out / "style_encoder.safetensors", bundle, config, seed)
    _history_csv(bundle.history, out / "history.csv")


def _face_images(manifest):
    root = manifest.root
    paths = list(dict.fromkeys([r["before"] for r in manifest.records] + [r["after"] for r in manifest.records]))
    return to_tensor([load_png(f"{root}/{p}") for p in paths])


def cmd_train_base_denoiser(args, config, seed, out):
    style = load_style_encoder(args.style_encoder)
    images = _face_images(load_manifest(args.data))
    with torch.no_grad():
        prompt = style.text.token_embeddings(config["denoiser"]["prompt"])
    bundle = train_base_denoiser(images, prompt, config, seed, device_of(config))
    save_denoiser(out / "denoiser.safetensors", bundle, parents={"style_encoder": style.content_hash})
    _history_csv(bundle.history, out / "history.csv")


def cmd_train_transfer(args, config, seed, out):
    manifest = load_manifest(args.data)
    style, base, _ = _load_models(args, with_transfer=False)
    pairs = load_pairs(args.pairs, manifest, accepted_only=True)
    bundle = train_transfer(pairs, style, base, config, seed, device_of(config))
    save_transfer(out / "transfer.safetensors", bundle, style.content_hash, base.content_hash)
    _history_csv(bundle.history, out / "history.csv")


def _source(manifest, face_id):
    records = [r for r in manifest.records if r["face_id"] == face_id]
    if not records:
        raise DatasetError(f"face {face_id} is not in the dataset")
    return load_record(manifest, records[0])


def cmd_infer_transfer(args, config, seed, out):
    _, _, model = _load_models(args)
    images = _source(load_manifest(args.data), args.face_id)
    output = transfer(images.before, images.structure, load_png(args.reference), model, config["sampler"],
                      face_mask=images.masks.face_mask, seed=seed)
    save_png(output, out / "transfer.png")
    logger.info("Transfer written : %s", out / "transfer.png")


def cmd_infer_regional(args, config, seed, out):
    _, _, model = _load_models(args)
    images = _source(load_manifest(args.data), args.face_id)
    assignment, paths = load_assignment(args.assignment)
    output = regional_transfer(images.before, images.structure, assignment, load_references(paths), model,
                               config["sampler"], face_mask=images.masks.face_mask, seed=seed)
    save_png(output, out / "regional.png")
    logger.info("Regional transfer written : %s", out / "regional.png")


def cmd_eval(args, config, seed, out):
    manifest = load_manifest(args.data)
    _, _, model = _load_models(args)
    records = eval_records(manifest, args.count or config["eval"]["num_eval_pairs"], seed)
    frame, outputs = evaluate_transfer(model, records, manifest.styles, config["sampler"], seed,
                                       config["eval"]["ssim_window"], keep_outputs=True)
    frame.to_csv(out / "metrics.csv", index=False)
    (out / "samples").mkdir(exist_ok=True)
    for i, (record, (output, attention)) in enumerate(zip(records, outputs)):
        paths = sample_paths(out, i)
        save_png(record.source, paths["source"])
        save_png(record.reference, paths["reference"])
        save_png(output, paths["output"])
        np.save(paths["attention"], attention)


def _split_faces(manifest, holdout):
    """Training and held-out face ids; at least one face lands on each side."""
    faces = sorted({r["face_id"] for r in manifest.records})
    if len(faces) < 2:
        raise DegenerateConfiguration(f"a train/eval split needs at least two faces, got {len(faces)}")
    cut = min(max(1, int(round(len(faces) * (1.0 - holdout)))), len(faces) - 1)
    return set(faces[:cut]), set(faces[cut:])


def cmd_ablate(args, config, seed, out):
    manifest = load_manifest(args.data)
    style, base, _ = _load_models(args, with_transfer=False)
    train_faces, eval_faces = _split_faces(manifest, args.holdout)
    samples = samples_from_manifest(manifest)
    face_of = [r["face_id"] for r in manifest.records]
    inputs = AblationInputs(
        manifest=manifest,
        train_samples=[s for s, f in zip(samples, face_of) if f in train_faces],
        eval_samples=[s for s, f in zip(samples, face_of) if f in eval_faces],
        pairs=[p for p in load_pairs(args.pairs, manifest) if p.face_id in train_faces],
        eval_records=eval_records(manifest, config["eval"]["num_eval_pairs"], seed, face_ids=eval_faces),
        style_bundle=style,
        denoiser_bundle=base,
    )
    results = run_ablation(config, inputs, out, seed, tables=args.tables)
    flags = check_tables(results)
    with open(out / "trends.json", "w", encoding="utf-8") as f:
        json.dump({k: bool(v) for k, v in flags.items()}, f, indent=2)


def cmd_report(args, config, seed, out):
    make_report(args.eval, out, history_files=args.history)


# ====== PARSER ======

def _common(parser):
    parser.add_argument("--seed", type=int, default=None, help="overrides runtime.seed")
    parser.add_argument("--config", default=None, help="YAML file merged over the defaults profile")
    parser.add_argument("--out", required=True, help="output directory (relative to $REGIONMAKEUP_OUTPUT_ROOT if set)")
    parser.add_argument("--log-level", default=None)
    return parser


# flag attribute -> (config section, key)
FLAG_OVERRIDES = {
    "iou_threshold": ("pairs", "iou_threshold"),
    "misalign_rate": ("pairs", "misalignment_rate"),
    "steps": ("stage1", "steps"),
    "tau": ("stage1", "tau"),
}


def flag_overrides(args):
    overrides = {}
    for attr, (section, key) in FLAG_OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    return overrides


def _models(parser, with_transfer=True):
    parser.add_argument("--style-encoder", required=True)
    parser.add_argument("--denoiser", required=True)
    if with_transfer:
        parser.add_argument("--transfer", required=True)


def build_parser():
    parser = Parser(prog="regionmakeup", description="Region-aware makeup transfer at desk scale")
    parser.add_argument("--version", action="version", version=f"regionmakeup config schema {CONFIG_SCHEMA_VERSION}")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=Parser)

    synth = groups.add_parser("synth").add_subparsers(dest="action", required=True, parser_class=Parser)
    p = _common(synth.add_parser("styles"))
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_synth_styles)
    p = _common(synth.add_parser("faces"))
    p.add_argument("--styles", required=True)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_synth_faces)

    pairs = groups.add_parser("pairs").add_subparsers(dest="action", required=True, parser_class=Parser)
    p = _common(pairs.add_parser("build"))
    p.add_argument("--manifest", "--data", dest="data", required=True, help="dataset manifest.json or its directory")
    p.add_argument("--iou-threshold", type=float, default=None, help="overrides pairs.iou_threshold")
    p.add_argument("--misalign-rate", type=float, default=None, help="overrides pairs.misalignment_rate")
    p.set_defaults(func=cmd_pairs_build)

    train = groups.add_parser("train").add_subparsers(dest="action", required=True, parser_class=Parser)
    p = _common(train.add_parser("style-encoder"))
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None, help="overrides stage1.steps")
    p.add_argument("--tau", type=float, default=None, help="overrides stage1.tau")
    p.set_defaults(func=cmd_train_style_encoder)
    p = _common(train.add_parser("base-denoiser"))
    p.add_argument("--data", required=True)
    p.add_argument("--style-encoder", required=True)
    p.set_defaults(func=cmd_train_base_denoiser)
    p = _common(train.add_parser("transfer"))
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True)
    _models(p, with_transfer=False)
    p.set_defaults(func=cmd_train_transfer)

    infer = groups.add_parser("infer").add_subparsers(dest="action", required=True, parser_class=Parser)
    p = _common(infer.add_parser("transfer"))
    p.add_argument("--data", required=True)
    p.add_argument("--face-id", type=int, required=True)
    p.add_argument("--reference", required=True)
    _models(p)
    p.set_defaults(func=cmd_infer_transfer)
    p = _common(infer.add_parser("regional"))
    p.add_argument("--data", required=True)
    p.add_argument("--face-id", type=int, required=True)
    p.add_argument("--assignment", required=True)
    _models(p)
    p.set_defaults(func=cmd_infer_regional)

    p = _common(groups.add_parser("eval"))
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=None)
    _models(p)
    p.set_defaults(func=cmd_eval)

    p = _common(groups.add_parser("ablate"))
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--holdout", type=float, default=0.2, help="fraction of faces held out for evaluation")
    p.add_argument("--tables", nargs="+", default=None, help="subset of encoder injection attention alignment")
    _models(p, with_transfer=False)
    p.set_defaults(func=cmd_ablate)

    p = _common(groups.add_parser("report"))
    p.add_argument("--eval", required=True)
    p.add_argument("--history", nargs="*", default=[])
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, overrides=flag_overrides(args))
        logging.basicConfig(
            level=(args.log_level or config["runtime"]["log_level"]).upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        seed = config["runtime"]["seed"] if args.seed is None else args.seed
        config["runtime"]["seed"] = seed
        seed_everything(seed)
        out = output_dir(args.out)
        save_config(config, out / "config.yaml")
        args.func(args, config, seed, out)
    except RegionMakeupError as e:
        print(error_line(type(e).__name__, e), file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(error_line(type(e).__name__, e), file=sys.stderr)
        return EXIT_UNEXPECTED
    return 0


if __name__ == "__main__":
    sys.exit(main())
