"""Before-and-after training pairs: landmark affine alignment, face blending and IoU filtering.

On synthetic data the after-image is exact, so editing-model drift is
simulated by a random small affine. Alignment undoes it with a least-squares
affine fitted on the landmarks, then the face of the aligned image is blended
onto the source and pairs whose eye or mouth masks drifted too far are
rejected.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from errors import DegenerateConfiguration, EmptyInput, ShapeMismatch
from synthface import LandmarkSet, RegionMaskSet, load_png, load_record, save_png

logger = logging.getLogger(__name__)


# ====== AFFINE TRANSFORMS ======

@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray    # 2x3, maps (x, y, 1) -> (x', y')

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ShapeMismatch(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise DegenerateConfiguration("affine linear part is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def from_params(cls, rotation_deg=0.0, scale=1.0, translation=(0.0, 0.0), center=(0.0, 0.0)):
        """Rotation and isotropic scale about ``center``, then translation."""
        a = np.deg2rad(rotation_deg)
        linear = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        c = np.asarray(center, dtype=np.float64)
        offset = c - linear @ c + np.asarray(translation, dtype=np.float64)
        return cls(np.column_stack([linear, offset]))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self):
        linear_inv = np.linalg.inv(self.matrix[:, :2])
        return AffineTransform(np.column_stack([linear_inv, -linear_inv @ self.matrix[:, 2]]))

    def compose(self, other):
        """self after other."""
        linear = self.matrix[:, :2] @ other.matrix[:, :2]
        offset = self.matrix[:, :2] @ other.matrix[:, 2] + self.matrix[:, 2]
        return AffineTransform(np.column_stack([linear, offset]))


def _points(landmarks):
    return landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, dtype=np.float64)


def fit_affine(src_points, dst_points):
    """Least-squares affine A minimising sum ||A p_src - p_dst||^2 over all landmarks."""
    src, dst = _points(src_points), _points(dst_points)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ShapeMismatch(f"landmark sets must both be Kx2, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need at least 3 landmarks, got {len(src)}")
    if np.linalg.matrix_rank(src - src.mean(axis=0), tol=1e-9) < 2:
        raise DegenerateConfiguration("source landmarks are collinear")
    design = np.column_stack([src, np.ones(len(src))])
    solution, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return AffineTransform(solution.T)


def warp_image(image, transform, out_size=None):
    """
    Inverse-mapped bilinear warp: out(p) = image(A^-1 p).
    Samples outside the input replicate the nearest border pixel.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    out_h, out_w = (h, w) if out_size is None else (out_size, out_size) if np.isscalar(out_size) else out_size
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    src = transform.inverse().apply(np.column_stack([xs.ravel(), ys.ravel()]))
    coords = [src[:, 1].reshape(out_h, out_w), src[:, 0].reshape(out_h, out_w)]
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])],
        axis=-1,
    )


def warp_mask(mask, transform):
    return warp_image(mask.astype(np.float64), transform) >= 0.5


# ====== BLENDING AND FILTERING ======

def feathered_weight(face_mask, feather_radius):
    """Weight in [0,1]: 0 outside the mask, ramping to 1 over ``feather_radius`` px inside it."""
    mask = np.asarray(face_mask).astype(bool)
    if feather_radius <= 0:
        return mask.astype(np.float64)
    depth = ndimage.distance_transform_edt(mask)
    return np.clip(depth / float(feather_radius), 0.0, 1.0)


def blend_face(source_image, warped_makeup_image, face_mask, feather_radius=2):
    source = np.asarray(source_image, dtype=np.float64)
    makeup = np.asarray(warped_makeup_image, dtype=np.float64)
    if source.shape != makeup.shape or source.shape[:2] != np.shape(face_mask):
        raise ShapeMismatch(
            f"blend inputs disagree: source {source.shape}, makeup {makeup.shape}, mask {np.shape(face_mask)}"
        )
    weight = feathered_weight(face_mask, feather_radius)
    if source.ndim == 3:
        weight = weight[..., None]
    return weight * makeup + (1.0 - weight) * source


def iou(mask_a, mask_b):
    """|a & b| / |a | b|, 1.0 when both masks are empty."""
    a, b = np.asarray(mask_a).astype(bool), np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"iou masks disagree: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ====== PAIR BUILDING ======

@dataclass
class TrainingPair:
    source_image: np.ndarray
    reference_image: np.ndarray
    region_masks: RegionMaskSet
    landmarks: LandmarkSet
    structure: np.ndarray
    style_id: int
    face_id: int
    accepted: bool = True
    rejection_reason: str = None
    ious: dict = field(default_factory=dict)
    drifted: bool = False


def sample_drift(rng, center, max_rotation_deg=8.0, max_scale=0.08, max_translation=4.0, min_translation=1.0):
    """Random small affine about the face center; translation is at least ``min_translation`` px."""
    rotation = rng.uniform(-max_rotation_deg, max_rotation_deg)
    scale = 1.0 + rng.uniform(-max_scale, max_scale)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    radius = rng.uniform(min_translation, max(max_translation, min_translation))
    translation = (radius * np.cos(angle), radius * np.sin(angle))
    return AffineTransform.from_params(rotation, scale, translation, center)


def _region_ious(source_masks, other_masks, regions):
    return {r: iou(source_masks[r], other_masks[r]) for r in regions}


def build_pair(manifest, record, iou_threshold, drift, align=True, feather_radius=2, iou_regions=("eyes", "mouth")):
    """One record -> TrainingPair. ``drift`` is None for an undisturbed after-image."""
    images = load_record(manifest, record)
    source_masks = images.masks
    if drift is None:
        aligned, aligned_masks = images.after, source_masks
        reference = images.after
    else:
        drifted = warp_image(images.after, drift)
        drifted_masks = np.stack([warp_mask(m, drift) for m in source_masks.masks])
        if align:
            correction = fit_affine(drift.apply(images.landmarks.points), images.landmarks.points)
            aligned = warp_image(drifted, correction)
            aligned_masks = np.stack([warp_mask(m, correction) for m in drifted_masks])
        else:
            aligned, aligned_masks = drifted, drifted_masks
        aligned_masks = RegionMaskSet(aligned_masks, ~aligned_masks.any(axis=0))
        reference = blend_face(images.before, aligned, source_masks.face_mask, feather_radius)

    ious = _region_ious(source_masks, aligned_masks, iou_regions)
    failing = [r for r, v in ious.items() if v < iou_threshold]
    return TrainingPair(
        source_image=images.before,
        reference_image=reference,
        region_masks=source_masks,
        landmarks=images.landmarks,
        structure=images.structure,
        style_id=record["style_id"],
        face_id=record["face_id"],
        accepted=not failing,
        rejection_reason=(
            None if not failing
            else "; ".join(f"{r} IoU {ious[r]:.3f} < {iou_threshold}" for r in failing)
        ),
        ious=ious,
        drifted=drift is not None,
    )


def build_pairs(manifest, iou_threshold=0.6, misalignment_rate=0.0, seed=0, align=True, feather_radius=2,
                iou_regions=("eyes", "mouth"), drift_params=None, workers=1):
    """
    Build one TrainingPair per manifest record, in manifest order.
    Parameters:
        misalignment_rate: probability that a record receives a random drift affine
        align: fit and undo the drift from landmarks (False reproduces naive blending)
        drift_params: keyword overrides for sample_drift
    """
    if not manifest.records:
        raise EmptyInput("manifest has no records")
    rng = np.random.default_rng(seed)
    drift_params = drift_params or {}
    drifts = []
    for record in manifest.records:
        # draws happen for every record so the drift of record i does not depend on the rate
        draw = rng.random()
        center = (manifest.size / 2.0 - 0.5, manifest.size / 2.0 - 0.5)
        candidate = sample_drift(rng, center, **drift_params)
        drifts.append(candidate if draw < misalignment_rate else None)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        result = list(pool.map(
            lambda job: build_pair(manifest, job[0], iou_threshold, job[1], align, feather_radius, iou_regions),
            zip(manifest.records, drifts),
        ))
    accepted = sum(p.accepted for p in result)
    logger.info("Pairs built : %d accepted / %d (%.1f%%)", accepted, len(result), 100.0 * accepted / len(result))
    return result


def save_pairs(pairs, out_dir, iou_threshold=None):
    """Write reference images and ``pairs_manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "references").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        ref_path = Path("references") / f"pair_{i:05d}.png"
        save_png(pair.reference_image, out / ref_path)
        entries.append({
            "index": i,
            "face_id": pair.face_id,
            "style_id": pair.style_id,
            "reference": str(ref_path),
            "accepted": bool(pair.accepted),
            "ious": {k: float(v) for k, v in pair.ious.items()},
            "rejection_reason": pair.rejection_reason,
            "drifted": bool(pair.drifted),
        })
    path = out / "pairs_manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"iou_threshold": iou_threshold, "pairs": entries}, f, indent=2)
    return path


def load_pairs(pairs_manifest_path, manifest, accepted_only=True):
    """Rebuild TrainingPairs from ``pairs_manifest.json`` and the dataset it was built from."""
    path = Path(pairs_manifest_path)
    if path.is_dir():
        path = path / "pairs_manifest.json"
    with open(path, "r", encoding="utf-8") as f:
        entries = json.load(f)["pairs"]
    by_key = {(r["face_id"], r["style_id"]): r for r in manifest.records}
    pairs = []
    for entry in entries:
        if accepted_only and not entry["accepted"]:
            continue
        images = load_record(manifest, by_key[(entry["face_id"], entry["style_id"])])
        pairs.append(TrainingPair(
            source_image=images.before,
            reference_image=load_png(path.parent / entry["reference"]),
            region_masks=images.masks,
            landmarks=images.landmarks,
            structure=images.structure,
            style_id=entry["style_id"],
            face_id=entry["face_id"],
            accepted=entry["accepted"],
            rejection_reason=entry["rejection_reason"],
            ious=entry["ious"],
            drifted=entry.get("drifted", False),
        ))
    return pairs


def alignment_gain(manifest, seed=0, drift_params=None, iou_regions=("eyes", "mouth")):
    """
    Per record, mean eye/mouth IoU with and without landmark alignment under forced drift.
    Returns:
        (aligned_ious, unaligned_ious) arrays, one entry per record
    """
    common = dict(iou_threshold=0.0, misalignment_rate=1.0, seed=seed, drift_params=drift_params,
                  iou_regions=iou_regions)
    with_alignment = build_pairs(manifest, align=True, **common)
    without = build_pairs(manifest, align=False, **common)

    def mean_iou(pair):
        return float(np.mean([pair.ious[r] for r in iou_regions]))

    return np.array([mean_iou(p) for p in with_alignment]), np.array([mean_iou(p) for p in without])
