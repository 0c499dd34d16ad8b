"""Procedural synthetic faces and parameterised makeup styles.

Faces are flat-shaded ellipse compositions: a skin ellipse, two eye sockets
with an iris, a nose and a mouth. Because every shape is analytic, the
region masks, landmarks and structure render are exact, and makeup is a
closed-form blend inside those masks.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from config import REGIONS
from errors import DatasetError, DegenerateConfiguration, InvalidFaceSpec, ShapeMismatch

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
NUM_BOUNDARY_LANDMARKS = 16
NUM_LANDMARKS = NUM_BOUNDARY_LANDMARKS + 5  # + 2 eye centers, nose tip, 2 mouth corners

SCLERA_COLOR = (0.93, 0.93, 0.90)
NOSE_SHADE = 0.92
GLOSS_ALPHA = 0.35

LABEL_BACKGROUND, LABEL_SKIN, LABEL_EYES, LABEL_NOSE, LABEL_MOUTH = range(5)


# ====== FACE GEOMETRY ======

@dataclass(frozen=True)
class FaceSpec:
    """Geometry in pixels of a ``canvas``-sized reference image, colors as RGB in [0,1]."""
    identity_seed: int
    face_center: tuple
    face_axes: tuple
    eye_params: tuple      # ((cx, cy, r), (cx, cy, r)), left eye first
    nose_params: tuple     # (cx, cy, half_width, half_height)
    mouth_params: tuple    # (cx, cy, half_width, half_height)
    skin_color: tuple
    lip_color: tuple
    iris_color: tuple
    background_color: tuple = (0.3, 0.3, 0.35)
    pose_shift: tuple = (0.0, 0.0)
    canvas: int = 64

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, (list, tuple)) else v
        return cls(**{k: tup(v) for k, v in data.items()})


@dataclass
class RegionMaskSet:
    masks: np.ndarray        # (N, H, W) bool, order = REGIONS
    non_face_mask: np.ndarray

    def __getitem__(self, region):
        return self.masks[REGIONS.index(region)]

    @property
    def face_mask(self):
        return ~self.non_face_mask

    @property
    def shape(self):
        return self.non_face_mask.shape


@dataclass
class LandmarkSet:
    points: np.ndarray       # (NUM_LANDMARKS, 2) as (x, y)

    def __len__(self):
        return len(self.points)


@dataclass
class RenderedFace:
    image: np.ndarray        # (H, W, 3) float64
    masks: RegionMaskSet
    landmarks: LandmarkSet
    structure: np.ndarray    # (H, W) float64 in {0, 1}


def _uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def sample_face_spec(seed, canvas=64):
    """Draw a valid FaceSpec; every shape scales with ``canvas``."""
    rng = np.random.default_rng(seed)
    k = canvas / 64.0
    cx = (32.0 + _uniform(rng, -1.5, 1.5)) * k
    cy = (32.0 + _uniform(rng, -1.5, 1.5)) * k
    rx = _uniform(rng, 19.0, 22.0) * k
    ry = _uniform(rng, 22.0, 25.0) * k

    eye_r = _uniform(rng, 4.0, 4.6) * k
    eye_dx = 0.42 * rx
    eye_y = cy - 0.27 * ry
    eyes = ((cx - eye_dx, eye_y, eye_r), (cx + eye_dx, eye_y, eye_r))
    nose = (cx, cy + 0.12 * ry, _uniform(rng, 2.4, 3.0) * k, _uniform(rng, 4.0, 5.0) * k)
    mouth = (cx, cy + 0.56 * ry, _uniform(rng, 5.5, 7.5) * k, _uniform(rng, 2.2, 3.0) * k)

    tone = _uniform(rng, 0.0, 1.0)
    light, dark = np.array([0.95, 0.80, 0.70]), np.array([0.45, 0.30, 0.22])
    skin = light + tone * (dark - light)
    lip = np.clip(skin * np.array([0.85, 0.55, 0.55]) + rng.uniform(-0.04, 0.04, 3), 0.0, 1.0)
    irises = [(0.35, 0.22, 0.12), (0.20, 0.35, 0.55), (0.25, 0.40, 0.25), (0.15, 0.10, 0.08)]
    iris = irises[int(rng.integers(len(irises)))]
    background = tuple(float(v) for v in rng.uniform(0.15, 0.5, 3))

    spec = FaceSpec(
        identity_seed=int(seed),
        face_center=(cx, cy),
        face_axes=(rx, ry),
        eye_params=eyes,
        nose_params=nose,
        mouth_params=mouth,
        skin_color=tuple(float(v) for v in skin),
        lip_color=tuple(float(v) for v in lip),
        iris_color=iris,
        background_color=background,
        pose_shift=(_uniform(rng, -2.0, 2.0) * k, _uniform(rng, -2.0, 2.0) * k),
        canvas=canvas,
    )
    validate_face_spec(spec)
    return spec


def _ellipse(xs, ys, cx, cy, ax, ay):
    return ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0


def _shifted(spec):
    """Feature ellipses (cx, cy, ax, ay) in canvas pixels, pose shift applied."""
    dx, dy = spec.pose_shift
    (fx, fy), (rx, ry) = spec.face_center, spec.face_axes
    shapes = {"face": (fx + dx, fy + dy, rx, ry)}
    shapes["eyes"] = [(ex + dx, ey + dy, r, r) for ex, ey, r in spec.eye_params]
    nx, ny, nw, nh = spec.nose_params
    shapes["nose"] = (nx + dx, ny + dy, nw, nh)
    mx, my, mw, mh = spec.mouth_params
    shapes["mouth"] = (mx + dx, my + dy, mw, mh)
    return shapes


def _grid(size, canvas):
    # pixel centres of a size x size image, in canvas coordinates
    coords = (np.arange(size) + 0.5) * canvas / size - 0.5
    return np.meshgrid(coords, coords)


def validate_face_spec(spec, oversample=4):
    shapes = _shifted(spec)
    cx, cy, rx, ry = shapes["face"]
    last = spec.canvas - 1
    if cx - rx < 0 or cy - ry < 0 or cx + rx > last or cy + ry > last:
        raise InvalidFaceSpec(
            f"face ellipse ({cx:.1f}, {cy:.1f}, {rx:.1f}, {ry:.1f}) leaves the {spec.canvas}px canvas"
        )
    for name, values in (("skin", spec.skin_color), ("lip", spec.lip_color), ("iris", spec.iris_color)):
        if len(values) != 3 or min(values) < 0.0 or max(values) > 1.0:
            raise InvalidFaceSpec(f"{name}_color must be RGB in [0,1], got {values}")

    xs, ys = _grid(spec.canvas * oversample, spec.canvas)
    face = _ellipse(xs, ys, *shapes["face"])
    features = {
        "eyes": _ellipse(xs, ys, *shapes["eyes"][0]) | _ellipse(xs, ys, *shapes["eyes"][1]),
        "nose": _ellipse(xs, ys, *shapes["nose"]),
        "mouth": _ellipse(xs, ys, *shapes["mouth"]),
    }
    if np.any(_ellipse(xs, ys, *shapes["eyes"][0]) & _ellipse(xs, ys, *shapes["eyes"][1])):
        raise InvalidFaceSpec("the two eye sockets overlap")
    names = list(features)
    for i, a in enumerate(names):
        if np.any(features[a] & ~face):
            raise InvalidFaceSpec(f"{a} region leaves the skin ellipse")
        for b in names[i + 1:]:
            if np.any(features[a] & features[b]):
                raise InvalidFaceSpec(f"{a} and {b} regions overlap")


# ====== RENDERING ======

def render_face(spec, size=64):
    """
    Render a face deterministically.
    Returns:
        RenderedFace(image HxWx3, masks, landmarks, structure HxW)
    """
    if size < 32:
        raise InvalidFaceSpec(f"size must be >= 32, got {size}")
    validate_face_spec(spec)
    shapes = _shifted(spec)
    xs, ys = _grid(size, spec.canvas)

    labels = np.zeros((size, size), dtype=np.int64)
    labels[_ellipse(xs, ys, *shapes["face"])] = LABEL_SKIN
    iris = np.zeros((size, size), dtype=bool)
    for ex, ey, r, _ in shapes["eyes"]:
        labels[_ellipse(xs, ys, ex, ey, r, r)] = LABEL_EYES
        iris |= _ellipse(xs, ys, ex, ey, 0.5 * r, 0.5 * r)
    labels[_ellipse(xs, ys, *shapes["nose"])] = LABEL_NOSE
    labels[_ellipse(xs, ys, *shapes["mouth"])] = LABEL_MOUTH

    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = spec.background_color
    image[labels == LABEL_SKIN] = spec.skin_color
    image[labels == LABEL_EYES] = SCLERA_COLOR
    image[(labels == LABEL_EYES) & iris] = spec.iris_color
    image[labels == LABEL_NOSE] = np.asarray(spec.skin_color) * NOSE_SHADE
    image[labels == LABEL_MOUTH] = spec.lip_color

    masks = np.stack([labels == label for label in (LABEL_SKIN, LABEL_EYES, LABEL_NOSE, LABEL_MOUTH)])
    return RenderedFace(
        image=image,
        masks=RegionMaskSet(masks=masks, non_face_mask=labels == LABEL_BACKGROUND),
        landmarks=LandmarkSet(points=_landmarks(shapes, size, spec.canvas)),
        structure=structure_from_labels(labels),
    )


def _landmarks(shapes, size, canvas):
    cx, cy, rx, ry = shapes["face"]
    angles = np.arange(NUM_BOUNDARY_LANDMARKS) * 2.0 * np.pi / NUM_BOUNDARY_LANDMARKS
    points = [(cx + rx * np.cos(a), cy + ry * np.sin(a)) for a in angles]
    points += [(ex, ey) for ex, ey, _, _ in shapes["eyes"]]
    nx, ny, _, nh = shapes["nose"]
    points.append((nx, ny + nh))
    mx, my, mw, _ = shapes["mouth"]
    points += [(mx - mw, my), (mx + mw, my)]
    points = np.asarray(points, dtype=np.float64)
    # canvas -> output pixel coordinates (pixel centres preserved)
    return (points + 0.5) * size / canvas - 0.5


def structure_from_labels(labels):
    """1 on pixels with a 4-neighbour of another region, 0 elsewhere; no color information."""
    edges = np.zeros(labels.shape, dtype=bool)
    diff_v = labels[1:, :] != labels[:-1, :]
    diff_h = labels[:, 1:] != labels[:, :-1]
    edges[1:, :] |= diff_v
    edges[:-1, :] |= diff_v
    edges[:, 1:] |= diff_h
    edges[:, :-1] |= diff_h
    return edges.astype(np.float64)


# ====== MAKEUP STYLES ======

@dataclass(frozen=True)
class SkinEdit:
    tint: tuple = (0.0, 0.0, 0.0)
    alpha: float = 0.0


@dataclass(frozen=True)
class EyeEdit:
    color: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0        # fraction of the socket covered, from its rim inwards
    alpha: float = 0.0


@dataclass(frozen=True)
class NoseEdit:
    contour: float = 0.0       # darkening factor in [0,1]


@dataclass(frozen=True)
class MouthEdit:
    color: tuple = (0.0, 0.0, 0.0)
    alpha: float = 0.0
    gloss: bool = False


@dataclass(frozen=True)
class MakeupStyle:
    style_id: int
    name: str
    description: str
    skin_edit: SkinEdit = field(default_factory=SkinEdit)
    eye_edit: EyeEdit = field(default_factory=EyeEdit)
    nose_edit: NoseEdit = field(default_factory=NoseEdit)
    mouth_edit: MouthEdit = field(default_factory=MouthEdit)

    def __post_init__(self):
        for what, value in (
            ("skin alpha", self.skin_edit.alpha),
            ("eye alpha", self.eye_edit.alpha),
            ("eye radius", self.eye_edit.radius),
            ("nose contour", self.nose_edit.contour),
            ("mouth alpha", self.mouth_edit.alpha),
        ):
            if not 0.0 <= value <= 1.0:
                raise InvalidFaceSpec(f"{what} must lie in [0,1], got {value}")

    @classmethod
    def identity(cls, style_id=-1):
        return cls(style_id=style_id, name="No makeup", description="No makeup.")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(
            style_id=int(data["style_id"]),
            name=data["name"],
            description=data["description"],
            skin_edit=SkinEdit(tuple(data["skin_edit"]["tint"]), data["skin_edit"]["alpha"]),
            eye_edit=EyeEdit(tuple(data["eye_edit"]["color"]), data["eye_edit"]["radius"], data["eye_edit"]["alpha"]),
            nose_edit=NoseEdit(data["nose_edit"]["contour"]),
            mouth_edit=MouthEdit(tuple(data["mouth_edit"]["color"]), data["mouth_edit"]["alpha"],
                                 bool(data["mouth_edit"]["gloss"])),
        )


def _check_masks(image, masks):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"image must be HxWx3, got {image.shape}")
    if masks.masks.shape[1:] != image.shape[:2] or masks.non_face_mask.shape != image.shape[:2]:
        raise ShapeMismatch(f"masks {masks.masks.shape[1:]} do not match image {image.shape[:2]}")


def _inside_depth(mask):
    """Distance to the region rim and, per connected component, its maximum."""
    depth = ndimage.distance_transform_edt(mask)
    components, count = ndimage.label(mask)
    peak = np.zeros_like(depth)
    if count:
        maxima = ndimage.maximum(depth, components, index=np.arange(1, count + 1))
        peak[mask] = np.asarray(maxima)[components[mask] - 1]
    return depth, peak


def _blend(out, where, color, alpha):
    out[where] = (1.0 - alpha) * out[where] + alpha * np.asarray(color, dtype=np.float64)


def apply_makeup(image, masks, style):
    """
    Oracle makeup applicator: out = (1 - alpha) * in + alpha * edit_color inside each region.
    Pixels outside the union of region masks are returned untouched.
    """
    _check_masks(image, masks)
    out = np.array(image, dtype=np.float64, copy=True)

    skin = style.skin_edit
    if skin.alpha > 0:
        _blend(out, masks["skin"], skin.tint, skin.alpha)

    eye = style.eye_edit
    if eye.alpha > 0 and eye.radius > 0:
        depth, peak = _inside_depth(masks["eyes"])
        shadow = masks["eyes"] & (depth <= eye.radius * peak)
        _blend(out, shadow, eye.color, eye.alpha)

    if style.nose_edit.contour > 0:
        _blend(out, masks["nose"], (0.0, 0.0, 0.0), style.nose_edit.contour)

    mouth = style.mouth_edit
    if mouth.alpha > 0:
        _blend(out, masks["mouth"], mouth.color, mouth.alpha)
        if mouth.gloss:
            depth, peak = _inside_depth(masks["mouth"])
            _blend(out, masks["mouth"] & (depth >= 0.5 * peak), (1.0, 1.0, 1.0), GLOSS_ALPHA)
    return out


def region_means(image, masks):
    """(N, 3) mean color per region; NaN rows for empty regions."""
    means = np.full((len(REGIONS), 3), np.nan)
    for n in range(len(REGIONS)):
        if masks.masks[n].any():
            means[n] = image[masks.masks[n]].mean(axis=0)
    return means


FINISHES = ["Dewy", "Matte", "Satin", "Glossy", "Luminous", "Velvet", "Sheer", "Radiant", "Soft", "Bold"]
THEMES = ["minimalist", "glam", "editorial", "vintage", "boho", "gothic", "romantic", "festival", "sunset", "smoky"]
COLOR_NAMES = {
    "ivory": (0.96, 0.94, 0.86), "peach": (0.98, 0.75, 0.60), "coral": (0.98, 0.50, 0.45),
    "crimson": (0.80, 0.08, 0.20), "scarlet": (1.0, 0.14, 0.0), "rose": (0.90, 0.45, 0.55),
    "plum": (0.50, 0.20, 0.45), "berry": (0.60, 0.10, 0.30), "bronze": (0.70, 0.45, 0.20),
    "gold": (0.90, 0.75, 0.30), "taupe": (0.55, 0.47, 0.40), "charcoal": (0.20, 0.20, 0.22),
    "navy": (0.10, 0.15, 0.40), "teal": (0.10, 0.50, 0.50), "emerald": (0.10, 0.55, 0.30),
    "lilac": (0.75, 0.60, 0.85), "nude": (0.80, 0.62, 0.52), "mocha": (0.45, 0.30, 0.22),
}


def color_name(rgb):
    rgb = np.asarray(rgb)
    return min(COLOR_NAMES, key=lambda k: float(np.sum((np.asarray(COLOR_NAMES[k]) - rgb) ** 2)))


def intensity_word(alpha):
    if alpha < 0.35:
        return "a sheer wash of"
    if alpha < 0.6:
        return "a soft layer of"
    if alpha < 0.85:
        return "a rich layer of"
    return "an intense layer of"


def describe_style(name, skin, eye, nose, mouth):
    eye_extent = "across the whole lid" if eye.radius > 0.75 else "hugging the lash line"
    contour = (
        "The nose is left natural." if nose.contour < 0.08
        else f"The nose is {'lightly' if nose.contour < 0.2 else 'sharply'} contoured."
    )
    finish = "with a glossy highlight" if mouth.gloss else "in a flat finish"
    return (
        f"{name}. The complexion gets {intensity_word(skin.alpha)} {color_name(skin.tint)} tint. "
        f"The eyes wear {intensity_word(eye.alpha)} {color_name(eye.color)} shadow {eye_extent}. "
        f"{contour} "
        f"The lips are {color_name(mouth.color)} {finish}, applied as {intensity_word(mouth.alpha)} color."
    )


def _sample_edits(rng):
    skin = SkinEdit(tuple(float(v) for v in rng.uniform(0.3, 1.0, 3)), _uniform(rng, 0.1, 0.5))
    eye = EyeEdit(tuple(float(v) for v in rng.uniform(0.0, 1.0, 3)), _uniform(rng, 0.4, 1.0), _uniform(rng, 0.4, 0.95))
    nose = NoseEdit(_uniform(rng, 0.0, 0.3))
    mouth = MouthEdit(tuple(float(v) for v in rng.uniform(0.0, 1.0, 3)), _uniform(rng, 0.5, 1.0), bool(rng.random() < 0.4))
    return skin, eye, nose, mouth


def _style_names(count, rng):
    combos = [f"{f} {t}" for f in FINISHES for t in THEMES]
    order = rng.permutation(len(combos))
    names = []
    for i in range(count):
        base = combos[order[i % len(combos)]]
        rnd = i // len(combos)
        names.append(base if rnd == 0 else f"{base} {rnd + 1}")
    return names


def make_style_catalog(count, seed, margin=0.05, reference_seed=0, max_tries=2000):
    """
    Sample ``count`` pairwise-separable makeup styles.
    Separability is measured on a fixed reference face: two styles must differ by
    at least ``margin`` in some channel of some region's mean post-makeup color.
    """
    if count < 2:
        raise DegenerateConfiguration("a style catalog needs at least 2 styles for contrastive learning")
    rng = np.random.default_rng(seed)
    reference = render_face(sample_face_spec(reference_seed), 64)
    names = _style_names(count, rng)

    styles, signatures = [], []
    for style_id in range(count):
        for _ in range(max_tries):
            skin, eye, nose, mouth = _sample_edits(rng)
            candidate = MakeupStyle(
                style_id=style_id,
                name=names[style_id],
                description=describe_style(names[style_id], skin, eye, nose, mouth),
                skin_edit=skin, eye_edit=eye, nose_edit=nose, mouth_edit=mouth,
            )
            signature = region_means(apply_makeup(reference.image, reference.masks, candidate), reference.masks)
            if all(np.nanmax(np.abs(signature - other)) >= margin for other in signatures):
                break
        else:
            raise DegenerateConfiguration(
                f"could not sample style {style_id} at least {margin} away from the others; lower the margin"
            )
        styles.append(candidate)
        signatures.append(signature)
    return styles


def save_styles(styles, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([s.to_dict() for s in styles], f, indent=2)


def load_styles(path):
    with open(path, "r", encoding="utf-8") as f:
        return [MakeupStyle.from_dict(d) for d in json.load(f)]


# ====== DATASET ======

def save_png(array, path):
    data = np.clip(np.round(np.asarray(array, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


@dataclass
class DatasetManifest:
    root: str
    size: int
    seed: int
    styles: list
    records: list
    status: str = "complete"
    note: str = ""

    def save(self):
        data = {
            "version": MANIFEST_VERSION,
            "size": self.size,
            "seed": self.seed,
            "status": self.status,
            "note": self.note,
            "styles": [s.to_dict() for s in self.styles],
            "records": self.records,
        }
        path = Path(self.root) / "manifest.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
        return path

    def style(self, style_id):
        return self.styles[style_id]


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return DatasetManifest(
        root=str(path.parent),
        size=data["size"],
        seed=data["seed"],
        styles=[MakeupStyle.from_dict(d) for d in data["styles"]],
        records=data["records"],
        status=data.get("status", "complete"),
        note=data.get("note", ""),
    )


@dataclass
class RecordImages:
    before: np.ndarray
    after: np.ndarray
    masks: RegionMaskSet
    landmarks: LandmarkSet
    structure: np.ndarray


def load_record(manifest, record):
    root = Path(manifest.root)
    masks = np.stack([load_png(root / record["masks"][r]) > 0.5 for r in REGIONS])
    with open(root / record["landmarks"], "r", encoding="utf-8") as f:
        points = np.asarray(json.load(f)["points"], dtype=np.float64)
    return RecordImages(
        before=load_png(root / record["before"]),
        after=load_png(root / record["after"]),
        masks=RegionMaskSet(masks=masks, non_face_mask=~masks.any(axis=0)),
        landmarks=LandmarkSet(points=points),
        structure=load_png(root / record["structure"]),
    )


def _write_face(root, face_id, face_seed, styles, size):
    spec = sample_face_spec(face_seed)
    face = render_face(spec, size)
    rel = Path("faces") / f"{face_id:05d}"
    folder = root / rel
    folder.mkdir(parents=True, exist_ok=True)

    save_png(face.image, folder / "before.png")
    save_png(face.structure, folder / "structure.png")
    mask_paths = {}
    for n, region in enumerate(REGIONS):
        save_png(face.masks.masks[n].astype(np.float64), folder / f"mask_{region}.png")
        mask_paths[region] = str(rel / f"mask_{region}.png")
    with open(folder / "landmarks.json", "w", encoding="utf-8") as f:
        json.dump({"points": face.landmarks.points.tolist()}, f)

    records = []
    for style in styles:
        save_png(apply_makeup(face.image, face.masks, style), folder / f"after_{style.style_id}.png")
        records.append({
            "face_id": face_id,
            "face_seed": int(face_seed),
            "style_id": style.style_id,
            "description": style.description,
            "before": str(rel / "before.png"),
            "after": str(rel / f"after_{style.style_id}.png"),
            "masks": mask_paths,
            "landmarks": str(rel / "landmarks.json"),
            "structure": str(rel / "structure.png"),
            "meta": str(rel / "meta.json"),
        })
    meta = {
        "face_id": face_id,
        "face_seed": int(face_seed),
        "face_spec": spec.to_dict(),
        "styles": [{"style_id": s.style_id, "description": s.description} for s in styles],
    }
    with open(folder / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    return records


def synthesize_dataset(num_faces, styles, seed, out_dir, styles_per_face=None, size=64, workers=1):
    """
    Render ``num_faces`` faces and their after-makeup images and write the manifest.
    Parameters:
        styles_per_face: None assigns every style to every face, otherwise a seeded subset
        workers: per-face fan-out; the manifest keeps face order whatever the scheduling
    Returns:
        DatasetManifest (already saved to <out_dir>/manifest.json)
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    face_seeds = []
    while len(face_seeds) < num_faces:
        candidate = int(rng.integers(0, 2**31 - 1))
        if candidate not in face_seeds:
            face_seeds.append(candidate)
    if styles_per_face is None:
        assigned = [list(styles)] * num_faces
    else:
        k = min(styles_per_face, len(styles))
        assigned = [[styles[j] for j in sorted(rng.choice(len(styles), k, replace=False))] for _ in range(num_faces)]

    manifest = DatasetManifest(root=str(root), size=size, seed=seed, styles=list(styles), records=[])
    print_every = max(1, num_faces // 10)
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            jobs = pool.map(
                lambda i: _write_face(root, i, face_seeds[i], assigned[i], size), range(num_faces)
            )
            for i, records in enumerate(jobs):
                manifest.records.extend(records)
                if (i + 1) % print_every == 0:
                    logger.info("Faces written : %d/%d", i + 1, num_faces)
    except OSError as e:
        manifest.status = "partial"
        done = len({r["face_id"] for r in manifest.records})
        manifest.note = (
            f"aborted after {done} of {num_faces} faces: {e}. "
            "Folders of faces not listed in records may be incomplete and can be deleted."
        )
        try:
            manifest.save()
        except OSError:
            logger.error("Could not write the partial manifest either")
        raise DatasetError(manifest.note) from e

    manifest.save()
    logger.info("Dataset written : %d faces, %d after-images in %s", num_faces, len(manifest.records), root)
    return manifest


def with_pose_shift(spec, shift):
    return replace(spec, pose_shift=tuple(float(v) for v in shift))
