"""Content augmentations that change facial structure but keep the makeup style.

Thin plate spline warps, random crops, flips and small affines, used to make
the two contrastive views of stage 1 and the structure-augmented reference
of stage 2.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, ndimage

from errors import DegenerateConfiguration
from pairs import AffineTransform, warp_image

logger = logging.getLogger(__name__)


# ====== THIN PLATE SPLINE ======

def tps_kernel(r):
    """U(r) = r^2 log r^2, with U(0) = 0."""
    r2 = np.asarray(r, dtype=np.float64) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r2 > 0.0, r2 * np.log(np.where(r2 > 0.0, r2, 1.0)), 0.0)


@dataclass
class ThinPlateSpline:
    centers: np.ndarray      # (K, 2) control points in the domain of the map
    weights: np.ndarray      # (K, 2)
    affine: np.ndarray       # (3, 2) rows: constant, x, y

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64)
        dist = np.linalg.norm(points[:, None, :] - self.centers[None, :, :], axis=-1)
        basis = np.column_stack([np.ones(len(points)), points])
        return basis @ self.affine + tps_kernel(dist) @ self.weights


def fit_tps(domain_points, target_points):
    """
    Solve the TPS interpolating domain_points[k] -> target_points[k] exactly,
    through the block system [[K, P], [P^T, 0]] [w; a] = [target; 0].
    """
    d = np.asarray(domain_points, dtype=np.float64)
    t = np.asarray(target_points, dtype=np.float64)
    if d.shape != t.shape or d.ndim != 2 or d.shape[1] != 2:
        raise DegenerateConfiguration(f"control point sets must both be Kx2, got {d.shape} and {t.shape}")
    k = len(d)
    p = np.column_stack([np.ones(k), d])
    if k < 3 or np.linalg.matrix_rank(p) < 3:
        raise DegenerateConfiguration("TPS needs at least 3 non-collinear control points")
    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = tps_kernel(np.linalg.norm(d[:, None, :] - d[None, :, :], axis=-1))
    system[:k, k:] = p
    system[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = t
    try:
        solution = linalg.solve(system, rhs)
    except linalg.LinAlgError as e:
        raise DegenerateConfiguration(f"singular TPS system: {e}") from e
    if not np.all(np.isfinite(solution)):
        raise DegenerateConfiguration("singular TPS system (non-finite solution)")
    return ThinPlateSpline(centers=d, weights=solution[:k], affine=solution[k:])


def tps_warp(image, control_src, control_dst):
    """
    Warp so that content at control_src moves to control_dst: the output pixel at
    control_dst[k] samples the input at control_src[k]. Bilinear, border replicated.
    """
    src = np.asarray(control_src, dtype=np.float64)
    dst = np.asarray(control_dst, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if src.shape == dst.shape and np.array_equal(src, dst):
        fit_tps(dst, src)  # still reject degenerate control sets
        return image.copy()
    spline = fit_tps(dst, src)
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sample = spline(np.column_stack([xs.ravel(), ys.ravel()]))
    coords = [sample[:, 1].reshape(h, w), sample[:, 0].reshape(h, w)]
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])],
        axis=-1,
    )


def grid_points(size, grid):
    ticks = np.linspace(0.0, size - 1.0, grid)
    xs, ys = np.meshgrid(ticks, ticks)
    return np.column_stack([xs.ravel(), ys.ravel()])


# ====== AUGMENTATION POLICY ======

@dataclass(frozen=True)
class AugmentationPolicy:
    tps_grid: int = 3
    tps_scale: float = 2.0          # max control point displacement, px
    crop_scale: tuple = (0.8, 1.0)  # kept area fraction
    flip_prob: float = 0.5
    rotation_deg: float = 10.0
    translation: float = 3.0
    scale: tuple = (0.9, 1.1)

    def __post_init__(self):
        if self.tps_grid < 2:
            raise DegenerateConfiguration("tps_grid must be >= 2")
        if not 0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise DegenerateConfiguration(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DegenerateConfiguration("flip_prob must lie in [0,1]")

    @classmethod
    def from_config(cls, section):
        return cls(
            tps_grid=section["tps_grid"],
            tps_scale=section["tps_scale"],
            crop_scale=tuple(section["crop_scale"]),
            flip_prob=section["flip_prob"],
            rotation_deg=section["rotation_deg"],
            translation=section["translation"],
            scale=tuple(section["scale"]),
        )

    @classmethod
    def zero(cls):
        return cls(tps_scale=0.0, crop_scale=(1.0, 1.0), flip_prob=0.0, rotation_deg=0.0,
                   translation=0.0, scale=(1.0, 1.0))

    def structure_only(self):
        """TPS + affine, no crop or flip: the reference augmentation of stage 2."""
        return replace(self, crop_scale=(1.0, 1.0), flip_prob=0.0)


def augment(image, policy, rng):
    """One random draw of the policy applied to an HxWxC image in [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    center = ((w - 1) / 2.0, (h - 1) / 2.0)

    # every draw is made whatever the policy strength, so seeds stay aligned across policies
    area = rng.uniform(*policy.crop_scale)
    side = np.sqrt(area)
    origin = (rng.uniform(0.0, (1.0 - side) * w), rng.uniform(0.0, (1.0 - side) * h))
    flip = rng.random() < policy.flip_prob
    rotation = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
    shift = rng.uniform(-policy.translation, policy.translation, 2)
    zoom = rng.uniform(*policy.scale)
    displacement = rng.uniform(-policy.tps_scale, policy.tps_scale, (policy.tps_grid ** 2, 2))

    transform = AffineTransform.identity()
    if side < 1.0:
        # crop window [origin, origin + side*size] stretched back to the full frame
        crop = np.array([[1.0 / side, 0.0, -origin[0] / side], [0.0, 1.0 / side, -origin[1] / side]])
        transform = AffineTransform(crop).compose(transform)
    if flip:
        transform = AffineTransform(np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0]])).compose(transform)
    transform = AffineTransform.from_params(rotation, zoom, shift, center).compose(transform)

    out = image
    if not np.array_equal(transform.matrix, AffineTransform.identity().matrix):
        out = warp_image(out, transform)
    if policy.tps_scale > 0.0:
        controls = grid_points(w, policy.tps_grid)
        out = tps_warp(out, controls, controls + displacement)
    return np.clip(out, 0.0, 1.0)


def two_views(image, policy, seed):
    """Two independent augmentations of the same image, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return augment(image, policy, rng), augment(image, policy, rng)


def structure_augment(image, policy, seed):
    return augment(image, policy.structure_only(), np.random.default_rng(seed))
