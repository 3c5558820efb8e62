"""Joint augmentation of a photometric image and its attribute map.

Transforms act in centred pixel coordinates (origin at the image centre,
x along columns, y along rows). Warps inverse-map every output pixel into the
source, sample it with reflection at the borders, and report which output
pixels came from inside the source frame.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PERMUTATIONS = tuple(itertools.permutations(range(3)))
_FRAME_EPS = 1e-6


@dataclass(frozen=True)
class AttributeKind:
    name: str
    dims: int

    def __post_init__(self):
        if self.name not in ("normals", "segmentation", "color", "scalar"):
            raise ValueError(f"unknown attribute kind {self.name!r}")
        if self.name == "normals" and self.dims != 3:
            raise ValueError("normals attributes have exactly 3 channels")
        if self.name == "segmentation" and self.dims != 1:
            raise ValueError("segmentation attributes have exactly 1 channel")
        if self.dims < 1:
            raise ValueError("attribute needs at least one channel")

    @classmethod
    def named(cls, name: str, dims: Optional[int] = None) -> "AttributeKind":
        default = {"normals": 3, "segmentation": 1, "color": 3, "scalar": 1}
        if name not in default:
            raise ValueError(f"unknown attribute kind {name!r}")
        return cls(name, dims if dims is not None else default[name])


NORMALS = AttributeKind("normals", 3)
SEGMENTATION = AttributeKind("segmentation", 1)
COLOR = AttributeKind("color", 3)


@dataclass(frozen=True)
class AugmentPolicy:
    color_permute: bool = True
    rotation_deg: tuple[float, float] = (-90.0, 90.0)
    shear_deg: tuple[float, float] = (-45.0, 45.0)
    scale: tuple[float, float] = (0.5, 2.0)
    crop: int = 128

    def __post_init__(self):
        for name in ("rotation_deg", "shear_deg", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is empty: [{lo}, {hi}]")
        if self.scale[0] <= 0:
            raise ValueError("scale factors must be positive")
        if not (-90.0 < self.shear_deg[0] and self.shear_deg[1] < 90.0):
            raise ValueError("shear angles must lie strictly inside (-90, 90)")
        if self.crop < 8:
            raise ValueError(f"crop must be >= 8, got {self.crop}")

    @classmethod
    def identity(cls, crop: int = 128) -> "AugmentPolicy":
        return cls(False, (0.0, 0.0), (0.0, 0.0), (1.0, 1.0), crop)


@dataclass(frozen=True)
class Affine2D:
    """x' = A x + t in centred coordinates.

    ``angle``, ``shear`` and ``scale`` record the sampled parameters when the
    transform was built from them (None after composition).
    """

    linear: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    angle: Optional[float] = None
    shear: Optional[float] = None
    scale: Optional[float] = None

    def __post_init__(self):
        A = np.asarray(self.linear, dtype=float).reshape(2, 2)
        object.__setattr__(self, "linear", A)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(2))
        if abs(np.linalg.det(A)) < 1e-12:
            raise ValueError("affine transform is singular")

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(2), np.zeros(2), 0.0, 0.0, 1.0)

    @classmethod
    def from_params(cls, angle_deg: float = 0.0, shear_deg: float = 0.0, scale: float = 1.0) -> "Affine2D":
        """Rotate, then shear along x, then scale isotropically."""
        a = np.radians(angle_deg)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        sh = np.array([[1.0, np.tan(np.radians(shear_deg))], [0.0, 1.0]])
        return cls(scale * (sh @ rot), np.zeros(2), angle_deg, shear_deg, scale)

    @property
    def matrix(self) -> np.ndarray:
        """The 2x3 matrix [A | t]."""
        return np.hstack([self.linear, self.translation[:, None]])

    def compose(self, other: "Affine2D") -> "Affine2D":
        """``self`` after ``other``."""
        return Affine2D(self.linear @ other.linear, self.linear @ other.translation + self.translation)

    def inverse(self) -> "Affine2D":
        inv = np.linalg.inv(self.linear)
        return Affine2D(inv, -inv @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) @ self.linear.T + self.translation

    def vector_linear(self) -> np.ndarray:
        """Linear part with the isotropic scale divided out (acts on vectors)."""
        return self.linear / np.sqrt(abs(np.linalg.det(self.linear)))


def sample_transform(policy: AugmentPolicy, rng: np.random.Generator) -> Affine2D:
    angle = rng.uniform(*policy.rotation_deg)
    shear = rng.uniform(*policy.shear_deg)
    scale = rng.uniform(*policy.scale)
    return Affine2D.from_params(angle, shear, scale)


def permute_colors(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"colour permutation needs a (3, h, w) image, got {image.shape}")
    perm = PERMUTATIONS[int(rng.integers(len(PERMUTATIONS)))]
    return image[list(perm)]


# --- resampling ----------------------------------------------------------------


def _source_coords(transform: Affine2D, shape: tuple[int, int], rows: slice, cols: slice):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = np.arange(rows.start, rows.stop, dtype=float)
    c = np.arange(cols.start, cols.stop, dtype=float)
    px, py = np.meshgrid(c - cx, r - cy)
    inv = np.linalg.inv(transform.linear)
    qx = px - transform.translation[0]
    qy = py - transform.translation[1]
    sx = inv[0, 0] * qx + inv[0, 1] * qy + cx
    sy = inv[1, 0] * qx + inv[1, 1] * qy + cy
    valid = (sx >= -_FRAME_EPS) & (sx <= w - 1 + _FRAME_EPS) & (sy >= -_FRAME_EPS) & (sy <= h - 1 + _FRAME_EPS)
    return sx, sy, valid


def _reflect(coord: np.ndarray, size: int) -> np.ndarray:
    """Mirror continuous coordinates about the first/last pixel centres."""
    if size == 1:
        return np.zeros_like(coord)
    period = 2.0 * (size - 1)
    c = np.mod(coord, period)
    return np.where(c > size - 1, period - c, c)


def _resample(m: np.ndarray, sx: np.ndarray, sy: np.ndarray, nearest: bool) -> np.ndarray:
    _, h, w = m.shape
    sx = _reflect(sx, w)
    sy = _reflect(sy, h)
    if nearest:
        xi = np.clip(np.floor(sx + 0.5).astype(int), 0, w - 1)
        yi = np.clip(np.floor(sy + 0.5).astype(int), 0, h - 1)
        return m[:, yi, xi]
    x0 = np.clip(np.floor(sx).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(sy).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0).astype(m.dtype)
    fy = (sy - y0).astype(m.dtype)
    top = m[:, y0, x0] * (1 - fx) + m[:, y0, x1] * fx
    bot = m[:, y1, x0] * (1 - fx) + m[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _warp(m, transform, kind_name, rows, cols):
    sx, sy, valid = _source_coords(transform, m.shape[1:], rows, cols)
    out = _resample(m, sx, sy, nearest=(kind_name == "segmentation"))
    if kind_name == "normals":
        out = _rotate_vectors(out, transform)
    return out, valid


def warp_image(m: np.ndarray, transform: Affine2D, kind: AttributeKind | str = "color") -> tuple[np.ndarray, np.ndarray]:
    """Spatially warp a (c, h, w) map onto a canvas of the same size.

    Bilinear sampling, nearest for segmentation. Returns the warped map and a
    boolean (h, w) mask that is False where the sample came from the
    reflected border. Vector contents are not touched; see
    :func:`transform_normal_field`.
    """
    name = kind.name if isinstance(kind, AttributeKind) else kind
    h, w = m.shape[1:]
    sx, sy, valid = _source_coords(transform, (h, w), slice(0, h), slice(0, w))
    return _resample(m, sx, sy, nearest=(name == "segmentation")), valid


def _rotate_vectors(n: np.ndarray, transform: Affine2D) -> np.ndarray:
    # normals are covectors: apply the inverse-transpose of the scale-free part
    # the exact identity copies pixels, so there is nothing to renormalize
    if np.array_equal(transform.linear, np.eye(2)) and not transform.translation.any():
        return n
    B = np.linalg.inv(transform.vector_linear()).T.astype(n.dtype)
    x = B[0, 0] * n[0] + B[0, 1] * n[1]
    y = B[1, 0] * n[0] + B[1, 1] * n[1]
    out = np.stack([x, y, n[2]])
    norm = np.linalg.norm(out, axis=0, keepdims=True)
    flat = np.zeros_like(out)
    flat[2] = 1
    return np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), flat)


def transform_normal_field(normals: np.ndarray, transform: Affine2D) -> tuple[np.ndarray, np.ndarray]:
    """Warp a (3, h, w) unit-normal field and rotate/shear each vector."""
    warped, valid = warp_image(normals, transform, "normals")
    return _rotate_vectors(warped, transform), valid


def warp_attribute(m: np.ndarray, transform: Affine2D, kind: AttributeKind) -> tuple[np.ndarray, np.ndarray]:
    """Kind-aware warp: normals also get their vectors transformed."""
    if kind.name == "normals":
        return transform_normal_field(m, transform)
    return warp_image(m, transform, kind)


class NoValidCropError(ValueError):
    pass


def valid_crop_origins(valid: np.ndarray, crop: int) -> np.ndarray:
    """(row, col) of every crop x crop window lying fully inside ``valid``."""
    h, w = valid.shape
    if crop > h or crop > w:
        return np.zeros((0, 2), dtype=int)
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(valid, axis=0), axis=1)
    total = sat[crop:, crop:] - sat[:-crop, crop:] - sat[crop:, :-crop] + sat[:-crop, :-crop]
    return np.argwhere(total == crop * crop)


def apply_policy(image: np.ndarray, attribute: np.ndarray, kind: AttributeKind, policy: AugmentPolicy,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Colour-permute the image, warp both maps with one transform, crop both.

    The crop window is drawn uniformly among windows that contain no
    reflected border pixels; raises :class:`NoValidCropError` if there are none.
    """
    if image.shape[1:] != attribute.shape[1:]:
        raise ValueError(f"image {image.shape} and attribute {attribute.shape} are not aligned")
    if attribute.shape[0] != kind.dims:
        raise ValueError(f"attribute has {attribute.shape[0]} channels, kind {kind.name} expects {kind.dims}")
    if policy.color_permute:
        image = permute_colors(image, rng)
    transform = sample_transform(policy, rng)
    h, w = image.shape[1:]
    _, _, valid = _source_coords(transform, (h, w), slice(0, h), slice(0, w))
    origins = valid_crop_origins(valid, policy.crop)
    if len(origins) == 0:
        raise NoValidCropError(
            f"no {policy.crop}x{policy.crop} window fits inside the warped {h}x{w} image "
            f"(angle={transform.angle:.1f}, shear={transform.shear:.1f}, scale={transform.scale:.2f}); use a smaller crop"
        )
    r0, c0 = origins[int(rng.integers(len(origins)))]
    rows, cols = slice(r0, r0 + policy.crop), slice(c0, c0 + policy.crop)
    patch_in, _ = _warp(image, transform, "color", rows, cols)
    patch_out, _ = _warp(attribute, transform, kind.name, rows, cols)
    return patch_in, patch_out
