"""Procedural materials, light rigs, Lambertian rendering and photometric stereo.

Image arrays are (channels, height, width) float32. Vectors live in the image
frame: +x along columns, +y along rows, +z towards the camera.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

SHADOW_THRESHOLD = 0.02
LUMA = np.array([0.2126, 0.7152, 0.0722])
MAX_ZENITH_DEG = 70.0
NEAR_ZENITH_DEG = 10.0
MAX_LIGHT_CONDITION = 1e4
DEFAULT_LIGHTS = 27

# plastic-number (R2) low-discrepancy steps
_R2_G = 1.32471795724474602596
_R2_STEP = np.array([1.0 / _R2_G, 1.0 / _R2_G ** 2])


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named randomness source under one seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class Light:
    direction: tuple[float, float, float]
    kind: str = "directional"
    intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in ("directional", "diffuse"):
            raise ValueError(f"unknown light kind {self.kind!r}")
        if self.kind == "directional":
            d = np.asarray(self.direction, dtype=float)
            if abs(np.linalg.norm(d) - 1.0) > 1e-6 or d[2] <= 0:
                raise ValueError(f"directional light must be a unit vector with z > 0, got {self.direction}")

    @property
    def zenith_deg(self) -> float:
        return float(np.degrees(np.arccos(np.clip(self.direction[2], -1.0, 1.0))))

    @classmethod
    def from_angles(cls, zenith_deg: float, azimuth_deg: float, intensity: float = 1.0) -> "Light":
        t, p = np.radians(zenith_deg), np.radians(azimuth_deg)
        d = (np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t))
        return cls(tuple(float(v) for v in d), "directional", intensity)

    @classmethod
    def diffuse(cls, intensity: float = 1.0) -> "Light":
        return cls((0.0, 0.0, 1.0), "diffuse", intensity)


@dataclass
class LightRig:
    lights: list[Light]

    def __len__(self) -> int:
        return len(self.lights)

    def __iter__(self):
        return iter(self.lights)

    def directions(self) -> np.ndarray:
        return np.array([l.direction for l in self.lights], dtype=float).reshape(-1, 3)


def sample_light_rig(k: int, seed: int) -> LightRig:
    """Structured hemisphere sampling of ``k`` directional lights.

    Light 1 sits at the zenith; lights 2 and 3 sit at 10 degrees zenith with
    azimuths 120 degrees apart. The rest cover the 70-degree cap with equal
    area density using a randomly shifted R2 sequence, so any prefix of the
    rig is spread over the cap.
    """
    if k < 1:
        raise ValueError(f"need at least one light, got {k}")
    rng = substream(seed, "rig")
    phi0 = rng.uniform(0.0, 360.0)
    offset = rng.uniform(0.0, 1.0, size=2)
    lights = [Light((0.0, 0.0, 1.0))]
    for i in range(1, min(k, 3)):
        lights.append(Light.from_angles(NEAR_ZENITH_DEG, phi0 + 120.0 * (i - 1)))
    cos_min = np.cos(np.radians(MAX_ZENITH_DEG))
    for i in range(k - len(lights)):
        u, v = np.mod(offset + (i + 1) * _R2_STEP, 1.0)
        cos_t = 1.0 - u * (1.0 - cos_min)
        sin_t = np.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        p = 2.0 * np.pi * v
        d = np.array([sin_t * np.cos(p), sin_t * np.sin(p), cos_t])
        d /= np.linalg.norm(d)
        lights.append(Light(tuple(float(x) for x in d)))
    return LightRig(lights)


@dataclass
class MaterialSample:
    albedo: np.ndarray
    normals: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.albedo.ndim != 3 or self.albedo.shape[0] != 3:
            raise ValueError(f"albedo must be (3, h, w), got {self.albedo.shape}")
        if self.normals.shape != self.albedo.shape:
            raise ValueError(f"normals shape {self.normals.shape} != albedo shape {self.albedo.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.albedo.shape[1], self.albedo.shape[2]


@dataclass
class PhotometricStack:
    images: list[np.ndarray]
    rig: LightRig

    def __post_init__(self):
        if not self.images:
            raise ValueError("a photometric stack needs at least one image")
        if len(self.images) != len(self.rig):
            raise ValueError(f"{len(self.images)} images but {len(self.rig)} lights")
        shape = self.images[0].shape
        for im in self.images:
            if im.shape != shape or im.ndim != 3:
                raise ValueError(f"stack images must share one (c, h, w) shape, got {im.shape} and {shape}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> tuple[int, int]:
        return self.images[0].shape[1], self.images[0].shape[2]

    def select(self, indices) -> "PhotometricStack":
        indices = list(indices)
        return PhotometricStack([self.images[i] for i in indices], LightRig([self.rig.lights[i] for i in indices]))


# --- procedural materials --------------------------------------------------

WOVEN_PERIOD = 16
WOVEN_AMPLITUDE = 3.0
DENIM_WARP = np.array([0.20, 0.30, 0.62])
DENIM_WEFT = np.array([0.86, 0.84, 0.78])
STRIPE_COLOR = np.array([0.78, 0.24, 0.16])


def normals_from_height(height: np.ndarray) -> np.ndarray:
    """Unit normals from a height field carrying a one-pixel margin.

    ``height`` has shape (h + 2, w + 2); central differences give (3, h, w).
    """
    hx = 0.5 * (height[1:-1, 2:] - height[1:-1, :-2])
    hy = 0.5 * (height[2:, 1:-1] - height[:-2, 1:-1])
    n = np.stack([-hx, -hy, np.ones_like(hx)])
    return (n / np.linalg.norm(n, axis=0, keepdims=True)).astype(np.float32)


def _yarn_factor(seed: int, axis: str, idx: np.ndarray) -> np.ndarray:
    """Per-yarn brightness jitter, a pure function of (seed, yarn index)."""
    uniq = np.unique(idx)
    table = {int(i): 1.0 + 0.06 * substream(seed, f"yarn-{axis}-{int(i)}").standard_normal() for i in uniq}
    return np.vectorize(table.__getitem__, otypes=[float])(idx)


def _woven_fields(h: int, w: int, seed: int, margin: int = 1):
    rng = substream(seed, "material")
    ox, oy = (int(v) for v in rng.integers(0, WOVEN_PERIOD, size=2))
    ys = np.arange(-margin, h + margin, dtype=float)[:, None] + oy
    xs = np.arange(-margin, w + margin, dtype=float)[None, :] + ox
    u = 2 * np.pi * xs / WOVEN_PERIOD
    v = 2 * np.pi * ys / WOVEN_PERIOD
    s = np.sin(u) * np.sin(v)  # > 0 where the warp yarn lies on top
    warp_top = 0.5 * (1.0 + np.tanh(s / 0.25))
    height = WOVEN_AMPLITUDE * (0.5 * s + 0.25 * (warp_top * (1 - np.cos(2 * u)) + (1 - warp_top) * (1 - np.cos(2 * v))))
    sl = (slice(margin, margin + h), slice(margin, margin + w))
    warp_idx = np.floor(xs[:, margin:margin + w] / (WOVEN_PERIOD / 2)).astype(int)
    weft_idx = np.floor(ys[margin:margin + h] / (WOVEN_PERIOD / 2)).astype(int)
    return height, warp_top[sl], np.broadcast_to(warp_idx, (h, w)), np.broadcast_to(weft_idx, (h, w))


def _stripe_runs(seed: int, n_yarns: int) -> np.ndarray:
    """0/1 label per warp yarn index, alternating runs of 2-4 yarns."""
    rng = substream(seed, "stripes")
    labels = []
    current = int(rng.integers(0, 2))
    while len(labels) < n_yarns:
        labels += [current] * int(rng.integers(2, 5))
        current = 1 - current
    return np.array(labels[:n_yarns])


def generate_procedural_material(kind: str, h: int, w: int, seed: int) -> MaterialSample:
    """Deterministic synthetic material.

    woven: plain-weave height field, indigo warp over white weft.
    bumps: smoothed random height field with a blotchy two-colour albedo.
    stripes: woven relief with whole warp yarns dyed in alternating runs.
    """
    sample, _ = _generate(kind, h, w, seed)
    return sample


def stripes_mask(h: int, w: int, seed: int) -> np.ndarray:
    """Binary (1, h, w) mask of the dyed yarns of the ``stripes`` material."""
    return _generate("stripes", h, w, seed)[1]


def _generate(kind: str, h: int, w: int, seed: int):
    if h < 32 or w < 32:
        raise ValueError(f"material must be at least 32x32, got {h}x{w}")
    if kind in ("woven", "stripes"):
        height, warp_top, warp_idx, weft_idx = _woven_fields(h, w, seed)
        normals = normals_from_height(height)
        fw = _yarn_factor(seed, "warp", warp_idx)
        fv = _yarn_factor(seed, "weft", weft_idx)
        if kind == "woven":
            warp_col = DENIM_WARP[:, None, None] * fw
            albedo = warp_top * warp_col + (1 - warp_top) * DENIM_WEFT[:, None, None] * fv
            return MaterialSample(np.clip(albedo, 0, 1).astype(np.float32), normals), None
        base = warp_idx.min()
        labels = _stripe_runs(seed, int(warp_idx.max()) + 1 - min(base, 0))
        dyed = labels[warp_idx - min(base, 0)].astype(np.float32)
        colour = np.where(dyed[None] > 0, STRIPE_COLOR[:, None, None], DENIM_WEFT[:, None, None])
        albedo = colour * (0.5 * (fw + fv))
        return MaterialSample(np.clip(albedo, 0, 1).astype(np.float32), normals), dyed[None]
    if kind == "bumps":
        rng = substream(seed, "material")
        field = gaussian_filter(rng.standard_normal((h + 2, w + 2)), sigma=3.0, mode="wrap")
        field *= 3.0 / max(field.std(), 1e-12)
        normals = normals_from_height(field)
        blend = gaussian_filter(rng.standard_normal((h, w)), sigma=6.0, mode="wrap")
        blend = 0.5 * (1 + np.tanh(blend / max(blend.std(), 1e-12)))
        albedo = blend * np.array([0.70, 0.55, 0.35])[:, None, None] + (1 - blend) * np.array([0.35, 0.40, 0.45])[:, None, None]
        return MaterialSample(albedo.astype(np.float32), normals), None
    raise ValueError(f"unknown material kind {kind!r} (expected woven, bumps or stripes)")


def sphere_material(size: int = 64, albedo=(0.8, 0.8, 0.8), radius: Optional[float] = None) -> MaterialSample:
    """Hemisphere bulging out of a flat plane, centred in the image."""
    r = radius if radius is not None else 0.45 * size
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    x, y = (xx - c) / r, (yy - c) / r
    inside = x * x + y * y < 1.0
    z = np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))
    n = np.where(inside, np.stack([x, y, z]), np.array([0.0, 0.0, 1.0])[:, None, None])
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    alb = np.broadcast_to(np.asarray(albedo, float)[:, None, None], (3, size, size))
    return MaterialSample(alb.astype(np.float32).copy(), n.astype(np.float32))


# --- rendering ---------------------------------------------------------------


def render_lambertian(material: MaterialSample, light: Light, noise_std: float = 0.0,
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """albedo * max(0, n.d) * intensity (+ noise), clipped to [0, 1].

    Diffuse lights ignore the normals entirely.
    """
    if light.kind == "diffuse":
        img = material.albedo.astype(np.float64) * light.intensity
    else:
        d = np.asarray(light.direction, dtype=np.float64)
        shade = np.maximum(0.0, np.tensordot(d, material.normals.astype(np.float64), axes=1))
        img = material.albedo * shade[None] * light.intensity
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise_std > 0 needs an rng")
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_stack(material: MaterialSample, rig: LightRig, noise_std: float = 0.0, seed: int = 0) -> PhotometricStack:
    rng = substream(seed, "noise")
    return PhotometricStack([render_lambertian(material, l, noise_std, rng) for l in rig], rig)


# --- photometric stereo --------------------------------------------------------


def photometric_stereo(stack: PhotometricStack, shadow_threshold: float = SHADOW_THRESHOLD) -> MaterialSample:
    """Per-pixel least-squares normals and albedo from directional images.

    The normal solve uses luminance; samples darker than ``shadow_threshold``
    are dropped per pixel. Pixels left with fewer than three usable (and
    non-degenerate) samples get normal (0, 0, 1), zero albedo and
    ``valid = False``.
    """
    idx = [i for i, l in enumerate(stack.rig) if l.kind == "directional"]
    if len(idx) < 3:
        raise ValueError(f"photometric stereo needs >= 3 directional lights, got {len(idx)}")
    L = np.array([stack.rig.lights[i].direction for i in idx], dtype=np.float64)
    cond = np.linalg.cond(L)
    if not np.isfinite(cond) or cond > MAX_LIGHT_CONDITION:
        raise ValueError(f"light directions are (nearly) coplanar: condition number {cond:.3g}")
    intensity = np.array([stack.rig.lights[i].intensity for i in idx], dtype=np.float64)
    imgs = np.stack([stack.images[i].astype(np.float64) for i in idx])  # (k, 3, h, w)
    k, _, h, w = imgs.shape
    imgs = imgs / intensity[:, None, None, None]
    luma = np.tensordot(LUMA, imgs, axes=([0], [1]))  # (k, h, w)
    use = (luma * intensity[:, None, None] >= shadow_threshold).reshape(k, -1).T.astype(np.float64)  # (p, k)
    Y = luma.reshape(k, -1).T  # (p, k)

    A = np.einsum("pk,ki,kj->pij", use, L, L)
    b = np.einsum("pk,pk,ki->pi", use, Y, L)
    count = use.sum(axis=1)
    det = np.linalg.det(A)
    valid = (count >= 3) & (np.abs(det) > 1e-9)
    g = np.zeros((h * w, 3))
    if valid.any():
        g[valid] = np.linalg.solve(A[valid], b[valid][..., None])[..., 0]
    norm = np.linalg.norm(g, axis=1)
    valid &= norm > 1e-12
    n = np.zeros_like(g)
    n[:, 2] = 1.0
    n[valid] = g[valid] / norm[valid, None]

    shade = np.clip(n @ L.T, 0.0, None) * use  # (p, k)
    channels = imgs.reshape(k, 3, -1).transpose(2, 1, 0)  # (p, 3, k)
    denom = np.sum(shade * shade, axis=1)
    albedo = np.zeros((h * w, 3))
    ok = valid & (denom > 1e-12)
    albedo[ok] = np.einsum("pck,pk->pc", channels[ok], shade[ok]) / denom[ok, None]
    valid = ok
    n[~valid] = (0.0, 0.0, 1.0)
    return MaterialSample(
        np.clip(albedo.T.reshape(3, h, w), 0.0, None).astype(np.float32),
        n.T.reshape(3, h, w).astype(np.float32),
        valid.reshape(h, w),
    )


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel angle between two (3, h, w) normal fields, in degrees."""
    a = a / np.linalg.norm(a, axis=0, keepdims=True)
    b = b / np.linalg.norm(b, axis=0, keepdims=True)
    cross = np.linalg.norm(np.cross(a, b, axis=0), axis=0)
    return np.degrees(np.arctan2(cross, np.sum(a * b, axis=0)))
