"""Arbitrary-size inference, attribute metrics and the evaluation studies."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.ndimage import binary_erosion

from .augment import Affine2D, AttributeKind, warp_attribute, warp_image
from .photometry import LUMA
from .tensor import Tensor, sigmoid, standardize
from .trainer import Checkpoint
from .unet import UNetModel, receptive_field_radius

METRIC_NAMES = ("cosine", "iou", "mse", "psnr", "ssim", "l1")
PSNR_CAP = 100.0
EQUIVARIANCE_EROSION = 3
NOISE_VARIANCE_255 = 255.0


# --- inference -------------------------------------------------------------------


@dataclass(frozen=True)
class TilePlan:
    """Core tile size and per-side context margin, both in pixels.

    ``overlap=None`` picks the smallest multiple of 2**depth covering the
    receptive-field radius.
    """

    tile: int = 256
    overlap: Optional[int] = None
    padding: str = "reflect"

    def resolve(self, model: UNetModel) -> tuple[int, int]:
        m = model.config.multiple
        radius = receptive_field_radius(model.config)
        overlap = self.overlap if self.overlap is not None else m * math.ceil(radius / m)
        if self.tile <= 0 or self.tile % m:
            raise ValueError(f"tile {self.tile} must be a positive multiple of {m}")
        if overlap < radius:
            raise ValueError(f"overlap {overlap} is below the receptive-field radius {radius}")
        if overlap % m:
            raise ValueError(f"overlap {overlap} must be a multiple of {m} to keep tiles aligned")
        return self.tile, overlap


def _pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    h, w = x.shape[1:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="symmetric")


def predict_raw(model: UNetModel, x: np.ndarray, plan: Optional[TilePlan] = None, workers: int = 1) -> np.ndarray:
    """Network output for an already standardized (3, h, w) image, same size.

    With a plan, tiles are predicted independently and only their cores are
    kept. Images no larger than one tile take the whole-image path.
    """
    h, w = x.shape[1:]
    m = model.config.multiple
    canvas = _pad_to_multiple(x, m)
    H, W = canvas.shape[1:]
    if plan is None or (H <= plan.tile and W <= plan.tile):
        return model.predict(canvas[None])[0, :, :h, :w]
    tile, overlap = plan.resolve(model)
    ext = np.pad(canvas, ((0, 0), (overlap, overlap), (overlap, overlap)), mode="reflect")
    out = np.empty((model.config.out_channels, H, W), dtype=np.float32)
    jobs = [(y0, x0) for y0 in range(0, H, tile) for x0 in range(0, W, tile)]

    def run(job):
        y0, x0 = job
        th, tw = min(tile, H - y0), min(tile, W - x0)
        window = ext[:, y0:y0 + th + 2 * overlap, x0:x0 + tw + 2 * overlap]
        pred = model.predict(window[None])[0]
        return y0, x0, pred[:, overlap:overlap + th, overlap:overlap + tw]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for y0, x0, core in results:
        out[:, y0:y0 + core.shape[1], x0:x0 + core.shape[2]] = core
    return out[:, :h, :w]


def decode(raw: np.ndarray, kind: AttributeKind) -> np.ndarray:
    if kind.name == "normals":
        norm = np.linalg.norm(raw, axis=0, keepdims=True)
        flat = np.zeros_like(raw)
        flat[2] = 1.0
        return np.where(norm > 1e-8, raw / np.maximum(norm, 1e-8), flat).astype(np.float32)
    if kind.name == "segmentation":
        return sigmoid(raw).astype(np.float32)
    return raw.astype(np.float32)


def infer(checkpoint: Checkpoint, guidance: np.ndarray, plan: Optional[TilePlan] = None, workers: int = 1) -> np.ndarray:
    """Transfer the trained attribute onto a (3, h, w) guidance image in [0, 1]."""
    if guidance.ndim != 3 or guidance.shape[0] != 3:
        raise ValueError(f"guidance must be a (3, h, w) colour image, got {guidance.shape}")
    x, _, _ = standardize(Tensor(guidance[None]))
    raw = predict_raw(checkpoint.model, x.data[0], plan, workers)
    return decode(raw, checkpoint.kind)


# --- metrics ---------------------------------------------------------------------


def _mask_or_all(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != map shape {shape}")
    return mask


def metric_cosine(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean of 1 - p.g over masked pixels, for (3, h, w) normal fields.

    Evaluated as |p - g|^2 / 2 on renormalized vectors, which is the same
    quantity and exactly zero for identical inputs.
    """
    mask = _mask_or_all(mask, pred.shape[1:])
    if not mask.any():
        raise ValueError("cosine metric over an empty mask")
    p = pred.astype(np.float64)
    g = gt.astype(np.float64)
    p = p / np.linalg.norm(p, axis=0, keepdims=True)
    g = g / np.linalg.norm(g, axis=0, keepdims=True)
    d = 0.5 * np.sum((p - g) ** 2, axis=0)
    return float(d[mask].mean())


def metric_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5, mask: Optional[np.ndarray] = None) -> float:
    a = np.asarray(pred) >= threshold
    b = np.asarray(gt) >= threshold
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        a, b = a & m, b & m
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view
    rows = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(rows, k.size, axis=1) @ k


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over channels; 11x11 Gaussian window (sigma 1.5), valid region."""
    k = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    p = pred.astype(np.float64)
    g = gt.astype(np.float64)
    if p.ndim == 2:
        p, g = p[None], g[None]
    if min(p.shape[1:]) < k.size:
        raise ValueError(f"SSIM needs images of at least {k.size}x{k.size}")
    vals = []
    for a, b in zip(p, g):
        mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
        saa = _filter_valid(a * a, k) - mu_a ** 2
        sbb = _filter_valid(b * b, k) - mu_b ** 2
        sab = _filter_valid(a * b, k) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def psnr_from_mse(mse: float, data_range: float = 1.0) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse)))


def metric_image(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    mse = float(np.mean(diff ** 2))
    return {"mse": mse, "psnr": psnr_from_mse(mse), "ssim": ssim(pred, gt), "l1": float(np.mean(np.abs(diff)))}


def attribute_distance(pred: np.ndarray, gt: np.ndarray, kind: AttributeKind, mask: Optional[np.ndarray] = None) -> tuple[str, float]:
    """The kind's headline error: cosine distance, 1 - IoU, or mean l1."""
    if kind.name == "normals":
        return "cosine", metric_cosine(pred, gt, mask)
    if kind.name == "segmentation":
        return "iou", 1.0 - metric_iou(pred, gt, mask=mask)
    m = _mask_or_all(mask, pred.shape[1:])
    if not m.any():
        raise ValueError("l1 metric over an empty mask")
    return "l1", float(np.abs(pred.astype(np.float64) - gt)[:, m].mean())


# --- equivariance --------------------------------------------------------------

Predictor = Callable[[np.ndarray], np.ndarray]


def _as_predictor(model: Union[Checkpoint, Predictor], plan: Optional[TilePlan]) -> Predictor:
    if isinstance(model, Checkpoint):
        return lambda g: infer(model, g, plan)
    return model


def equivariance_error(model: Union[Checkpoint, Predictor], guidance: np.ndarray, transform: Affine2D,
                       kind: AttributeKind, plan: Optional[TilePlan] = None) -> float:
    """d(M(T(X)), T(M(X))) over pixels valid under both warps, eroded by 3 px.

    ``model`` is a checkpoint or any callable mapping a guidance image to a
    decoded attribute map.
    """
    predict = _as_predictor(model, plan)
    warped_in, valid_in = warp_image(guidance, transform, "color")
    a = predict(warped_in)
    b, valid_out = warp_attribute(predict(guidance), transform, kind)
    valid = valid_in & valid_out
    if EQUIVARIANCE_EROSION:
        valid = binary_erosion(valid, iterations=EQUIVARIANCE_EROSION, border_value=0)
    if not valid.any():
        raise ValueError("transform leaves no valid pixels to compare")
    return attribute_distance(a, b, kind, valid)[1]


# --- degradations ------------------------------------------------------------------


def degrade(guidance: np.ndarray, op: str, value: float, rng: Optional[np.random.Generator] = None,
            clip: bool = True) -> np.ndarray:
    """saturation(f) / contrast(f) blends, or gaussian_noise(variance on 0-255 scale)."""
    x = guidance.astype(np.float64)
    if op == "saturation":
        luma = np.tensordot(LUMA, x, axes=1)[None]
        out = luma + value * (x - luma)
    elif op == "contrast":
        mean = x.mean()
        out = mean + value * (x - mean)
    elif op == "gaussian_noise":
        if value < 0:
            raise ValueError("noise variance must be >= 0")
        if value == 0:
            out = x
        else:
            if rng is None:
                raise ValueError("gaussian_noise needs an rng")
            out = x + rng.normal(0.0, np.sqrt(value) / 255.0, size=x.shape)
    else:
        raise ValueError(f"unknown degradation {op!r}")
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


DEGRADATIONS = (
    [("saturation", f) for f in (0.0, 0.5, 1.5, 2.0)]
    + [("contrast", f) for f in (0.0, 0.5, 1.5, 2.0)]
    + [("gaussian_noise", NOISE_VARIANCE_255)]
)


def degradation_descriptor(op: str, value: float) -> str:
    if op == "gaussian_noise":
        return f"gaussian_noise_{value:g}"
    return f"{op}_{value:g}"


# --- reports -------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, guidance: str, descriptor: str, metric: str, value: float) -> None:
        if metric not in METRIC_NAMES:
            raise ValueError(f"unknown metric {metric!r}")
        if not np.isfinite(value):
            raise ValueError(f"non-finite {metric} for {guidance}/{descriptor}")
        self.rows.append((guidance, descriptor, metric, float(value)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["guidance", "descriptor", "metric", "value"])
            for g, d, m, v in self.rows:
                w.writerow([g, d, m, repr(v)])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="", encoding="utf-8") as f:
            r = csv.DictReader(f)
            return cls([(row["guidance"], row["descriptor"], row["metric"], float(row["value"])) for row in r])

    def value(self, descriptor: str, metric: Optional[str] = None) -> float:
        for _, d, m, v in self.rows:
            if d == descriptor and (metric is None or m == metric):
                return v
        raise KeyError(descriptor)


EQUIVARIANCE_SWEEP = (
    [("rotation", a) for a in (-90, -45, -15, 15, 45, 90)]
    + [("shear", s) for s in (-45, -15, 15, 45)]
    + [("scale", s) for s in (0.5, 0.75, 1.5, 2.0)]
)


def _sweep_transform(axis: str, value: float) -> Affine2D:
    if axis == "rotation":
        return Affine2D.from_params(angle_deg=value)
    if axis == "shear":
        return Affine2D.from_params(shear_deg=value)
    return Affine2D.from_params(scale=value)


def _reported(kind: AttributeKind, dist: float) -> tuple[str, float]:
    """Report rows carry IoU itself for masks and the distance otherwise."""
    if kind.name == "segmentation":
        return "iou", 1.0 - dist
    return ("cosine" if kind.name == "normals" else "l1"), dist


def study_metrics(ckpt: Checkpoint, guidance: np.ndarray, gt: np.ndarray, gid: str,
                  plan: Optional[TilePlan] = None, report: Optional[EvalReport] = None) -> EvalReport:
    report = report or EvalReport()
    pred = infer(ckpt, guidance, plan)
    report.add(gid, "prediction", *_reported(ckpt.kind, attribute_distance(pred, gt, ckpt.kind)[1]))
    if ckpt.kind.name == "normals":
        # pixel metrics on the [0, 1] encoding
        p, g = 0.5 * pred + 0.5, 0.5 * gt + 0.5
    else:
        p, g = np.clip(pred, 0, 1), np.clip(gt, 0, 1)
    for k, v in metric_image(p, g).items():
        report.add(gid, "prediction", k, v)
    return report


def study_equivariance(ckpt: Checkpoint, guidance: np.ndarray, gid: str, plan: Optional[TilePlan] = None,
                       report: Optional[EvalReport] = None) -> EvalReport:
    report = report or EvalReport()
    base = infer(ckpt, guidance, plan)

    def predict(g):
        return base if g is guidance else infer(ckpt, g, plan)

    transforms = [("identity", Affine2D.identity())] + [(f"{axis}_{v:g}", _sweep_transform(axis, v)) for axis, v in EQUIVARIANCE_SWEEP]
    for descriptor, transform in transforms:
        err = equivariance_error(predict, guidance, transform, ckpt.kind)
        report.add(gid, descriptor, *_reported(ckpt.kind, err))
    return report


def study_lights(ckpts: list[Checkpoint], guidance: np.ndarray, gt: np.ndarray, gid: str,
                 plan: Optional[TilePlan] = None, report: Optional[EvalReport] = None) -> EvalReport:
    report = report or EvalReport()
    for ckpt in sorted(ckpts, key=lambda c: c.stats.get("n_directional", 0)):
        _, dist = attribute_distance(infer(ckpt, guidance, plan), gt, ckpt.kind)
        report.add(gid, f"k={ckpt.stats.get('n_directional', 0)}", *_reported(ckpt.kind, dist))
    return report


def study_degrade(ckpt: Checkpoint, guidance: np.ndarray, gid: str, seed: int = 0,
                  plan: Optional[TilePlan] = None, report: Optional[EvalReport] = None) -> EvalReport:
    """Distance between predictions on clean and degraded guidance."""
    from .photometry import substream
    report = report or EvalReport()
    rng = substream(seed, "degrade")
    clean = infer(ckpt, guidance, plan)
    for op, value in DEGRADATIONS:
        pred = infer(ckpt, degrade(guidance, op, value, rng), plan)
        _, dist = attribute_distance(pred, clean, ckpt.kind)
        report.add(gid, degradation_descriptor(op, value), *_reported(ckpt.kind, dist))
    return report
