"""Patch-based training of one network per material and attribute."""
from __future__ import annotations

import csv
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np

from .augment import AttributeKind, AugmentPolicy, NoValidCropError, apply_policy
from .photometry import PhotometricStack
from .tensor import Adam, Tensor, bce_with_logits_loss, l1_loss, standardize
from .unet import UNetConfig, UNetModel, model_from_arrays, read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

MAX_CROP_ATTEMPTS = 200
_AUGMENT_STREAM = 0xA06


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 0.002
    crop: int = 128
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.policy.crop != self.crop:
            object.__setattr__(self, "policy", replace(self.policy, crop=self.crop))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["policy"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        pol = {k: tuple(v) if isinstance(v, list) else v for k, v in d["policy"].items()}
        return cls(**{**d, "policy": AugmentPolicy(**pol)})


@dataclass
class AttributeMap:
    """Aligned (D, h, w) attribute in training range.

    normals in [-1, 1], segmentation masks in {0, 1}, colours in [0, 1].
    """

    data: np.ndarray
    kind: AttributeKind

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != self.kind.dims:
            raise ValueError(f"{self.kind.name} attribute must be ({self.kind.dims}, h, w), got {self.data.shape}")


def loss_for(kind: AttributeKind) -> Callable[[Tensor, Tensor], Tensor]:
    return bce_with_logits_loss if kind.name == "segmentation" else l1_loss


def default_unet_config(kind: AttributeKind, base_channels: int = 16, depth: int = 4) -> UNetConfig:
    return UNetConfig(in_channels=3, out_channels=kind.dims, base_channels=base_channels, depth=depth,
                      head="logits" if kind.name == "segmentation" else "linear")


@dataclass
class Checkpoint:
    model: UNetModel
    kind: AttributeKind
    train_config: TrainConfig
    stats: dict = field(default_factory=dict)
    loss_curve: list = field(default_factory=list)
    variant: str = ""
    wall_clock: float = field(default=0.0, compare=False)

    def save(self, path) -> None:
        meta = {
            "kind": {"name": self.kind.name, "dims": self.kind.dims},
            "train": self.train_config.to_dict(),
            "stats": self.stats,
            "loss_curve": [float(v) for v in self.loss_curve],
            "variant": self.variant,
        }
        write_checkpoint(path, self.model.config, {k: t.data for k, t in self.model.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        cfg, arrays, meta = read_checkpoint(path)
        return cls(
            model=model_from_arrays(cfg, arrays),
            kind=AttributeKind(meta["kind"]["name"], meta["kind"]["dims"]),
            train_config=TrainConfig.from_dict(meta["train"]),
            stats=meta.get("stats", {}),
            loss_curve=list(meta.get("loss_curve", [])),
            variant=meta.get("variant", ""),
        )


def make_variant(stack: PhotometricStack, variant: str) -> PhotometricStack:
    """Filter a stack to one of the illumination variants.

    ``diffuseNet`` keeps diffuse images, ``photometricNet`` directional ones,
    ``diphotoNet`` everything, ``reduced(k)`` the first k directional lights
    (rigs list near-zenith lights first).
    """
    kinds = [l.kind for l in stack.rig]
    directional = [i for i, k in enumerate(kinds) if k == "directional"]
    diffuse = [i for i, k in enumerate(kinds) if k == "diffuse"]
    m = re.fullmatch(r"reduced[(:]?(\d+)\)?", variant)
    if variant == "diffuseNet":
        picked = diffuse
    elif variant == "photometricNet":
        picked = directional
    elif variant == "diphotoNet":
        picked = list(range(len(stack)))
    elif m:
        k = int(m.group(1))
        if k < 1:
            raise ValueError("reduced(k) needs k >= 1")
        if k > len(directional):
            raise ValueError(f"reduced({k}) needs {k} directional lights, stack has {len(directional)}")
        picked = directional[:k]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if not picked:
        raise ValueError(f"variant {variant} needs lights the stack does not contain")
    return stack.select(picked)


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _AUGMENT_STREAM, int(iteration)]))


def sample_batch(stack: PhotometricStack, attribute: AttributeMap, config: TrainConfig,
                 iteration: int) -> tuple[np.ndarray, np.ndarray]:
    """One batch of independently drawn (light, transform, crop) patches.

    Inputs come back standardized with their own statistics. Transforms that
    leave no valid crop window are redrawn.
    """
    rng = batch_rng(config.seed, iteration)
    xs, ys = [], []
    for _ in range(config.batch_size):
        image = stack.images[int(rng.integers(len(stack)))]
        for _attempt in range(MAX_CROP_ATTEMPTS):
            try:
                patch_in, patch_out = apply_policy(image, attribute.data, attribute.kind, config.policy, rng)
                break
            except NoValidCropError:
                continue
        else:
            raise NoValidCropError(f"no valid {config.crop}px crop after {MAX_CROP_ATTEMPTS} transforms; use a smaller crop")
        xs.append(patch_in)
        ys.append(patch_out)
    x, _, _ = standardize(Tensor(np.stack(xs)))
    return x.data, np.stack(ys).astype(np.float32)


def _batches(stack, attribute, config, workers: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if workers <= 1:
        for it in range(config.iterations):
            yield sample_batch(stack, attribute, config, it)
        return
    # batches depend only on (seed, iteration), so prefetching keeps results identical
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = [pool.submit(sample_batch, stack, attribute, config, it) for it in range(min(2 * workers, config.iterations))]
        nxt = len(pending)
        for _ in range(config.iterations):
            batch = pending.pop(0).result()
            if nxt < config.iterations:
                pending.append(pool.submit(sample_batch, stack, attribute, config, nxt))
                nxt += 1
            yield batch


def stack_statistics(stack: PhotometricStack, attribute: AttributeMap) -> dict:
    imgs = np.stack(stack.images).astype(np.float64)
    return {
        "n_images": len(stack),
        "n_directional": sum(l.kind == "directional" for l in stack.rig),
        "n_diffuse": sum(l.kind == "diffuse" for l in stack.rig),
        "size": list(stack.size),
        "image_mean": [float(v) for v in imgs.mean(axis=(0, 2, 3))],
        "image_std": [float(v) for v in imgs.std(axis=(0, 2, 3))],
        "attribute_mean": [float(v) for v in attribute.data.astype(np.float64).mean(axis=(1, 2))],
    }


def train(stack: PhotometricStack, attribute: AttributeMap, config: TrainConfig,
          unet_config: Optional[UNetConfig] = None, variant: str = "", workers: int = 1,
          progress: Optional[Callable[[int, float], None]] = None) -> Checkpoint:
    """Train a fresh U-Net on ``stack`` -> ``attribute`` and return a checkpoint.

    Raises FloatingPointError naming the iteration if the loss goes non-finite.
    """
    if stack.size != attribute.data.shape[1:]:
        raise ValueError(f"stack size {stack.size} does not match attribute size {attribute.data.shape[1:]}")
    if unet_config is None:
        unet_config = default_unet_config(attribute.kind)
    if unet_config.out_channels != attribute.kind.dims:
        raise ValueError("network output channels must equal the attribute dimension")
    if config.crop % unet_config.multiple:
        raise ValueError(f"crop {config.crop} must be a multiple of {unet_config.multiple}")

    start = time.perf_counter()
    model = UNetModel.init(unet_config, config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    criterion = loss_for(attribute.kind)
    curve: list[float] = []
    for it, (x, y) in enumerate(_batches(stack, attribute, config, workers)):
        opt.zero_grad()
        try:
            loss = criterion(model(Tensor(x)), Tensor(y))
            loss.backward()
            opt.step()
        except FloatingPointError as exc:
            raise FloatingPointError(f"training diverged at iteration {it}: {exc}") from exc
        curve.append(loss.item())
        if progress is not None:
            progress(it, curve[-1])
    elapsed = time.perf_counter() - start
    logger.info("trained %d iterations in %.1fs (final loss %.4f)", config.iterations, elapsed, curve[-1])
    for p in model.parameters():
        p.grad = None
    return Checkpoint(model, attribute.kind, config, stack_statistics(stack, attribute), curve, variant, elapsed)


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])
