"""Synthetic transfer experiments shared by the acceptance suite and scripts/.

Trained checkpoints are cached on disk under a key made of the recipe and a
hash of the modules that influence training, so repeated evaluation runs do
not retrain. Set ``PHOTOTRANSFER_CACHE`` to move the cache.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import NORMALS, SEGMENTATION, Affine2D, AugmentPolicy
from .evaluate import (TilePlan, attribute_distance, degrade, equivariance_error, infer)
from .photometry import (Light, LightRig, generate_procedural_material, photometric_stereo, render_lambertian,
                         render_stack, sample_light_rig, stripes_mask, substream)
from .trainer import AttributeMap, Checkpoint, TrainConfig, default_unet_config, make_variant, train

logger = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
_TRAINING_MODULES = ("tensor.py", "unet.py", "photometry.py", "augment.py", "trainer.py")


@dataclass(frozen=True)
class TransferTask:
    """One material, its training stack and a held-out guidance image.

    The guidance is a different realization (``guidance_seed``) of the same
    material, larger, lit from a direction that is not in the rig.
    """

    material: str = "woven"
    attribute: str = "normals"
    size: int = 128
    lights: int = 27
    seed: int = 0
    guidance_size: int = 256
    guidance_seed: int = 1
    guidance_light: tuple = (35.0, 17.0)


@dataclass
class TaskData:
    task: TransferTask
    stack: object
    attribute: AttributeMap
    guidance: np.ndarray
    guidance_gt: np.ndarray


def build_task(task: TransferTask) -> TaskData:
    mat = generate_procedural_material(task.material, task.size, task.size, task.seed)
    rig = LightRig(sample_light_rig(task.lights, task.seed).lights + [Light.diffuse()])
    stack = render_stack(mat, rig, 0.0, task.seed)
    g = task.guidance_size
    big = generate_procedural_material(task.material, g, g, task.guidance_seed)
    guidance = render_lambertian(big, Light.from_angles(*task.guidance_light))
    if task.attribute == "normals":
        attr = AttributeMap(photometric_stereo(make_variant(stack, "photometricNet")).normals, NORMALS)
        gt = big.normals
    elif task.attribute == "segmentation":
        attr = AttributeMap(stripes_mask(task.size, task.size, task.seed), SEGMENTATION)
        gt = stripes_mask(g, g, task.guidance_seed)
    else:
        raise ValueError(f"unsupported attribute {task.attribute!r}")
    return TaskData(task, stack, attr, guidance, gt)


@dataclass(frozen=True)
class Recipe:
    """Everything that determines one trained checkpoint."""

    task: TransferTask = field(default_factory=TransferTask)
    variant: str = "photometricNet"
    policy: AugmentPolicy = field(default_factory=lambda: AugmentPolicy(crop=64))
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 0.002
    crop: int = 64
    base_channels: int = 8
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.iterations, self.batch_size, self.lr, self.crop, self.policy, self.seed)

    def key(self) -> str:
        blob = json.dumps({"recipe": asdict(self), "source": training_source_hash()}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:20]


def training_source_hash() -> str:
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _TRAINING_MODULES:
        h.update((here / name).read_bytes())
    return h.hexdigest()


def cache_dir() -> Path:
    return Path(os.environ.get("PHOTOTRANSFER_CACHE", Path.home() / ".cache" / "phototransfer"))


_TASKS: dict = {}


def task_data(task: TransferTask) -> TaskData:
    if task not in _TASKS:
        _TASKS[task] = build_task(task)
    return _TASKS[task]


def trained(recipe: Recipe, directory: Optional[Path] = None) -> tuple[Checkpoint, float]:
    """Checkpoint for ``recipe`` and its training wall-clock in seconds."""
    directory = Path(directory or cache_dir())
    path = directory / f"{recipe.key()}.pxfr"
    info = path.with_suffix(".json")
    if path.is_file() and info.is_file():
        return Checkpoint.load(path), json.loads(info.read_text())["wall_clock"]
    data = task_data(recipe.task)
    unet = default_unet_config(data.attribute.kind, recipe.base_channels)
    logger.info("training %s (%s, seed %d)", recipe.key(), recipe.variant, recipe.seed)
    ckpt = train(make_variant(data.stack, recipe.variant), data.attribute, recipe.train_config(), unet, recipe.variant)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    ckpt.save(tmp)
    os.replace(tmp, path)
    info.write_text(json.dumps({"recipe": asdict(recipe), "wall_clock": ckpt.wall_clock}, indent=2, default=list))
    return ckpt, ckpt.wall_clock


# --- recipes used by the acceptance suite ------------------------------------------


NO_GEOMETRY = AugmentPolicy(True, (0.0, 0.0), (0.0, 0.0), (0.5, 2.0), 64)
NO_COLOR = AugmentPolicy(False, crop=64)
SEGMENTATION_TASK = TransferTask(material="stripes", attribute="segmentation")


def full_recipe(seed: int) -> Recipe:
    return Recipe(seed=seed)


def acceptance_recipes() -> dict[str, list[Recipe]]:
    return {
        "photometricNet": [full_recipe(s) for s in SEEDS],
        "diffuseNet": [Recipe(variant="diffuseNet", seed=s) for s in SEEDS],
        **{f"reduced({k})": [Recipe(variant=f"reduced({k})", seed=s) for s in SEEDS] for k in (1, 3, 9)},
        "crops+scale": [Recipe(policy=NO_GEOMETRY, seed=s) for s in SEEDS],
        "no-color-permute": [Recipe(policy=NO_COLOR, seed=s) for s in SEEDS],
        "segmentation": [Recipe(task=SEGMENTATION_TASK, seed=0)],
    }


# --- measurements --------------------------------------------------------------------


def transfer_error(ckpt: Checkpoint, data: TaskData, guidance: Optional[np.ndarray] = None,
                   plan: Optional[TilePlan] = None) -> float:
    """Cosine distance (normals) or 1 - IoU (masks) on the held-out guidance."""
    pred = infer(ckpt, data.guidance if guidance is None else guidance, plan)
    return attribute_distance(pred, data.guidance_gt, ckpt.kind)[1]


def channel_swapped(image: np.ndarray) -> np.ndarray:
    """R and B exchanged."""
    return image[[2, 1, 0]]


def equivariance_at(ckpt: Checkpoint, data: TaskData, transform: Affine2D, plan: Optional[TilePlan] = None) -> float:
    return equivariance_error(ckpt, data.guidance, transform, ckpt.kind, plan)


def noise_robustness(ckpt: Checkpoint, data: TaskData, seed: int = 0, plan: Optional[TilePlan] = None) -> float:
    """Cosine distance between predictions on clean and noise-degraded guidance."""
    clean = infer(ckpt, data.guidance, plan)
    noisy = degrade(data.guidance, "gaussian_noise", 255.0, substream(seed, "degrade"))
    return attribute_distance(infer(ckpt, noisy, plan), clean, ckpt.kind)[1]


def pooled_std(groups: list[list[float]]) -> float:
    """Square root of the mean within-group variance (ddof=1)."""
    variances = [np.var(g, ddof=1) for g in groups if len(g) > 1]
    return float(np.sqrt(np.mean(variances))) if variances else 0.0
