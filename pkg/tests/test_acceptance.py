"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 3-8 and 11 train networks (about 8 minutes each on one core at the
reduced widths, 22 in total). Trained checkpoints are cached, see
``phototransfer.experiments``; warm the cache with
``scripts/train_acceptance_models.py``. Run with ``pytest -m "not slow"`` to
skip the training criteria.

    pytest tests/test_acceptance.py -v
"""
import functools
import time

import numpy as np
import pytest

from acceptance_log import record
from gradcheck import GRADCHECK_SEEDS, GRADCHECK_TOL, OP_CASES, run_case
from phototransfer import cli
from phototransfer.augment import Affine2D
from phototransfer.evaluate import TilePlan, predict_raw
from phototransfer.experiments import (NO_COLOR, NO_GEOMETRY, SEEDS, Recipe, SEGMENTATION_TASK, channel_swapped,
                                       equivariance_at, full_recipe, noise_robustness, pooled_std, task_data, trained,
                                       transfer_error)
from phototransfer.photometry import (angular_error_deg, generate_procedural_material, photometric_stereo, render_stack,
                                      sample_light_rig, sphere_material)
from phototransfer.unet import UNetConfig, UNetModel

slow = pytest.mark.slow


@functools.lru_cache(maxsize=None)
def model(recipe: Recipe):
    return trained(recipe)


@functools.lru_cache(maxsize=None)
def error(recipe: Recipe, swapped: bool = False) -> float:
    ckpt, _ = model(recipe)
    data = task_data(recipe.task)
    return transfer_error(ckpt, data, channel_swapped(data.guidance) if swapped else None)


def group(name: str) -> list[Recipe]:
    if name == "photometricNet":
        return [full_recipe(s) for s in SEEDS]
    if name == "crops+scale":
        return [Recipe(policy=NO_GEOMETRY, seed=s) for s in SEEDS]
    if name == "no-color-permute":
        return [Recipe(policy=NO_COLOR, seed=s) for s in SEEDS]
    return [Recipe(variant=name, seed=s) for s in SEEDS]


def fmt(values) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


def test_c01_gradient_correctness():
    start = time.perf_counter()
    worst = {name: max(run_case(name, s) for s in GRADCHECK_SEEDS) for name in OP_CASES}
    elapsed = time.perf_counter() - start
    bad = max(worst, key=worst.get)
    ok = max(worst.values()) < GRADCHECK_TOL and elapsed < 60
    assert record(1, ok, f"{len(OP_CASES)} ops x {len(GRADCHECK_SEEDS)} seeds, worst rel. error {worst[bad]:.2e} "
                         f"({bad}) < {GRADCHECK_TOL:g}; {elapsed:.1f}s < 60s")


def test_c02_photometric_stereo_round_trip():
    start = time.perf_counter()
    errs = {}
    for name, mat in (("sphere", sphere_material(64)), ("woven", generate_procedural_material("woven", 64, 64, 0))):
        for noise in (0.0, 0.02):
            est = photometric_stereo(render_stack(mat, sample_light_rig(9, 0), noise, 0))
            errs[(name, noise)] = float(angular_error_deg(est.normals, mat.normals)[est.valid].mean())
    elapsed = time.perf_counter() - start
    ok = all(e < (1.0 if n == 0 else 5.0) for (_, n), e in errs.items()) and elapsed < 10
    detail = ", ".join(f"{m}/{n:g}: {e:.4f} deg" for (m, n), e in errs.items())
    assert record(2, ok, f"{detail} (limits 1 / 5 deg); {elapsed:.1f}s < 10s")


@slow
def test_c03_end_to_end_transfer():
    errs = [error(r) for r in group("photometricNet")]
    wall = model(full_recipe(0))[1]
    ok = errs[0] < 0.05 and wall < 900
    assert record(3, ok, f"cosine distance {errs[0]:.4f} < 0.05 on held-out light (seeds {fmt(errs)}); "
                         f"training {wall:.0f}s < 900s")


@slow
def test_c04_diffuse_net_generalizes_worse():
    diff = [error(r) for r in group("diffuseNet")]
    photo = [error(r) for r in group("photometricNet")]
    ok = np.mean(diff) > np.mean(photo)
    assert record(4, ok, f"diffuseNet {np.mean(diff):.4f} {fmt(diff)} > photometricNet {np.mean(photo):.4f} {fmt(photo)}")


@slow
def test_c05_more_lights_generalize_better():
    groups = {k: [error(r) for r in group(f"reduced({k})")] for k in (1, 3, 9)}
    means = {k: float(np.mean(v)) for k, v in groups.items()}
    s = pooled_std(list(groups.values()))
    ok = means[1] > means[9] and means[9] - s <= means[3] <= means[1] + s
    assert record(5, ok, "k=1 {:.4f} > k=3 {:.4f} > k=9 {:.4f}; pooled std {:.4f}".format(means[1], means[3], means[9], s))


@slow
def test_c06_geometric_augmentation_improves_equivariance():
    transforms = {"rotation 45": Affine2D.from_params(45), "shear 30": Affine2D.from_params(shear_deg=30)}
    parts, ok = [], True
    for label, T in transforms.items():
        full = [equivariance_at(model(r)[0], task_data(r.task), T) for r in group("photometricNet")]
        base = [equivariance_at(model(r)[0], task_data(r.task), T) for r in group("crops+scale")]
        ok &= np.mean(full) < np.mean(base)
        parts.append(f"{label}: rot+shear {np.mean(full):.4f} < crops+scale {np.mean(base):.4f}")
    assert record(6, ok, "; ".join(parts))


@slow
def test_c07_color_permutation_helps_on_swapped_guidance():
    with_perm = [error(r, swapped=True) for r in group("photometricNet")]
    without = [error(r, swapped=True) for r in group("no-color-permute")]
    ok = np.mean(with_perm) < np.mean(without)
    assert record(7, ok, f"R<->B guidance: with permutation {np.mean(with_perm):.4f} {fmt(with_perm)} < "
                         f"without {np.mean(without):.4f} {fmt(without)}")


@slow
def test_c08_noise_robustness():
    dists = [noise_robustness(model(r)[0], task_data(r.task)) for r in group("photometricNet")]
    ok = dists[0] < 0.1
    assert record(8, ok, f"clean vs sigma^2=255 prediction distance {dists[0]:.4f} < 0.1 (seeds {fmt(dists)})")


def test_c09_tiling_exactness():
    net = UNetModel.init(UNetConfig(base_channels=8), 0)
    x = np.random.default_rng(0).normal(size=(3, 300, 290)).astype(np.float32)
    whole = predict_raw(net, x, None)
    diffs = []
    for tile, overlap in ((64, None), (48, 112), (128, 128)):
        r = TilePlan(tile, overlap).resolve(net)[1]
        tiled = predict_raw(net, x, TilePlan(tile, overlap))
        # interior: output pixels whose receptive field stays inside the 304x304 canvas
        core = (slice(None), slice(r, 304 - r), slice(r, 304 - r))
        diffs.append(float(np.abs(tiled[core] - whole[core]).max()))
    ok = max(diffs) < 1e-5
    assert record(9, ok, f"max |tiled - whole| per config {[f'{d:.1e}' for d in diffs]} < 1e-5")


def _pipeline(root):
    ds, m = root / "ds", root / "model.pxfr"
    steps = [
        ["synth", "--kind", "woven", "--size", "64", "--lights", "9", "--guidance-size", "96", "--out", ds],
        ["stereo", ds],
        ["train", ds, ds / "normals.png", "--iterations", "20", "--crop", "32", "--base-channels", "4",
         "--set", "batch_size=8", "--out", m],
        ["infer", m, ds / "guidance.png", "--out", root / "pred.png"],
        ["eval", "--study", "metrics", "--checkpoint", m, "--guidance", ds / "guidance.png",
         "--gt", ds / "guidance_normals.png", "--out", root / "metrics.csv"],
        ["eval", "--study", "equivariance", "--checkpoint", m, "--guidance", ds / "guidance.png", "--out", root / "equi.csv"],
        ["eval", "--study", "degrade", "--checkpoint", m, "--guidance", ds / "guidance.png", "--out", root / "degrade.csv"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv] + ["--threads", "1", "--seed", "11"]) == 0
    return [m, root / "model.loss.csv", root / "pred.png", root / "metrics.csv", root / "equi.csv", root / "degrade.csv"]


def test_c10_determinism(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    same = [pa.read_bytes() == pb.read_bytes() for pa, pb in zip(a, b)]
    ok = all(same)
    assert record(10, ok, f"{sum(same)}/{len(same)} outputs byte-identical across two --threads 1 runs "
                          "(checkpoint, loss CSV, prediction, 3 reports)")


@slow
def test_c11_segmentation_path():
    recipe = Recipe(task=SEGMENTATION_TASK, seed=0)
    iou = 1.0 - error(recipe)
    ok = iou > 0.9
    assert record(11, ok, f"stripes mask IoU {iou:.4f} > 0.9 on held-out light")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
