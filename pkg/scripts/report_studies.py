"""Print the synthetic study tables from cached (or freshly trained) models.

    python3 scripts/report_studies.py variants lights equivariance color degrade
    python3 scripts/report_studies.py lights --ks 1 3 9 18 27 --seeds 0 1 2

Anything not in the cache is trained first (about 8 minutes per model).
"""
import argparse

import numpy as np

from phototransfer.evaluate import DEGRADATIONS, EQUIVARIANCE_SWEEP, _sweep_transform, attribute_distance, degrade, infer
from phototransfer.experiments import (NO_COLOR, NO_GEOMETRY, Recipe, channel_swapped, equivariance_at, task_data,
                                       trained, transfer_error)
from phototransfer.photometry import substream


def row(label, values):
    print(f"  {label:22s} mean {np.mean(values):.4f}  std {np.std(values, ddof=1) if len(values) > 1 else 0:.4f}  "
          + " ".join(f"{v:.4f}" for v in values))


def errors(recipes, swapped=False):
    out = []
    for r in recipes:
        data = task_data(r.task)
        out.append(transfer_error(trained(r)[0], data, channel_swapped(data.guidance) if swapped else None))
    return out


def variants(seeds, _args):
    print("held-out light cosine distance by illumination variant")
    for v in ("diffuseNet", "photometricNet", "diphotoNet"):
        row(v, errors([Recipe(variant=v, seed=s) for s in seeds]))


def lights(seeds, args):
    print("held-out light cosine distance by number of directional lights")
    for k in args.ks:
        variant = "photometricNet" if k == 27 else f"reduced({k})"
        row(f"k={k}", errors([Recipe(variant=variant, seed=s) for s in seeds]))


def equivariance(seeds, _args):
    print("equivariance error (cosine) per transform")
    policies = {"rot+shear+scale": None, "crops+scale": NO_GEOMETRY}
    print(f"  {'transform':14s}" + "".join(f"{p:>18s}" for p in policies))
    for axis, value in EQUIVARIANCE_SWEEP:
        T = _sweep_transform(axis, value)
        cells = []
        for pol in policies.values():
            recipes = [Recipe(seed=s) if pol is None else Recipe(policy=pol, seed=s) for s in seeds]
            cells.append(np.mean([equivariance_at(trained(r)[0], task_data(r.task), T) for r in recipes]))
        print(f"  {axis + ' ' + format(value, 'g'):14s}" + "".join(f"{c:18.4f}" for c in cells))


def color(seeds, _args):
    print("cosine distance on the R<->B swapped guidance")
    row("with permutation", errors([Recipe(seed=s) for s in seeds], swapped=True))
    row("without permutation", errors([Recipe(policy=NO_COLOR, seed=s) for s in seeds], swapped=True))
    row("original guidance", errors([Recipe(seed=s) for s in seeds]))


def degradations(seeds, _args):
    print("distance between predictions on clean and degraded guidance")
    results = {f"{op}_{v:g}": [] for op, v in DEGRADATIONS}
    for s in seeds:
        r = Recipe(seed=s)
        ckpt, data = trained(r)[0], task_data(r.task)
        clean = infer(ckpt, data.guidance)
        rng = substream(0, "degrade")
        for op, v in DEGRADATIONS:
            pred = infer(ckpt, degrade(data.guidance, op, v, rng))
            results[f"{op}_{v:g}"].append(attribute_distance(pred, clean, ckpt.kind)[1])
    for name, vals in results.items():
        row(name, vals)


STUDIES = {"variants": variants, "lights": lights, "equivariance": equivariance, "color": color, "degrade": degradations}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("studies", nargs="+", choices=sorted(STUDIES))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--ks", type=int, nargs="+", default=[1, 3, 9, 27])
    args = p.parse_args()
    for name in args.studies:
        STUDIES[name](args.seeds, args)
        print()


if __name__ == "__main__":
    main()
