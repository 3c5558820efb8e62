"""Train (or load from cache) every model the acceptance suite evaluates.

    python3 scripts/train_acceptance_models.py [--only GROUP ...]

Single-threaded cost is about 7-8 minutes per model at the reduced widths;
the full set is 22 models. Prints one line per model as it finishes.
"""
import argparse
import logging
import time

from phototransfer.experiments import acceptance_recipes, cache_dir, task_data, trained, transfer_error


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--only", nargs="*", help="subset of groups, e.g. photometricNet diffuseNet")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    groups = acceptance_recipes()
    order = ["photometricNet", "segmentation", "diffuseNet", "reduced(1)", "reduced(3)", "reduced(9)",
             "crops+scale", "no-color-permute"]
    print(f"cache: {cache_dir()}")
    for name in order:
        if args.only and name not in args.only:
            continue
        for recipe in groups[name]:
            t0 = time.perf_counter()
            ckpt, wall = trained(recipe)
            err = transfer_error(ckpt, task_data(recipe.task))
            print(f"{name:18s} seed={recipe.seed} train={wall:6.1f}s err={err:.4f} "
                  f"(elapsed {time.perf_counter() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
