"""Survey PE conversion accuracy over every ordered pair of compatible forms.

Prints a table of the worst relative precision error per (source, target)
pair and writes it as JSON when --out is given.
"""

import argparse
import json

import numpy as np

from cmequiv.blockmat import relative_error
from cmequiv.equivalence import compatible_targets, pe_convert
from cmequiv.generate import random_params
from cmequiv.models import ALL_FORMS, precision


def survey(models: int, max_N: int, max_d: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst = {}
    for form in ALL_FORMS:
        for _ in range(models):
            N = int(rng.integers(max(form.min_N, 3), max_N + 1))
            d = int(rng.integers(1, max_d + 1))
            p = random_params(form, N, d, rng)
            c = precision(p)
            for target in compatible_targets(form):
                back = pe_convert(pe_convert(p, target), form)
                key = f"{form.tag} -> {target.tag}"
                worst[key] = max(worst.get(key, 0.0), relative_error(precision(back), c))
    return worst


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--models", type=int, default=50)
    ap.add_argument("--max-N", type=int, default=8)
    ap.add_argument("--max-d", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()
    worst = survey(args.models, args.max_N, args.max_d, args.seed)
    width = max(map(len, worst))
    for key, err in sorted(worst.items()):
        print(f"{key:<{width}}  {err:.2e}")
    print(f"\n{len(worst)} pairs, overall worst {max(worst.values()):.2e}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"seed": args.seed, "models_per_form": args.models, "worst": worst}, fh, indent=1)


if __name__ == "__main__":
    main()
