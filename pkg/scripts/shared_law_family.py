"""Build the family of Markov models sharing one reciprocal law.

Takes the interior reciprocal law of a random Markov model, sweeps a scale on
the final covariance M_N, and reports feasibility and the sharing checks for
each member against the original.
"""

import argparse

import numpy as np

from cmequiv.equivalence import reciprocal_from_markov
from cmequiv.errors import Infeasible
from cmequiv.generate import random_markov, random_spd
from cmequiv.sharing import construct_markov_from_reciprocal, markov_pair_share


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=6)
    ap.add_argument("--d", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    m = random_markov(rng, args.N, args.d)
    law = reciprocal_from_markov(m)
    print(f"{'scale M_N':>9} {'feasible':>9} {'reciprocal':>11} {'markov':>7}")
    for scale in (0.25, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0, 16.0):
        try:
            member = construct_markov_from_reciprocal(law.R0, law.Rplus, scale * m.cov(args.N), random_spd(rng, args.d))
        except Infeasible as exc:
            print(f"{scale:>9.2f} {'no (k=' + str(exc.k) + ')':>9}")
            continue
        rep = markov_pair_share(m, member)
        print(f"{scale:>9.2f} {'yes':>9} {str(rep.share_reciprocal):>11} {str(rep.share_markov):>7}")


if __name__ == "__main__":
    main()
