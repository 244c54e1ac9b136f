"""Compare the Sinkhorn solver with both reference oracles on random clouds.

Usage: python3 demos/oracle_agreement.py [SEED]
"""

import sys

import numpy as np

from otkd.oracle import exact_balanced_ot, primal_uot_oracle
from otkd.predictions import WeightedPointSet
from otkd.sinkhorn import SinkhornConfig, sinkhorn_unbalanced


def main(seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(5):
        a = WeightedPointSet(rng.random((6, 2)), np.full(6, 1 / 6))
        b = WeightedPointSet(rng.random((5, 2)), np.full(5, 1 / 5))
        near_balanced = SinkhornConfig(epsilon=1e-4, rho=1e3, debiased=False)
        s, _ = sinkhorn_unbalanced(a, b, near_balanced)
        exact = exact_balanced_ot(a, b).value
        relaxed = SinkhornConfig(epsilon=0.05, rho=0.3, debiased=False)
        u, _ = sinkhorn_unbalanced(a, b, relaxed)
        primal = primal_uot_oracle(a, b, relaxed).value
        print(f"balanced: sinkhorn {s.transport_cost:.8f} exact {exact:.8f}   "
              f"unbalanced: sinkhorn {u.total:.8f} primal {primal:.8f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
