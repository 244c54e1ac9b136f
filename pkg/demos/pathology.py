"""Naive distillation against transport distillation when student and teacher cells never coincide.

Usage: python3 demos/pathology.py [STEPS]
"""

import sys

from otkd.harness import SyntheticScenario, train_student


def main(steps=500):
    s = SyntheticScenario(cell_overlap=0.0)
    for kind in ("naive", "ot-keypoint"):
        traj = train_student(s, kind, steps=steps)
        print(f"{kind:12s} corner error {traj.initial.corner_error:.5f} -> {traj.final.corner_error:.5f}   "
              f"divergence {traj.initial.divergence:.5f} -> {traj.final.divergence:.5f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 500)
