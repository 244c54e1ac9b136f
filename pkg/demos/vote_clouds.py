"""Write per-corner vote scatter data for teacher, untrained and trained student.

The CSV has columns role,corner,x,y,weight and can be plotted with any tool.

Usage: python3 demos/vote_clouds.py OUT.csv [STEPS]
"""

import sys

import numpy as np

from otkd.harness import SyntheticScenario, scatter_csv, train_student


def spread(votes, corners):
    return float(np.mean(np.linalg.norm(votes - corners, axis=-1)))


def main(out, steps=300):
    s = SyntheticScenario()
    traj = train_student(s, "ot-keypoint", steps=steps)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(scatter_csv(s, traj))
    print(f"mean vote distance to corners: {spread(traj.initial_model.votes, s.corners):.4f} before, "
          f"{spread(traj.final_model.votes, s.corners):.4f} after {steps} steps")
    print(f"wrote {out}")


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    main(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 300)
