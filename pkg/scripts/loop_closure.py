"""Loop closure on a drifted re-observation of the same surface.

Prints the surface gap before and after the deformation for each seed.
"""

import argparse
import sys

from capslam.sim.scenarios import loop_drift_scenario


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--drift", type=float, default=1.0, help="injected drift in cm")
    args = ap.parse_args(argv)
    print("seed,gap_before_cm,gap_after_cm,reduction,applied,surfels")
    for seed in range(args.seeds):
        o = loop_drift_scenario(seed, drift=args.drift)
        print(f"{seed},{o.gap_before:.4f},{o.gap_after:.4f},{o.reduction:.3f},{o.applied},{o.n_surfels}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
