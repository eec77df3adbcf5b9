"""Per-stage timing of the pipeline on a short simulated sequence.

Thin wrapper over ``capslam bench`` so it can be run from a checkout.
"""

import sys

from capslam.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench", *sys.argv[1:]]))
