#!/usr/bin/env python3
"""Full ablation: train all five variants on the same seeded synthetic
corpus with one schedule and write the flags/params/accuracy table to
runs/ablation/ablation.txt. Expect a multi-hour run on a laptop core.

Extra arguments are appended to the underlying `duccnet ablation` call.
"""

import sys

from duccnet.cli import main

if __name__ == "__main__":
    sys.exit(
        main(
            [
                "ablation",
                "--synth", "200",
                "--epochs", "30",
                "--batch-size", "32",
                "--seed", "0",
                "--out", "runs/ablation",
                *sys.argv[1:],
            ]
        )
    )
