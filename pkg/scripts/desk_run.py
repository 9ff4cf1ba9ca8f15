#!/usr/bin/env python3
"""Desk-scale experiment: train the dual-channel network on a seeded
synthetic corpus (200 per class, full augmentation) until validation
accuracy reaches 90 percent or 30 epochs elapse.

Any extra arguments are appended to the underlying `duccnet train` call,
so e.g. `scripts/desk_run.py --seed 3` reruns with another seed.
"""

import sys

from duccnet.cli import main

if __name__ == "__main__":
    sys.exit(
        main(
            [
                "train",
                "--variant", "duccnet",
                "--synth", "200",
                "--epochs", "30",
                "--batch-size", "32",
                "--target-val-acc", "90",
                "--seed", "0",
                "--out", "runs/desk",
                *sys.argv[1:],
            ]
        )
    )
