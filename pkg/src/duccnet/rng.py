"""Seed derivation for every random stream in the package.

All randomness flows through numpy Generators built from SeedSequence entropy
lists [root_seed, tag, *extra]. Distinct tags per purpose keep streams
independent, and per-sample / per-epoch extras make augmentation results
independent of worker count and batch schedule.
"""

import numpy as np

TAG_INIT = 1      # weight initialization
TAG_SHUFFLE = 2   # per-epoch training-set shuffle
TAG_AUGMENT = 3   # per-sample per-epoch augmentation
TAG_DROPOUT = 4   # per-forward dropout masks
TAG_SYNTH = 5     # synthetic corpus generation
TAG_SPLIT = 6     # train/validation split


def derive_rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def derive_seed(seed, *tags):
    # a derived integer seed for APIs that take one
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])
