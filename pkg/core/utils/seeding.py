import zlib

import numpy as np

# named substreams of the master seed
INIT = "init"
SHUFFLE = "shuffle"
DROPOUT = "dropout"
NOISE = "noise"
DATA = "data"
CLUSTER = "cluster"


def derive_seed(seed: int, name: str, *extra: int) -> int:
    sequence = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode("utf-8")), *extra))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def derive_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode("utf-8")), *extra)))
