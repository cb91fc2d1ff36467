"""Named, seedable random streams.

Each consumer (weight init, feature learning rates, shuffling, ...) draws from
its own stream derived from ``(seed, name)``, so turning one consumer on or off
never shifts the numbers another one sees.
"""

import zlib

import numpy as np


def _key(name):
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed, name, *sub):
    """Independent PCG64 generator for ``name`` (optionally sub-indexed) under ``seed``."""
    key = (_key(name),) + tuple(int(s) for s in sub)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def derive_seed(master_seed, cell_id):
    """Deterministic 63-bit seed for one experiment cell, e.g. ``"sgd/lr=0.01"``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(_key(cell_id),))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def generator_state(gen):
    return gen.bit_generator.state


def restore_generator(state):
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
