"""Counter-based seed derivation.

Replica ``i`` of a run with master seed ``s`` owns two streams:

* the event stream, seeded by ``SeedSequence(s, spawn_key=(i, 0))``
  reduced to one 32-bit word (the compiled kernels reseed numba's
  Mersenne Twister with it);
* the initial-data stream, ``SeedSequence(s, spawn_key=(i, 1))`` feeding a
  PCG64 generator.

Both depend on ``(s, i)`` only, never on scheduling.
"""

from __future__ import annotations

import numpy as np

EVENT_STREAM = 0
INITIAL_STREAM = 1
AUX_STREAM = 2


def stream(master: int, replica: int, kind: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(int(replica), int(kind)))


def replica_seeds(master: int, first: int, count: int, kind: int = EVENT_STREAM) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        out[i] = int(stream(master, first + i, kind).generate_state(1, np.uint32)[0])
    return out


def replica_generators(master: int, first: int, count: int, kind: int = INITIAL_STREAM):
    for i in range(count):
        yield np.random.Generator(np.random.PCG64(stream(master, first + i, kind)))


def generator(master: int, replica: int = 0, kind: int = AUX_STREAM) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream(master, replica, kind)))
