"""Counter-based random streams.

Every half-sweep draws from its own Philox stream whose counter encodes
``(run, sweep, system, phase)``. Particle ``j`` always consumes row ``j`` of
each draw, so results do not depend on how work is scheduled.
"""

import numpy as np

PHASE_SAMPLE = 0
PHASE_TUNE = 1


def root_key(seed):
    """Two 64-bit Philox key words derived from an integer seed."""
    return np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)


class StreamFactory:
    """Hands out independent generators for ``(sweep, system)`` pairs of one run."""

    def __init__(self, seed, run=0, phase=PHASE_SAMPLE):
        self.key = root_key(seed)
        self.run = int(run)
        self.phase = int(phase)

    def generator(self, sweep, system):
        # word 0 is left for the draw counter itself
        counter = np.array([0, 4 * int(system) + self.phase, int(sweep), self.run], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self.key, counter=counter))
