"""Counter-based random streams and Dirichlet(1, ..., 1) weights.

Every stream is a pure function of a :class:`StreamKey`. The key is mixed
into generator state by numpy's ``SeedSequence`` hash::

    SeedSequence(entropy=master_seed,
                 spawn_key=(replicate_id, draw_id, purpose_code, retry_index))

and the resulting state seeds a ``PCG64`` bit generator. Nothing is ever
drawn from a shared sequential generator, so results do not depend on the
order in which draws or replicates are executed, nor on the worker count.

All normal variates in the package come from ``Generator.standard_normal``
and all exponentials from ``Generator.standard_exponential`` (numpy's
ziggurat samplers); uniforms come from ``Generator.random``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import EELinkError
from .model import WeightVector

MAX_SEED = 2**64 - 1


class Purpose(enum.IntEnum):
    DATA = 0
    WEIGHTS = 1
    RETRY = 2
    # weights for the first-stage nuisance posterior of the llb_mean plug-in
    NUISANCE = 3
    NUISANCE_RETRY = 4


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    replicate_id: int = 0
    draw_id: int = 0
    purpose: Purpose = Purpose.WEIGHTS
    retry_index: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) <= MAX_SEED:
            raise ValueError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")
        for name in ("replicate_id", "draw_id", "retry_index"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "purpose", Purpose(self.purpose))

    def retry(self, index: int) -> "StreamKey":
        purpose = Purpose.NUISANCE_RETRY if self.purpose in (Purpose.NUISANCE, Purpose.NUISANCE_RETRY) else Purpose.RETRY
        return StreamKey(self.master_seed, self.replicate_id, self.draw_id, purpose, index)


def derive_stream(key: StreamKey) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=int(key.master_seed),
        spawn_key=(int(key.replicate_id), int(key.draw_id), int(key.purpose), int(key.retry_index)),
    )
    return np.random.Generator(np.random.PCG64(seq))


def weights_from_exponentials(g) -> WeightVector:
    # fsum is correctly rounded, so permuting g permutes the weights exactly
    g = np.asarray(g, dtype=float)
    return WeightVector(g / math.fsum(g))


def sample_dirichlet_uniform(n: int, stream: np.random.Generator) -> WeightVector:
    """Flat Dirichlet weights as normalised standard exponentials."""
    if n < 1:
        raise ValueError("n must be at least 1")
    for _ in range(2):
        g = stream.standard_exponential(n)
        total = g.sum()
        if total > 0 and np.isfinite(total):
            return weights_from_exponentials(g)
    raise EELinkError("degenerate exponential draw: sum of variates is zero")


def equal_weights(n: int) -> WeightVector:
    if n < 1:
        raise ValueError("n must be at least 1")
    return WeightVector(np.full(n, 1.0 / n))


def dirichlet_weights(n: int, key: StreamKey) -> WeightVector:
    """Default weight source for the bootstrap engines."""
    return sample_dirichlet_uniform(n, derive_stream(key))
