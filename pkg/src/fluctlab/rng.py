"""Counter-based random streams keyed by (seed, experiment, replicate, mode).

A stream is a Philox generator whose key is derived by hashing the full key
tuple through ``numpy.random.SeedSequence``; draws are therefore a pure
function of the key and independent of evaluation order or thread layout.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

SEED_MASK = (1 << 64) - 1


def experiment_id(name: str) -> int:
    """Stable 32-bit id of an experiment name."""
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class StreamKey:
    seed: int
    experiment: int = 0
    replicate: int = 0
    mode: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= SEED_MASK):
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def for_replicate(self, replicate: int) -> "StreamKey":
        return replace(self, replicate=int(replicate))

    def for_mode(self, k: int) -> "StreamKey":
        return replace(self, mode=int(k))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=[self.seed & 0xFFFFFFFF, self.seed >> 32],
            spawn_key=(self.experiment, self.replicate, self.mode),
        )
        return np.random.Generator(np.random.Philox(key=ss.generate_state(2, dtype=np.uint64)))


def normal_stream(key: StreamKey, n: int) -> np.ndarray:
    """First n standard normals of the stream identified by key."""
    return key.generator().standard_normal(n)


def replicate_keys(seed: int, experiment: str | int, replicate_ids) -> list:
    exp = experiment_id(experiment) if isinstance(experiment, str) else int(experiment)
    return [StreamKey(seed, exp, int(r)) for r in replicate_ids]
