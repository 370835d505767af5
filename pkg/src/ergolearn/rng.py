"""Named deterministic random substreams.

One global seed fans out to independent generators keyed by purpose
(dynamics, sampling, latent noise, init, shuffling, ...) so that
synchronous and asynchronous runs consume identical randomness per
subsystem and differ only in interleaving.
"""

import zlib

import numpy as np

__all__ = ["substream", "RngBundle"]


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for a named substream of the global seed.

    Stable across processes and platforms: the stream key is a CRC32 of
    the name, mixed into a SeedSequence with the global seed.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


class RngBundle:
    """Lazy dict of named substreams sharing one global seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = substream(self.seed, name)
        return self._streams[name]

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.get(name)
