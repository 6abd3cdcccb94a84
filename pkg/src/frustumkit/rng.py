"""Named, index-addressable random streams derived from one master seed."""

import zlib

import numpy as np


def substream(seed, name, *index):
    """Independent generator for ``(seed, name, *index)``.

    The same arguments always give the same stream, so serial and parallel
    consumers agree bit for bit.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(zlib.crc32(i.encode("utf-8")) if isinstance(i, str) else int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(key))
