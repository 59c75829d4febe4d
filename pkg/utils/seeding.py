import hashlib

import numpy as np

STREAMS = ("data", "mask", "init", "training", "bench")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """
    Derive an independent generator for a named sub-stream of a master seed.

    Parameters
    ----------
    seed : int
        Master seed of the run.
    name : str
        Sub-stream name, e.g. ``"mask"``.
    extra : int
        Optional further integers (trial index, factor index) mixed into the key.

    Returns
    -------
    numpy.random.Generator

    Raises
    ------
    ValueError
        If ``name`` is not one of ``STREAMS``.
    """
    if name not in STREAMS:
        raise ValueError(f"Unknown random stream '{name}'; expected one of {STREAMS}")
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = [int(seed) & 0xFFFFFFFF, int.from_bytes(digest[:4], "little")]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
