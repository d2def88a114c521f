import zlib

import numpy as np
import torch

# Named substreams; every random draw in the lab goes through one of these.
STREAMS = ("data", "profiles", "init", "mask", "shuffle", "proto", "head", "finetune")


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name (independent of PYTHONHASHSEED)."""
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(master_seed: int, name: str, *keys: int) -> np.random.SeedSequence:
    if name not in STREAMS:
        raise ValueError(f"Unknown random stream '{name}'")
    return np.random.SeedSequence([int(master_seed), stream_key(name), *[int(k) for k in keys]])


def substream(master_seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Numpy generator for one named substream.

    Args:
        master_seed: The run's master seed
        name: One of STREAMS
        *keys: Extra integers (clip index, epoch, iteration...) that pick a child stream

    Returns:
        np.random.Generator: Independent, reproducible generator
    """
    return np.random.default_rng(seed_sequence(master_seed, name, *keys))


def torch_generator(master_seed: int, name: str, *keys: int) -> torch.Generator:
    """Seeded torch.Generator derived from the same substream scheme."""
    seed = int(seed_sequence(master_seed, name, *keys).generate_state(1, dtype=np.uint64)[0] >> 1)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def child_seed(rng: np.random.Generator) -> int:
    """Draw an integer seed for libraries that take ``random_state``."""
    return int(rng.integers(0, 2**31 - 1))
