"""Deterministic RNG derivation.

All randomness in the package flows from a single 64-bit master seed.
Per-purpose generators are derived as hash(master, purpose-tag, index) so
any component can be re-run in isolation and reproduce the exact stream it
saw inside a larger run.
"""

import hashlib

import numpy as np


def _tag_to_int(tag: str) -> int:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Generator for `purpose`/`index`, independent of all other purposes."""
    seq = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, _tag_to_int(purpose), index])
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(master_seed: int, purpose: str, index: int = 0) -> int:
    """64-bit child seed, for handing a whole subsystem its own master."""
    seq = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, _tag_to_int(purpose), index])
    return int(seq.generate_state(1, np.uint64)[0])
