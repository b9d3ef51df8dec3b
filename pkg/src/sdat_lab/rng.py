"""Seeded random streams.

All randomness goes through numpy's PCG64 (O'Neill's PCG-XSL-RR 128/64),
which produces identical sequences on every platform numpy supports.
Independent child streams are derived with :func:`child_seed`: the
``index + 1``-th output of Vigna's SplitMix64 seeded with ``parent_seed``:

    z = (parent + (index + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    child = z ^ (z >> 31)
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def child_seed(parent_seed: int, index: int) -> int:
    z = (int(parent_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))


def child_rng(parent_seed: int, index: int) -> np.random.Generator:
    return make_rng(child_seed(parent_seed, index))


def get_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of the generator state."""
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": int(st["state"]["state"]),
        "inc": int(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def set_state(rng: np.random.Generator, snapshot: dict) -> None:
    if snapshot["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {snapshot['bit_generator']!r}")
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(snapshot["state"]), "inc": int(snapshot["inc"])},
        "has_uint32": int(snapshot["has_uint32"]),
        "uinteger": int(snapshot["uinteger"]),
    }
