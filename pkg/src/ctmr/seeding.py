"""Child-seed derivation from one master seed (splitmix64)."""
from __future__ import annotations

import zlib

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive(master: int, *labels) -> int:
    """Deterministic 63-bit child seed for a path of labels (ints or strings).

    Each label is folded into the state with CRC32 (strings) or its value
    (ints), followed by one splitmix64 step.
    """
    state = master & _MASK
    _, out = splitmix64(state)
    for label in labels:
        key = zlib.crc32(label.encode()) if isinstance(label, str) else int(label)
        state, out = splitmix64(out ^ (key & _MASK))
    return out >> 1
