"""
Keyed normal streams.

Member m of a run draws from its own Philox generator keyed by (seed, m), so
any range of members can be produced independently, in any order, on any
thread, and always yields the same values. Within a member the draws run
factor by factor, so the first k factors do not depend on how many follow.
"""
import numpy as np

from .errors import InputError

_KEY_BITS = 64
_KEY_MASK = (1 << _KEY_BITS) - 1


def member_generator(seed: int, member: int) -> np.random.Generator:
    """The generator owning every draw of one ensemble member."""
    if member < 0:
        raise InputError("member index must be nonnegative")
    key = ((int(seed) & _KEY_MASK) << _KEY_BITS) | (int(member) & _KEY_MASK)
    return np.random.Generator(np.random.Philox(key=key))


def standard_normals(seed: int, start: int, stop: int, n_factors: int, width: int = 16) -> np.ndarray:
    """Standard normals of shape (stop - start, n_factors, width) for members start..stop-1."""
    if width < 1:
        raise InputError("width must be positive")
    if stop < start:
        raise InputError("stop must not precede start")
    if start < 0:
        raise InputError("start must be nonnegative")
    out = np.empty((stop - start, n_factors, width))
    for row, member in enumerate(range(start, stop)):
        out[row] = member_generator(seed, member).standard_normal((n_factors, width))
    return out
