"""Counter-based random streams.

Every Gaussian draw is a pure function of ``(key, counter)``, where the key of
a path is derived from ``(master_seed, path_index)``.  Nothing is stateful, so
an ensemble is bit-identical however its paths are split across workers.

The hash is the SplitMix64 finaliser.  Normals come from the Box-Muller
transform applied to two consecutive uniforms::

    u = ((mix(key + GOLDEN * c) >> 11) + 1) * 2**-53        # u in (0, 1]
    z0 = sqrt(-2 log u_{2j}) cos(2 pi u_{2j+1})
    z1 = sqrt(-2 log u_{2j}) sin(2 pi u_{2j+1})

Step ``k`` of a path consumes pair counters ``k * P .. k * P + P - 1`` with
``P = ceil(d / 2)``.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_KNOT = np.uint64(0xD1B54A32D192ED03)
_REPL = np.uint64(0x8CB92BA72F3D8DD7)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = 2.0 ** -53


def mix(z):
    """SplitMix64 finaliser on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def path_keys(master_seed, indices):
    """Stream keys for ``indices`` under ``master_seed``."""
    seed = np.asarray([int(master_seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix(mix(seed) ^ (idx * GOLDEN + np.uint64(1)))


def child_keys(keys, knot, replicate):
    """Keys of nested streams spawned from ``keys`` at ``knot``."""
    keys = np.asarray(keys, dtype=np.uint64)
    rep = np.asarray(replicate, dtype=np.uint64)
    with np.errstate(over="ignore"):
        salt = mix(np.uint64(knot) * _KNOT + rep * _REPL + np.uint64(7))
        return mix(keys ^ salt)


def uniforms(keys, counters):
    """Uniforms in (0, 1] for broadcastable ``keys`` and ``counters``."""
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = mix(keys + counters * GOLDEN)
    return ((h >> _S11).astype(np.float64) + 1.0) * _TWO53


def normals(keys, step, d):
    """Standard normals of shape ``(len(keys), d)`` for time step ``step``."""
    keys = np.asarray(keys, dtype=np.uint64)
    npair = (d + 1) // 2
    base = np.uint64(2 * npair) * np.uint64(step)
    c = base + np.arange(2 * npair, dtype=np.uint64)
    u = uniforms(keys[:, None], c[None, :])
    r = np.sqrt(-2.0 * np.log(u[:, 0::2]))
    ang = 2.0 * np.pi * u[:, 1::2]
    z = np.empty((keys.shape[0], 2 * npair))
    z[:, 0::2] = r * np.cos(ang)
    z[:, 1::2] = r * np.sin(ang)
    return z[:, :d]


def derive_seed(master_seed, *labels):
    """A 64-bit seed for a sub-experiment named by integer ``labels``."""
    z = np.asarray([int(master_seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    for lab in labels:
        with np.errstate(over="ignore"):
            z = mix(z ^ (np.uint64(int(lab) & 0xFFFFFFFFFFFFFFFF) * GOLDEN + _KNOT))
    return int(z[0])
