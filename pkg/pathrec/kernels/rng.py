"""Counter-based random streams for the numba kernels.

A stream is a 2-vector of uint64: [key, counter]. The key is a hash of
(seed, path index); each draw hashes key + counter * golden and bumps the
counter, so a path's variates never depend on which worker traces it.
"""
import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def stream_key(seed, path_index):
    return mix64(np.uint64(seed) ^ mix64(np.uint64(path_index) + _GOLDEN))


@njit(cache=True, nogil=True)
def new_stream(seed, path_index):
    state = np.empty(2, dtype=np.uint64)
    state[0] = stream_key(seed, path_index)
    state[1] = np.uint64(0)
    return state


@njit(cache=True, nogil=True)
def next_uniform(state):
    """Uniform variate in [0, 1)"""
    counter = state[1]
    state[1] = counter + _ONE
    z = mix64(state[0] + counter * _GOLDEN)
    return float(z >> _S11) * _INV_2_53
