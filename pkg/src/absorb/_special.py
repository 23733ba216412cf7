# Standard-normal CDF helpers callable from numba-compiled code.
# They bind scipy's Cython special functions directly, so compiled kernels and
# the numpy-facing code share one implementation of log Phi and its inverse.
import ctypes

import numba
from numba.extending import get_cython_function_address

_dbl_fn = ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double)


def _bind(name):
    return _dbl_fn(get_cython_function_address("scipy.special.cython_special", name))


# fused index 1 is the real-valued (double) specialization
_log_ndtr = _bind("__pyx_fuse_1log_ndtr")
_ndtr = _bind("__pyx_fuse_1ndtr")
_ndtri = _bind("ndtri")
_ndtri_exp = _bind("ndtri_exp")


@numba.njit
def log_ndtr(x):
    return _log_ndtr(x)


@numba.njit
def ndtr(x):
    return _ndtr(x)


@numba.njit
def ndtri(p):
    return _ndtri(p)


@numba.njit
def ndtri_exp(logp):
    return _ndtri_exp(logp)
