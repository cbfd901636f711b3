"""Backend selection for the MLP hot loop.

When the compiled ``_mlp_core`` extension imports, the default ``auto`` mode
sends small calls (batch rows x widest layer <= ``SMALL_WORK``) to it and
larger ones to the numpy implementation in ``_mlp_py``: the compiled kernel
saves per-call overhead, which dominates for the training/sharpness batch
size, while big full-dataset products are BLAS-bound and numpy's BLAS is the
faster one there.  Without the extension everything runs on numpy.

``SHARPDIAG_BACKEND=python`` or ``=cython`` pins one backend for all calls.
"""

import os

from sharpdiag import _mlp_py

RELU = _mlp_py.RELU
TANH = _mlp_py.TANH

try:
    from sharpdiag import _mlp_core
except ImportError:  # extension not built
    _mlp_core = None

_BACKENDS = {"python": _mlp_py}
if _mlp_core is not None:
    _BACKENDS["cython"] = _mlp_core


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}") from None


SMALL_WORK = 4096


def _small(dims, X) -> bool:
    return X.shape[0] * max(dims[1:]) <= SMALL_WORK


def _auto_forward(params, dims, act, X):
    impl = _mlp_core if _small(dims, X) else _mlp_py
    return impl.mlp_forward(params, dims, act, X)


def _auto_loss(params, dims, act, X, y, sw):
    impl = _mlp_core if _small(dims, X) else _mlp_py
    return impl.mlp_loss(params, dims, act, X, y, sw)


def _auto_loss_grad(params, dims, act, X, y, sw):
    impl = _mlp_core if _small(dims, X) else _mlp_py
    return impl.mlp_loss_grad(params, dims, act, X, y, sw)


def _select():
    requested = os.environ.get("SHARPDIAG_BACKEND", "").strip().lower()
    if requested and requested != "auto":
        impl = get_backend(requested)
        return requested, impl.mlp_forward, impl.mlp_loss, impl.mlp_loss_grad
    if _mlp_core is not None:
        return "auto", _auto_forward, _auto_loss, _auto_loss_grad
    return "python", _mlp_py.mlp_forward, _mlp_py.mlp_loss, _mlp_py.mlp_loss_grad


BACKEND, mlp_forward, mlp_loss, mlp_loss_grad = _select()
