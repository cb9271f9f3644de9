"""Hot numerical kernels behind the autodiff engine.

The compiled extension (``hepa.kernels._fast``) is used when it was built;
otherwise the numpy implementation in ``_reference`` is used. Setting the
environment variable ``HEPA_PURE_PYTHON=1`` forces the numpy path.

Both backends accept float32 and float64 arrays; the compiled one needs
C-contiguous inputs, which the wrappers below guarantee.
"""
import os

import numpy as np

from . import _reference

try:
    from . import _fast
except ImportError:  # extension not built
    _fast = None


class KernelSet:
    """Kernel entry points bound to one backend module."""

    def __init__(self, backend, name):
        self._b = backend
        self.name = name

    def gelu(self, x):
        x = np.ascontiguousarray(x)
        out = np.empty_like(x)
        self._b.gelu_fwd(x.reshape(-1), out.reshape(-1))
        return out

    def gelu_grad(self, x, gy):
        x = np.ascontiguousarray(x)
        gy = np.ascontiguousarray(gy, dtype=x.dtype)
        out = np.empty_like(x)
        self._b.gelu_bwd(x.reshape(-1), gy.reshape(-1), out.reshape(-1))
        return out

    def layernorm(self, x, gain, bias, eps):
        """Normalise over the last axis. Returns ``(y, xhat, rstd)``."""
        shape = x.shape
        x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
        gain = np.ascontiguousarray(gain, dtype=x2.dtype)
        bias = np.ascontiguousarray(bias, dtype=x2.dtype)
        y = np.empty_like(x2)
        xhat = np.empty_like(x2)
        rstd = np.empty(x2.shape[0], dtype=x2.dtype)
        self._b.layernorm_fwd(x2, gain, bias, float(eps), y, xhat, rstd)
        return y.reshape(shape), xhat, rstd

    def layernorm_grad(self, gy, xhat, rstd, gain):
        """Returns ``(gx, ggain, gbias)``; ``gx`` has the shape of ``gy``."""
        shape = gy.shape
        gy2 = np.ascontiguousarray(gy, dtype=xhat.dtype).reshape(-1, shape[-1])
        gain = np.ascontiguousarray(gain, dtype=xhat.dtype)
        gx = np.empty_like(gy2)
        ggain = np.zeros(shape[-1], dtype=np.float64)
        gbias = np.zeros(shape[-1], dtype=np.float64)
        self._b.layernorm_bwd(gy2, xhat, rstd, gain, gx, ggain, gbias)
        return gx.reshape(shape), ggain.astype(xhat.dtype), gbias.astype(xhat.dtype)

    def softmax(self, x):
        shape = x.shape
        x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
        y = np.empty_like(x2)
        self._b.softmax_fwd(x2, y)
        return y.reshape(shape)

    def softmax_grad(self, y, gy):
        shape = y.shape
        y2 = np.ascontiguousarray(y).reshape(-1, shape[-1])
        gy2 = np.ascontiguousarray(gy, dtype=y2.dtype).reshape(-1, shape[-1])
        gx = np.empty_like(y2)
        self._b.softmax_bwd(y2, gy2, gx)
        return gx.reshape(shape)

    def adamw_update(self, p, g, m, v, lr, wd, b1, b2, eps, step):
        """In-place decoupled-decay Adam update on flat contiguous arrays."""
        bc1 = 1.0 - b1 ** step
        bc2 = 1.0 - b2 ** step
        g = np.ascontiguousarray(g, dtype=p.dtype).reshape(-1)
        self._b.adamw_update(p.reshape(-1), g, m.reshape(-1), v.reshape(-1),
                             float(lr), float(wd), float(b1), float(b2), float(eps), bc1, bc2)


reference = KernelSet(_reference, "numpy")
compiled = KernelSet(_fast, "cython") if _fast is not None else None

if compiled is not None and os.environ.get("HEPA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    active = compiled
else:
    active = reference

BACKEND = active.name
