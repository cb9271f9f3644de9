"""Central finite-difference gradient checking in float64."""
import numpy as np

from .engine import Tensor, clear_tape, no_grad


def numeric_grad(f, arrays, h=1e-3):
    """Central differences of scalar ``f(*tensors)`` with respect to every array.

    ``f`` receives float64 Tensors (without grad) and must return a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with no_grad():
        for k, a in enumerate(arrays):
            g = np.zeros_like(a)
            flat = a.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*[Tensor(x, dtype=np.float64) for x in arrays]).data)
                flat[i] = orig - h
                fm = float(f(*[Tensor(x, dtype=np.float64) for x in arrays]).data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            grads.append(g)
    return grads


def analytic_grad(f, arrays):
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64)
               for a in arrays]
    clear_tape()
    out = f(*tensors)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a, b):
    """``||a - b|| / max(||a|| + ||b||, tiny)`` over all entries."""
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(f, arrays, h=1e-3):
    """Return the relative error between tape gradients and finite differences."""
    return relative_error(analytic_grad(f, arrays), numeric_grad(f, arrays, h))


def module_gradcheck(loss_fn, module, h=1e-2, per_param=8, seed=0):
    """Compare tape gradients of ``loss_fn()`` with central differences on module parameters.

    ``module`` should hold float64 parameters. ``per_param`` random entries of
    every parameter are probed. Returns the relative error over all probed entries.
    """
    rng = np.random.default_rng(seed)
    params = module.parameters()
    for p in params:
        p.grad = None
    clear_tape()
    loss_fn().backward()
    ana, num = [], []
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1) if p.grad is not None else np.zeros(flat.size)
            for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                ana.append(grad[i])
                num.append((fp - fm) / (2.0 * h))
    return relative_error([np.array(ana)], [np.array(num)])
