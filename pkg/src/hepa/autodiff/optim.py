"""AdamW with decoupled weight decay."""
import numpy as np

from .. import kernels


def adamw_step(params, grads, state, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8,
               backend=None):
    """Update ``params`` (numpy arrays) in place and return ``(params, state)``.

    Per parameter: ``p *= 1 - lr * wd``, then the bias-corrected Adam step
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``. ``state`` holds ``step`` and the
    moment lists ``m`` and ``v``; pass ``{}`` on the first call.
    """
    k = backend or kernels.active
    if not state:
        state.update(step=0, m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])
    state["step"] += 1
    b1, b2 = betas
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        k.adamw_update(p, g, m, v, lr, weight_decay, b1, b2, eps, state["step"])
    return params, state


class AdamW:
    """Optimizer over a list of Parameters. Parameters without a grad are skipped."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = {}

    def step(self):
        for p in self.params:
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
