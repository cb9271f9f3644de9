"""Pure-numpy kernels. Same out-parameter signatures as the compiled module."""
import numpy as np

GELU_C = 0.7978845608028654
GELU_A = 0.044715


def gelu_fwd(x, out):
    u = GELU_C * (x + GELU_A * x * x * x)
    np.multiply(0.5 * x, 1.0 + np.tanh(u), out=out)


def gelu_bwd(x, gy, out):
    u = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(u)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    np.multiply(gy, d, out=out)


def layernorm_fwd(x, gain, bias, eps, y, xhat, rstd):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    rstd[:] = inv[:, 0]
    xhat[:] = (x64 - mean) * inv
    y[:] = xhat * gain + bias


def layernorm_bwd(gy, xhat, rstd, gain, gx, ggain, gbias):
    g = gy.astype(np.float64) * gain
    xh = xhat.astype(np.float64)
    s1 = g.mean(axis=1, keepdims=True)
    s2 = (g * xh).mean(axis=1, keepdims=True)
    gx[:] = rstd[:, None].astype(np.float64) * (g - s1 - xh * s2)
    ggain += (gy * xhat).sum(axis=0, dtype=np.float64)
    gbias += gy.sum(axis=0, dtype=np.float64)


def softmax_fwd(x, y):
    z = x.astype(np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    y[:] = z / z.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy, gx):
    dot = (y.astype(np.float64) * gy).sum(axis=1, keepdims=True)
    gx[:] = y * (gy - dot)


def adamw_update(p, g, m, v, lr, wd, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p *= 1.0 - lr * wd
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
