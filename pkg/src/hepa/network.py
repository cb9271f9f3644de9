"""Weight-shared Transformer encoder, horizon-conditioned predictor and event head."""
import math

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Parameter, Tensor, ops
from .errors import ContractError, ShapeError
from .featurizer import positional_encoding, positions_from_mask

D_MODEL = 256
N_HEADS = 4
N_LAYERS = 2
FFN_MULT = 4
DROPOUT = 0.1
MASK_VALUE = -1e9
MAX_TOKENS = 512


class Block(Module):
    """Pre-norm Transformer block with fused QKV projection."""

    def __init__(self, d, heads, ffn, rng, dtype):
        self.heads = heads
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.qkv = Linear(d, 3 * d, rng, dtype=dtype)
        self.proj = Linear(d, d, rng, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.ff1 = Linear(d, ffn, rng, dtype=dtype)
        self.ff2 = Linear(ffn, d, rng, dtype=dtype)

    def forward(self, x, mask, dropout, rng):
        B, n, d = x.shape
        H = self.heads
        dh = d // H
        qkv = self.qkv(self.ln1(x)).reshape(B, n, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = ops.softmax(scores, mask=mask)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        x = x + ops.dropout(self.proj(o), dropout, rng, self.training)
        f = self.ff2(ops.gelu(self.ff1(self.ln2(x))))
        return x + ops.dropout(f, dropout, rng, self.training)


class Encoder(Module):
    """One weight set used causally (online branch) and bidirectionally (target branch)."""

    def __init__(self, d_in, rng, d=D_MODEL, heads=N_HEADS, layers=N_LAYERS,
                 ffn=None, dropout=DROPOUT, dtype=np.float32):
        if d % heads or d % 2:
            raise ContractError("d must be even and divisible by the head count")
        self.d_in, self.d, self.dropout = d_in, d, dropout
        self.inp = Linear(d_in, d, rng, dtype=dtype)
        self.blocks = [Block(d, heads, ffn or FFN_MULT * d, rng, dtype) for _ in range(layers)]
        self.ln_f = LayerNorm(d, dtype=dtype)
        self.q_pool = Parameter(rng.normal(0.0, 0.02, size=d), dtype=dtype)
        self.rng = np.random.default_rng(rng.integers(2 ** 63))
        self._pe = positional_encoding(MAX_TOKENS, d)

    def _embed(self, tokens, token_mask):
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens, dtype=self.inp.weight.dtype)
        if tokens.ndim != 3 or tokens.shape[-1] != self.d_in:
            raise ShapeError(f"expected tokens (B, n, {self.d_in}), got {tokens.shape}")
        B, n, _ = tokens.shape
        if n < 1:
            raise ContractError("need at least one token")
        if n > self._pe.shape[0]:
            self._pe = positional_encoding(n, self.d)
        if token_mask is None:
            token_mask = np.ones((B, n), dtype=bool)
        pe = self._pe[positions_from_mask(token_mask)].astype(tokens.dtype, copy=False)
        return self.inp(tokens) + pe, np.asarray(token_mask, dtype=bool)

    def _run(self, x, mask):
        for blk in self.blocks:
            x = blk(x, mask, self.dropout, self.rng)
        return self.ln_f(x)

    def _attn_mask(self, token_mask, causal, dtype):
        n = token_mask.shape[1]
        mask = np.where(token_mask[:, None, None, :], 0.0, MASK_VALUE)
        if causal:
            mask = mask + np.triu(np.full((n, n), MASK_VALUE), k=1)[None, None]
        return mask.astype(dtype)

    def token_outputs(self, tokens, token_mask=None, causal=True):
        x, token_mask = self._embed(tokens, token_mask)
        return self._run(x, self._attn_mask(token_mask, causal, x.dtype)), token_mask

    def encode_causal(self, tokens, token_mask=None):
        """Summary embedding ``h_t``: causal pass, output at the last token. (B, d)."""
        out, _ = self.token_outputs(tokens, token_mask, causal=True)
        return out[:, -1, :]

    def pool_weights(self, out, token_mask):
        scores = (out @ self.q_pool.reshape(self.d, 1)).reshape(out.shape[0], out.shape[1])
        scores = scores * (1.0 / math.sqrt(self.d))
        mask = np.where(token_mask, 0.0, MASK_VALUE).astype(out.dtype)
        return ops.softmax(scores, mask=mask)

    def encode_target(self, tokens, token_mask=None):
        """Bidirectional pass over the future interval with attention pooling. (B, d)."""
        out, token_mask = self.token_outputs(tokens, token_mask, causal=False)
        if not token_mask.any(axis=1).all():
            raise ContractError("empty target interval")
        w = self.pool_weights(out, token_mask)
        B, n, d = out.shape
        return (w.reshape(B, 1, n) @ out).reshape(B, d)


GELU_GAIN = 1.0 / 0.425     # 1 / E[gelu(x)^2] for x ~ N(0, 1)


class Predictor(Module):
    """Three affine layers on ``[h; dt/K]`` with GELU in between."""

    def __init__(self, rng, d=D_MODEL, dtype=np.float32):
        self.d = d
        self.l1 = Linear(d + 1, d, rng, dtype=dtype)
        self.l2 = Linear(d, d, rng, dtype=dtype)
        self.l3 = Linear(d, d, rng, dtype=dtype)
        # variance-preserving start: unit-scale h_hat, so SIGReg begins near its target
        for layer, gain in ((self.l1, 1.0), (self.l2, GELU_GAIN), (self.l3, GELU_GAIN)):
            layer.weight.data *= math.sqrt(3.0 * gain)
            layer.bias.data[:] = 0.0

    def _tail(self, z):
        return self.l3(ops.gelu(self.l2(ops.gelu(z))))

    def forward(self, h, dt, K):
        """One horizon per row: ``h`` (B, d), ``dt`` (B,) ints in [1, K]. Returns (B, d)."""
        dt = np.asarray(dt)
        if dt.shape != (h.shape[0],):
            raise ShapeError(f"dt must have shape ({h.shape[0]},), got {dt.shape}")
        if dt.min() < 1 or dt.max() > K:
            raise ContractError(f"horizon out of range [1, {K}]")
        s = Tensor((dt / K).reshape(-1, 1), dtype=h.dtype)
        return self._tail(self.l1(ops.concat([h, s], axis=-1)))

    def all_horizons(self, h, K):
        """Every horizon 1..K at once: (B, d) -> (B, K, d).

        The first layer is split as ``h @ W[:d] + (dt/K) * W[d] + b`` so the
        ``h`` product is computed once and broadcast over horizons.
        """
        W, b = self.l1.weight, self.l1.bias
        base = (h @ W[: self.d]).reshape(h.shape[0], 1, self.d)
        s = (np.arange(1, K + 1, dtype=h.dtype) / h.dtype.type(K)).reshape(1, K, 1)
        z = base + W[self.d] * s + b
        return self._tail(z)


class EventHead(Module):
    """LayerNorm then a single logit."""

    def __init__(self, rng, d=D_MODEL, dtype=np.float32):
        self.ln = LayerNorm(d, dtype=dtype)
        self.out = Linear(d, 1, rng, dtype=dtype)

    def forward(self, x):
        z = self.out(self.ln(x))
        return z.reshape(z.shape[:-1])


class HEPAModel(Module):
    """Encoder, predictor and event head with their construction settings."""

    def __init__(self, d_in, seed=0, d=D_MODEL, heads=N_HEADS, layers=N_LAYERS,
                 dropout=DROPOUT, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = dict(d_in=d_in, d=d, heads=heads, layers=layers, dropout=dropout)
        self.encoder = Encoder(d_in, rng, d=d, heads=heads, layers=layers, dropout=dropout, dtype=dtype)
        self.predictor = Predictor(rng, d=d, dtype=dtype)
        self.head = EventHead(rng, d=d, dtype=dtype)

    def parameter_counts(self):
        return {"encoder": self.encoder.num_parameters(),
                "predictor": self.predictor.num_parameters(),
                "head": self.head.num_parameters(),
                "total": self.num_parameters()}
