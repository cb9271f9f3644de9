"""Turn raw multivariate windows into token sequences.

A window is an array of shape ``(S, T)`` (channels by steps). Tokens fuse all
channels of ``P`` consecutive steps into one vector of size ``S * P``, laid out
channel-major: ``token[c * P + k] = window[c, i * P + k]``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

NORM_EPS = 1e-5


@dataclass
class TokenSequence:
    tokens: np.ndarray       # (n_tokens, S*P)
    token_mask: np.ndarray   # (n_tokens,) True for tokens holding at least one real step
    step_mask: np.ndarray    # (n_tokens, P) True for real (unpadded) steps
    positions: np.ndarray    # (n_tokens,) 0..n_tokens-1
    norm_stats: tuple = None  # (mean, std) per channel, when normalised

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


def instance_normalize(values, eps=NORM_EPS, stats=None):
    """Standardise each channel over the last (time) axis.

    Uses the population std floored at ``eps``. Works on ``(S, T)`` or any
    ``(..., S, T)`` batch. When ``stats`` is given, those are applied instead of
    being recomputed (used for a target window that must share its context's
    scale). Returns ``(normalised, (mean, std))`` with ``mean``/``std`` of shape
    ``(..., S)``.
    """
    values = np.asarray(values)
    if values.shape[-1] < 1:
        raise ContractError("instance_normalize needs at least one step")
    if stats is None:
        mean = values.mean(axis=-1)
        std = np.maximum(values.std(axis=-1), eps)
    else:
        mean, std = stats
    out = (values - mean[..., None]) / std[..., None]
    return out.astype(values.dtype, copy=False), (mean, std)


def denormalize(values, stats):
    mean, std = stats
    return values * std[..., None] + mean[..., None]


def n_tokens_for(T, P):
    return -(-T // P)


def patchify(window, P, n_tokens=None):
    """Split ``(S, T)`` into non-overlapping patches of ``P`` steps.

    The window is left-padded with zeros to ``n_tokens * P`` steps (by default
    the smallest multiple of ``P`` that holds ``T``); padded steps are recorded
    in ``step_mask`` and fully padded tokens in ``token_mask``.
    """
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[1] == 0:
        raise ContractError(f"patchify needs a non-empty (S, T) window, got {window.shape}")
    if P < 1:
        raise ContractError("patch size must be >= 1")
    S, T = window.shape
    need = n_tokens_for(T, P)
    n = need if n_tokens is None else n_tokens
    if n < need:
        raise ContractError(f"{T} steps do not fit in {n} tokens of size {P}")
    pad = n * P - T
    full = np.zeros((S, n * P), dtype=window.dtype)
    full[:, pad:] = window
    tokens = full.reshape(S, n, P).transpose(1, 0, 2).reshape(n, S * P)
    steps = np.arange(n * P).reshape(n, P) >= pad
    return TokenSequence(tokens=tokens, token_mask=steps.any(axis=1), step_mask=steps,
                         positions=np.arange(n))


def unpatchify(seq, S):
    """Inverse of :func:`patchify`; returns only the real (unpadded) steps."""
    n, dim = seq.tokens.shape
    P = dim // S
    full = seq.tokens.reshape(n, S, P).transpose(1, 0, 2).reshape(S, n * P)
    return full[:, seq.step_mask.reshape(-1)]


def patchify_batch(windows, P, n_tokens):
    """Patchify equal-length windows ``(B, S, T)`` in one shot.

    Returns ``(tokens (B, n, S*P), token_mask (B, n))``.
    """
    windows = np.asarray(windows)
    B, S, T = windows.shape
    pad = n_tokens * P - T
    if pad < 0:
        raise ContractError(f"{T} steps do not fit in {n_tokens} tokens of size {P}")
    if pad:
        full = np.zeros((B, S, n_tokens * P), dtype=windows.dtype)
        full[:, :, pad:] = windows
    else:
        full = windows
    tokens = full.reshape(B, S, n_tokens, P).transpose(0, 2, 1, 3).reshape(B, n_tokens, S * P)
    valid = np.arange(n_tokens) * P + P > pad
    return np.ascontiguousarray(tokens), np.broadcast_to(valid, (B, n_tokens)).copy()


def positional_encoding(n_tokens, d):
    """Interleaved sinusoidal encoding: even dims sin, odd dims cos, base 10000."""
    if d % 2:
        raise ContractError("positional encoding needs an even dimension")
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((n_tokens, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(np.float32)


def positions_from_mask(token_mask):
    """Per-sample positions that start at 0 on the first real token."""
    token_mask = np.asarray(token_mask, dtype=bool)
    first = token_mask.argmax(axis=-1)
    pos = np.arange(token_mask.shape[-1]) - first[..., None]
    return np.maximum(pos, 0)
