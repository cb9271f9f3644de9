"""Binary checkpoints: named little-endian float32 tensors plus a JSON metadata blob.

Layout::

    b"HEPA"                      magic
    u32 version                  FORMAT_VERSION
    u32 n_meta, n_meta bytes     UTF-8 JSON metadata
    u32 n_tensors
    per tensor:
        u32 n_name, name bytes   UTF-8
        u32 rank, rank * u32     dims
        prod(dims) * f32         values, C order

All integers are little-endian.
"""
import hashlib
import json
import struct

import numpy as np

from .errors import LoadError

MAGIC = b"HEPA"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def config_hash(config):
    """Short stable digest of a JSON-serialisable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors, metadata=None):
    """Write ``tensors`` (name -> array) and ``metadata`` (JSON-able dict) to ``path``."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode()
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise LoadError(f"truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path):
    """Returns ``(tensors, metadata)``; bad magic, unknown version or truncation raise LoadError."""
    try:
        with open(path, "rb") as fh:
            r = _Reader(fh.read())
    except OSError as exc:
        raise LoadError(f"cannot open {path}: {exc.strerror}") from None
    if r.take(4) != MAGIC:
        raise LoadError(f"{path} is not a HEPA checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    try:
        metadata = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise LoadError("corrupt checkpoint metadata") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        dims = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise LoadError("trailing bytes after last tensor")
    return tensors, metadata


# -- model helpers -----------------------------------------------------------

def save_model(path, model, **metadata):
    meta = dict(metadata, kind="hepa", model=model.config)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    """Rebuild a :class:`HEPAModel` from a checkpoint written by :func:`save_model`."""
    from .network import HEPAModel
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "hepa":
        raise LoadError(f"{path} does not hold a pretrained model")
    model = HEPAModel(seed=0, **meta["model"])
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{path}: {exc}") from None
    return model, meta


def save_event_model(path, event_model, **metadata):
    tensors = {f"predictor.{k}": v for k, v in event_model.predictor.state_dict().items()}
    tensors.update({f"head.{k}": v for k, v in event_model.head.state_dict().items()})
    meta = dict(metadata, kind="event", mode=event_model.mode, K=event_model.K, d=event_model.predictor.d)
    save_checkpoint(path, tensors, meta)


def load_event_model(path):
    from .network import EventHead, Predictor
    from .survival import EventModel
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "event":
        raise LoadError(f"{path} does not hold a finetuned event model")
    rng = np.random.default_rng(0)
    predictor, head = Predictor(rng, d=meta["d"]), EventHead(rng, d=meta["d"])
    try:
        predictor.load_state_dict({k[10:]: v for k, v in tensors.items() if k.startswith("predictor.")})
        head.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{path}: {exc}") from None
    return EventModel(predictor, head, meta["mode"], meta["K"]), meta
