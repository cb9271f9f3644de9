"""Probability surfaces and their text file format.

File layout::

    HEPA-SURFACE v1, K=<int>, dataset=<id>, seed=<int>
    episode,t,dt,p,y,mask
    <one row per (anchor, horizon) cell>

``p`` is written with 9 significant digits, which round-trips float32 exactly.
"""
import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, LoadError

HEADER_RE = re.compile(r"^HEPA-SURFACE v(\d+), K=(\d+), dataset=(.*), seed=(-?\d+)$")
COLUMNS = "episode,t,dt,p,y,mask"
FORMAT_VERSION = 1
# largest float32 strictly below 1, so 1 - p never underflows to an exact zero
P_MAX = np.float32(1.0 - 2.0 ** -24)


@dataclass
class ProbabilitySurface:
    episode: np.ndarray   # (n,) episode ids (str)
    t: np.ndarray         # (n,) anchor steps
    p: np.ndarray         # (n, K) float32 cumulative probabilities
    y: np.ndarray         # (n, K) uint8 cumulative labels
    mask: np.ndarray      # (n, K) bool validity
    dataset: str = "unknown"
    seed: int = 0

    def __post_init__(self):
        self.episode = np.asarray(self.episode).astype(str)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.minimum(np.asarray(self.p, dtype=np.float32), P_MAX)
        self.y = np.asarray(self.y, dtype=np.uint8)
        self.mask = np.asarray(self.mask, dtype=bool)
        n = self.t.shape[0]
        if self.p.ndim != 2 or self.p.shape[0] != n or self.y.shape != self.p.shape \
                or self.mask.shape != self.p.shape or self.episode.shape != (n,):
            raise ContractError("surface arrays have inconsistent shapes")

    @property
    def K(self):
        return self.p.shape[1]

    @property
    def n_rows(self):
        return self.p.shape[0]

    def is_monotone(self):
        return bool(np.all(np.diff(self.p, axis=1) >= 0))

    def subset(self, rows):
        rows = np.asarray(rows)
        return ProbabilitySurface(self.episode[rows], self.t[rows], self.p[rows], self.y[rows],
                                  self.mask[rows], self.dataset, self.seed)

    @classmethod
    def concat(cls, parts, dataset="unknown", seed=0):
        return cls(np.concatenate([s.episode for s in parts]), np.concatenate([s.t for s in parts]),
                   np.concatenate([s.p for s in parts]), np.concatenate([s.y for s in parts]),
                   np.concatenate([s.mask for s in parts]), dataset, seed)


def write_surface(path, s):
    K = s.K
    with open(path, "w") as fh:
        fh.write(f"HEPA-SURFACE v{FORMAT_VERSION}, K={K}, dataset={s.dataset}, seed={s.seed}\n")
        fh.write(COLUMNS + "\n")
        dts = np.arange(1, K + 1)
        for i in range(s.n_rows):
            ep, t = s.episode[i], s.t[i]
            p, y, m = s.p[i], s.y[i], s.mask[i].astype(np.uint8)
            fh.write("".join(f"{ep},{t},{dt},{pv:.9g},{yv},{mv}\n"
                             for dt, pv, yv, mv in zip(dts, p.tolist(), y.tolist(), m.tolist())))


def read_surface(path):
    """Parse a surface file; malformed content raises LoadError with the line number."""
    try:
        fh = open(path)
    except OSError as exc:
        raise LoadError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        head = fh.readline().rstrip("\n")
        m = HEADER_RE.match(head)
        if not m:
            raise LoadError("bad surface header", 1)
        if int(m.group(1)) != FORMAT_VERSION:
            raise LoadError(f"unsupported surface version {m.group(1)}", 1)
        K, dataset, seed = int(m.group(2)), m.group(3), int(m.group(4))
        if K < 1:
            raise LoadError("K must be >= 1", 1)
        if fh.readline().strip() != COLUMNS:
            raise LoadError(f"expected column line {COLUMNS!r}", 2)
        eps, ts, ps, ys, ms = [], [], [], [], []
        row_p = row_y = row_m = None
        for line_no, line in enumerate(fh, start=3):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 6:
                raise LoadError(f"expected 6 fields, got {len(cells)}", line_no)
            try:
                t, dt = int(cells[1]), int(cells[2])
                p = float(np.float32(cells[3]))
                y, mk = int(cells[4]), int(cells[5])
            except ValueError:
                raise LoadError("non-numeric field", line_no) from None
            if y not in (0, 1) or mk not in (0, 1) or not 0.0 <= p <= 1.0:
                raise LoadError("field out of range", line_no)
            if dt == 1:
                if row_p is not None and len(row_p) != K:
                    raise LoadError(f"anchor has {len(row_p)} horizons, expected {K}", line_no)
                eps.append(cells[0])
                ts.append(t)
                row_p, row_y, row_m = [], [], []
                ps.append(row_p)
                ys.append(row_y)
                ms.append(row_m)
            elif row_p is None or dt != len(row_p) + 1 or cells[0] != eps[-1] or t != ts[-1]:
                raise LoadError("horizon rows out of order", line_no)
            row_p.append(p)
            row_y.append(y)
            row_m.append(mk)
        if row_p is None:
            raise LoadError("surface has no rows", 3)
        if len(row_p) != K:
            raise LoadError(f"last anchor has {len(row_p)} horizons, expected {K}", line_no)
    return ProbabilitySurface(np.array(eps), np.array(ts), np.array(ps, dtype=np.float32),
                              np.array(ys), np.array(ms, dtype=bool), dataset, seed)
