"""Episodes, CSV ingestion, preprocessing, cumulative labels and synthetic data."""
import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import ConfigurationError, LoadError
from .featurizer import instance_normalize, n_tokens_for, patchify_batch

log = logging.getLogger(__name__)

CONSTANT_VAR = 1e-8
RESERVED = ("episode_id", "time", "event", "split")


@dataclass
class Episode:
    id: str
    values: np.ndarray            # (S, T) float32
    event_times: np.ndarray       # sorted int steps in [0, T)
    split: str = "train"
    latent: Optional[np.ndarray] = None  # (T,) generator state, synthetic data only
    rate: Optional[np.ndarray] = None    # (T,) latent growth rate, synthetic data only

    @property
    def T(self):
        return self.values.shape[1]

    def __post_init__(self):
        self.event_times = np.asarray(self.event_times, dtype=np.int64)


@dataclass
class DatasetSpec:
    name: str = "dataset"
    csv_paths: list = field(default_factory=list)
    channels: Optional[list] = None
    drop_constant: bool = True
    normalization: str = "zscore_train"   # or "minmax_subset" or "none"
    context_len: int = 512
    lifecycle: bool = False
    patch: int = 16
    K: int = 200
    rul_cap: Optional[int] = None
    stride: Optional[int] = None
    max_tokens: int = 512
    test_fraction: float = 0.2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown dataset fields: {unknown}")
        return cls(**known)


# -- CSV -------------------------------------------------------------------

def _parse_float(cell, line):
    cell = cell.strip()
    if cell == "" or cell.lower() in ("nan", "na"):
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise LoadError(f"non-numeric cell {cell!r}", line) from None


def _fill_missing(values):
    """Forward-fill along time, then replace anything still missing with 0."""
    out = values.copy()
    for c in range(out.shape[0]):
        row = out[c]
        bad = np.isnan(row)
        if bad.any():
            idx = np.where(~bad, np.arange(row.size), 0)
            np.maximum.accumulate(idx, out=idx)
            row[:] = row[idx]
            row[np.isnan(row)] = 0.0
    return out


def read_csv(path, channels=None):
    """Parse one CSV file into raw episodes (no normalisation)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise LoadError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LoadError(f"{path}: empty file", 1)
        header = [h.strip() for h in header]
        for col in ("episode_id", "time", "event"):
            if col not in header:
                raise LoadError(f"{path}: missing column {col!r}", 1)
        data_cols = [h for h in header if h not in RESERVED]
        if channels is not None:
            unknown = [h for h in data_cols if h not in channels]
            missing = [c for c in channels if c not in data_cols]
            if unknown or missing:
                raise LoadError(f"{path}: unknown columns {unknown}, missing channels {missing}", 1)
            data_cols = list(channels)
        col_idx = [header.index(c) for c in data_cols]
        i_ep, i_t, i_ev = header.index("episode_id"), header.index("time"), header.index("event")
        i_split = header.index("split") if "split" in header else None

        episodes, order = {}, []
        prev = None
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise LoadError(f"expected {len(header)} cells, got {len(row)}", line)
            ep = row[i_ep].strip()
            t = _parse_float(row[i_t], line)
            if math.isnan(t):
                raise LoadError("missing time", line)
            if prev is not None:
                if ep == prev[0] and t <= prev[1]:
                    raise LoadError("rows not sorted by time within episode", line)
                if ep != prev[0] and ep in episodes:
                    raise LoadError(f"episode {ep!r} is not contiguous", line)
            prev = (ep, t)
            ev = _parse_float(row[i_ev], line)
            if ev not in (0.0, 1.0):
                raise LoadError(f"event must be 0 or 1, got {row[i_ev]!r}", line)
            if ep not in episodes:
                split = row[i_split].strip() if i_split is not None else None
                episodes[ep] = {"rows": [], "events": [], "split": split}
                order.append(ep)
            rec = episodes[ep]
            rec["rows"].append([_parse_float(row[j], line) for j in col_idx])
            rec["events"].append(ev)
        if not order:
            raise LoadError(f"{path}: no data rows", 2)

    out = []
    for ep in order:
        rec = episodes[ep]
        vals = np.asarray(rec["rows"], dtype=np.float64).T.reshape(len(data_cols), -1)
        events = np.flatnonzero(np.asarray(rec["events"]) > 0)
        out.append(Episode(ep, _fill_missing(vals), events, rec["split"] or ""))
    return out, data_cols


def load_csv(spec):
    """Load every CSV of ``spec`` and assign splits. Returns ``(episodes, channels)``."""
    if not spec.csv_paths:
        raise ConfigurationError("dataset spec lists no CSV files")
    episodes, channels = [], None
    for path in spec.csv_paths:
        eps, cols = read_csv(path, spec.channels)
        if channels is not None and cols != channels:
            raise LoadError(f"{path}: channel columns differ from {spec.csv_paths[0]}")
        channels = cols
        episodes.extend(eps)
    if any(not e.split for e in episodes):
        assign_splits(episodes, spec.test_fraction)
    return episodes, channels


def write_csv(path, episodes, channels):
    """Export episodes in the ingestion schema (values at 9 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode_id", "time", *channels, "event", "split"])
        for ep in episodes:
            ev = np.zeros(ep.T, dtype=int)
            ev[ep.event_times] = 1
            for t in range(ep.T):
                w.writerow([ep.id, t, *(f"{v:.9g}" for v in ep.values[:, t]), ev[t], ep.split])


def assign_splits(episodes, test_fraction):
    """Last ``test_fraction`` of episodes (file order) become test, the rest train."""
    n = len(episodes)
    n_test = int(round(test_fraction * n)) if n > 1 else 0
    for i, ep in enumerate(episodes):
        ep.split = "test" if i >= n - n_test else "train"


# -- preprocessing ---------------------------------------------------------

def fit_preprocessing(episodes, mode="zscore_train", drop_constant=True):
    """Statistics from train episodes only."""
    train = [e.values for e in episodes if e.split == "train"]
    if not train:
        raise ConfigurationError("no train episodes")
    allv = np.concatenate(train, axis=1).astype(np.float64)
    var = allv.var(axis=1)
    keep = var >= CONSTANT_VAR if drop_constant else np.ones(var.size, dtype=bool)
    if mode == "zscore_train":
        loc, scale = allv.mean(axis=1), np.sqrt(var)
    elif mode == "minmax_subset":
        loc = allv.min(axis=1)
        scale = allv.max(axis=1) - loc
    elif mode == "none":
        loc, scale = np.zeros(var.size), np.ones(var.size)
    else:
        raise ConfigurationError(f"unknown normalization {mode!r}")
    scale = np.where(scale > 0, scale, 1.0)
    return {"keep": keep, "loc": loc, "scale": scale}


def apply_preprocessing(episodes, stats):
    keep, loc, scale = stats["keep"], stats["loc"], stats["scale"]
    out = []
    for e in episodes:
        v = ((e.values - loc[:, None]) / scale[:, None])[keep].astype(np.float32)
        out.append(Episode(e.id, v, e.event_times, e.split, e.latent, e.rate))
    return out


# -- labels ----------------------------------------------------------------

def build_labels(event_times, T, anchors, K):
    """Cumulative labels ``y[i, dt-1] = 1`` iff an event ``e`` has ``t < e <= t + dt``.

    ``mask`` is False for right-censored cells: ``t + dt > T - 1`` with no event
    in the interval.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    ev = np.asarray(event_times, dtype=np.int64)
    never = np.iinfo(np.int64).max // 2
    if ev.size:
        pos = np.searchsorted(ev, anchors, side="right")
        nxt = np.where(pos < ev.size, ev[np.minimum(pos, ev.size - 1)], never)
    else:
        nxt = np.full(anchors.shape, never)
    dts = np.arange(1, K + 1)
    y = (nxt[:, None] - anchors[:, None]) <= dts[None, :]
    mask = y | (anchors[:, None] + dts[None, :] <= T - 1)
    return y.astype(np.uint8), mask


def rul_truth(episode, anchors, rul_cap=None):
    """Steps to the next event (lifecycle ground truth), optionally capped."""
    anchors = np.asarray(anchors, dtype=np.int64)
    ev = episode.event_times
    pos = np.searchsorted(ev, anchors, side="right")
    if np.any(pos >= ev.size):
        raise ConfigurationError(f"episode {episode.id}: anchor without a later event")
    rul = ev[pos] - anchors
    return np.minimum(rul, rul_cap) if rul_cap is not None else rul


# -- dataset container -----------------------------------------------------

class SeriesDataset:
    """Preprocessed episodes plus the windowing/tokenisation settings."""

    def __init__(self, episodes, channels, spec):
        self.episodes = list(episodes)
        self.channels = list(channels)
        self.spec = spec
        if spec.lifecycle:
            self.n_context_tokens = min(spec.max_tokens, max(n_tokens_for(e.T, spec.patch) for e in self.episodes))
        else:
            self.n_context_tokens = n_tokens_for(spec.context_len, spec.patch)
        self.n_context_tokens = max(self.n_context_tokens, 1)

    @property
    def name(self):
        return self.spec.name

    @property
    def K(self):
        return self.spec.K

    @property
    def S(self):
        return len(self.channels)

    @property
    def d_in(self):
        return self.S * self.spec.patch

    def split(self, which):
        return [e for e in self.episodes if e.split == which]

    def default_stride(self):
        if self.spec.stride:
            return self.spec.stride
        return 1 if self.spec.lifecycle else 8

    def first_anchor(self):
        return 0 if self.spec.lifecycle else self.spec.context_len - 1

    def anchors(self, episode, stride=None):
        """Anchor steps with a full context and a non-empty future."""
        stride = stride or self.default_stride()
        return np.arange(self.first_anchor(), episode.T - 1, stride, dtype=np.int64)

    def context_tokens(self, episode, anchors):
        """Tokenised, instance-normalised contexts ending at each anchor.

        Returns ``(tokens (B, n, S*P), token_mask (B, n), stats)`` where ``stats``
        is the ``(mean, std)`` pair per sample (each ``(B, S)``).
        """
        return self.batch_context_tokens([(episode, t) for t in np.asarray(anchors)])

    def batch_context_tokens(self, pairs):
        P = self.spec.patch
        n = self.n_context_tokens
        if not self.spec.lifecycle:
            L = self.spec.context_len
            win = np.stack([ep.values[:, t - L + 1: t + 1] for ep, t in pairs])
            win, stats = instance_normalize(win)
            tokens, mask = patchify_batch(win, P, n)
            return tokens, mask, stats
        # lifecycle: full history, left-padded to n tokens, keeping the most recent steps
        S = self.S
        cap = n * P
        B = len(pairs)
        win = np.zeros((B, S, cap), dtype=np.float32)
        steps = np.zeros((B, cap), dtype=bool)
        means = np.zeros((B, S), dtype=np.float32)
        stds = np.zeros((B, S), dtype=np.float32)
        for i, (ep, t) in enumerate(pairs):
            h = ep.values[:, max(0, t + 1 - cap): t + 1]
            hn, (m, s) = instance_normalize(h)
            win[i, :, cap - h.shape[1]:] = hn
            steps[i, cap - h.shape[1]:] = True
            means[i], stds[i] = m, s
        tokens, _ = patchify_batch(win, P, n)
        mask = steps.reshape(B, n, P).any(axis=2)
        return tokens, mask, (means, stds)

    def target_tokens(self, pairs, dts, stats):
        """Tokenised future intervals ``(t, t + dt]`` scaled with the context stats."""
        P = self.spec.patch
        dts = np.asarray(dts, dtype=np.int64)
        n = n_tokens_for(int(dts.max()), P)
        B, S = len(pairs), self.S
        win = np.zeros((B, S, n * P), dtype=np.float32)
        steps = np.zeros((B, n * P), dtype=bool)
        mean, std = stats
        for i, ((ep, t), dt) in enumerate(zip(pairs, dts)):
            seg = ep.values[:, t + 1: t + 1 + dt]
            win[i, :, n * P - dt:] = (seg - mean[i][:, None]) / std[i][:, None]
            steps[i, n * P - dt:] = True
        tokens, _ = patchify_batch(win, P, n)
        return tokens, steps.reshape(B, n, P).any(axis=2)

    def labels(self, episode, anchors):
        return build_labels(episode.event_times, episode.T, anchors, self.K)


def prepare(episodes, channels, spec):
    """Fit preprocessing on train, apply it and build the dataset container."""
    stats = fit_preprocessing(episodes, spec.normalization, spec.drop_constant)
    kept = [c for c, k in zip(channels, stats["keep"]) if k]
    if not kept:
        raise ConfigurationError("every channel is constant on the train split")
    return SeriesDataset(apply_preprocessing(episodes, stats), kept, spec)


def load_dataset(spec):
    episodes, channels = load_csv(spec)
    return prepare(episodes, channels, spec)


def iterate_anchors(dataset, episode, stride=None):
    """Yield ``(t, context (S, len), y (K,), mask (K,))`` for each anchor of ``episode``."""
    ts = dataset.anchors(episode, stride)
    if ts.size == 0:
        log.warning("episode %s is shorter than one context; no anchors", episode.id)
        return
    y, mask = dataset.labels(episode, ts)
    for i, t in enumerate(ts):
        if dataset.spec.lifecycle:
            start = max(0, t + 1 - dataset.n_context_tokens * dataset.spec.patch)
        else:
            start = t + 1 - dataset.spec.context_len
        yield int(t), episode.values[:, start: t + 1], y[i], mask[i]


# -- synthetic precursor process -------------------------------------------

@dataclass
class SyntheticSpec:
    n_episodes: int = 200
    S: int = 5
    T: int = 600
    beta: float = 2.0
    noise: float = 0.1
    base_rate: float = 0.0002
    gamma: float = 10.0
    threshold: float = 5.0
    growth: tuple = (0.005, 0.01)
    season_period: tuple = (12, 48)
    ar: float = 0.8
    ar_scale: float = 0.3
    lifecycle: bool = False
    max_T: int = 400
    constant: bool = False
    test_fraction: float = 0.2
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["growth"] = list(self.growth)
        d["season_period"] = list(self.season_period)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(f"unknown synthetic fields: {unknown}")
        d = dict(d)
        for k in ("growth", "season_period"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def hazard_of(latent, spec):
    """Per-step event probability: a background rate plus a logistic rise at ``threshold``."""
    rise = 0.5 * (1.0 + np.tanh(0.5 * spec.gamma * (np.asarray(latent) - spec.threshold)))
    return spec.base_rate + (1.0 - spec.base_rate) * rise


def _simulate_latent(rng, spec):
    """Latent degradation path and event steps.

    The state is ``expm1(r * age)``: zero right after a renewal, growing
    monotonically and faster than linearly so its level shows in the local slope.
    """
    T = spec.max_T if spec.lifecycle else spec.T
    z = np.zeros(T)
    rate = np.zeros(T)
    events = []
    age, r = 0, rng.uniform(*spec.growth)
    for t in range(T):
        z[t] = math.expm1(r * age)
        rate[t] = r
        if rng.random() < hazard_of(z[t], spec):
            events.append(t)
            if spec.lifecycle:
                return z[: t + 1], rate[: t + 1], np.array(events)
            age, r = 0, rng.uniform(*spec.growth)
        else:
            age += 1
    if spec.lifecycle:
        # censored at max_T: force the failure at the last step to keep run-to-failure form
        return z, rate, np.array([T - 1])
    return z, rate, np.array(events, dtype=np.int64)


def generate_synthetic(spec):
    """Episodes whose channels carry ``beta``-scaled views of the latent state.

    ``beta = 0`` makes the observations independent of the events.
    """
    rng = np.random.default_rng(spec.seed)
    S = spec.S
    loadings = rng.uniform(0.5, 1.5, size=S) * rng.choice([-1.0, 1.0], size=S)
    periods = rng.uniform(*spec.season_period, size=S)
    episodes = []
    for i in range(spec.n_episodes):
        z, rate, events = _simulate_latent(rng, spec)
        T = z.size
        if spec.constant:
            # flat level plus white measurement noise: nothing to predict beyond the mean
            values = 1.0 + rng.normal(size=(S, T))
        else:
            phase = rng.uniform(0, 2 * np.pi, size=S)
            t = np.arange(T)
            season = np.sin(2 * np.pi * t[None, :] / periods[:, None] + phase[:, None])
            ar = np.zeros((S, T))
            innov = rng.normal(0.0, spec.ar_scale, size=(S, T))
            for k in range(1, T):
                ar[:, k] = spec.ar * ar[:, k - 1] + innov[:, k]
            values = (spec.beta * loadings[:, None] * z[None, :] + season + ar
                      + spec.noise * rng.normal(size=(S, T)))
        episodes.append(Episode(f"syn{i:04d}", values.astype(np.float32), events, "", z, rate))
    assign_splits(episodes, spec.test_fraction)
    return episodes, [f"ch{c}" for c in range(S)]


def synthetic_dataset(syn, **spec_overrides):
    """Generate, preprocess and wrap a synthetic dataset."""
    episodes, channels = generate_synthetic(syn)
    defaults = dict(name=f"synthetic-b{syn.beta:g}-s{syn.seed}", lifecycle=syn.lifecycle,
                    normalization="zscore_train")
    defaults.update(spec_overrides)
    return prepare(episodes, channels, DatasetSpec(**defaults))


def shuffle_train_labels(label_rows, rng):
    """Permute whole label rows among training anchors (labels lose their inputs)."""
    perm = rng.permutation(len(label_rows[0]))
    return tuple(a[perm] for a in label_rows)


def oracle_probabilities(episode, anchors, K, spec):
    """Exact ``P(first event in (t, t + dt])`` given the latent state at each anchor.

    The latent path until the next event is deterministic given its current
    value and growth rate, so the survival product over the continued hazard
    is the best achievable score.
    """
    z = episode.latent[anchors]
    r = episode.rate[anchors]
    age = np.log1p(z) / r
    future = np.expm1(r[:, None] * (age[:, None] + np.arange(1, K + 1)[None, :]))
    lam = hazard_of(future, spec)
    with np.errstate(divide="ignore"):   # lam == 1 gives log 0 = -inf, i.e. certain event
        return -np.expm1(np.cumsum(np.log1p(-lam), axis=1))


def oracle_surface(dataset, spec, split="test", stride=None):
    """Latent-state scorer over every anchor of ``split``: the ceiling for synthetic data."""
    from .surface import ProbabilitySurface
    ids, ts, ps, ys, ms = [], [], [], [], []
    for e in dataset.split(split):
        a = dataset.anchors(e, stride)
        if a.size == 0:
            continue
        y, m = dataset.labels(e, a)
        ids += [e.id] * a.size
        ts.append(a)
        ps.append(oracle_probabilities(e, a, dataset.K, spec))
        ys.append(y)
        ms.append(m)
    return ProbabilitySurface(np.array(ids), np.concatenate(ts), np.concatenate(ps).astype(np.float32),
                              np.concatenate(ys), np.concatenate(ms), dataset.name, spec.seed)
