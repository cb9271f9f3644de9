"""Self-supervised stage: predict the embedding of a future interval from the past.

Per step: sample anchors ``t`` and horizons ``dt``, encode the context causally
(``h_t``), encode the future interval ``(t, t + dt]`` bidirectionally with the
same weights (``h*``), predict ``h_hat = g(h_t, dt)``, and minimise
``(1 - alpha) * L1(n(h_hat), n(h*)) + alpha * SIGReg(h_hat)``.
"""
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import AdamW, Tensor, no_grad, ops
from .errors import ConfigurationError, ContractError
from .network import HEPAModel

log = logging.getLogger(__name__)

SIGREG_EPS = 1e-6


@dataclass
class PretrainConfig:
    alpha: float = 0.1
    lr: float = 3e-4
    weight_decay: float = 1e-2
    batch: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    snapshot_epochs: tuple = (1, 3, 8, 25)
    sigreg_directions: int = 16
    max_steps_per_epoch: int = 512
    min_epochs: int = 0
    val_fraction: float = 0.1
    val_samples: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        self.snapshot_epochs = tuple(sorted(int(e) for e in self.snapshot_epochs))

    def to_dict(self):
        d = asdict(self)
        d["snapshot_epochs"] = list(self.snapshot_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(f"unknown pretrain fields: {unknown}")
        return cls(**d)


@dataclass
class TrainingSnapshot:
    epoch: int
    epsilon: float
    state: dict = field(repr=False)
    label: str = ""


@dataclass
class PretrainResult:
    model: HEPAModel
    best_epoch: int
    best_state: dict
    snapshots: list
    history: list
    config: PretrainConfig
    stopped_early: bool = False


# -- losses ----------------------------------------------------------------

def sample_horizon(rng, dt_max, size=None):
    """``round(exp(U * ln dt_max))`` clamped to ``[1, dt_max]``; ``dt_max`` may be an array."""
    dt_max = np.asarray(dt_max)
    if np.any(dt_max < 1):
        raise ContractError("dt_max must be >= 1")
    if size is None:
        size = dt_max.shape
    u = rng.random(size)
    dt = np.rint(np.exp(u * np.log(dt_max)))
    return np.clip(dt, 1, dt_max).astype(np.int64)


def random_directions(rng, d, m):
    u = rng.normal(size=(d, m))
    return u / np.linalg.norm(u, axis=0, keepdims=True)


def sigreg_loss(h_hat, rng=None, m=16, directions=None):
    """Moment matching of random 1-D projections to N(0, 1).

    Per direction: ``mean^2 + (var - 1)^2 + skew^2 + excess_kurtosis^2`` with
    population moments; averaged over directions.
    """
    if h_hat.ndim != 2 or h_hat.shape[0] < 2:
        raise ContractError("sigreg needs a (B, d) batch with B >= 2")
    if directions is None:
        directions = random_directions(rng, h_hat.shape[1], m)
    proj = h_hat @ Tensor(directions, dtype=h_hat.dtype)
    mu = proj.mean(axis=0)
    c = proj - mu
    var = (c * c).mean(axis=0)
    z = c / ops.sqrt(var + SIGREG_EPS)
    z2 = z * z
    skew = (z2 * z).mean(axis=0)
    kurt = (z2 * z2).mean(axis=0) - 3.0
    per_dir = mu * mu + (var - 1.0) ** 2 + skew * skew + kurt * kurt
    return per_dir.mean()


def l1_term(h_hat, h_star):
    """Mean absolute difference between L2-normalised rows."""
    return ops.abs(ops.l2_normalize(h_hat) - ops.l2_normalize(h_star)).mean()


def jepa_loss(h_hat, h_star, alpha, rng=None, m=16, directions=None):
    """Returns ``(total, l1, sigreg)``; ``sigreg`` is None when ``alpha == 0``."""
    if h_hat.shape != h_star.shape:
        raise ContractError(f"shape mismatch {h_hat.shape} vs {h_star.shape}")
    l1 = l1_term(h_hat, h_star)
    if alpha == 0.0:
        return l1, l1, None
    sig = sigreg_loss(h_hat, rng, m, directions)
    return l1 * (1.0 - alpha) + sig * alpha, l1, sig


# -- sampling --------------------------------------------------------------

def direction_variances(h_hat, directions):
    """Sample variance of ``h_hat`` (n, d) projected on each unit direction (d, m)."""
    proj = np.asarray(h_hat, dtype=np.float64) @ np.asarray(directions, dtype=np.float64)
    return proj.var(axis=0, ddof=1)


def split_validation(episodes, fraction):
    """Last ``fraction`` of episodes held out (at least one when there are two or more)."""
    n = len(episodes)
    if n < 2 or fraction <= 0:
        return list(episodes), []
    n_val = max(1, int(math.ceil(fraction * n)))
    return list(episodes[: n - n_val]), list(episodes[n - n_val:])


def anchor_pool(dataset, episodes):
    """All ``(episode index, t)`` with a full context and at least one future step."""
    eps, ts = [], []
    for i, ep in enumerate(episodes):
        t = np.arange(dataset.first_anchor(), ep.T - 1)
        eps.append(np.full(t.size, i))
        ts.append(t)
    if not eps or sum(t.size for t in ts) == 0:
        raise ConfigurationError("no episode is long enough for a (t, dt) pair")
    return np.concatenate(eps), np.concatenate(ts)


def make_batch(dataset, episodes, ep_idx, ts, dts):
    pairs = [(episodes[i], int(t)) for i, t in zip(ep_idx, ts)]
    ctx, ctx_mask, stats = dataset.batch_context_tokens(pairs)
    tgt, tgt_mask = dataset.target_tokens(pairs, dts, stats)
    return ctx, ctx_mask, tgt, tgt_mask


def forward_pair(model, K, batch, dts):
    ctx, ctx_mask, tgt, tgt_mask = batch
    h = model.encoder.encode_causal(ctx, ctx_mask)
    h_hat = model.predictor(h, dts, K)
    h_star = model.encoder.encode_target(tgt, tgt_mask)
    return h_hat, h_star


def sample_pairs(rng, dataset, pool, n):
    ep_idx, ts = pool
    pick = rng.integers(0, ep_idx.size, size=n)
    return ep_idx[pick], ts[pick]


def horizons_for(rng, dataset, episodes, ep_idx, ts):
    T = np.array([episodes[i].T for i in ep_idx])
    dt_max = np.minimum(dataset.K, T - 1 - ts)
    return sample_horizon(rng, dt_max)


# -- training loop ---------------------------------------------------------

class _Validator:
    """Fixed (anchor, horizon) sample and fixed SIGReg directions for comparable epochs."""

    def __init__(self, dataset, episodes, cfg, d):
        rng = np.random.default_rng(cfg.seed + 7919)
        self.dataset = dataset
        self.episodes = episodes
        pool = anchor_pool(dataset, episodes)
        n = min(cfg.val_samples, pool[0].size)
        self.ep_idx, self.ts = sample_pairs(rng, dataset, pool, n)
        self.dts = horizons_for(rng, dataset, episodes, self.ep_idx, self.ts)
        self.directions = random_directions(rng, d, cfg.sigreg_directions)
        self.batch = cfg.batch

    def __call__(self, model):
        was = model.training
        model.eval()
        l1s, ws = [], []
        hats = []
        with no_grad():
            for s in range(0, self.ts.size, self.batch):
                sl = slice(s, s + self.batch)
                b = make_batch(self.dataset, self.episodes, self.ep_idx[sl], self.ts[sl], self.dts[sl])
                h_hat, h_star = forward_pair(model, self.dataset.K, b, self.dts[sl])
                l1s.append(float(l1_term(h_hat, h_star).data))
                ws.append(self.dts[sl].size)
                hats.append(h_hat.data)
        all_hat = np.concatenate(hats)
        with no_grad():
            sig = float(sigreg_loss(Tensor(all_hat), directions=self.directions).data) \
                if all_hat.shape[0] >= 2 else math.nan
        model.train(was)
        return float(np.average(l1s, weights=ws)), sig, all_hat


def pretrain(dataset, config, model=None, on_epoch=None):
    """Train encoder and predictor jointly; returns a :class:`PretrainResult`.

    ``on_epoch`` receives each history row; returning True stops training.
    """
    cfg = config
    train_eps = dataset.split("train")
    fit_eps, val_eps = split_validation(train_eps, cfg.val_fraction)
    if not fit_eps:
        raise ConfigurationError("no training episodes")
    pool = anchor_pool(dataset, fit_eps)
    validator = _Validator(dataset, val_eps or fit_eps, cfg, 256 if model is None else model.encoder.d)

    if model is None:
        model = HEPAModel(dataset.d_in, seed=cfg.seed, dropout=cfg.dropout)
    model.train()
    model.encoder.unfreeze()
    model.predictor.unfreeze()
    model.head.freeze()
    params = model.encoder.parameters() + model.predictor.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    steps = min(int(math.ceil(pool[0].size / cfg.batch)), cfg.max_steps_per_epoch)

    history, snapshots = [], []
    best = (math.inf, 0, model.state_dict())
    bad = 0
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for _ in range(steps):
            ep_idx, ts = sample_pairs(rng, dataset, pool, cfg.batch)
            dts = horizons_for(rng, dataset, fit_eps, ep_idx, ts)
            batch = make_batch(dataset, fit_eps, ep_idx, ts, dts)
            h_hat, h_star = forward_pair(model, dataset.K, batch, dts)
            loss, _, _ = jepa_loss(h_hat, h_star, cfg.alpha, rng, cfg.sigreg_directions)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
        val_l1, val_sig, val_hat = validator(model)
        dvar = direction_variances(val_hat, validator.directions) if val_hat.shape[0] >= 2 \
            else np.full(1, math.nan)
        row = {"epoch": epoch, "train_loss": total / steps, "val_l1": val_l1, "val_sigreg": val_sig,
               "val_dir_var": float(dvar.mean()), "val_dir_var_max": float(dvar.max())}
        history.append(row)
        log.info("pretrain epoch %d train %.5f val_l1 %.5f", epoch, row["train_loss"], val_l1)
        if epoch in cfg.snapshot_epochs:
            snapshots.append(TrainingSnapshot(epoch, val_l1, model.state_dict(), f"e{epoch}"))
        if val_l1 < best[0]:
            best = (val_l1, epoch, model.state_dict())
            bad = 0
        else:
            bad += 1
        if on_epoch is not None and on_epoch(row):
            stopped = True
            break
        if bad >= cfg.patience and epoch >= cfg.min_epochs:
            stopped = True
            break
    snapshots.append(TrainingSnapshot(best[1], best[0], best[2], "best"))
    model.load_state_dict(best[2])
    model.head.unfreeze()
    return PretrainResult(model, best[1], best[2], snapshots, history, cfg, stopped)


HISTORY_COLUMNS = ["epoch", "train_loss", "val_l1", "val_sigreg", "val_dir_var", "val_dir_var_max"]


def write_history(path, history):
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in history:
            fh.write(",".join([str(r["epoch"])] + [f"{r[k]:.9g}" for k in HISTORY_COLUMNS[1:]]) + "\n")
