"""Finetuning stage: frozen encoder, predictor + event head trained into a survival CDF.

Hazards ``lambda_dt = sigmoid(head(g(h_t, dt)))`` for ``dt = 1..K`` and
``p(t, dt) = 1 - prod_{j <= dt} (1 - lambda_j)``, computed in log space, so the
surface is non-decreasing in ``dt`` by construction.
"""
import logging
import math
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import AdamW, Tensor, no_grad, ops
from .errors import ConfigurationError
from .metrics import h_auroc
from .network import EventHead, Predictor
from .pretrain import split_validation
from .surface import ProbabilitySurface

log = logging.getLogger(__name__)

P_CLIP = 1e-7
MODES = ("predft", "probe", "multiprobe")
INITS = ("pretrained", "random")


@dataclass
class FinetuneConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch: int = 64
    max_epochs: int = 50
    patience: int = 10
    label_fraction: float = 1.0
    predictor_init: str = "pretrained"
    mode: str = "predft"
    seed: int = 0
    max_steps_per_epoch: int = 512
    val_fraction: float = 0.1
    stride: int = 0             # 0: the dataset's default stride
    shuffle_labels: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.predictor_init not in INITS:
            raise ConfigurationError(f"predictor_init must be one of {INITS}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigurationError("label_fraction must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(f"unknown finetune fields: {unknown}")
        return cls(**d)


# -- survival arithmetic ---------------------------------------------------

def survival_cdf(lambdas):
    """``1 - exp(sum_j log1p(-lambda_j))`` along the last axis (numpy)."""
    lam = np.asarray(lambdas, dtype=np.float64)
    return -np.expm1(np.cumsum(np.log1p(-lam), axis=-1))


def cdf_from_logits(z):
    """Differentiable CDF from hazard logits: ``log S = -cumsum(softplus(z))``."""
    log_surv = -ops.cumsum(ops.softplus(z), axis=-1)
    return 1.0 - ops.exp(log_surv)


def positive_weight(y, mask):
    """``N_neg / N_pos`` over valid cells."""
    y = np.asarray(y)[np.asarray(mask, dtype=bool)]
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ConfigurationError("no positives among valid training cells")
    return (y.size - n_pos) / n_pos


def finetune_loss(p, y, mask, w_plus):
    """Positive-weighted BCE on cumulative probabilities, mean over valid cells."""
    p = ops.clip(p, P_CLIP, 1.0 - P_CLIP)
    y = np.asarray(y, dtype=p.dtype)
    m = np.asarray(mask, dtype=p.dtype)
    n = max(float(m.sum()), 1.0)
    pos = ops.log(p) * (y * m * w_plus)
    neg = ops.log(1.0 - p) * ((1.0 - y) * m)
    return -(pos + neg).sum() * (1.0 / n)


def subsample_labels(episodes, fraction, rng):
    """Keep ``ceil(fraction * n)`` whole episodes, chosen at random, in their original order."""
    n = len(episodes)
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError("label fraction must lie in (0, 1]")
    keep = min(n, int(math.ceil(round(fraction * n, 9))))
    if keep == n:
        return list(episodes)
    idx = np.sort(rng.permutation(n)[:keep])
    return [episodes[i] for i in idx]


# -- surface prediction ----------------------------------------------------

class EventModel:
    """Predictor + head (or head alone) mapping cached ``h_t`` to hazards."""

    def __init__(self, predictor, head, mode, K):
        self.predictor, self.head, self.mode, self.K = predictor, head, mode, K

    def logits(self, h):
        if self.mode == "probe":
            z = self.head(h)                        # one hazard for every horizon
            return z.reshape(h.shape[0], 1) + np.zeros((1, self.K), dtype=h.dtype)
        return self.head(self.predictor.all_horizons(h, self.K))

    def probabilities(self, h):
        return cdf_from_logits(self.logits(h))

    def trainable(self):
        params = list(self.head.parameters())
        if self.mode == "predft":
            params += self.predictor.parameters()
        return params

    def hazards(self, h):
        with no_grad():
            return ops.sigmoid(self.logits(Tensor(h))).data

    def predict(self, h, batch=256):
        out = []
        with no_grad():
            for s in range(0, h.shape[0], batch):
                out.append(self.probabilities(Tensor(h[s: s + batch])).data)
        return np.concatenate(out) if out else np.zeros((0, self.K), dtype=np.float32)


def encode_anchors(model, dataset, episodes, stride=None, batch=256):
    """Frozen-encoder ``h_t`` for every anchor, with labels.

    Returns a dict of arrays: ``h (n, d)``, ``episode``, ``t``, ``y``, ``mask``.
    """
    model.eval()
    hs, eps, ts, ys, ms = [], [], [], [], []
    with no_grad():
        for ep in episodes:
            anchors = dataset.anchors(ep, stride)
            if anchors.size == 0:
                continue
            y, m = dataset.labels(ep, anchors)
            for s in range(0, anchors.size, batch):
                tok, tmask, _ = dataset.context_tokens(ep, anchors[s: s + batch])
                hs.append(model.encoder.encode_causal(tok, tmask).data)
            eps.append(np.full(anchors.size, ep.id))
            ts.append(anchors)
            ys.append(y)
            ms.append(m)
    if not hs:
        d = model.encoder.d
        return {"h": np.zeros((0, d), np.float32), "episode": np.zeros(0, str), "t": np.zeros(0, np.int64),
                "y": np.zeros((0, dataset.K), np.uint8), "mask": np.zeros((0, dataset.K), bool)}
    return {"h": np.concatenate(hs), "episode": np.concatenate(eps), "t": np.concatenate(ts),
            "y": np.concatenate(ys), "mask": np.concatenate(ms)}


def surface_from(event_model, cache, dataset_name="unknown", seed=0):
    p = event_model.predict(cache["h"])
    return ProbabilitySurface(cache["episode"], cache["t"], p, cache["y"], cache["mask"],
                              dataset_name, seed)


# -- training --------------------------------------------------------------

@dataclass
class FinetuneResult:
    event_model: EventModel
    best_epoch: int
    history: list
    trainable_parameters: int
    n_labeled_episodes: int
    labeled_episode_ids: list
    w_plus: float
    val_monitor: str


def build_event_model(model, cfg, K):
    # the predictor is copied so one pretrained model can seed many finetunes
    rng = np.random.default_rng(cfg.seed + 104729)
    predictor = Predictor(rng, d=model.encoder.d)
    if not (cfg.mode == "predft" and cfg.predictor_init == "random"):
        predictor.load_state_dict(model.predictor.state_dict())
    head = EventHead(rng, d=model.encoder.d)
    model.encoder.freeze()
    if cfg.mode != "predft":
        predictor.freeze()
    return EventModel(predictor, head, cfg.mode, K)


def predictor_finetune(model, dataset, config, labeled_episodes=None):
    """Train the event model on labelled train episodes; returns a :class:`FinetuneResult`.

    The encoder is frozen (its parameters never enter the optimizer and
    receive no gradient). Early stopping monitors validation h-AUROC; with no
    usable validation split it monitors the training loss instead.
    """
    cfg = config
    K = dataset.K
    rng = np.random.default_rng(cfg.seed)
    pool = labeled_episodes if labeled_episodes is not None else dataset.split("train")
    labeled = subsample_labels(pool, cfg.label_fraction, rng)
    fit_eps, val_eps = split_validation(labeled, cfg.val_fraction)
    stride = cfg.stride or None
    train = encode_anchors(model, dataset, fit_eps, stride)
    val = encode_anchors(model, dataset, val_eps, stride) if val_eps else None
    if train["h"].shape[0] == 0:
        raise ConfigurationError("labelled episodes yield no anchors")
    if cfg.shuffle_labels:
        perm = rng.permutation(train["y"].shape[0])
        train["y"], train["mask"] = train["y"][perm], train["mask"][perm]
        if val is not None and val["h"].shape[0]:
            pv = rng.permutation(val["y"].shape[0])
            val["y"], val["mask"] = val["y"][pv], val["mask"][pv]
    w_plus = positive_weight(train["y"], train["mask"])

    em = build_event_model(model, cfg, K)
    params = em.trainable()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = train["h"].shape[0]
    steps = min(int(math.ceil(n / cfg.batch)), cfg.max_steps_per_epoch)
    use_val = val is not None and val["h"].shape[0] > 0 and \
        h_auroc(surface_from(em, val))[0] is not None
    monitor = "val_h_auroc" if use_val else "train_loss"

    def snapshot():
        return [p.data.copy() for p in params]

    best = (-math.inf, 0, snapshot())
    history, bad = [], 0
    order = rng.permutation(n)
    cursor = 0
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for _ in range(steps):
            if cursor + cfg.batch > n:
                order, cursor = rng.permutation(n), 0
            idx = order[cursor: cursor + cfg.batch]
            cursor += cfg.batch
            p = em.probabilities(Tensor(train["h"][idx]))
            loss = finetune_loss(p, train["y"][idx], train["mask"][idx], w_plus)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
        row = {"epoch": epoch, "train_loss": total / steps}
        if use_val:
            row["val_h_auroc"] = h_auroc(surface_from(em, val))[0]
            score = row["val_h_auroc"] if row["val_h_auroc"] is not None else -math.inf
        else:
            score = -row["train_loss"]
        history.append(row)
        log.info("finetune epoch %d %s", epoch, row)
        if score > best[0]:
            best, bad = (score, epoch, snapshot()), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for prm, arr in zip(params, best[2]):
        prm.data = arr
    return FinetuneResult(em, best[1], history, int(sum(p.size for p in params)), len(labeled),
                          [e.id for e in labeled], w_plus, monitor)


def evaluate_surface(model, event_model, dataset, episodes=None, stride=None, seed=0):
    """Probability surface on ``episodes`` (default: the test split)."""
    episodes = dataset.split("test") if episodes is None else episodes
    cache = encode_anchors(model, dataset, episodes, stride)
    return surface_from(event_model, cache, dataset.name, seed), cache
