"""Representation-quality sweep: does lower predictive error give better event surfaces?

Pretraining snapshots (fixed epochs plus the best) are each finetuned with the
standard recipe; the pooled ``(epsilon, test h-AUROC)`` pairs are rank-correlated.
"""
import csv
import itertools
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import ContractError
from .metrics import h_auroc
from .network import HEPAModel
from .pretrain import pretrain
from .survival import evaluate_surface, predictor_finetune

log = logging.getLogger(__name__)

EXACT_PERMUTATION_MAX_N = 9
N_RANDOM_PERMUTATIONS = 100_000


@dataclass
class SweepPoint:
    epoch: int
    seed: int
    epsilon: float
    h_auroc: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError("epsilon must be non-negative")
        if not 0.0 <= self.h_auroc <= 1.0:
            raise ContractError("h_auroc must lie in [0, 1]")

    @property
    def key(self):
        return (self.epoch, self.seed)


@dataclass
class StoredPretrain:
    """Snapshots loaded back from disk, standing in for a full pretraining result."""
    snapshots: list
    model_config: dict


def _model_config(source):
    if isinstance(source, StoredPretrain):
        return source.model_config
    return source.model.config


@dataclass
class SweepReport:
    points: list = field(default_factory=list)
    spearman_rho: float = None
    p_value: float = None
    n: int = 0
    p_method: str = "t"

    def to_dict(self):
        return {"spearman_rho": self.spearman_rho, "p_value": self.p_value, "n": self.n,
                "p_method": self.p_method,
                "points": [{"epoch": p.epoch, "seed": p.seed, "epsilon": p.epsilon, "h_auroc": p.h_auroc}
                           for p in self.points]}


# -- rank correlation --------------------------------------------------------

def _rank_rho(rx, ry):
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return float(rx @ ry) / den


def spearman(xs, ys, permutation=False, seed=0):
    """Spearman rank correlation with average ranks for ties.

    Returns ``(rho, p_value)``; both are None when either input is constant.
    The two-sided p-value uses the Student-t approximation with ``n - 2``
    degrees of freedom, or a permutation test when ``permutation`` is set
    (exact enumeration up to 9 points, seeded Monte Carlo above).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = xs.size
    if n < 3 or ys.size != n:
        raise ContractError("spearman needs two sequences of equal length >= 3")
    rx, ry = stats.rankdata(xs), stats.rankdata(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return None, None
    rho = min(1.0, max(-1.0, _rank_rho(rx, ry)))
    if permutation:
        return rho, permutation_p_value(rx, ry, rho, seed)
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * stats.t.sf(abs(t), n - 2))


def permutation_p_value(rx, ry, rho, seed=0):
    """Share of rank permutations with ``|rho_perm| >= |rho|`` (two-sided)."""
    n = rx.size
    tol = 1e-12
    if n <= EXACT_PERMUTATION_MAX_N:
        hits = total = 0
        for perm in itertools.permutations(range(n)):
            total += 1
            hits += abs(_rank_rho(rx, ry[list(perm)])) >= abs(rho) - tol
        return hits / total
    rng = np.random.default_rng(seed)
    hits = sum(abs(_rank_rho(rx, ry[rng.permutation(n)])) >= abs(rho) - tol
               for _ in range(N_RANDOM_PERMUTATIONS))
    return (hits + 1) / (N_RANDOM_PERMUTATIONS + 1)


# -- sweep -------------------------------------------------------------------

def sweep_snapshots(result):
    """Snapshots to evaluate: the configured epochs reached, plus the best one unless it
    coincides with one of them (same weights, same point)."""
    fixed = [s for s in result.snapshots if s.label != "best"]
    best = [s for s in result.snapshots if s.label == "best"]
    epochs = {s.epoch for s in fixed}
    return fixed + [s for s in best if s.epoch not in epochs]


def evaluate_snapshot(dataset, snapshot, finetune_config, seed, model_config=None):
    """Finetune from one snapshot and return the test h-AUROC."""
    model = HEPAModel(**(model_config or {"d_in": dataset.d_in}), seed=seed)
    model.load_state_dict(snapshot.state)
    ft = predictor_finetune(model, dataset, replace(finetune_config, seed=seed))
    surface, _ = evaluate_surface(model, ft.event_model, dataset, seed=seed)
    value = h_auroc(surface)[0]
    if value is None:
        raise ContractError("test split has no horizon with both classes")
    return value


def run_sweep(dataset, pretrain_config, finetune_config, seeds, existing=(), pretrained=None,
              on_point=None, permutation=False):
    """Pool ``(epsilon, h-AUROC)`` over snapshots and seeds and rank-correlate them.

    ``existing`` points are kept and their ``(epoch, seed)`` keys skipped.
    ``pretrained`` maps seed to a finished pretraining result (or a callable
    producing one) to reuse instead of training again.
    """
    points = list(existing)
    done = {p.key for p in points}
    pretrained = pretrained or {}
    for seed in seeds:
        source = pretrained.get(seed)
        if callable(source):
            source = source()
        if source is None:
            source = pretrain(dataset, replace(pretrain_config, seed=seed))
        for snap in sweep_snapshots(source):
            if (snap.epoch, seed) in done:
                continue
            value = evaluate_snapshot(dataset, snap, finetune_config, seed, _model_config(source))
            pt = SweepPoint(snap.epoch, seed, float(snap.epsilon), float(value))
            log.info("sweep point %s", pt)
            points.append(pt)
            done.add(pt.key)
            if on_point is not None:
                on_point(pt)
    return report_from(points, permutation)


def report_from(points, permutation=False):
    if len(points) < 3:
        raise ContractError(f"need at least 3 sweep points, got {len(points)}")
    rho, p = spearman([q.epsilon for q in points], [q.h_auroc for q in points], permutation)
    return SweepReport(list(points), rho, p, len(points), "permutation" if permutation else "t")


# -- CSV -----------------------------------------------------------------------

SWEEP_COLUMNS = ["epoch", "seed", "epsilon", "h_auroc"]


def append_sweep_point(path, point):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(",".join(SWEEP_COLUMNS) + "\n")
        fh.write(f"{point.epoch},{point.seed},{point.epsilon!r},{point.h_auroc!r}\n")


def read_sweep_csv(path):
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        return [SweepPoint(int(r["epoch"]), int(r["seed"]), float(r["epsilon"]), float(r["h_auroc"]))
                for r in csv.DictReader(fh)]
