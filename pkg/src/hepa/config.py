"""Run configuration: one JSON document per experiment.

Example::

    {
      "dataset": {"synthetic": {"beta": 2.0, "seed": 0},
                  "context_len": 128, "patch": 16, "K": 200},
      "pretrain": {"max_epochs": 25},
      "finetune": {"max_epochs": 20},
      "seeds": [0, 1, 2],
      "out_dir": "runs/beta2"
    }

``dataset`` holds DatasetSpec fields plus an optional ``synthetic`` block
(SyntheticSpec fields). Relative CSV paths resolve against ``$HEPA_DATA_DIR``
when set, otherwise against the config file's directory.
"""
import json
import os
from dataclasses import dataclass, field

from .datasets import DatasetSpec, SyntheticSpec, load_dataset, synthetic_dataset
from .errors import ConfigurationError
from .pretrain import PretrainConfig
from .survival import FinetuneConfig

DATA_DIR_ENV = "HEPA_DATA_DIR"
LABEL_FRACTIONS = (1.0, 0.10, 0.05, 0.02, 0.01)
KNOWN_KEYS = {"dataset", "pretrain", "finetune", "seeds", "fractions", "out_dir"}


@dataclass
class RunConfig:
    dataset: dict
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seeds: list = field(default_factory=lambda: [0])
    fractions: list = field(default_factory=lambda: list(LABEL_FRACTIONS))
    out_dir: str = "."
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if not isinstance(d, dict) or "dataset" not in d:
            raise ConfigurationError("config needs a 'dataset' block")
        unknown = sorted(set(d) - KNOWN_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(dataset=dict(d["dataset"]),
                   pretrain=PretrainConfig.from_dict(d.get("pretrain", {})),
                   finetune=FinetuneConfig.from_dict(d.get("finetune", {})),
                   seeds=[int(s) for s in d.get("seeds", [0])],
                   fractions=[float(f) for f in d.get("fractions", LABEL_FRACTIONS)],
                   out_dir=d.get("out_dir", "."), base_dir=base_dir)

    def to_dict(self):
        return {"dataset": self.dataset, "pretrain": self.pretrain.to_dict(),
                "finetune": self.finetune.to_dict(), "seeds": list(self.seeds),
                "fractions": list(self.fractions), "out_dir": self.out_dir}


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def resolve_path(path, base_dir="."):
    if os.path.isabs(path):
        return path
    root = os.environ.get(DATA_DIR_ENV) or base_dir
    return os.path.join(root, path)


def build_dataset(dataset_cfg, base_dir="."):
    """Materialise the dataset described by a config's ``dataset`` block."""
    d = dict(dataset_cfg)
    syn = d.pop("synthetic", None)
    if syn is not None:
        return synthetic_dataset(SyntheticSpec.from_dict(syn), **d)
    spec = DatasetSpec.from_dict(d)
    spec.csv_paths = [resolve_path(p, base_dir) for p in spec.csv_paths]
    for p in spec.csv_paths:
        if not os.path.exists(p):
            raise ConfigurationError(f"dataset file not found: {p}")
    return load_dataset(spec)
