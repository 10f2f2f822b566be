"""Run configuration: dataset, model, and training hyperparameters.

A RunConfig serializes to one JSON document; a run directory always gets a
copy so any run is reproducible from its saved config alone. Precedence
when assembling: CLI flags > config file > built-in defaults.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

FAMILIES = ("local-eyes", "local-mouth", "global-warp", "global-color")

DEFAULT_STRENGTHS = {
    "local-eyes": 0.8,
    "local-mouth": 0.8,
    "global-warp": 0.7,
    "global-color": 0.75,
}


@dataclass
class DatasetConfig:
    canvas: int = 128
    train_per_family: int = 125
    val_per_family: int = 13
    test_per_family: int = 50
    families: tuple = FAMILIES
    strengths: dict = field(default_factory=lambda: dict(DEFAULT_STRENGTHS))
    leave_out: str = None
    seed: int = 0


@dataclass
class ModelConfig:
    fragment_size: int = 64
    backbone_stages: tuple = (16, 32, 64)
    backbone_hidden: int = 128
    mlp_dims: tuple = (1024, 256, 64, 1)
    use_lam: bool = True
    use_sam: bool = True


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_period: int = 5
    epochs_fbranch: int = 15
    epochs_gbranch: int = 15
    batch_size: int = 32
    seed: int = 0
    jobs: int = 1
    sam_loss_normalize: bool = True


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        ds = dict(d.get("dataset", {}))
        if "families" in ds:
            ds["families"] = tuple(ds["families"])
        md = dict(d.get("model", {}))
        for key in ("backbone_stages", "mlp_dims"):
            if key in md:
                md[key] = tuple(md[key])
        tr = dict(d.get("train", {}))
        return cls(dataset=DatasetConfig(**ds), model=ModelConfig(**md),
                   train=TrainConfig(**tr), out_dir=d.get("out_dir", "runs"))

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    def hash(self):
        """Stable 12-hex-digit digest of the full configuration."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:12]

    def with_seed(self, seed):
        return replace(self, train=replace(self.train, seed=seed))
