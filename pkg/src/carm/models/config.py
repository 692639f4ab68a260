"""Model genomes: family, window size, optimiser and family-specific genes."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

NETWORK_WINDOWS = tuple(range(100, 201, 10))
RF_WINDOWS = (90,) + NETWORK_WINDOWS
LEARNING_RATES = (1e-5, 3e-5, 1e-4, 3e-4, 1e-3)
DROPOUTS = (0.1, 0.2, 0.3, 0.4, 0.5)
FEATURE_NAMES = ("mean", "std", "min", "max", "var")
FEATURE_SETS = tuple(
    tuple(f for j, f in enumerate(FEATURE_NAMES) if mask >> j & 1) for mask in range(1, 32)
)


class Family(str, enum.Enum):
    CNN = "CNN"
    LSTM = "LSTM"
    Transformer = "Transformer"
    RandomForest = "RandomForest"


class ConfigError(ValueError):
    pass


# Discrete gene domains per family. ``window_samples``, ``learning_rate`` and
# ``optimizer`` are genes like any other.
GENE_DOMAINS = {
    Family.CNN: {
        "window_samples": NETWORK_WINDOWS,
        "conv_layers": (1, 2, 3, 4),
        "filters": (8, 16, 32, 64),
        "kernel": (3, 5),
        "stride": (1, 2),
        "pooling": ("max", "avg"),
        "batch_size": (32, 64, 128),
        "optimizer": ("Adam", "SGD"),
        "learning_rate": LEARNING_RATES,
    },
    Family.LSTM: {
        "window_samples": NETWORK_WINDOWS,
        "hidden": (64, 128, 256, 512),
        "layers": (1, 2, 3),
        "dropout": DROPOUTS,
        "optimizer": ("Adam", "RMSProp"),
        "learning_rate": LEARNING_RATES,
    },
    Family.Transformer: {
        "window_samples": NETWORK_WINDOWS,
        "layers": (2, 3, 4, 5, 6),
        "heads": (2, 4, 8),
        "model_dim": (64, 128, 256),
        "dropout": DROPOUTS,
        "weight_decay": (1e-6, 1e-5, 1e-4),
        "optimizer": ("AdamW",),
        "learning_rate": LEARNING_RATES,
    },
    Family.RandomForest: {
        "window_samples": RF_WINDOWS,
        "trees": (100, 200, 300, 400, 500),
        "max_depth": (10, 20, 30, None),
        "features": FEATURE_SETS,
    },
}

DEFAULT_BATCH = 64


@dataclass
class ModelConfig:
    """One genome. ``genes`` holds every gene of the family, including
    ``window_samples`` (and ``optimizer``/``learning_rate`` for networks)."""

    family: Family
    genes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = Family(self.family)
        if "features" in self.genes and self.genes["features"] is not None:
            self.genes["features"] = tuple(self.genes["features"])

    def __getitem__(self, name):
        return self.genes[name]

    def get(self, name, default=None):
        return self.genes.get(name, default)

    @property
    def window_samples(self) -> int:
        return int(self.genes["window_samples"])

    @property
    def is_network(self) -> bool:
        return self.family is not Family.RandomForest

    @property
    def batch_size(self) -> int:
        return int(self.genes.get("batch_size", DEFAULT_BATCH))

    def replace(self, **genes) -> ModelConfig:
        g = dict(self.genes)
        g.update(genes)
        return ModelConfig(self.family, g)

    def to_json(self) -> dict:
        g = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.genes.items())}
        return {"family": self.family.value, "genes": g}

    @classmethod
    def from_json(cls, d) -> ModelConfig:
        return cls(Family(d["family"]), dict(d["genes"]))

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def key(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.canonical())

    def validate(self, strict: bool = True) -> ModelConfig:
        """Structural checks always; with ``strict`` every gene must lie in its domain."""
        need = {
            Family.CNN: ("window_samples", "conv_layers", "filters", "kernel", "stride", "pooling"),
            Family.LSTM: ("window_samples", "hidden", "layers"),
            Family.Transformer: ("window_samples", "layers", "heads", "model_dim"),
            Family.RandomForest: ("window_samples", "trees", "features"),
        }[self.family]
        for name in need:
            if name not in self.genes:
                raise ConfigError(f"{self.family.value}: missing gene {name!r}")
        for name in ("conv_layers", "layers", "trees", "hidden", "filters", "heads", "model_dim"):
            if name in self.genes and int(self.genes[name]) < 1:
                raise ConfigError(f"{self.family.value}: {name} must be >= 1, got {self.genes[name]}")
        if self.family is Family.RandomForest and not self.genes["features"]:
            raise ConfigError("RandomForest needs at least one feature")
        if self.family is Family.Transformer and self.genes["model_dim"] % self.genes["heads"]:
            raise ConfigError("model_dim must be divisible by heads")
        if strict:
            domains = GENE_DOMAINS[self.family]
            for name, dom in domains.items():
                if name not in self.genes:
                    continue
                if self.genes[name] not in dom:
                    raise ConfigError(
                        f"{self.family.value}: gene {name}={self.genes[name]!r} outside {dom}"
                    )
            extra = set(self.genes) - set(domains)
            if extra:
                raise ConfigError(f"{self.family.value}: unknown genes {sorted(extra)}")
        if self.family is Family.CNN:
            length = self.window_samples
            from .layers import Conv1D, Pool1D
            for i in range(int(self.genes["conv_layers"])):
                length = Conv1D.out_length(length, self.genes["kernel"], self.genes["stride"])
                if i < self.genes["conv_layers"] - 1:
                    length = Pool1D.out_length(length)
                if length < 1:
                    raise ConfigError("CNN reduces the window to zero length")
        return self


def best_cnn(window_samples: int = 190) -> ModelConfig:
    """1 conv layer, 32 filters, kernel 5, stride 2, window 190."""
    return ModelConfig(Family.CNN, {
        "window_samples": window_samples, "conv_layers": 1, "filters": 32, "kernel": 5,
        "stride": 2, "pooling": "max", "batch_size": 64, "optimizer": "Adam",
        "learning_rate": 1e-3,
    })


def best_lstm() -> ModelConfig:
    return ModelConfig(Family.LSTM, {
        "window_samples": 130, "hidden": 512, "layers": 1, "dropout": 0.1,
        "optimizer": "Adam", "learning_rate": 1e-3,
    })


def best_transformer() -> ModelConfig:
    return ModelConfig(Family.Transformer, {
        "window_samples": 190, "layers": 2, "heads": 2, "model_dim": 128, "dropout": 0.1,
        "weight_decay": 1e-5, "optimizer": "AdamW", "learning_rate": 3e-4,
    })


def best_forest() -> ModelConfig:
    return ModelConfig(Family.RandomForest, {
        "window_samples": 90, "trees": 200, "max_depth": None, "features": FEATURE_NAMES,
    })
