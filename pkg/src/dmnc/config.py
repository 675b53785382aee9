"""Configuration dataclasses shared by the models, trainer, and CLI."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import DataError

FUSION_MODES = ("late", "early")
OUTPUT_KINDS = ("sequence", "set")
MODEL_KINDS = ("dmnc_late", "dmnc_early", "dual_lstm", "concat_lstm")
TASKS = ("sum", "emr")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``embed``/``hidden`` are the embedding and controller sizes, ``cells``/
    ``word``/``read_heads`` shape each external memory, ``mode`` picks the
    fusion flavour, and ``output`` selects the decoder head.
    """

    vocab_in1: int
    vocab_in2: int
    vocab_out: int
    embed: int = 64
    hidden: int = 128
    cells: int = 16
    word: int = 64
    read_heads: int = 2
    mode: str = "late"
    output: str = "sequence"

    def __post_init__(self) -> None:
        for name in ("vocab_in1", "vocab_in2", "vocab_out", "embed", "hidden",
                     "cells", "word", "read_heads"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mode not in FUSION_MODES:
            raise DataError(f"mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if self.output not in OUTPUT_KINDS:
            raise DataError(f"output must be one of {OUTPUT_KINDS}, "
                            f"got {self.output!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; one optimizer step per iteration."""

    iterations: int = 10000
    batch: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.batch < 1:
            raise DataError(f"iterations and batch must be positive, got "
                            f"{self.iterations} and {self.batch}")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise DataError("lr and clip_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one run; stored in every artifact."""

    task: str
    model: str
    model_config: ModelConfig
    train_config: TrainConfig
    seed: int = 0
    data_path: str = ""
    eval_path: str = ""
    out_dir: str = ""

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.model not in MODEL_KINDS:
            raise DataError(f"model must be one of {MODEL_KINDS}, "
                            f"got {self.model!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model_config"] = self.model_config.to_dict()
        out["train_config"] = self.train_config.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        kept = {k: v for k, v in data.items() if k in names}
        kept["model_config"] = ModelConfig.from_dict(kept["model_config"])
        kept["train_config"] = TrainConfig.from_dict(kept["train_config"])
        return cls(**kept)
