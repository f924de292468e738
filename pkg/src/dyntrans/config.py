"""JSON experiment configuration.

Sections: ``model``, ``encoder``, ``dropout_plan``, ``loss``, ``train``
and ``data``. Missing keys take the dataclass defaults; unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .collaborative import LossConfig, TrainConfig
from .data import GenConfig
from .emformer import DropoutPlan, EncoderConfig, parse_dropout_plan
from .model import ModelConfig

SECTIONS = ("model", "encoder", "dropout_plan", "loss", "train", "data")


@dataclass
class PlanConfig:
    spec: str = "random"
    rate: float = 0.1


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5


@dataclass
class DataConfig:
    num_utterances: int = 2000
    gen: GenConfig = field(default_factory=GenConfig)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def dropout_plan(self, num_layers: int | None = None) -> DropoutPlan:
        n = self.model.depths[0] if num_layers is None else num_layers
        return parse_dropout_plan(self.plan.spec, n, self.plan.rate)

    def loss_config(self, mode: str) -> LossConfig:
        plan = self.dropout_plan() if mode == "layer_dropout" else None
        return LossConfig(self.loss.alpha, self.loss.beta, mode, plan)

    def to_dict(self) -> dict:
        m = self.model.to_dict()
        enc = m.pop("encoder")
        return {
            "model": m,
            "encoder": enc,
            "dropout_plan": asdict(self.plan),
            "loss": asdict(self.loss),
            "train": self.train.to_dict(),
            "data": {"num_utterances": self.data.num_utterances, **self.data.gen.to_dict()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        data = dict(d.get("data", {}))
        n = data.pop("num_utterances", DataConfig.num_utterances)
        gen = GenConfig(**_pick(GenConfig, data, "data"))
        enc = dict(d.get("encoder", {}))
        # the encoder input width follows the generated features unless pinned
        enc.setdefault("input_dim", gen.model_input_dim)
        model = dict(d.get("model", {}))
        model.setdefault("vocab_size", gen.vocab_size)
        model.setdefault("aux_classes", gen.vocab_size)
        model_cfg = ModelConfig(**_pick(ModelConfig, model, "model"),
                                encoder=EncoderConfig(**_pick(EncoderConfig, enc, "encoder")))
        if model_cfg.encoder.input_dim != gen.model_input_dim:
            raise ValueError("encoder.input_dim disagrees with the data feature width")
        if model_cfg.vocab_size != gen.vocab_size:
            raise ValueError("model.vocab_size disagrees with data.vocab_size")
        return cls(model_cfg,
                   PlanConfig(**_pick(PlanConfig, d.get("dropout_plan", {}), "dropout_plan")),
                   LossWeights(**_pick(LossWeights, d.get("loss", {}), "loss")),
                   TrainConfig(**_pick(TrainConfig, d.get("train", {}), "train")),
                   DataConfig(n, gen))


def _pick(cls, d: dict, section: str) -> dict:
    names = {f.name for f in fields(cls)} - {"encoder"}
    bad = set(d) - names
    if bad:
        raise ValueError(f"unknown keys in [{section}]: {sorted(bad)}")
    return dict(d)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
