"""End-to-end synthetic cross-domain experiment.

Synthesizes a fleet over source and shifted target channels, trains on the
source domains, then scores source test accuracy, target 0-shot accuracy,
target few-shot accuracy and masking faithfulness.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .embedder import EmbedderConfig
from .explain import faithfulness_eval
from .inference import FewShotProtocol, evaluate
from .model import ModelConfig
from .signal import split_dataset
from .synth import SynthConfig, synth_dataset
from .trainer import TrainConfig, accuracy, train

log = logging.getLogger(__name__)


def desk_model_config(class_count: int = 8) -> ModelConfig:
    """Small backbone used for CPU-scale end-to-end runs."""
    return ModelConfig(
        class_count=class_count,
        embedder=EmbedderConfig(hidden_channels=32, out_channels=32),
        backbone=BackboneConfig(layer_count=2, d_h=32, head_count=2, ff_width=64, max_seq=64),
    )


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(model=desk_model_config(), max_epochs=60))
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    fewshot_seed: int = 0
    faithfulness_seed: int = 0

    def to_dict(self) -> dict:
        return {"synth": asdict(self.synth), "train": self.train.to_dict(), "split": list(self.split),
                "split_seed": self.split_seed, "fewshot_seed": self.fewshot_seed,
                "faithfulness_seed": self.faithfulness_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            synth = SynthConfig(**d.pop("synth", {}))
            train_cfg = TrainConfig.from_dict(d.pop("train")) if "train" in d else cls().train
            if "split" in d:
                d["split"] = tuple(d["split"])
            return cls(synth=synth, train=train_cfg, **d)
        except TypeError as e:  # unknown or missing keys surface as TypeError from dataclass init
            raise ValueError(f"bad config: {e}") from None


def load_config(path) -> ExperimentConfig:
    """Read an experiment config from a JSON file; missing sections take defaults."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(doc)


def run_synthetic(cfg: ExperimentConfig, on_epoch=None) -> dict:
    t0 = time.time()
    fleet, channels = cfg.synth.build()
    data, _ = synth_dataset(fleet, channels, cfg.synth.frames_per_cell, cfg.synth.seed)
    n_src = cfg.synth.source_domains
    source = data.select_domains(range(n_src))
    target = data.select_domains(range(n_src, len(channels)))
    tr, va, te = split_dataset(source, cfg.split, cfg.split_seed)
    cfg.train.model.class_count = len(fleet)
    result = train(cfg.train, tr, va, on_epoch=on_epoch)
    model = result.best.model
    std_target = evaluate(model, target, "standard")
    few = {k: evaluate(model, target, "fewshot", FewShotProtocol(k, 30, 30, cfg.fewshot_seed)) for k in (1, 5)}
    faith = faithfulness_eval(model, te, (8, 16, 32), cfg.faithfulness_seed)
    mean_acc = lambda res: float(np.mean([v["accuracy"] for v in res.values()]))  # noqa: E731
    return {
        "source_train_accuracy": accuracy(model, tr),
        "source_test_accuracy": accuracy(model, te),
        "target_standard": std_target,
        "target_0shot": mean_acc(std_target),
        "target_1shot": mean_acc(few[1]),
        "target_5shot": mean_acc(few[5]),
        "fewshot": few,
        "faithfulness": {L: {k: v for k, v in r.items() if not k.endswith(("starts", "shapelets"))}
                         for L, r in faith["lengths"].items()},
        "faithfulness_baseline": faith["baseline_accuracy"],
        "epochs": len(result.history),
        "best_epoch": result.best.metadata.get("best_epoch"),
        "history": result.history,
        "seconds": time.time() - t0,
        "checkpoint": result.best,
        "faithfulness_report": faith,
    }
