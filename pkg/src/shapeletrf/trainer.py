"""Mini-batch training loop, checkpoints and deterministic replay."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffnum as dn
from .model import ModelConfig, RFFModel, as_input, forward_joint
from .objective import LossWeights, total_loss
from .shapelets import init_bank
from .tensorio import TensorFileError, read_tensors, write_tensors

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "shapeletrf-model"
CHECKPOINT_FORMAT = 1


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0001
    max_epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    max_steps: int | None = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def validate(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossWeights(**d.pop("loss", {}))
        model = ModelConfig.from_dict(d.pop("model", {}))
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(loss=loss, model=model, **d)


@dataclass
class ModelCheckpoint:
    model: RFFModel
    train_config: TrainConfig | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


@dataclass
class TrainResult:
    final: ModelCheckpoint
    best: ModelCheckpoint
    history: list[dict]


def build_model(config: TrainConfig, train_frames) -> RFFModel:
    bank = init_bank(config.model.shapelets, train_frames, seed=config.seed)
    return RFFModel(config.model, bank)


def accuracy(model: RFFModel, dataset, batch_size: int = 512) -> float:
    if len(dataset) == 0:
        return float("nan")
    _, logits = forward_joint(model, dataset, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.device_labels))


def train_step(model: RFFModel, groups, x, y, config: TrainConfig, state: dn.AdamState):
    out = model(x)
    loss, parts = total_loss(out.logits, y, out.activations, config.loss, parts=True)
    for name, value in (("L_cls", parts["cls"]), ("L_spr", parts["spr"]), ("L_div", parts["div"]), ("L_total", loss)):
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"non-finite {name} = {value.item()} at step {state.step + 1}")
    for g in groups:
        for t in g.tensors:
            t.grad = None
    loss.backward()
    dn.adam_step(groups, config.lr, *config.adam_betas, eps=config.adam_eps, state=state)
    return loss.item(), {k: v.item() for k, v in parts.items()}


def train(config: TrainConfig, train_set, val_set=None, log_path=None, on_epoch=None) -> TrainResult:
    """Train end to end; returns final and best-validation checkpoints.

    Each epoch shuffles with ``default_rng((seed, epoch))``.  One JSON line
    per epoch is appended to ``log_path`` when given.
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if train_set.device_labels.max() >= config.model.class_count:
        raise ValueError("training labels exceed the configured class_count")
    model = build_model(config, train_set.frames)
    groups = model.parameter_groups()
    dn.check_partition(groups)
    state = dn.AdamState()
    X = as_input(train_set)
    Y = torch.as_tensor(train_set.device_labels)
    history: list[dict] = []
    best_acc, best_state, best_epoch = -1.0, None, -1
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            rng = np.random.default_rng([config.seed, epoch])
            perm = torch.as_tensor(rng.permutation(len(X)))
            sums = {"cls": 0.0, "spr": 0.0, "div": 0.0}
            n_batches = 0
            model.train()
            for start in range(0, len(X), config.batch_size):
                idx = perm[start:start + config.batch_size]
                _, parts = train_step(model, groups, X[idx], Y[idx], config, state)
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
                if config.max_steps is not None and state.step >= config.max_steps:
                    break
            model.eval()
            val_acc = accuracy(model, val_set) if val_set is not None and len(val_set) else float("nan")
            row = {"epoch": epoch + 1, "step": state.step,
                   "L_cls": sums["cls"] / n_batches, "L_spr": sums["spr"] / n_batches,
                   "L_div": sums["div"] / n_batches, "val_acc": val_acc}
            history.append(row)
            if log_file:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
            log.info("epoch %d  L_cls %.4f  L_spr %.3f  L_div %.4f  val %.4f",
                     epoch + 1, row["L_cls"], row["L_spr"], row["L_div"], val_acc)
            if on_epoch:
                on_epoch(model, row)
            if not math.isnan(val_acc) and val_acc > best_acc:
                best_acc, best_epoch = val_acc, epoch + 1
                best_state = copy.deepcopy(model.state_dict())
            if config.max_steps is not None and state.step >= config.max_steps:
                break
    finally:
        if log_file:
            log_file.close()
    meta = {"epochs": len(history), "steps": state.step, "seed": config.seed,
            "final_losses": history[-1] if history else {}}
    final = ModelCheckpoint(model, config, dict(meta, selection="final"))
    if best_state is None:
        best = final
    else:
        best_model = RFFModel(copy.deepcopy(config.model))
        best_model.load_state_dict(best_state)
        best = ModelCheckpoint(best_model, config, dict(meta, selection="best-val", best_epoch=best_epoch,
                                                       best_val_acc=best_acc))
    return TrainResult(final, best, history)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    tensors = [(name, p.detach().numpy(), {"group": group, "trainable": bool(p.requires_grad)})
               for group, name, p in ckpt.model.named_groups()]
    meta = {
        "kind": CHECKPOINT_KIND,
        "format": CHECKPOINT_FORMAT,
        "model_config": ckpt.model.config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "metadata": ckpt.metadata,
    }
    write_tensors(path, tensors, meta)


def load_checkpoint(path) -> ModelCheckpoint:
    tensors, meta = read_tensors(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise TensorFileError(f"{path}: not a model checkpoint")
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise TensorFileError(f"{path}: unsupported checkpoint format {meta.get('format')}")
    mconf = ModelConfig.from_dict(meta["model_config"])
    model = RFFModel(mconf)
    own = dict(model.named_parameters())
    if set(own) != {name for name, _, _ in tensors}:
        raise TensorFileError(f"{path}: parameter names do not match the embedded config")
    with torch.no_grad():
        for name, arr, extra in tensors:
            p = own[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise TensorFileError(f"{path}: shape mismatch for {name}")
            p.copy_(torch.from_numpy(arr))
            p.requires_grad_(bool(extra.get("trainable", p.requires_grad)))
    tconf = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    return ModelCheckpoint(model, tconf, meta.get("metadata", {}))


def frozen_flags(model: RFFModel) -> dict[str, bool]:
    return {name: bool(p.requires_grad) for _, name, p in model.named_groups()}


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
