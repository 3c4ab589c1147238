import math

import numpy as np
import pytest
import torch

from shapeletrf import diffnum as dn
from shapeletrf.model import RFFModel, as_input, census, forward_joint
from shapeletrf.objective import LossWeights, diversity_loss, total_loss
from shapeletrf.signal import Dataset
from shapeletrf.tensorio import TensorFileError
from shapeletrf.trainer import (ModelCheckpoint, NonFiniteLossError, TrainConfig, accuracy, build_model,
                                frozen_flags, load_checkpoint, save_checkpoint, train, train_step)

from .conftest import random_dataset, tiny_model_config


def test_joint_dimension_default_sizes():
    from shapeletrf.model import ModelConfig
    assert ModelConfig().joint_dim == 128


def test_zero_head_gives_uniform_loss(rng):
    model = RFFModel(tiny_model_config(class_count=5))
    with torch.no_grad():
        model.head_weight.zero_()
        model.head_bias.zero_()
    out = model(torch.as_tensor(rng.normal(size=(4, 2, 256))))
    assert total_loss(out.logits, [0, 1, 2, 3], out.activations, LossWeights(0, 0)).item() == \
        pytest.approx(math.log(5), abs=1e-12)


def test_joint_vector_is_global_then_local(rng):
    cfg = tiny_model_config()
    model = RFFModel(cfg)
    x = rng.normal(size=(3, 2, 256))
    z, logits = forward_joint(model, x)
    assert z.shape == (3, cfg.joint_dim)
    with torch.no_grad():
        xt = torch.as_tensor(x)
        g = model.backbone(model.embedder(xt)).numpy()
        a, zl = model.shapelets(xt)
    np.testing.assert_array_equal(z[:, :8], g)
    np.testing.assert_array_equal(z[:, 8:], zl.numpy())
    np.testing.assert_allclose(logits, z @ model.head_weight.detach().numpy().T + model.head_bias.detach().numpy(),
                               atol=1e-12)


def test_census_matches_built_model():
    cfg = tiny_model_config()
    model = RFFModel(cfg)
    counts = census(cfg)
    for g in model.parameter_groups():
        assert counts[g.name] == g.size


def test_config_validation():
    cfg = tiny_model_config()
    cfg.backbone.max_seq = 32
    with pytest.raises(ValueError, match="max_seq"):
        RFFModel(cfg)
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()


def toy_dataset(n=16):
    frames = np.concatenate([np.full((n, 2, 256), 0.5), np.full((n, 2, 256), 2.0)])
    labels = np.repeat([0, 1], n)
    return Dataset(frames, labels, np.zeros(2 * n, dtype=int), 2)


def test_separable_toy_reaches_full_accuracy():
    data = toy_dataset()
    cfg = TrainConfig(lr=1e-2, max_epochs=20, batch_size=8, seed=0,
                      model=tiny_model_config(class_count=2))
    result = train(cfg, data, data)
    assert accuracy(result.final.model, data) == 1.0


def test_training_is_deterministic(tmp_path):
    data = random_dataset(n_per_cell=6, classes=3, domains=1)
    cfg = TrainConfig(lr=1e-3, max_epochs=2, batch_size=8, seed=4, model=tiny_model_config())
    for name in ("a", "b"):
        r = train(cfg, data, data, log_path=tmp_path / f"{name}.jsonl")
        save_checkpoint(r.final, tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"L_div"' in lines[0]


def test_large_diversity_weight_lowers_diversity():
    data = random_dataset(n_per_cell=8, classes=3, domains=1, seed=2)
    groups = ((6, 8),)
    final = []
    for lam2 in (0.0, 10.0):
        cfg = TrainConfig(lr=1e-2, max_epochs=5, batch_size=8, seed=1,
                          loss=LossWeights(0.0, lam2), model=tiny_model_config(groups=groups))
        m = train(cfg, data).final.model
        with torch.no_grad():
            final.append(diversity_loss(m.shapelets.activations(as_input(data))).item())
    assert final[1] < final[0]


def test_max_steps_and_frozen_groups_untouched():
    data = random_dataset(n_per_cell=10, classes=3, domains=1)
    cfg = TrainConfig(lr=1e-2, max_epochs=50, batch_size=4, seed=0, max_steps=7, model=tiny_model_config())
    init = build_model(cfg, data.frames)
    result = train(cfg, data)
    assert result.history[-1]["step"] == 7
    after = dict(result.final.model.named_parameters())
    for name, p in init.named_parameters():
        frozen = ".w_" in name or ".b_qkv" in name or ".b_out" in name or ".b_ff" in name
        if frozen:
            assert torch.equal(p, after[name]), name
        else:
            assert not torch.equal(p, after[name]), name


def test_single_step_decreases_loss():
    decreases = 0
    for seed in range(20):
        data = random_dataset(n_per_cell=4, classes=3, domains=1, seed=seed)
        cfg = TrainConfig(lr=1e-4, max_epochs=1, batch_size=len(data), seed=seed, model=tiny_model_config())
        model = build_model(cfg, data.frames)
        x = as_input(data)

        def loss_of(m):
            with torch.no_grad():
                out = m(x)
                return total_loss(out.logits, data.device_labels, out.activations, cfg.loss).item()

        before = loss_of(model)
        after = loss_of(train(cfg, data).final.model)
        decreases += after < before
    assert decreases >= 19


def test_non_finite_loss_names_term():
    data = random_dataset(n_per_cell=2, classes=3, domains=1)
    cfg = TrainConfig(max_epochs=1, batch_size=6, model=tiny_model_config())
    model = build_model(cfg, data.frames)
    with torch.no_grad():
        model.head_bias[0] = math.inf
    with pytest.raises(NonFiniteLossError, match="L_cls"):
        train_step(model, model.parameter_groups(), as_input(data), torch.as_tensor(data.device_labels), cfg,
                   dn.AdamState())


def test_train_rejects_bad_labels_and_empty():
    cfg = TrainConfig(max_epochs=1, model=tiny_model_config(class_count=2))
    with pytest.raises(ValueError):
        train(cfg, random_dataset(n_per_cell=2, classes=3, domains=1))
    with pytest.raises(ValueError):
        train(cfg, Dataset(np.zeros((0, 2, 256)), [], [], 2))


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = TrainConfig(model=tiny_model_config(), loss=LossWeights(3e-4, 5e-4))
    model = RFFModel(cfg.model)
    model.set_trainable(("output_head", "layer_norms"))
    save_checkpoint(ModelCheckpoint(model, cfg, {"epoch": 3}), tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    x = rng.normal(size=(5, 2, 256))
    for a, b in zip(forward_joint(model, x), forward_joint(back.model, x)):
        assert a.tobytes() == b.tobytes()
    assert frozen_flags(back.model) == frozen_flags(model)
    assert back.train_config.loss == LossWeights(3e-4, 5e-4)
    assert back.metadata == {"epoch": 3}

    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TensorFileError):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(raw)
    flipped[-10] ^= 0xFF
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(TensorFileError):
        load_checkpoint(tmp_path / "f.ckpt")


def test_default_loss_weights_round_trip(tmp_path):
    cfg = TrainConfig(model=tiny_model_config())
    assert TrainConfig.from_dict(cfg.to_dict()).loss == LossWeights(1e-4, 1e-4)
    save_checkpoint(ModelCheckpoint(RFFModel(cfg.model), cfg), tmp_path / "c.ckpt")
    loaded = load_checkpoint(tmp_path / "c.ckpt").train_config
    assert loaded.loss.lambda1 == 0.0001 and loaded.loss.lambda2 == 0.0001
    assert loaded.lr == 0.0001 and loaded.max_epochs == 200
