import math
import struct

import numpy as np
import pytest
import torch

from shapeletrf import diffnum as dn
from shapeletrf.backbone import (GROUP_NAMES, Backbone, BackboneConfig, FreezePolicy, import_weights,
                                 trainable_ratio)
from shapeletrf.embedder import Embedder, EmbedderConfig
from shapeletrf.tensorio import TensorFileError


def test_embedder_shape_contract(rng):
    emb = Embedder(EmbedderConfig(hidden_channels=8, out_channels=12), torch.Generator().manual_seed(0))
    x = torch.as_tensor(rng.normal(size=(3, 2, 256)))
    assert emb(x).shape == (3, 64, 12)
    assert emb(x[0]).shape == (1, 64, 12)
    with pytest.raises(ValueError):
        emb(torch.zeros(3, 256))
    with pytest.raises(ValueError):
        Embedder(EmbedderConfig(kernel_size=4))


def test_embedder_zero_input_zero_output():
    emb = Embedder(EmbedderConfig(hidden_channels=8, out_channels=8), torch.Generator().manual_seed(0))
    out = emb(torch.zeros(1, 2, 256))
    assert torch.count_nonzero(out) == 0


def test_receptive_field_is_13():
    assert EmbedderConfig().receptive_field() == 5 + (5 - 1) * 2


@pytest.mark.parametrize("pos", [0, 1, 50, 129, 255])
def test_embedder_locality(pos, rng):
    emb = Embedder(EmbedderConfig(hidden_channels=6, out_channels=6), torch.Generator().manual_seed(1))
    x = torch.as_tensor(rng.normal(size=(1, 2, 256)))
    y = x.clone()
    y[0, 1, pos] += 1.0
    with torch.no_grad():
        changed = set(torch.nonzero((emb(x) - emb(y)).abs().sum(-1)[0] > 0).flatten().tolist())
    expected = {i for i in range(64) if 4 * i - 6 <= pos <= 4 * i + 6}
    assert changed <= expected and changed


def test_embedder_gradients(rng):
    emb = Embedder(EmbedderConfig(hidden_channels=4, out_channels=4), torch.Generator().manual_seed(2))
    x = torch.as_tensor(rng.normal(size=(2, 2, 256)))
    c = torch.as_tensor(rng.normal(size=(2, 64, 4)))
    err = dn.finite_diff_check(lambda: (emb(x) * c).sum(), list(emb.parameters()), max_coords=15)
    assert err <= 1e-4


def desk():
    return BackboneConfig(layer_count=2, d_h=64, head_count=4, ff_width=128, max_seq=64, seed=3)


def test_default_policy_trainable_set():
    bb = Backbone(desk())
    trainable = {n for n, p in bb.named_parameters() if p.requires_grad}
    expected = {"positional", "lnf_gamma", "lnf_beta"} | {
        f"blocks.{i}.{k}" for i in range(2) for k in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")}
    assert trainable == expected
    names = [g.name for g in bb.parameter_groups()]
    assert names == list(GROUP_NAMES)
    dn.check_partition(bb.parameter_groups())
    assert sum(g.size for g in bb.parameter_groups()) == sum(p.numel() for p in bb.parameters())


def test_all_frozen_and_all_trainable_ratio():
    assert trainable_ratio(Backbone(desk(), FreezePolicy.all_frozen()).parameter_groups()) == 0.0
    assert trainable_ratio(Backbone(desk(), FreezePolicy.all_trainable()).parameter_groups()) == 1.0


def test_desk_ratio_hand_count():
    bb = Backbone(desk())
    d, ff, L, S = 64, 128, 2, 64
    pos, ln = S * d, L * 4 * d + 2 * d
    attn = L * (4 * d * d + 4 * d)
    ffn = L * (2 * d * ff + ff + d)
    assert trainable_ratio(bb.parameter_groups()) == (pos + ln) / (pos + ln + attn + ffn)


def test_seeded_init_is_bitwise_identical():
    a, b = Backbone(desk()), Backbone(desk())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.detach().numpy().tobytes() == pb.detach().numpy().tobytes()


def test_invalid_configs():
    with pytest.raises(ValueError):
        Backbone(BackboneConfig(d_h=30, head_count=4))
    bb = Backbone(desk())
    with pytest.raises(ValueError):
        bb(torch.zeros(1, 65, 64))
    with pytest.raises(ValueError):
        bb.apply_policy(FreezePolicy(("bogus",)))


def test_encode_shape_and_permutation_sensitivity(rng):
    bb = Backbone(desk())
    tok = torch.as_tensor(rng.normal(size=(64, 64)))
    with torch.no_grad():
        z = bb(tok)
        assert z.shape == (64,)
        perm = torch.as_tensor(rng.permutation(64))
        assert not torch.allclose(bb(tok[perm]), z, atol=1e-6)
        assert torch.equal(bb(tok), z)


def _np_layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def test_single_head_single_layer_against_hand_rolled(rng):
    cfg = BackboneConfig(layer_count=1, d_h=6, head_count=1, ff_width=10, max_seq=64, seed=5)
    bb = Backbone(cfg)
    with torch.no_grad():
        for p in bb.parameters():  # non-trivial LN and biases
            p.add_(torch.as_tensor(rng.normal(scale=0.1, size=tuple(p.shape))))
    P = {n: p.detach().numpy() for n, p in bb.named_parameters()}
    x = rng.normal(size=(64, 6))
    h = x + P["positional"][:64]
    a = _np_layer_norm(h, P["blocks.0.ln1_gamma"], P["blocks.0.ln1_beta"])
    qkv = a @ P["blocks.0.w_qkv"].T + P["blocks.0.b_qkv"]
    q, k, v = qkv[:, :6], qkv[:, 6:12], qkv[:, 12:]
    s = q @ k.T / math.sqrt(6)
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    h = h + (w @ v) @ P["blocks.0.w_out"].T + P["blocks.0.b_out"]
    f = _np_layer_norm(h, P["blocks.0.ln2_gamma"], P["blocks.0.ln2_beta"])
    h = h + _np_gelu(f @ P["blocks.0.w_ff1"].T + P["blocks.0.b_ff1"]) @ P["blocks.0.w_ff2"].T + P["blocks.0.b_ff2"]
    expected = _np_layer_norm(h, P["lnf_gamma"], P["lnf_beta"]).mean(0)
    with torch.no_grad():
        got = bb(torch.as_tensor(x)).numpy()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_trainable_gradients_desk(rng):
    bb = Backbone(BackboneConfig(layer_count=2, d_h=64, head_count=4, ff_width=128, max_seq=64, seed=1))
    tok = torch.as_tensor(rng.normal(size=(2, 64, 64)))
    c = torch.as_tensor(rng.normal(size=(2, 64)))
    params = [p for p in bb.parameters() if p.requires_grad]
    assert dn.finite_diff_check(lambda: (bb(tok) * c).sum(), params, max_coords=10) <= 1e-4


def test_weight_export_import(tmp_path):
    src = Backbone(BackboneConfig(layer_count=1, d_h=8, head_count=2, ff_width=16, max_seq=64, seed=1))
    dst = Backbone(BackboneConfig(layer_count=1, d_h=8, head_count=2, ff_width=16, max_seq=64, seed=2))
    src.export_weights(tmp_path / "w.bin")
    import_weights(dst, tmp_path / "w.bin")
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert torch.equal(a, b)
    assert {n for n, p in dst.named_parameters() if p.requires_grad} == \
        {n for n, p in src.named_parameters() if p.requires_grad}

    wrong = Backbone(BackboneConfig(layer_count=1, d_h=16, head_count=2, ff_width=16, max_seq=64))
    with pytest.raises(TensorFileError, match="shape mismatch"):
        import_weights(wrong, tmp_path / "w.bin")

    raw = bytearray((tmp_path / "w.bin").read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    (tmp_path / "v.bin").write_bytes(bytes(raw))
    with pytest.raises(TensorFileError, match="version"):
        import_weights(dst, tmp_path / "v.bin")
