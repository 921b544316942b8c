import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clad.errors import ConfigError, LoadError
from clad.model import (
    CLAD,
    CLS_ID,
    PAD_ID,
    ModelConfig,
    build_input,
    collate,
    desk_config,
    downsampled_length,
    load_checkpoint,
    matrix_memory,
    read_checkpoint,
    save_checkpoint,
    tiny_config,
)
from clad.model.layers import DilatedConvBlock, FourWayPool, MLSTMLayer, MultiHeadSelfAttention

from oracles import coordinate_check, directional_check, pairwise_memory


def stream(n, seed=0):
    return bytes(np.random.default_rng(seed).integers(0, 256, n, dtype=np.uint8))


# -- lengths and batching -----------------------------------------------------------

@pytest.mark.parametrize("L,expected", [(8191, 512), (8192, 512), (1, 1), (2, 1), (16, 1), (17, 2), (100, 7), (0, 1)])
def test_downsampled_length(L, expected):
    assert downsampled_length(L) == expected


@given(st.integers(1, 20_000))
def test_downsampled_length_is_ceil_of_stride(L):
    assert downsampled_length(L) == math.ceil(L / 16)


def test_build_input_layout():
    row, n = build_input(b"\x01\x02\x03", max_len=8)
    assert n == 3
    assert row.tolist() == [CLS_ID, 1, 2, 3, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    row, n = build_input(b"x" * 20, max_len=8)
    assert n == 7 and row[0] == CLS_ID and PAD_ID not in row
    row, n = build_input(b"", max_len=4)
    assert n == 0 and row.tolist() == [CLS_ID, PAD_ID, PAD_ID, PAD_ID]


def test_collate_widths():
    b = collate([b"ab", b"abcde"], [0, 1], config=tiny_config())
    assert b.token_ids.shape == (2, 129)
    assert b.lengths.tolist() == [2, 5] and b.labels.tolist() == [0, 1]
    b = collate([b"ab", b"abcde"], config=tiny_config(), pad_to="longest")
    assert b.token_ids.shape == (2, 6) and b.labels is None
    with pytest.raises(ValueError):
        collate([b"abcde"], config=tiny_config(), pad_to=4)


def test_cnn_output_lengths_match_formula():
    model = CLAD(tiny_config()).eval()
    for n in (1, 2, 5, 16, 17, 100, 128):
        b = collate([stream(n)], config=model.config)
        f = model.features(b.token_ids, b.lengths)
        assert f.S.shape[1] == downsampled_length(128)
        assert int(f.valid_T[0]) == downsampled_length(n)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=500)
    with pytest.raises(ConfigError):
        desk_config(cnn_blocks=((32, 5, 2, 1), (64, 5, 2, 2), (64, 5, 2, 4)))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d_model": 512, "colour": "blue"})
    cfg = desk_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- forward shapes -------------------------------------------------------------

@pytest.mark.parametrize("L", [1, 2, 5, 100, 4096, 8191, 20000])
def test_forward_shapes(L):
    model = CLAD(desk_config()).eval()
    b = collate([stream(L, L)], config=model.config, pad_to="longest")
    assert int(b.lengths[0]) == min(L, 8191)
    with torch.no_grad():
        logits, p = model(b, return_pooled=True)
    assert logits.shape == (1, 2) and p.shape == (1, 4 * 64)
    assert torch.isfinite(logits).all()


def test_published_config_shape():
    torch.manual_seed(0)
    model = CLAD().eval()
    b = collate([stream(300)], pad_to="longest")
    with torch.no_grad():
        assert model(b).shape == (1, 2)
    assert model.head.in_features == 2048


# -- padding invisibility --------------------------------------------------------

def test_padding_invisible_in_batch():
    model = CLAD(tiny_config()).eval()
    streams = [stream(n, n) for n in (3, 40, 128)]
    with torch.no_grad():
        full = model(collate(streams, config=model.config))
        short = model(collate(streams, config=model.config, pad_to="longest"))
        solo = torch.cat([model(collate([s], config=model.config, pad_to="longest")) for s in streams])
    assert torch.allclose(full, short, atol=1e-5)
    assert torch.allclose(full, solo, atol=1e-5)


def test_conv_block_ignores_padding_content():
    torch.manual_seed(1)
    blk = DilatedConvBlock(4, 6, 5, 2, 2)
    x = torch.randn(1, 4, 30)
    x[..., 11:] = 0
    y1, v1 = blk(x, torch.tensor([11]))
    y2, v2 = blk(torch.cat([x, torch.zeros(1, 4, 40)], -1), torch.tensor([11]))
    assert v1.item() == v2.item() == 6
    assert torch.allclose(y1[..., :6], y2[..., :6], atol=1e-6)
    assert (y2[..., 6:] == 0).all()


# -- attention ----------------------------------------------------------------------

def test_attention_rows_sum_to_one_and_skip_pad():
    torch.manual_seed(2)
    attn = MultiHeadSelfAttention(16, 4)
    mask = torch.tensor([[True] * 5 + [False] * 3, [True] * 8])
    _, w = attn(torch.randn(2, 8, 16), mask, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(2, 4, 8), atol=1e-6)
    assert (w[0, :, :, 5:] == 0).all()


def test_pool_attention_weights_sum_to_one():
    torch.manual_seed(3)
    pool = FourWayPool(16)
    seq = torch.randn(3, 9, 16)
    valid = torch.tensor([1, 4, 9])
    smask = torch.arange(9)[None, :] < valid[:, None]
    alpha = pool.attention_weights(seq, smask)
    assert torch.allclose(alpha.sum(-1), torch.ones(3), atol=1e-6)
    assert (alpha[~smask] == 0).all()


def test_pool_paths():
    pool = FourWayPool(4)
    H = torch.tensor([[[9.0, 9, 9, 9], [1, 2, 3, 4], [3, 2, 1, 0], [100, 100, 100, 100]]])
    out = pool(H, torch.tensor([2]))
    cls, a, m, mu = out[0].split(4)
    assert cls.tolist() == [9, 9, 9, 9]
    assert m.tolist() == [3, 2, 3, 4]
    assert mu.tolist() == [2, 2, 2, 2]
    assert a.max() <= 3 and a.min() >= 0


# -- mLSTM ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_matrix_memory_matches_pairwise(seed):
    g = torch.Generator().manual_seed(seed)
    T = int(torch.randint(1, 33, (1,), generator=g))
    q, k, v = (torch.randn(2, 2, T, 4, generator=g, dtype=torch.float64) for _ in range(3))
    mask = torch.ones(2, T, dtype=torch.bool)
    mask[1, max(1, T // 2):] = False
    got = matrix_memory(q, k, v, mask)
    want = pairwise_memory(q, k, v, mask)
    assert (got - want).abs().max().item() <= 1e-5


def test_mlstm_layer_matches_pairwise():
    torch.manual_seed(4)
    layer = MLSTMLayer(16, 2, 32).double().eval()
    h = torch.randn(2, 12, 16, dtype=torch.float64)
    mask = torch.tensor([[True] * 12, [True] * 7 + [False] * 5])
    got = layer(h, mask)
    want = layer(h, mask, memory_fn=pairwise_memory)
    assert (got - want).abs().max().item() <= 1e-5


# -- gradients ---------------------------------------------------------------------

def test_attention_pool_gradient():
    torch.manual_seed(5)
    pool = FourWayPool(8).double()
    H = torch.randn(2, 7, 8, dtype=torch.float64, requires_grad=True)
    valid = torch.tensor([6, 3])

    def f(x):
        return (pool(x, valid) ** 2).sum()

    assert directional_check(lambda ts: f(ts[0]), [H]) <= 1e-4
    assert coordinate_check(f, H, n_coords=30) <= 1e-4


def test_tiny_model_parameter_gradients():
    model = CLAD(tiny_config(seed=3)).double().eval()
    b = collate([stream(n, n) for n in (20, 90, 128)], config=model.config)
    names = [n for n, _ in model.named_parameters()]
    weights = torch.tensor([[0.3, -1.2], [0.7, 0.1], [-0.4, 0.9]], dtype=torch.float64)

    def f(ps):
        out = torch.func.functional_call(model, dict(zip(names, ps)), (b.token_ids, b.lengths))
        return (out * weights).sum()

    leaves = [p.detach().clone().requires_grad_(True) for p in model.parameters()]
    assert directional_check(f, leaves, n_dirs=3) <= 1e-4


# -- init and checkpoints -------------------------------------------------------

def test_init_is_seeded():
    a, b = CLAD(tiny_config(seed=1)), CLAD(tiny_config(seed=1))
    c = CLAD(tiny_config(seed=2))
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert not torch.equal(a.head.weight, c.head.weight)
    assert (a.transformer.norm1.weight == 1).all()
    assert (a.head.bias == 0).all()
    bound = math.sqrt(3.0 / a.head.in_features)
    assert a.head.weight.abs().max() <= bound


def test_checkpoint_roundtrip(tmp_path):
    model = CLAD(tiny_config(seed=7))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, "finetuned-ema", extra={"epoch": 3})
    header, tensors = read_checkpoint(path)
    assert header["tag"] == "finetuned-ema" and header["extra"] == {"epoch": 3}
    back, meta = load_checkpoint(path, expected_tag="finetuned-ema")
    assert back.config == model.config
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    save_checkpoint(tmp_path / "again.ckpt", back, "finetuned-ema", extra={"epoch": 3})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    model = CLAD(tiny_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, "pretrained")
    with pytest.raises(LoadError):
        load_checkpoint(path, expected_tag="finetuned-ema")
    with pytest.raises(LoadError):
        load_checkpoint(path, config=desk_config())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(LoadError):
        load_checkpoint(bad)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.ckpt")
