from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from ddfusion.blocks import (
    CBAM,
    LIA,
    RDSCB,
    GNLeakyReLU,
    InteractiveSelfAttention,
    InteractiveTransformerBlock,
    MSConv,
    SwinBlock,
    SwinLayer,
    msa,
    window_partition,
    window_reverse,
)
from ddfusion.errors import ConfigError, InvalidInputError, NumericError


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _zero(module: nn.Module) -> None:
    with torch.no_grad():
        for param in module.parameters():
            param.zero_()


def test_window_partition_exact_grid():
    x = _randn(2, 3, 64, 64)
    ws = window_partition(x, 8)
    assert ws.windows.shape == (2 * 64, 64, 3)
    assert torch.equal(window_reverse(ws), x)


def test_single_window():
    ws = window_partition(_randn(1, 4, 8, 8), 8)
    assert ws.count == 1
    assert ws.windows.shape[1] == 64


def test_window_partition_pads_and_crops():
    x = _randn(1, 2, 10, 10)
    ws = window_partition(x, 8)
    assert (ws.padded_height, ws.padded_width) == (16, 16)
    assert ws.count == 4
    assert torch.equal(window_reverse(ws), x)


def test_window_partition_token_layout():
    x = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
    ws = window_partition(x, 2)
    assert ws.windows[0, :, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert ws.windows[1, :, 0].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_window_partition_rejects_bad_size():
    with pytest.raises(InvalidInputError):
        window_partition(_randn(1, 1, 8, 8), 0)


def test_attention_rows_sum_to_one():
    q, k, v = _randn(3, 16, 8, seed=1), _randn(3, 16, 8, seed=2), _randn(3, 16, 8, seed=3)
    out, attn = msa(q, k, v, heads=2, return_attn=True)
    assert out.shape == (3, 16, 8)
    assert attn.shape == (3, 2, 16, 16)
    torch.testing.assert_close(attn.sum(-1), torch.ones(3, 2, 16, dtype=torch.float64))


def test_attention_against_hand_computation():
    q = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]], dtype=torch.float64)
    k = torch.tensor([[[0.5, 1.0], [1.0, -1.0]]], dtype=torch.float64)
    v = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    out, attn = msa(q, k, v, heads=1, return_attn=True)
    logits = q[0].numpy() @ k[0].numpy().T / math.sqrt(2)
    weights = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attn[0, 0].numpy(), weights, atol=1e-12)
    np.testing.assert_allclose(out[0].numpy(), weights @ v[0].numpy(), atol=1e-12)


def test_attention_single_token_returns_value():
    v = _randn(2, 1, 4, seed=5)
    out = msa(_randn(2, 1, 4, seed=6), _randn(2, 1, 4, seed=7), v, heads=2)
    torch.testing.assert_close(out, v)


def test_attention_constant_values_give_constant_output():
    v = torch.ones(1, 6, 4, dtype=torch.float64) * torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=torch.float64)
    out = msa(_randn(1, 6, 4, seed=1), _randn(1, 6, 4, seed=2), v, heads=2)
    torch.testing.assert_close(out, v)


def test_attention_rejects_bad_input():
    q = _randn(1, 4, 6)
    with pytest.raises(InvalidInputError):
        msa(q, q, _randn(1, 4, 8), heads=2)
    with pytest.raises(InvalidInputError):
        msa(q, q, q, heads=4)
    bad = q.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        msa(bad, q, q, heads=2)


def test_isa_with_silent_second_stream_reduces_to_plain_attention():
    isa = InteractiveSelfAttention(8, 2).double()
    x1 = _randn(4, 16, 8, seed=1)
    x2 = torch.zeros_like(x1)
    out1, _ = isa(x1, x2)
    expected = msa(isa.q1(x1), isa.k1(x1), isa.v1(x1), 2, isa.proj1)
    torch.testing.assert_close(out1, expected, atol=1e-12, rtol=0)


def test_isa_swapping_streams_swaps_outputs():
    isa = InteractiveSelfAttention(8, 2).double()
    swapped = InteractiveSelfAttention(8, 2).double()
    state = isa.state_dict()
    swapped.load_state_dict({_swap(key): value for key, value in state.items()})
    x1, x2 = _randn(2, 16, 8, seed=1), _randn(2, 16, 8, seed=2)
    out1, out2 = isa(x1, x2)
    s2, s1 = swapped(x2, x1)
    torch.testing.assert_close(s1, out1)
    torch.testing.assert_close(s2, out2)


def _swap(key: str) -> str:
    name, rest = key.split(".", 1)
    return name[:-1] + {"1": "2", "2": "1"}[name[-1]] + "." + rest


def test_isa_rejects_mismatched_streams():
    isa = InteractiveSelfAttention(8, 2)
    with pytest.raises(InvalidInputError):
        isa(torch.zeros(1, 4, 8), torch.zeros(1, 5, 8))


@pytest.mark.parametrize("size", [(8, 8), (12, 20), (10, 6)])
def test_itb_with_zeroed_output_stages_is_identity(size):
    itb = InteractiveTransformerBlock(8, 4, 2).double()
    itb.zero_output_stages()
    f1, f2 = _randn(2, 8, *size, seed=1), _randn(2, 8, *size, seed=2)
    o1, o2 = itb(f1, f2)
    assert torch.equal(o1, f1)
    assert torch.equal(o2, f2)


def test_itb_mixes_streams():
    itb = InteractiveTransformerBlock(8, 4, 2).double()
    f1, f2 = _randn(1, 8, 8, 8, seed=1), _randn(1, 8, 8, 8, seed=2)
    base, _ = itb(f1, f2)
    moved, _ = itb(f1, f2 + 1.0)
    assert base.shape == f1.shape
    assert not torch.allclose(base, moved)


def test_swin_with_zeroed_output_stages_is_identity():
    block = SwinBlock(8, 4, 2).double()
    block.zero_output_stages()
    x = _randn(1, 8, 12, 12)
    assert torch.equal(block(x), x)


def test_shifted_window_crosses_window_boundary():
    plain = SwinLayer(8, 4, 2, 2.0, shift=0).double()
    shifted = SwinLayer(8, 4, 2, 2.0, shift=2).double()
    shifted.load_state_dict(plain.state_dict())
    x = _randn(1, 8, 8, 8, seed=3)
    bumped = x.clone()
    bumped[:, :, 3, 3] += 5.0
    plain_diff = (plain(bumped) - plain(x)).abs()
    shifted_diff = (shifted(bumped) - shifted(x)).abs()
    assert plain_diff[:, :, 4:, :].max() == 0
    assert plain_diff[:, :, :, 4:].max() == 0
    assert shifted_diff[:, :, 4:6, 4:6].max() > 0


def test_msconv_shape_and_zero_weights():
    conv = MSConv(8).double()
    x = _randn(1, 8, 32, 32)
    assert conv(x).shape == x.shape
    _zero(conv)
    assert torch.equal(conv(x), torch.zeros_like(x))


def test_msconv_is_translation_equivariant_in_interior():
    conv = MSConv(8).double()
    x = _randn(1, 8, 32, 32, seed=4)
    shifted = torch.roll(x, shifts=(4, 4), dims=(2, 3))
    y, y_shifted = conv(x), conv(shifted)
    torch.testing.assert_close(y_shifted[:, :, 8:28, 8:28], y[:, :, 4:24, 4:24])


def test_msconv_rejects_uneven_split():
    with pytest.raises(ConfigError):
        MSConv(6, (1, 3, 5, 7))


def test_cbam_gates_are_bounded_and_shrink_features():
    cbam = CBAM(8, reduction=4).double()
    x = _randn(2, 8, 16, 16, seed=2)
    channel_gate, spatial_gate = cbam.gates(x)
    assert channel_gate.shape == (2, 8, 1, 1)
    assert spatial_gate.shape == (2, 1, 16, 16)
    for gate in (channel_gate, spatial_gate):
        assert torch.all((gate > 0) & (gate < 1))
    assert torch.all(cbam(x).abs() <= x.abs())


def test_cbam_constant_input_gives_constant_spatial_gate():
    cbam = CBAM(8, reduction=4).double()
    x = torch.arange(8, dtype=torch.float64).reshape(1, 8, 1, 1).expand(1, 8, 12, 12).contiguous()
    _, spatial_gate = cbam.gates(x)
    torch.testing.assert_close(spatial_gate, spatial_gate[:, :, :1, :1].expand_as(spatial_gate))


def test_gn_lr_normalises_groups():
    block = GNLeakyReLU(8, groups=2).double()
    x = _randn(2, 8, 6, 6) * 3 + 1
    normed = block.norm(x).reshape(2, 2, -1)
    torch.testing.assert_close(normed.mean(-1), torch.zeros(2, 2, dtype=torch.float64), atol=1e-10, rtol=0)
    constant = torch.full((1, 8, 6, 6), 0.7, dtype=torch.float64)
    torch.testing.assert_close(block(constant), torch.zeros_like(constant), atol=1e-6, rtol=0)
    with pytest.raises(ConfigError):
        GNLeakyReLU(8, groups=3)


@pytest.mark.parametrize("kernel", [3, 5, 7])
def test_rdscb_shapes(kernel):
    block = RDSCB(8, kernel, repeat=2, groups=2).double()
    x = _randn(2, 8, 16, 16)
    assert block(x).shape == x.shape
    assert block.kernel == kernel


def test_rdscb_with_zero_stages_is_gn_lr_of_input():
    block = RDSCB(8, 3, repeat=2, groups=2).double()
    for stage in block.stages:
        _zero(stage)
    x = _randn(1, 8, 10, 10)
    torch.testing.assert_close(block(x), block.gn_lr(x))
    fresh = RDSCB(8, 5, repeat=3, groups=2).double()
    fresh.zero_output_stages()
    torch.testing.assert_close(fresh(x), fresh.gn_lr(x))


def test_rdscb_depthwise_stage_keeps_channels_separate():
    block = RDSCB(8, 5, groups=2).double()
    depthwise = block.stages[0][0]
    x = _randn(1, 8, 12, 12)
    bumped = x.clone()
    bumped[:, 0] += 1.0
    diff = (depthwise(bumped) - depthwise(x)).abs()
    assert diff[:, 1:].max() == 0
    assert diff[:, 0].max() > 0


@pytest.mark.parametrize("kwargs", [{"kernel": 4}, {"kernel": 3, "repeat": 0}])
def test_rdscb_rejects_bad_config(kwargs):
    with pytest.raises(ConfigError):
        RDSCB(8, **kwargs)


def test_lia_output_shape_and_zero_weights():
    lia = LIA(8, kernel=5).double()
    f1, f2 = _randn(2, 8, 12, 12, seed=1), _randn(2, 8, 12, 12, seed=2)
    assert lia(f1, f2).shape == f1.shape
    with torch.no_grad():
        lia.alpha.zero_()
        lia.beta.zero_()
    expected = lia.conv(0.5 * torch.cat([f1, f2], dim=1))
    torch.testing.assert_close(lia(f1, f2), expected)


def test_lia_constant_features_reduce_std_branch_to_floor():
    lia = LIA(8).double()
    f1 = torch.full((1, 8, 8, 8), 0.3, dtype=torch.float64)
    f2 = torch.full((1, 8, 8, 8), -0.2, dtype=torch.float64)
    cat, att = lia.attention(f1, f2)
    avg = cat.mean(dim=(2, 3), keepdim=True)
    floor = torch.full_like(avg, 1e-6)
    expected = lia.alpha * lia.mlp(avg) + lia.beta * lia.mlp(floor)
    torch.testing.assert_close(att, expected, atol=1e-10, rtol=0)
    gate = torch.sigmoid(att)
    assert torch.all((gate > 0) & (gate < 1))


def test_lia_rejects_mismatched_inputs():
    lia = LIA(8)
    with pytest.raises(InvalidInputError):
        lia(torch.zeros(1, 8, 8, 8), torch.zeros(1, 8, 8, 9))
    with pytest.raises(ConfigError):
        LIA(8, kernel=2)


def test_blocks_propagate_gradients():
    x = _randn(1, 8, 8, 8).requires_grad_()
    block = RDSCB(8, 3, groups=2).double()
    F.l1_loss(block(x), torch.zeros_like(x)).backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
