from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from ddfusion.ddon import DDON, BypassEncoder
from ddfusion.errors import InvalidInputError
from ddfusion.ilgfn import ILGFN, ConcatFusion, DDFusion, LocalPath, ReconstructionHead, fuse_image
from ddfusion.imaging import rgb_to_ycbcr
from ddfusion.losses import loss_fu
from ddfusion.models import LossWeights, ProjectConfig, TrainConfig

from conftest import SMALL_BLOCKS, synthetic_scene


class Scale(nn.Module):
    def __init__(self, factor: float) -> None:
        super().__init__()
        self.factor = factor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.factor * x


class Average(nn.Module):
    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return 0.5 * (a + b)


def _features(seed=0, size=16, channels=8):
    gen = torch.Generator().manual_seed(seed)
    return (
        torch.randn(1, channels, size, size, generator=gen),
        torch.randn(1, channels, size, size, generator=gen),
    )


def test_ilgfn_output_shape(small_blocks):
    net = ILGFN(small_blocks)
    f_vi, f_ir = _features()
    fused = net(f_vi, f_ir)
    assert fused.shape == f_vi.shape
    image = net.reconstruct(fused)
    assert image.shape == (1, 1, 16, 16)
    assert torch.all((image >= 0) & (image <= 1))


def test_ilgfn_rejects_mismatched_features(small_blocks):
    net = ILGFN(small_blocks)
    with pytest.raises(InvalidInputError):
        net(torch.zeros(1, 8, 16, 16), torch.zeros(1, 8, 16, 12))


def test_local_paths_use_distinct_kernels_and_parameters(small_blocks):
    net = ILGFN(small_blocks)
    assert [path.kernel for path in net.local_paths] == list(small_blocks.local_kernels)
    assert [path.rdscb_vi.kernel for path in net.local_paths] == [3, 5, 7]
    ids = [id(p) for _, p in net.named_parameters(remove_duplicate=False)]
    assert len(ids) == len(set(ids))


def test_local_path_feeds_each_modality_through_its_own_branch(small_blocks):
    path = LocalPath(small_blocks, 3)
    path.rdscb_vi = Scale(2.0)
    path.rdscb_ir = Scale(3.0)
    path.lia = Average()
    path.rdscb_fu = Scale(5.0)
    f_vi, f_ir = _features(size=4)
    torch.testing.assert_close(path(f_vi, f_ir), 5.0 * (2.0 * f_vi + 3.0 * f_ir) / 2.0)


def test_zeroed_global_reduction_detaches_global_path(small_blocks):
    net = ILGFN(small_blocks).double()
    c = small_blocks.channels
    with torch.no_grad():
        net.lga.reduce.weight[:, c:] = 0.0
    f_vi, f_ir = (f.double() for f in _features(seed=1))
    before = net(f_vi, f_ir)
    with torch.no_grad():
        for param in net.global_itb.parameters():
            param.add_(torch.randn_like(param))
    assert torch.equal(net(f_vi, f_ir), before)


def test_output_depends_on_both_modalities(small_blocks):
    net = ILGFN(small_blocks).double()
    f_vi, f_ir = (f.double() for f in _features(seed=2))
    base = net(f_vi, f_ir)
    assert not torch.allclose(net(f_vi, f_ir + 0.1), base)
    assert not torch.allclose(net(f_vi + 0.1, f_ir), base)


def test_every_parameter_receives_gradient(small_blocks):
    torch.manual_seed(0)
    net = ILGFN(small_blocks)
    f_vi, f_ir = _features(seed=3)
    gen = torch.Generator().manual_seed(4)
    ir_ref = torch.rand(1, 1, 16, 16, generator=gen)
    vi_ref = torch.rand(1, 1, 16, 16, generator=gen)
    total, _ = loss_fu(net.reconstruct(net(f_vi, f_ir)), ir_ref, vi_ref, LossWeights())
    total.backward()
    missing = [
        name
        for name, param in net.named_parameters()
        if param.grad is None or not torch.any(param.grad != 0)
    ]
    assert missing == []


def test_reconstruction_head_with_zero_weights_outputs_half():
    head = ReconstructionHead(8)
    with torch.no_grad():
        for param in head.parameters():
            param.zero_()
    out = head(torch.randn(2, 8, 8, 8))
    assert torch.equal(out, torch.full((2, 1, 8, 8), 0.5))


def _project(ablation: str = "none") -> ProjectConfig:
    return ProjectConfig(train=TrainConfig(crop_size=16, ablation=ablation), blocks=SMALL_BLOCKS)


@pytest.mark.parametrize(
    ("ablation", "ddon_type", "ilgfn_type"),
    [
        ("none", DDON, ILGFN),
        ("no_ddon", BypassEncoder, ILGFN),
        ("no_ilgfn", DDON, ConcatFusion),
    ],
)
def test_from_config_honours_ablation(ablation, ddon_type, ilgfn_type):
    model = DDFusion.from_config(_project(ablation))
    assert type(model.ddon) is ddon_type
    assert type(model.ilgfn) is ilgfn_type
    gen = torch.Generator().manual_seed(0)
    ir, vi = torch.rand(2, 1, 1, 16, 16, generator=gen)
    assert model(ir, vi).shape == (1, 1, 16, 16)
    ir_en, vi_en = model.enhance(ir, vi)
    assert ir_en.shape == vi_en.shape == (1, 1, 16, 16)


def test_ddon_and_ilgfn_parameters_are_disjoint():
    model = DDFusion.from_config(_project())
    ddon_ids = {id(p) for p in model.ddon.parameters()}
    ilgfn_ids = {id(p) for p in model.ilgfn.parameters()}
    assert not ddon_ids & ilgfn_ids


def test_fuse_image_keeps_visible_chroma():
    model = DDFusion.from_config(_project())
    ir = synthetic_scene(1, size=24)
    gray = synthetic_scene(2, size=24)[0]
    vi = np.stack([gray + 0.01, gray, gray - 0.01])
    fused = fuse_image(model, ir, vi)
    assert fused.shape == (3, 24, 24)
    assert np.all((fused >= 0) & (fused <= 1))
    before, after = rgb_to_ycbcr(vi), rgb_to_ycbcr(fused)
    np.testing.assert_allclose(after.cb, before.cb, atol=1e-6)
    np.testing.assert_allclose(after.cr, before.cr, atol=1e-6)


def test_fuse_image_gray_and_deterministic():
    model = DDFusion.from_config(_project())
    ir = synthetic_scene(3, size=20)
    vi = synthetic_scene(4, size=20)
    first = fuse_image(model, ir, vi)
    assert first.shape == (1, 20, 20)
    assert np.array_equal(first, fuse_image(model, ir, vi))
    assert model.training


def test_fuse_image_rejects_misaligned_pair():
    model = DDFusion.from_config(_project())
    with pytest.raises(InvalidInputError):
        fuse_image(model, synthetic_scene(1, size=16), synthetic_scene(2, size=24))
