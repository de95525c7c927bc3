from __future__ import annotations

import pytest
import torch
from torch import nn

from ddfusion.errors import InvalidInputError
from ddfusion.gradchecks import BLOCK_CHECKS, LOSS_CHECKS, TOLERANCE, check_block, check_loss, run_suite
from ddfusion.losses import PerceptualExtractor, gradcheck, leaky_pattern, random_point


@pytest.mark.parametrize("name", LOSS_CHECKS)
def test_every_loss_passes(name):
    result = check_loss(name)
    assert result.name == name
    assert result.error < TOLERANCE
    assert result.passed


@pytest.mark.parametrize("name", BLOCK_CHECKS)
def test_every_block_passes(name):
    result = check_block(name)
    assert result.passed, f"{name}: {result.error:.3e}"


def test_unknown_names_are_rejected():
    with pytest.raises(InvalidInputError):
        check_loss("ssim")
    with pytest.raises(InvalidInputError):
        check_block("unet")


def test_run_suite_subset():
    results = run_suite(losses=("tv", "charbonnier"), blocks=("gn_lr",))
    assert [r.name for r in results] == ["tv", "charbonnier", "gn_lr"]


def test_signature_skips_coordinates_across_kinks():
    point = torch.tensor([1e-5, 0.5, -0.5], dtype=torch.float64)

    def f(x):
        return x.abs().sum()

    def signs(x):
        return x > 0

    assert gradcheck(f, point, step=1e-4, signature=signs) < 1e-8
    assert gradcheck(f, point, step=1e-4) > 0.5


def test_leaky_pattern_records_activation_signs():
    module = nn.Sequential(nn.Identity(), nn.LeakyReLU(0.2))
    x = torch.tensor([-1.0, 2.0, 0.0])
    assert leaky_pattern(module, lambda: module(x)).tolist() == [False, True, False]
    assert leaky_pattern(nn.Identity(), lambda: None).numel() == 0


def test_perceptual_pattern_changes_across_inputs():
    extractor = PerceptualExtractor(seed=0)
    a = random_point((1, 1, 16, 16), seed=0)
    b = random_point((1, 1, 16, 16), seed=1)
    assert torch.equal(extractor.pattern(a), extractor.pattern(a.clone()))
    assert not torch.equal(extractor.pattern(a), extractor.pattern(b))
