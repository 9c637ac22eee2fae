"""Block forward contracts, shape algebra, and gradient correctness."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slyolo.blocks import (
    C2f,
    C2fDCB,
    C3,
    Concat,
    ConvBNAct,
    DCB,
    LayerSpec,
    RepVGGDW,
    SCDown,
    SPPF,
    TensorSpec,
    Upsample,
)
from slyolo.errors import ConfigError, ShapeError


def n_params(module):
    return sum(p.numel() for p in module.parameters())


def randomize_bn(module, gen):
    """Give bn layers non-trivial statistics so tests exercise real folding."""
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.5, 0.5, generator=gen)
            m.running_var.uniform_(0.5, 1.5, generator=gen)
            m.weight.data.uniform_(0.5, 1.5, generator=gen)
            m.bias.data.uniform_(-0.5, 0.5, generator=gen)


class TestConvBNAct:
    def test_stride_arithmetic(self):
        conv = ConvBNAct(3, 16, 3, 2).eval()
        assert conv(torch.randn(1, 3, 640, 640)).shape == (1, 16, 320, 320)

    def test_identity_shape(self):
        conv = ConvBNAct(16, 16, 1, 1).eval()
        assert conv(torch.randn(1, 16, 8, 8)).shape == (1, 16, 8, 8)

    def test_divisibility_violation(self):
        conv = ConvBNAct(3, 16, 3, 2).eval()
        with pytest.raises(ShapeError):
            conv(torch.randn(1, 3, 641, 640))

    def test_channel_mismatch(self):
        conv = ConvBNAct(3, 16, 3, 2).eval()
        with pytest.raises(ConfigError):
            conv(torch.randn(1, 4, 64, 64))


class TestDCB:
    def test_channel_preserving(self):
        block = DCB(32).eval()
        assert block(torch.randn(1, 32, 16, 16)).shape == (1, 32, 16, 16)

    def test_zero_weights_residual_identity(self):
        block = DCB(8, shortcut=True).eval()
        for p in block.parameters():
            p.data.zero_()
        x = torch.randn(2, 8, 6, 6)
        assert torch.equal(block(x), x)

    def test_matches_stage_composition(self):
        torch.manual_seed(3)
        block = DCB(16, shortcut=False).eval()
        gen = torch.Generator().manual_seed(5)
        randomize_bn(block, gen)
        x = torch.randn(2, 16, 10, 10)
        with torch.no_grad():
            reference = block.rep(block.pw(block.dw(block.cv1(x))))
            out = block(x)
        assert float((out - reference).abs().max()) < 1e-6


class TestC2fDCB:
    def test_shape_contract(self):
        block = C2fDCB(64, 64, n=1).eval()
        assert block(torch.randn(1, 64, 40, 40)).shape == (1, 64, 40, 40)

    def test_fewer_params_than_c2f(self):
        assert n_params(C2fDCB(64, 64, n=1)) < n_params(C2f(64, 64, n=1))

    def test_hidden_concat_width(self):
        block = C2fDCB(64, 64, n=3)
        assert block.cv2.conv.in_channels == (2 + 3) * block.c


class TestSCDown:
    def test_contract(self):
        block = SCDown(128, 256, 3, 2).eval()
        assert block(torch.randn(1, 128, 80, 80)).shape == (1, 256, 40, 40)

    def test_cheaper_than_dense_conv(self):
        assert n_params(SCDown(128, 256, 3, 2)) < n_params(ConvBNAct(128, 256, 3, 2))

    def test_zero_case(self):
        block = SCDown(8, 8, 3, 1).eval()
        for p in block.parameters():
            p.data.zero_()
        x = torch.randn(1, 8, 6, 6)
        assert torch.equal(block(x), torch.zeros_like(x))

    def test_divisibility(self):
        block = SCDown(8, 16).eval()
        with pytest.raises(ShapeError):
            block(torch.randn(1, 8, 7, 8))


class TestPlumbing:
    def test_upsample(self):
        assert Upsample()(torch.randn(1, 256, 20, 20)).shape == (1, 256, 40, 40)

    def test_concat(self):
        out = Concat()([torch.randn(1, 64, 80, 80), torch.randn(1, 128, 80, 80)])
        assert out.shape == (1, 192, 80, 80)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            Concat()([torch.randn(1, 64, 80, 80), torch.randn(1, 64, 40, 40)])

    def test_sppf_preserves_spatial(self):
        block = SPPF(64, 64).eval()
        assert block(torch.randn(1, 64, 20, 20)).shape == (1, 64, 20, 20)


def test_depthwise_parameter_dominance():
    for k in (3, 5):
        for c in (2, 8, 64):
            dw = torch.nn.Conv2d(c, c, k, groups=c, bias=False)
            assert dw.weight.numel() == k * k * c < k * k * c * c


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec("ConvBNAct", 8, 8, kernel=4)
    with pytest.raises(ConfigError):
        LayerSpec("ConvBNAct", 8, 12, groups=8)
    with pytest.raises(ConfigError):
        LayerSpec("Nope", 8, 8)
    spec = LayerSpec("ConvBNAct", 8, 8, kernel=3, groups=8)
    assert spec.depthwise


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from(["ConvBNAct", "C3", "C2f", "C2fDCB", "SCDown", "SPPF", "DCB", "RepVGGDW"]),
    c_mult=st.integers(1, 3),
    out_mult=st.integers(1, 3),
    stride=st.sampled_from([1, 2]),
    size=st.sampled_from([8, 16]),
    repeat=st.integers(1, 2),
    shortcut=st.booleans(),
)
def test_shape_algebra_matches_forward(kind, c_mult, out_mult, stride, size, repeat, shortcut):
    c_in = 4 * c_mult
    c_out = 4 * out_mult
    if kind in ("DCB", "RepVGGDW"):
        c_out = c_in
    if kind in ("C3", "C2f", "C2fDCB", "SPPF", "DCB", "RepVGGDW"):
        stride = 1
    spec = LayerSpec(kind, c_in, c_out, kernel=3 if kind != "SPPF" else 5, stride=stride,
                     repeat=repeat, shortcut=shortcut)
    block = spec.build().eval()
    in_spec = TensorSpec(c_in, size, size)
    out_spec = block.out_spec(in_spec)
    y = block(torch.randn(1, c_in, size, size))
    assert (y.shape[1], y.shape[2], y.shape[3]) == (out_spec.channels, out_spec.height, out_spec.width)


@pytest.mark.parametrize("factory", [
    lambda: DCB(6, shortcut=True),
    lambda: C2fDCB(6, 6, n=1),
    lambda: SCDown(6, 8, 3, 2),
])
def test_input_gradients_match_finite_differences(factory):
    torch.manual_seed(0)
    block = factory().double().eval()
    gen = torch.Generator().manual_seed(11)
    randomize_bn(block, gen)
    x = torch.randn(1, 6, 8, 8, dtype=torch.float64, requires_grad=True)
    weights = torch.randn_like(block(x))

    def f(inp):
        return (block(inp) * weights).sum()

    f(x).backward()
    analytic = x.grad.clone()
    h = 1e-6
    rng = np.random.default_rng(4)
    flat = x.detach().clone().reshape(-1)
    with torch.no_grad():
        for idx in rng.choice(flat.numel(), size=24, replace=False):
            e = torch.zeros_like(flat)
            e[idx] = h
            up = f((flat + e).reshape(x.shape))
            down = f((flat - e).reshape(x.shape))
            fd = float((up - down) / (2 * h))
            ana = float(analytic.reshape(-1)[idx])
            denom = max(abs(fd), abs(ana), 1e-8)
            assert abs(fd - ana) / denom < 1e-4
