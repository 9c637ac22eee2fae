"""Closed-form count formulas checked against enumeration and loop-nest oracles."""

from fractions import Fraction

import numpy as np
import pytest
import torch

from slyolo import ModelConfig, build_model
from slyolo.complexity import (
    audit_model,
    flops_dsconv,
    flops_standard_conv,
    params_dsconv,
    params_standard_conv,
)


def enumerate_conv_weights(k, c_in, c_out):
    """Oracle: element count of a materialized dense conv weight tensor."""
    return np.zeros((c_out, c_in, k, k)).size


def enumerate_dsconv_weights(k_dw, k_pw, c_in, c_out):
    """Oracle: materialized depthwise + pointwise weight tensors."""
    return np.zeros((c_in, 1, k_dw, k_dw)).size + np.zeros((c_out, c_in, k_pw, k_pw)).size


def executed_loop_nest_mults(k, c_in, c_out, h_out, w_out):
    """Oracle: literally run the direct-convolution loop nest, counting multiplies."""
    count = 0
    for _ in range(h_out):
        for _ in range(w_out):
            for _ in range(c_out):
                for _ in range(c_in):
                    for _ in range(k):
                        for _ in range(k):
                            count += 1
    return count


def position_grid_mults(k, c_in, c_out, h_out, w_out):
    """Oracle for larger sizes: materialized weight count x materialized output grid."""
    return enumerate_conv_weights(k, c_in, c_out) * np.zeros((h_out, w_out)).size


def test_params_examples():
    assert params_standard_conv(3, 64, 128) == enumerate_conv_weights(3, 64, 128) == 73728
    assert params_standard_conv(1, 1, 1) == 1
    assert params_standard_conv(3, 16, 16) == enumerate_conv_weights(3, 16, 16) == 2304
    assert params_dsconv(3, 1, 64, 128) == enumerate_dsconv_weights(3, 1, 64, 128) == 8768
    assert params_dsconv(1, 1, 1, 1) == 2


def test_flops_examples():
    # frozen from position_grid_mults (471,859,200 = 73728 weights x 6400 positions)
    assert flops_standard_conv(3, 64, 128, 80, 80) == position_grid_mults(3, 64, 128, 80, 80)
    assert flops_standard_conv(3, 64, 128, 80, 80) == 471_859_200
    assert flops_standard_conv(1, 1, 1, 1, 1) == 1
    assert flops_standard_conv(3, 16, 16, 2, 2) == executed_loop_nest_mults(3, 16, 16, 2, 2) == 9216
    assert flops_dsconv(3, 1, 64, 128, 80, 80) == 8768 * 6400 == 56_115_200
    assert flops_dsconv(1, 1, 1, 1, 1, 1) == 2


def test_executed_loop_nest_anchors_formula():
    for k in (1, 3):
        for c_in in (1, 2, 3):
            for c_out in (1, 2, 4):
                for h, w in ((1, 1), (2, 3), (4, 4)):
                    assert flops_standard_conv(k, c_in, c_out, h, w) == executed_loop_nest_mults(
                        k, c_in, c_out, h, w
                    )


def test_dsconv_cheaper_than_standard():
    for c_in in range(2, 65, 7):
        for c_out in range(2, 65, 7):
            assert flops_dsconv(3, 1, c_in, c_out, 5, 5) < flops_standard_conv(3, c_in, c_out, 5, 5)


def test_ratio_identity():
    # P_dconv / P_conv == 1/C_out + 1/K^2 when K2 == K1 and K3 == 1
    lhs = Fraction(params_dsconv(3, 1, 64, 128), params_standard_conv(3, 64, 128))
    assert lhs == Fraction(1, 128) + Fraction(1, 9)
    for k in (1, 3, 5):
        for c_in in (1, 4, 33):
            for c_out in (1, 8, 57):
                lhs = Fraction(params_dsconv(k, 1, c_in, c_out), params_standard_conv(k, c_in, c_out))
                assert lhs == Fraction(1, c_out) + Fraction(1, k * k)


@pytest.mark.parametrize("bad", [0, -1, 2.5])
def test_domain_errors(bad):
    with pytest.raises((ValueError, TypeError)):
        params_standard_conv(3, bad, 8)
    with pytest.raises((ValueError, TypeError)):
        flops_dsconv(3, 1, 8, 8, bad, 4)


def test_audit_matches_introspection(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    report = audit_model(model, (3, 128, 128))
    assert report.total_params == sum(p.numel() for p in model.parameters())
    assert report.total_flops == 2 * report.total_macs
    for row in report.rows:
        assert row.flops == 2 * row.macs


def test_gflops_increase_with_resolution_params_do_not(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    small = audit_model(model, (3, 128, 128))
    large = audit_model(model, (3, 256, 256))
    assert large.total_macs > small.total_macs
    assert large.total_params == small.total_params


def test_audit_report_serialization(tiny_cfg):
    import json

    report = audit_model(build_model(tiny_cfg, seed=0), (3, 64, 64))
    doc = json.loads(report.to_json())
    assert doc["totals"]["params"] == report.total_params
    assert sum(r["params"] + r["bias_params"] + r["bn_params"] for r in doc["rows"]) == report.total_params
    text = report.to_text()
    assert "total params" in text and "GFLOPs" in text


def test_audit_rejects_unknown_parameterized_layer():
    from slyolo.errors import AuditError

    class Odd(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.lin = torch.nn.Linear(3 * 8 * 8, 4)

        def forward(self, x):
            return self.lin(x.flatten(1))

    with pytest.raises(AuditError):
        audit_model(Odd(), (3, 8, 8))
