"""Parameter and FLOP accounting.

Closed-form counts for standard and depthwise-separable convolutions (bias
excluded), plus a model auditor that walks an assembled network, derives each
layer's analytical parameter count from its configuration, and cross-checks it
against the materialized weight tensors.  MAC counts use output spatial dims;
FLOPs are reported as 2x MACs.  Bias and batch-norm parameters are itemized
separately so the conv-level formulas stay exact while totals stay realistic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import AuditError


def _check_positive(**kwargs):
    for name, v in kwargs.items():
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def params_standard_conv(k: int, c_in: int, c_out: int) -> int:
    """Weight count of a dense k x k convolution (no bias)."""
    _check_positive(k=k, c_in=c_in, c_out=c_out)
    return k * k * c_in * c_out


def flops_standard_conv(k: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    """MAC count of a dense k x k convolution at the given output resolution."""
    _check_positive(k=k, c_in=c_in, c_out=c_out, h_out=h_out, w_out=w_out)
    return k * k * c_in * c_out * h_out * w_out


def params_dsconv(k_dw: int, k_pw: int, c_in: int, c_out: int) -> int:
    """Weight count of a depthwise k_dw x k_dw + pointwise k_pw x k_pw pair."""
    _check_positive(k_dw=k_dw, k_pw=k_pw, c_in=c_in, c_out=c_out)
    return k_dw * k_dw * c_in + k_pw * k_pw * c_in * c_out


def flops_dsconv(k_dw: int, k_pw: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    """MAC count of a depthwise + pointwise pair at the given output resolution."""
    _check_positive(k_dw=k_dw, k_pw=k_pw, c_in=c_in, c_out=c_out, h_out=h_out, w_out=w_out)
    hw = h_out * w_out
    return k_dw * k_dw * c_in * hw + k_pw * k_pw * c_in * c_out * hw


@dataclass
class LayerRow:
    path: str
    kind: str
    params: int          # weight elements (bias/bn excluded)
    bias_params: int
    bn_params: int
    macs: int            # conv MACs at the audited input spec
    bn_macs: int

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def total_params(self) -> int:
        return self.params + self.bias_params + self.bn_params


@dataclass
class ComplexityReport:
    input_shape: tuple
    rows: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.total_params for r in self.rows)

    @property
    def total_weight_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_macs_with_bn(self) -> int:
        return sum(r.macs + r.bn_macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def params_millions(self) -> float:
        return self.total_params / 1e6

    @property
    def gflops(self) -> float:
        """GFLOPs with bn folded (2x conv MACs) -- the table-comparison figure."""
        return self.total_flops / 1e9

    @property
    def gflops_with_bn(self) -> float:
        """GFLOPs counting unfolded bn as one MAC per output element."""
        return 2 * self.total_macs_with_bn / 1e9

    def to_text(self) -> str:
        header = f"{'layer':<58} {'kind':<12} {'params':>10} {'bias':>6} {'bn':>7} {'MACs':>14}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.path:<58} {r.kind:<12} {r.params:>10} {r.bias_params:>6} {r.bn_params:>7} {r.macs:>14}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"total params {self.total_params:,} ({self.params_millions:.2f} M)   "
            f"GFLOPs {self.gflops:.2f} (bn-folded) / {self.gflops_with_bn:.2f} (with bn) "
            f"at input {tuple(self.input_shape)}"
        )
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_shape": list(self.input_shape),
                "rows": [
                    {
                        "path": r.path,
                        "kind": r.kind,
                        "params": r.params,
                        "bias_params": r.bias_params,
                        "bn_params": r.bn_params,
                        "macs": r.macs,
                        "flops": r.flops,
                    }
                    for r in self.rows
                ],
                "totals": {
                    "params": self.total_params,
                    "params_millions": self.params_millions,
                    "macs": self.total_macs,
                    "flops": self.total_flops,
                    "gflops": self.gflops,
                    "gflops_with_bn": self.gflops_with_bn,
                },
            },
            indent=2,
        )


def _conv_analytical_params(m: nn.Conv2d) -> int:
    kh, kw = m.kernel_size
    per_position = kh * kw * (m.in_channels // m.groups)
    return per_position * m.out_channels


def audit_model(model: nn.Module, input_shape=(3, 640, 640)) -> ComplexityReport:
    """Walk ``model`` and produce a per-layer complexity report.

    Runs one dummy forward to capture each parameterized leaf's output shape,
    then derives analytical counts from layer configuration and verifies them
    against the materialized tensors (exact match required).
    """
    shapes: dict[int, tuple] = {}
    hooks = []

    def record(module, args, output):
        if isinstance(output, torch.Tensor):
            shapes[id(module)] = tuple(output.shape)

    leaves = [(name, m) for name, m in model.named_modules() if not list(m.children())]
    for _, m in leaves:
        hooks.append(m.register_forward_hook(record))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            device = next(model.parameters()).device
            dtype = next(model.parameters()).dtype
            model(torch.zeros(1, *input_shape, device=device, dtype=dtype))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)

    report = ComplexityReport(input_shape=input_shape)
    for name, m in leaves:
        n_params = sum(p.numel() for p in m.parameters(recurse=False))
        if n_params == 0:
            continue
        if isinstance(m, nn.Conv2d):
            analytical = _conv_analytical_params(m)
            if analytical != m.weight.numel():
                raise AuditError(
                    f"{name}: analytical weight count {analytical} != materialized {m.weight.numel()}"
                )
            out = shapes.get(id(m))
            if out is None:
                raise AuditError(f"{name}: no forward shape recorded (unused layer?)")
            macs = analytical * out[-1] * out[-2]
            report.rows.append(
                LayerRow(
                    path=name,
                    kind="Conv2d",
                    params=analytical,
                    bias_params=0 if m.bias is None else m.bias.numel(),
                    bn_params=0,
                    macs=macs,
                    bn_macs=0,
                )
            )
        elif isinstance(m, nn.BatchNorm2d):
            analytical = 2 * m.num_features
            if analytical != n_params:
                raise AuditError(f"{name}: bn expected {analytical} params, found {n_params}")
            out = shapes.get(id(m))
            if out is None:
                raise AuditError(f"{name}: no forward shape recorded (unused layer?)")
            report.rows.append(
                LayerRow(
                    path=name,
                    kind="BatchNorm2d",
                    params=0,
                    bias_params=0,
                    bn_params=analytical,
                    macs=0,
                    bn_macs=out[-3] * out[-2] * out[-1],
                )
            )
        elif type(m).__name__ == "FusionWeights":
            report.rows.append(
                LayerRow(
                    path=name, kind="FusionWeights",
                    params=n_params, bias_params=0, bn_params=0, macs=0, bn_macs=0,
                )
            )
        else:
            raise AuditError(f"cannot audit layer {name} of kind {type(m).__name__}")

    introspected = sum(p.numel() for p in model.parameters())
    if report.total_params != introspected:
        raise AuditError(
            f"audit total {report.total_params} != model parameter count {introspected}"
        )
    return report
