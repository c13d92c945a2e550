"""3D convolution with a oneDNN route for single-sample float32 batches.

PyTorch's CPU dispatch sends batch-1 conv3d with few channels to its slow
native kernel (forward and backward).  For the batch-size-1 training used
here that dominates runtime.  ``Conv3d`` below calls the oneDNN forward
directly and computes the backward on the volume cut into two depth slabs
(with halos) stacked as a batch of two, which the dispatcher routes to
oneDNN as well.  The result matches the native path to float32 rounding.

Set ``SMUNET_FAST_CONV=0`` to force the stock ``torch.nn.Conv3d`` path.
float64 inputs (used by finite-difference tests) always take the stock path.
"""

from __future__ import annotations

import os

import torch
from torch import nn
from torch.nn import functional as F


def fast_conv_enabled() -> bool:
    flag = os.environ.get("SMUNET_FAST_CONV", "1").strip().lower()
    return flag not in ("0", "false", "no", "off") and torch.backends.mkldnn.is_available()


class _OneDNNConv3d(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, padding):
        ctx.save_for_backward(x, weight)
        ctx.padding = padding
        ctx.has_bias = bias is not None
        return torch.mkldnn_convolution(x.contiguous(), weight, bias, padding, [1, 1, 1], [1, 1, 1], 1)

    @staticmethod
    def backward(ctx, grad):
        x, weight = ctx.saved_tensors
        need_x, need_w, need_b = ctx.needs_input_grad[:3]
        mask = [need_x, need_w, need_b and ctx.has_bias]
        bias_sizes = [weight.shape[0]] if ctx.has_bias else None
        x2, g2, depth, pad = _as_two_slabs(x, grad.contiguous(), ctx.padding)
        gx2, gw, gb = torch.ops.aten.convolution_backward(
            g2, x2, weight, bias_sizes, [1, 1, 1], [0, *ctx.padding[1:]], [1, 1, 1],
            False, [0, 0, 0], 1, mask,
        )
        gx = None
        if gx2 is not None:
            half = depth // 2
            gxp = x.new_zeros(x.shape[0], x.shape[1], depth + 2 * pad, *x.shape[3:])
            gxp[:, :, :half + 2 * pad] += gx2[:1]
            gxp[:, :, half:] += gx2[1:]
            gx = gxp[:, :, pad:pad + depth]
        return gx, gw, gb, None


def _as_two_slabs(x, grad, padding):
    """Split along depth into two overlapping slabs stacked as a batch of two.

    The depth padding is applied explicitly so each slab carries its own halo;
    weight and bias gradients of the stacked batch equal those of the whole
    volume, and input gradients are overlap-added back by the caller.
    """
    pad = padding[0]
    depth = x.shape[2]
    half = depth // 2
    xp = F.pad(x, (0, 0, 0, 0, pad, pad))
    x2 = torch.cat([xp[:, :, :half + 2 * pad], xp[:, :, half:]])
    g2 = torch.cat([grad[:, :, :half], grad[:, :, half:]])
    return x2, g2, depth, pad


def conv3d(x, weight, bias=None, padding=(0, 0, 0)):
    padding = list(padding)
    if (x.dtype == torch.float32 and x.shape[0] == 1 and x.device.type == "cpu"
            and x.shape[2] % 2 == 0 and x.shape[2] >= 2 and fast_conv_enabled()):
        return _OneDNNConv3d.apply(x, weight, bias, padding)
    return F.conv3d(x, weight, bias, padding=padding)


class Conv3d(nn.Conv3d):
    """Stride-1, ungrouped ``nn.Conv3d`` that uses :func:`conv3d`."""

    def __init__(self, in_channels, out_channels, kernel_size, padding=0, bias=True):
        super().__init__(in_channels, out_channels, kernel_size, padding=padding, bias=bias)

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.padding)
