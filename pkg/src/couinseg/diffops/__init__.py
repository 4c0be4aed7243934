"""Differentiable kernels with hand-written forward and backward passes."""
from .attention import AttentionParams, graph_reason_backward, graph_reason_forward
from .conv import conv3d_backward, conv3d_forward, residual_conv3d_backward, residual_conv3d_forward
from .dense import (
    cross_entropy_backward,
    cross_entropy_forward,
    linear_backward,
    linear_forward,
    mlp_backward,
    mlp_forward,
    relu_backward,
    relu_forward,
    softmax_backward,
    softmax_forward,
)
from .gradcheck import GradCheckReport, grad_check, run_suite
from .grid import (
    deformable_unfold_backward,
    deformable_unfold_forward,
    devoxelize_backward,
    devoxelize_forward,
    voxelize_backward,
    voxelize_forward,
)
from .tensor import DualTensor
