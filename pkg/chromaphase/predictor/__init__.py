"""
Minimal differentiable function library backing the diffusion noise
predictor and the mean predictor: tensors with reverse-mode gradients,
small periodic-convolution networks, and optimizers.
"""

from chromaphase.predictor import network, optim, tensor
from chromaphase.predictor.network import Network, NetworkSpec
from chromaphase.predictor.optim import Optimizer, OptimizerConfig, optimizer_step
from chromaphase.predictor.tensor import Tensor, no_grad


def forward(net, *inputs):
    """
    Evaluate `net` on `inputs`.
    """
    return net.forward(*inputs)


def backward(net, loss_grad):
    """
    Back-propagate `loss_grad` through the last forward pass of `net`
    and return the parameter gradients.
    """
    return net.backward(loss_grad)


def residual_predictor(in_channels, out_channels, width=32, blocks=2, seed=0, dtype="float64"):
    """
    Return the default noise-predictor architecture: a 3x3 lifting
    convolution, `blocks` residual blocks of two 3x3 convolutions with
    SiLU, and a zero-initialized 3x3 projection (six convolutions for
    the default two blocks).
    """
    layers = [network.conv(width), network.act("silu")]
    for _ in range(blocks):
        layers.append(
            network.residual(
                network.conv(width), network.act("silu"), network.conv(width), network.act("silu")
            )
        )
    layers.append(network.conv(out_channels, init="zero"))
    return NetworkSpec(layers, in_channels, seed, dtype)


def mean_predictor_spec(in_channels, out_channels, width=32, seed=0, dtype="float64"):
    """
    Return the default mean-predictor architecture: four 3x3
    convolutions with SiLU between them.
    """
    layers = [
        network.conv(width),
        network.act("silu"),
        network.conv(width),
        network.act("silu"),
        network.conv(width),
        network.act("silu"),
        network.conv(out_channels),
    ]
    return NetworkSpec(layers, in_channels, seed, dtype)


def vector_predictor(in_channels, out_channels, width=64, blocks=2, seed=0, dtype="float64"):
    """
    Pointwise counterpart of `residual_predictor` for vector data laid
    out as (B, D, 1, 1).
    """
    layers = [network.pointwise(width), network.act("silu")]
    for _ in range(blocks):
        layers.append(
            network.residual(network.pointwise(width), network.act("silu"), network.pointwise(width))
        )
    layers.extend([network.act("silu"), network.pointwise(out_channels, init="zero")])
    return NetworkSpec(layers, in_channels, seed, dtype)


def affine_predictor(in_channels, out_channels, seed=0, dtype="float64"):
    """
    A single pointwise layer: an affine map of the inputs.
    """
    return NetworkSpec([network.pointwise(out_channels)], in_channels, seed, dtype)
