"""
Small convolutional networks built from a declarative `NetworkSpec`.
"""

import numpy as np
from frozendict import frozendict

from chromaphase import util
from chromaphase.predictor import tensor as T
from chromaphase.predictor.tensor import Tensor
from chromaphase.util import PredictorError

LAYER_KINDS = ("conv", "pointwise", "act", "residual", "pool")


def conv(out_channels, size=3, init="normal"):
    return frozendict(kind="conv", out=int(out_channels), size=int(size), init=init)


def pointwise(out_channels, init="normal"):
    return frozendict(kind="pointwise", out=int(out_channels), size=1, init=init)


def act(fn="silu"):
    return frozendict(kind="act", fn=fn)


def residual(*body):
    return frozendict(kind="residual", body=tuple(body))


def pool():
    return frozendict(kind="pool")


def _validate(layers, channels, path):
    """
    Walk `layers` from `channels` input channels, checking every layer,
    and return the output channel count.
    """
    for idx, layer in enumerate(layers):
        where = "{}[{}]".format(path, idx)
        kind = layer.get("kind")
        if kind not in LAYER_KINDS:
            raise PredictorError("{}: unknown layer kind {}", where, repr(kind))
        if kind in ("conv", "pointwise"):
            if layer["out"] < 1:
                raise PredictorError("{}: output channels must be positive", where)
            if layer["size"] < 1 or layer["size"] % 2 == 0:
                raise PredictorError("{}: kernel size must be odd, got {}", where, layer["size"])
            if layer.get("init", "normal") not in ("normal", "zero"):
                raise PredictorError("{}: unknown init {}", where, repr(layer.get("init")))
            channels = layer["out"]
        elif kind == "act":
            if layer["fn"] not in T.ACTIVATIONS:
                raise PredictorError("{}: unknown activation {}", where, repr(layer["fn"]))
        elif kind == "residual":
            out = _validate(layer["body"], channels, where)
            if out != channels:
                raise PredictorError(
                    "{}: residual body maps {} channels to {}", where, channels, out
                )
    return channels


def _count(layers, channels):
    total = 0
    for layer in layers:
        if layer["kind"] in ("conv", "pointwise"):
            total += layer["out"] * channels * layer["size"] ** 2 + layer["out"]
            channels = layer["out"]
        elif layer["kind"] == "residual":
            total += _count(layer["body"], channels)
    return total


class NetworkSpec:
    """
    Class representing a network architecture: an ordered tuple of
    layers (see the `conv`, `pointwise`, `act`, `residual` and `pool`
    helpers), the number of input channels, and the parameter
    initialization seed. The layer chain is validated on construction.
    Immutable.
    """

    def __init__(self, layers, in_channels, seed=0, dtype="float64"):
        layers = tuple(frozendict(layer) for layer in layers)
        if in_channels < 1:
            raise PredictorError("in_channels must be positive: {}", in_channels)
        if dtype not in T.DTYPES:
            raise PredictorError("unknown dtype {}", repr(dtype))
        self._out_channels = _validate(layers, in_channels, "layers")
        self._layers = layers
        self._in_channels = int(in_channels)
        self._seed = int(seed)
        self._dtype = dtype

    @property
    def layers(self):
        return self._layers

    @property
    def in_channels(self):
        return self._in_channels

    @property
    def out_channels(self):
        return self._out_channels

    @property
    def seed(self):
        return self._seed

    @property
    def dtype(self):
        return self._dtype

    def parameter_count(self):
        """
        Return the number of scalar parameters: out * in * k^2 + out for
        every convolution (weights plus bias), nothing for the other
        layer kinds.
        """
        return _count(self._layers, self._in_channels)

    def _to_json(self):
        def layer_json(layer):
            if layer["kind"] == "residual":
                return {"kind": "residual", "body": [layer_json(sub) for sub in layer["body"]]}
            return dict(layer)

        return {
            "layers": [layer_json(layer) for layer in self._layers],
            "inChannels": self._in_channels,
            "seed": self._seed,
            "dtype": self._dtype,
        }

    @staticmethod
    def _from_json(data):
        def layer_from(layer):
            if layer["kind"] == "residual":
                return residual(*(layer_from(sub) for sub in layer["body"]))
            return frozendict(layer)

        return NetworkSpec(
            [layer_from(layer) for layer in data["layers"]],
            data["inChannels"],
            data["seed"],
            data["dtype"],
        )

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self._to_json() == other._to_json()

    def __hash__(self):
        return hash((self._layers, self._in_channels, self._seed, self._dtype))


class Network:
    """
    Class representing an instantiated network: a `NetworkSpec` plus
    parameter tensors. Inputs are (B, C, H, W); several inputs are
    concatenated along the channel axis, and a 1D input of length B
    (such as the diffusion time) becomes a constant channel.
    """

    def __init__(self, spec):
        self._spec = spec
        self._dtype = T.DTYPES[spec.dtype]
        self._params = []
        self._names = []
        self._output = None
        counter = [0]

        def build(layers, channels, prefix):
            for idx, layer in enumerate(layers):
                name = "{}{}".format(prefix, idx)
                if layer["kind"] in ("conv", "pointwise"):
                    size = layer["size"]
                    shape = (layer["out"], channels, size, size)
                    if layer.get("init", "normal") == "zero":
                        weight = np.zeros(shape)
                    else:
                        rng = util.rng_stream(spec.seed, counter[0])
                        weight = rng.standard_normal(shape) / np.sqrt(channels * size * size)
                    counter[0] += 1
                    self._add(name + ".weight", weight)
                    self._add(name + ".bias", np.zeros(layer["out"]))
                    channels = layer["out"]
                elif layer["kind"] == "residual":
                    build(layer["body"], channels, name + ".")

        build(spec.layers, spec.in_channels, "")

    def _add(self, name, value):
        self._names.append(name)
        self._params.append(Tensor(value, requires_grad=True, dtype=self._dtype))

    @property
    def spec(self):
        return self._spec

    def parameters(self):
        return list(self._params)

    def named_parameters(self):
        return list(zip(self._names, self._params))

    def state(self):
        """
        Return {name: array copy} of all parameters.
        """
        return {name: p.data.copy() for name, p in zip(self._names, self._params)}

    def load_state(self, state):
        for name, p in zip(self._names, self._params):
            if name not in state:
                raise PredictorError("missing parameter {}", name)
            value = np.asarray(state[name], dtype=self._dtype)
            if value.shape != p.shape:
                raise PredictorError(
                    "parameter {} has shape {}, expected {}", name, value.shape, p.shape
                )
            p.data = value.copy()

    def _gather_inputs(self, inputs):
        spatial = None
        batch = None
        for value in inputs:
            shape = value.shape if isinstance(value, Tensor) else np.shape(value)
            if len(shape) == 4:
                spatial = shape[2:]
                batch = shape[0]
                break
        if spatial is None:
            raise PredictorError("network needs at least one (B, C, H, W) input")
        parts = []
        for value in inputs:
            value = T.as_tensor(value, dtype=self._dtype)
            if value.ndim == 1:
                if value.shape[0] != batch:
                    raise PredictorError("scalar input has length {}, batch is {}", value.shape[0], batch)
                value = Tensor(
                    np.broadcast_to(value.data[:, None, None, None], (batch, 1) + tuple(spatial)),
                    dtype=self._dtype,
                )
            elif value.ndim != 4 or value.shape[0] != batch or value.shape[2:] != tuple(spatial):
                raise PredictorError("network input shape {} does not match batch grid", value.shape)
            parts.append(value)
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        if x.shape[1] != self._spec.in_channels:
            raise PredictorError(
                "network expects {} input channels, got {}", self._spec.in_channels, x.shape[1]
            )
        return x

    def _run(self, layers, x, params):
        for layer in layers:
            kind = layer["kind"]
            if kind in ("conv", "pointwise"):
                weight = next(params)
                bias = next(params)
                x = T.conv2d(x, weight, bias)
            elif kind == "act":
                x = T.ACTIVATIONS[layer["fn"]](x)
            elif kind == "residual":
                x = x + self._run(layer["body"], x, params)
            elif kind == "pool":
                x = T.global_mean_pool(x)
        return x

    def forward(self, *inputs):
        """
        Evaluate the network and return the output Tensor.
        """
        x = self._gather_inputs(inputs)
        self._output = self._run(self._spec.layers, x, iter(self._params))
        return self._output

    __call__ = forward

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def backward(self, loss_grad):
        """
        Back-propagate `loss_grad` (d loss / d output of the last
        forward) and return the parameter gradients in `parameters()`
        order.
        """
        if self._output is None:
            raise PredictorError("backward called before forward")
        if self._output.requires_grad:
            self._output.backward(loss_grad)
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self._params]
