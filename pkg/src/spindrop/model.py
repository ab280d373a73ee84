"""Small binarized CNNs with fixed-topology backpropagation.

A network is an ordered list of layers. Conv and Linear layers are the
matrix-vector-multiply (MVM) layers that get mapped onto crossbars; spatial
dropout is attached to the *input* of selected MVM layers, so that a dropped
channel becomes a group of disabled crossbar rows.

Inside an MVM layer the arithmetic is split in three steps that both the
reference engine and the crossbar simulator share:

``mvm_input``  quantizes real pixels to integer DAC codes (first layer only),
the MVM itself then runs on masked integer/dyadic inputs (exact in float64),
and ``mvm_output`` applies the inverted-dropout scale and the DAC step.
"""

from __future__ import annotations

import re

import numpy as np

from spindrop import dropout as dr
from spindrop import tensor as tc
from spindrop.errors import ConfigurationError, DimensionError

INPUT_LEVELS = 255


class Layer:
    kind = "layer"
    params: tuple = ()

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape


class MVMLayer(Layer):
    """Common machinery for Conv and Linear layers."""

    params = ("proxy",)

    def __init__(self, proxy, binary=True, input_levels=None):
        self.proxy = np.asarray(proxy, dtype=np.float64)
        self.binary = binary
        self.input_levels = input_levels
        self.drop_group = 1  # input elements per dropout channel
        self.grads = {}

    def weight(self):
        if self.binary:
            return tc.binarize(tc.normalize_weights(self.proxy))
        return self.proxy

    @property
    def drop_channels(self):
        return self.in_features // self.drop_group

    def mvm_input(self, x):
        if self.input_levels:
            return np.rint(x * self.input_levels)
        return x

    def mvm_output(self, acc, rho=None):
        out = acc
        if rho is not None:
            out = out * dr.keep_scale(rho)
        if self.input_levels:
            out = out / self.input_levels
        return out

    def expand_keep(self, keep, x):
        """Broadcastable 0/1 multiplier for this layer's input from (B, C) flags."""
        keep = np.asarray(keep, dtype=np.float64)
        if keep.ndim == 1:
            keep = np.broadcast_to(keep, (x.shape[0], keep.shape[0]))
        if keep.shape != (x.shape[0], self.drop_channels):
            raise DimensionError(f"mask {keep.shape} does not match {self.drop_channels} dropout channels of input {x.shape}")
        if x.ndim == 4:
            return keep[:, :, None, None]
        return np.repeat(keep, self.drop_group, axis=1)

    def forward(self, x, train, keep=None, rho=None):
        q = self.mvm_input(x)
        if keep is not None:
            mult = self.expand_keep(keep, q)
            q = q * mult
        else:
            mult = None
        w = self.weight()
        acc = self.mvm(q, w)
        if train:
            self._cache = (q, w, mult, rho)
        return self.mvm_output(acc, rho if keep is not None else None)

    def backward(self, dy):
        q, w, mult, rho = self._cache
        if mult is not None:
            dy = dy * dr.keep_scale(rho)
        if self.input_levels:
            dy = dy / self.input_levels
        dq, dw = self.mvm_backward(dy, q, w)
        self.grads["proxy"] = tc.ste_backward(dw, self.proxy) if self.binary else dw
        if mult is not None:
            dq = dq * mult
        if self.input_levels:
            dq = dq * self.input_levels
        return dq


class Conv(MVMLayer):
    kind = "conv"

    def __init__(self, proxy, stride=1, padding=0, binary=True, input_levels=None):
        super().__init__(proxy, binary, input_levels)
        self.stride = stride
        self.padding = padding

    @property
    def k(self):
        return self.proxy.shape[2]

    @property
    def in_features(self):
        return self.proxy.shape[1]

    def conv_weight(self):
        return tc.ConvWeight(self.proxy, self.stride, self.padding)

    def mvm(self, q, w):
        return tc.conv2d_kernel(q, w, self.stride, self.padding)

    def mvm_backward(self, dy, q, w):
        return tc.conv2d_backward(dy, q, w, self.stride, self.padding)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.proxy.shape[1]:
            raise DimensionError(f"conv expects {self.proxy.shape[1]} input channels, got {shape}")
        return (self.proxy.shape[0], tc.out_size(h, self.k, self.stride, self.padding), tc.out_size(w, self.k, self.stride, self.padding))


class Linear(MVMLayer):
    kind = "linear"

    @property
    def in_features(self):
        return self.proxy.shape[1]

    def mvm(self, q, w):
        return tc.linear(q, w)

    def mvm_backward(self, dy, q, w):
        return dy @ w, dy.T @ q

    def output_shape(self, shape):
        if shape != (self.proxy.shape[1],):
            raise DimensionError(f"linear expects ({self.proxy.shape[1]},) inputs, got {shape}")
        return (self.proxy.shape[0],)


class BatchNorm(Layer):
    kind = "batchnorm"
    params = ("gamma", "beta")

    def __init__(self, channels, momentum=0.1):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.grads = {}

    def forward(self, x, train):
        if not train:
            return tc.batchnorm(x, self.running_mean, self.running_var, self.gamma, self.beta)
        out, mean, var, self._cache = tc.batchnorm_train(x, self.gamma, self.beta)
        m = self.momentum
        n = x.size // x.shape[1]
        unbiased = var * n / max(n - 1, 1)
        self.running_mean = (1 - m) * self.running_mean + m * mean
        self.running_var = (1 - m) * self.running_var + m * unbiased
        return out

    def backward(self, dy):
        dx, self.grads["gamma"], self.grads["beta"] = tc.batchnorm_backward(dy, self.gamma, self._cache)
        return dx


class Sign(Layer):
    kind = "sign"

    def forward(self, x, train):
        if train:
            self._x = x
        return tc.sign_activation(x)

    def backward(self, dy):
        return tc.ste_backward(dy, self._x)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train):
        y = np.tanh(x)
        if train:
            self._y = y
        return y

    def backward(self, dy):
        return dy * (1.0 - self._y ** 2)


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, k=2):
        self.k = k

    def forward(self, x, train):
        return tc.avgpool2d(x, self.k)

    def backward(self, dy):
        return tc.avgpool2d_backward(dy, self.k)

    def output_shape(self, shape):
        c, h, w = shape
        if h % self.k or w % self.k:
            raise DimensionError(f"pool {self.k} does not divide {shape}")
        return (c, h // self.k, w // self.k)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, train):
        if train:
            self._shape = x.shape
        return tc.adaptive_avgpool_to_1x1(x)

    def backward(self, dy):
        b, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), self._shape).copy()

    def output_shape(self, shape):
        return (shape[0],)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train):
        if train:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


_TOKEN = re.compile(r"^(?:c(\d+)k(\d+)(?:s(\d+))?(?:p(\d+))?|p(\d+)|gap|fc(\d+))$")


class BinaryConvNet:
    """Ordered layer list plus dropout placement and hyperparameters."""

    def __init__(self, layers, input_shape, placement=None, hyper=None, topology=""):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.hyper = hyper or dr.HyperParams()
        self.topology = topology
        self.shapes = self._check_shapes()
        self.placement = placement or dr.DropoutPlacement(dr.TOPOLOGY_WISE, ())
        self._configure_dropout()

    # -- structure -----------------------------------------------------

    def _check_shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def mvm_indices(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, MVMLayer)]

    def _configure_dropout(self):
        for i in self.placement.targets:
            layer = self.layers[i]
            if not isinstance(layer, MVMLayer):
                raise ConfigurationError(f"dropout target {i} is a {layer.kind} layer, not conv/linear")
            if self.placement.mode == dr.LAYER_WISE and not isinstance(layer, Conv):
                raise ConfigurationError("layer-wise dropout targets must be conv layers")
            if isinstance(layer, Linear) and i > 0 and isinstance(self.layers[i - 1], Flatten):
                # a flattened (C, H, W) feature map drops H*W inputs per channel
                src = self.shapes[i - 1]
                layer.drop_group = int(np.prod(src[1:]))

    def dropout_mode(self, index):
        """Crossbar dropout configuration for an MVM layer that has dropout."""
        layer = self.layers[index]
        if isinstance(layer, Conv):
            return "conv"
        return "flatten-no-avgpool" if layer.drop_group > 1 else "with-avgpool"

    def proxies(self):
        return [self.layers[i].proxy for i in self.mvm_indices()]

    def parameters(self):
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    @property
    def n_classes(self):
        return self.shapes[-1][0]

    # -- forward / backward -------------------------------------------

    def forward(self, x, train=False, masks=None, rho=None, engine=None, mc_seed=None, run=0, placement=None):
        """Run the network.

        ``masks`` maps a layer index to (B, C) keep flags; missing dropout
        targets are sampled from ``stream(mc_seed, index, run)`` when
        ``mc_seed`` is given. ``engine`` optionally replaces the MVM of
        dropout-free and dropout layers (see :mod:`spindrop.crossbar`).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"network expects inputs of shape (B, {self.input_shape}), got {x.shape}")
        placement = placement or self.placement
        rho = self.hyper.rho if rho is None else rho
        masks = dict(masks or {})
        targets = set(placement.targets)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MVMLayer):
                keep = None
                rng = None
                if i in targets and (i in masks or mc_seed is not None):
                    keep = masks.get(i)
                    rng = dr.stream(mc_seed, i, run) if mc_seed is not None else None
                if engine is not None:
                    x = engine.mvm(self, i, x, keep=keep, rho=rho if i in targets else None, rng=rng)
                else:
                    if keep is None and rng is not None:
                        keep = dr.sample_spatial_mask(layer.drop_channels, rho, rng, batch=x.shape[0]).keep
                    x = layer.forward(x, train, keep=keep, rho=rho if keep is not None else None)
            else:
                x = layer.forward(x, train)
        return x

    def predict_proba(self, x, mc_seed=None, run=0, placement=None, engine=None, masks=None):
        return tc.softmax(self.forward(x, masks=masks, mc_seed=mc_seed, run=run, placement=placement, engine=engine))

    def backward(self, dlogits):
        dy = dlogits
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def objective(self, task_loss):
        return dr.spatial_dropout_objective(task_loss, self.proxies(), self.hyper.lam)

    # -- state ---------------------------------------------------------

    def state(self):
        """Flat ``name -> array`` mapping of every parameter and BN statistic."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                out[f"{i}.{name}"] = getattr(layer, name)
            if isinstance(layer, BatchNorm):
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def load_state(self, state):
        for key, value in state.items():
            i, name = key.split(".", 1)
            layer = self.layers[int(i)]
            current = getattr(layer, name)
            if np.shape(current) != np.shape(value):
                raise DimensionError(f"{key}: checkpoint shape {np.shape(value)} != network shape {np.shape(current)}")
            setattr(layer, name, np.array(value, dtype=np.float64))

    def copy(self):
        twin = build_network(**self.build_args)
        twin.load_state({k: v.copy() for k, v in self.state().items()})
        return twin


def parse_topology(topology: str):
    tokens = [t.strip() for t in topology.split(",") if t.strip()]
    if not tokens:
        raise ConfigurationError("empty topology")
    parsed = []
    for tok in tokens:
        m = _TOKEN.match(tok)
        if not m:
            raise ConfigurationError(f"bad topology token {tok!r}")
        if m.group(1):
            parsed.append(("conv", int(m.group(1)), int(m.group(2)), int(m.group(3) or 1), int(m.group(4) or 0)))
        elif m.group(5):
            parsed.append(("pool", int(m.group(5))))
        elif tok == "gap":
            parsed.append(("gap",))
        else:
            parsed.append(("fc", int(m.group(6))))
    if parsed[-1][0] != "fc":
        raise ConfigurationError("topology must end with a fully connected classifier")
    return parsed


def build_network(topology, input_shape, *, seed=0, placement_mode=dr.TOPOLOGY_WISE, targets=None,
                  hyper=None, binary=True, activation="sign", init_scale=0.1, quantize_input=True):
    """Build a network from a compact topology string.

    Tokens: ``c<out>k<k>[s<stride>][p<pad>]`` conv, ``p<k>`` average pool,
    ``gap`` global average pool, ``fc<out>`` linear. Each conv (plus any pool
    directly after it) and each hidden fc is followed by batch norm and the
    activation; the last fc is followed by batch norm only and yields logits.

    ``targets`` are ordinal positions: conv ordinals for layer-wise placement
    (default: last conv) and ignored for topology-wise placement, which always
    targets the first fc layer.
    """
    parsed = parse_topology(topology)
    rng = np.random.default_rng(seed)
    act = {"sign": Sign, "tanh": Tanh, "none": None}[activation]
    shape = tuple(input_shape)
    layers = []
    first = True
    flattened = False
    n_fc = sum(1 for p in parsed if p[0] == "fc")
    fc_seen = 0

    def post(channels, final=False):
        layers.append(BatchNorm(channels))
        if act is not None and not final:
            layers.append(act())

    i = 0
    while i < len(parsed):
        item = parsed[i]
        if item[0] == "conv":
            _, c_out, k, s, p = item
            proxy = rng.uniform(-init_scale, init_scale, size=(c_out, shape[0], k, k))
            layer = Conv(proxy, s, p, binary=binary, input_levels=INPUT_LEVELS if first and quantize_input else None)
            layers.append(layer)
            shape = layer.output_shape(shape)
            if i + 1 < len(parsed) and parsed[i + 1][0] == "pool":
                layers.append(AvgPool(parsed[i + 1][1]))
                shape = layers[-1].output_shape(shape)
                i += 1
            post(shape[0])
        elif item[0] == "pool":
            layers.append(AvgPool(item[1]))
            shape = layers[-1].output_shape(shape)
        elif item[0] == "gap":
            layers.append(GlobalAvgPool())
            shape = (shape[0],)
            flattened = True
        else:
            if not flattened:
                layers.append(Flatten())
                shape = layers[-1].output_shape(shape)
                flattened = True
            fc_seen += 1
            proxy = rng.uniform(-init_scale, init_scale, size=(item[1], shape[0]))
            layer = Linear(proxy, binary=binary, input_levels=INPUT_LEVELS if first and quantize_input else None)
            layers.append(layer)
            shape = (item[1],)
            post(item[1], final=fc_seen == n_fc)
        first = False
        i += 1

    convs = [j for j, l in enumerate(layers) if isinstance(l, Conv)]
    fcs = [j for j, l in enumerate(layers) if isinstance(l, Linear)]
    if placement_mode == dr.LAYER_WISE:
        if not convs:
            raise ConfigurationError("layer-wise placement needs at least one conv layer")
        ordinals = targets if targets else [len(convs) - 1]
        try:
            idx = tuple(convs[o] for o in ordinals)
        except IndexError:
            raise ConfigurationError(f"conv ordinal out of range in {ordinals}") from None
    elif placement_mode == dr.TOPOLOGY_WISE:
        idx = (fcs[0],) if len(fcs) > 1 or convs else ()
    else:
        raise ConfigurationError(f"unknown placement mode {placement_mode!r}")
    net = BinaryConvNet(layers, input_shape, dr.DropoutPlacement(placement_mode, idx), hyper, topology)
    net.build_args = dict(topology=topology, input_shape=tuple(input_shape), seed=seed, placement_mode=placement_mode,
                          targets=tuple(targets or ()), hyper=dr.HyperParams(net.hyper.rho, net.hyper.lam, net.hyper.T),
                          binary=binary, activation=activation, init_scale=init_scale, quantize_input=quantize_input)
    return net


LENET = "c16k5,p2,c32k5,p2,fc128,fc10"
