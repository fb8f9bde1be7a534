"""Parameter storage and the convolutional block used throughout the network."""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class ConvBlockSpec:
    """``(kernel, stride, filters)^repeat``; ``batchnorm=False`` is the ``_u`` variant.

    ``groups`` runs that many independent blocks side by side, each producing
    ``filters`` channels from its own slice of the input.
    """

    kernel: int
    stride: int
    filters: int
    repeat: int = 1
    batchnorm: bool = True
    groups: int = 1
    relu_first: bool = True
    init_std: float = 0.0  # 0 selects He initialization

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.stride < 1 or self.filters < 1 or self.repeat < 1 or self.groups < 1:
            raise ValueError(f"stride, filters, repeat and groups must be >= 1: {self}")
        if self.init_std < 0:
            raise ValueError(f"init_std must be >= 0, got {self.init_std}")

    def __str__(self):
        s = f"({self.kernel}, {self.stride}, {self.filters})"
        if self.repeat > 1:
            s += f"^{self.repeat}"
        if not self.batchnorm:
            s += "_u"
        if self.groups > 1:
            s += f" x{self.groups}"
        return s


class ParamStore:
    """Named trainable tensors plus non-trainable buffers (batchnorm running stats)."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.buffers = OrderedDict()

    def add(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.asarray(value, dtype=self.dtype).copy()
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def count(self):
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype):
        """Cast every tensor in place (used to switch to 64-bit for gradient checks)."""
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for name, arr in self.buffers.items():
            # layers look buffers up by name, so replacing the arrays is safe
            self.buffers[name] = arr.astype(dtype)
        return self

    def state(self):
        """Flat name -> array mapping of params and buffers."""
        out = OrderedDict((n, t.data) for n, t in self.params.items())
        out.update(self.buffers)
        return out

    def load_state(self, arrays):
        expected = self.state()
        missing = sorted(set(expected) - set(arrays))
        unexpected = sorted(set(arrays) - set(expected))
        bad = sorted(n for n in expected if n in arrays and tuple(arrays[n].shape) != tuple(expected[n].shape))
        if missing or unexpected or bad:
            parts = []
            if missing:
                parts.append(f"missing: {', '.join(missing)}")
            if unexpected:
                parts.append(f"unexpected: {', '.join(unexpected)}")
            if bad:
                parts.append(
                    "shape mismatch: "
                    + ", ".join(f"{n} {tuple(arrays[n].shape)} != {tuple(expected[n].shape)}" for n in bad)
                )
            raise ValueError("checkpoint does not match model; " + "; ".join(parts))
        for n, t in self.params.items():
            t.data = np.asarray(arrays[n], dtype=self.dtype).copy()
        for n, buf in self.buffers.items():
            buf[...] = arrays[n]


class ConvBlock:
    """``spec.repeat`` repetitions of conv -> ReLU -> batchnorm (batchnorm omitted for ``_u``).

    Bias terms exist only in ``_u`` blocks; elsewhere the batchnorm shift plays that role.
    """

    def __init__(self, store, prefix, spec, in_channels, rng):
        if in_channels % spec.groups:
            raise ValueError(f"{prefix}: {in_channels} input channels not divisible by {spec.groups} groups")
        self.spec = spec
        self.prefix = prefix
        self.in_channels = in_channels
        self.out_channels = spec.filters * spec.groups
        self.layers = []
        c = in_channels
        k = spec.kernel
        for i in range(spec.repeat):
            cg = c // spec.groups
            fan_in = cg * k * k
            w = store.add(
                f"{prefix}.{i}.weight",
                rng.normal(0.0, spec.init_std or np.sqrt(2.0 / fan_in), size=(self.out_channels, cg, k, k)),
            )
            layer = {"weight": w}
            if spec.batchnorm:
                layer["gamma"] = store.add(f"{prefix}.{i}.gamma", np.ones(self.out_channels))
                layer["beta"] = store.add(f"{prefix}.{i}.beta", np.zeros(self.out_channels))
                layer["mean"] = f"{prefix}.{i}.running_mean"
                layer["var"] = f"{prefix}.{i}.running_var"
                store.add_buffer(layer["mean"], np.zeros(self.out_channels))
                store.add_buffer(layer["var"], np.ones(self.out_channels))
            else:
                layer["bias"] = store.add(f"{prefix}.{i}.bias", np.zeros(self.out_channels))
            self.layers.append(layer)
            c = self.out_channels
        self.store = store

    def __call__(self, x, training=False):
        if x.shape[1] != self.in_channels:
            raise ops.ShapeError(
                f"{self.prefix}: input shape {x.shape} does not match expected channels {self.in_channels} "
                f"(weight shape {self.layers[0]['weight'].shape})"
            )
        spec = self.spec
        for layer in self.layers:
            x = ops.conv2d(x, layer["weight"], layer.get("bias"), stride=spec.stride, groups=spec.groups)
            if spec.batchnorm and not spec.relu_first:
                x = self._bn(x, layer, training)
                x = ops.relu(x)
            else:
                x = ops.relu(x)
                if spec.batchnorm:
                    x = self._bn(x, layer, training)
        return x

    def _bn(self, x, layer, training):
        bufs = self.store.buffers
        return ops.batchnorm(x, layer["gamma"], layer["beta"], bufs[layer["mean"]], bufs[layer["var"]], training)

    def macs(self, h, w):
        """Multiply-accumulates for one example at input size ``h x w``; returns (macs, h_out, w_out)."""
        total = 0
        c = self.in_channels
        k, s = self.spec.kernel, self.spec.stride
        for _ in self.layers:
            h, w = ops.out_size(h, k, s), ops.out_size(w, k, s)
            total += (c // self.spec.groups) * k * k * self.out_channels * h * w
            c = self.out_channels
        return total, h, w

    def n_params(self):
        return sum(t.data.size for layer in self.layers for key, t in layer.items() if key not in ("mean", "var"))


def conv_block(spec, block, x, training=False):
    """Apply ``block`` (built from ``spec``) to ``x``."""
    if block.spec != spec:
        raise ValueError(f"block {block.prefix} was built for {block.spec}, not {spec}")
    return block(x, training)
