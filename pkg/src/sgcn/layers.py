"""Parameter containers used to assemble networks."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Layer:
    """Base container: collects parameters and buffers of child layers in
    attribute-definition order, which keeps checkpoints deterministic."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, dict):
                for key, sub in value.items():
                    if isinstance(sub, Layer):
                        yield from sub.named_parameters(f"{full}.{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Layer):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, dict):
                for key, sub in value.items():
                    if isinstance(sub, Layer):
                        yield from sub.named_buffers(f"{full}.{key}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, buf in buffers.items():
            buf[...] = state[name]


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_t=1, kernel_v=1, stride=1, padding=0, bias=False, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        fan_in = in_channels * kernel_t * kernel_v
        self.weight = Tensor(_he_normal(rng, (out_channels, in_channels, kernel_t, kernel_v), fan_in), True)
        self.bias = Tensor(np.zeros(out_channels), True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Layer):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), True)
        self.beta = Tensor(np.zeros(channels), True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training=False, batch_stats=None, update_running=None):
        use_batch = training if batch_stats is None else batch_stats
        update = training if update_running is None else update_running
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=use_batch, momentum=self.momentum, eps=self.eps, update_running=update and use_batch,
        )


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.weight = Tensor(_he_normal(rng, (in_features, out_features), in_features), True)
        self.bias = Tensor(np.zeros(out_features), True)

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias
