from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from core.autodiff import functional as F
from core.autodiff.tensor import Tensor, stack, take
from core.snn.lif import LIFParams, LIFState, SpikeMode, lif_step


@dataclass
class InputTrace:
    """Activity seen at the input of one weighted layer during a forward pass."""
    spike_sum: float
    neuron_count: int
    timesteps: int
    batch: int


@dataclass
class ForwardContext:
    timesteps: int = 1
    spiking: bool = False
    train: bool = False
    mode: SpikeMode = SpikeMode.HARD
    trace: Optional[Dict[str, InputTrace]] = field(default=None)


class Module:
    def parameters(self) -> List[Tensor]:
        return []

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return []

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def modules(self) -> Iterator["Module"]:
        yield self


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def bias_uniform(rng: np.random.Generator, size: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size).astype(np.float32)


class _Weighted(Module):
    layer_id: str
    weight: Tensor
    bias: Optional[Tensor]

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def named_parameters(self):
        named = [(f"{self.layer_id}.weight", self.weight)]
        if self.bias is not None:
            named.append((f"{self.layer_id}.bias", self.bias))
        return named

    def _trace(self, x: Tensor, ctx: ForwardContext):
        if ctx.trace is None:
            return
        batch = x.shape[0] // ctx.timesteps if ctx.spiking else x.shape[0]
        timesteps = ctx.timesteps if ctx.spiking else 1
        ctx.trace[self.layer_id] = InputTrace(spike_sum=float(x.values.sum(dtype=np.float64)),
                                              neuron_count=int(np.prod(x.shape[1:])),
                                              timesteps=timesteps, batch=batch)


class Conv2d(_Weighted):
    def __init__(self, layer_id: str, in_channels: int, out_channels: int, kernel: int, stride: int,
                 padding: int, bias: bool, floor: bool, rng: np.random.Generator):
        self.layer_id = layer_id
        self.stride, self.padding, self.floor = stride, padding, floor
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
                             requires_grad=True, name=f"{layer_id}.weight")
        self.bias = Tensor(bias_uniform(rng, out_channels, fan_in), requires_grad=True,
                           name=f"{layer_id}.bias") if bias else None

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        self._trace(x, ctx)
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.floor)


class Linear(_Weighted):
    def __init__(self, layer_id: str, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.layer_id = layer_id
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features),
                             requires_grad=True, name=f"{layer_id}.weight")
        self.bias = Tensor(bias_uniform(rng, out_features, in_features), requires_grad=True,
                           name=f"{layer_id}.bias") if bias else None

    def __call__(self, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        if ctx is not None:
            self._trace(x, ctx)
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, layer_id: str, channels: int, momentum: float = 0.1):
        self.layer_id = layer_id
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True, name=f"{layer_id}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True, name=f"{layer_id}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def parameters(self):
        return [self.gamma, self.beta]

    def named_parameters(self):
        return [(f"{self.layer_id}.gamma", self.gamma), (f"{self.layer_id}.beta", self.beta)]

    def buffers(self):
        return {f"{self.layer_id}.running_mean": self.running_mean,
                f"{self.layer_id}.running_var": self.running_var}

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        # spiking inputs arrive as [(T·B)×…]: one statistic set shared by all timesteps
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            train=ctx.train, momentum=self.momentum)


class ReLU(Module):
    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return x.relu()


class LIF(Module):
    """Spiking nonlinearity over a [(T·B)×…] activation; membrane state persists until reset."""

    def __init__(self, layer_id: str, params: LIFParams):
        self.layer_id = layer_id
        self.params = params
        self.state = LIFState()

    def reset(self):
        self.state.reset(self.params)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        t = ctx.timesteps
        steps = x.reshape(t, x.shape[0] // t, *x.shape[1:])
        spikes = []
        for step in range(t):
            s, self.state = lif_step(self.state, _select(steps, step), self.params, ctx.mode)
            spikes.append(s)
        return stack(spikes, axis=0).reshape(x.shape)


def _select(x: Tensor, index: int) -> Tensor:
    out = take(x, [index], axis=0)
    return out.reshape(out.shape[1:])


class MaxPool(Module):
    def __init__(self, window: int, stride: int):
        self.window, self.stride = window, stride

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if ctx.spiking:
            t = ctx.timesteps
            pooled = F.maxpool2d_per_timestep(x.reshape(t, x.shape[0] // t, *x.shape[1:]), self.window, self.stride)
            return pooled.reshape(x.shape[0], *pooled.shape[2:])
        return F.maxpool2d(x, self.window, self.stride)


class GlobalAvgPool(Module):
    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return F.global_avg_pool(x)


class SkipBegin(Module):
    pass


class SkipEnd(Module):
    """Closes a residual connection; optionally projects the shortcut with 1×1 conv + norm."""

    def __init__(self, projection: Optional[Conv2d] = None, norm: Optional[BatchNorm] = None):
        self.projection = projection
        self.norm = norm

    def modules(self):
        yield self
        if self.projection is not None:
            yield self.projection
            yield self.norm

    def __call__(self, x: Tensor, shortcut: Tensor, ctx: ForwardContext) -> Tensor:
        if self.projection is not None:
            shortcut = self.norm(self.projection(shortcut, ctx), ctx)
        return x + shortcut
