"""
Leaky Integrate-and-Fire dynamics with a sigmoid surrogate gradient.

One step:
    H = V + (x - V) / tau_m
    S = Θ(H - v_th)                      (hard)   or σ(a·(H - v_th)) (soft)
    V' = H·(1 - S) + v_reset·S

In hard mode the backward pass substitutes dS/dH with a·σ(a·u)·(1 - σ(a·u)),
which is exactly the soft-mode derivative at the same pre-activation.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from core.autodiff.tensor import Tensor, record, reduce_mean, stable_sigmoid, stack
from core.errors import ShapeError


class SpikeMode(str, Enum):
    HARD = "hard"
    SOFT = "soft"


class LIFParams(BaseModel):
    tau_m: float = Field(default=2.0, ge=1.0)
    v_th: float = Field(default=1.0)
    v_reset: float = Field(default=0.0)
    surrogate_slope: float = Field(default=4.0, gt=0.0)

    @model_validator(mode="after")
    def _threshold_above_reset(self):
        if self.v_th <= self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        return self


@dataclass
class LIFState:
    v: Tensor | None = None
    # a freshly reset state may adopt a new batch shape on its next step
    resizable: bool = True

    def reset(self, params: LIFParams):
        if self.v is not None:
            self.v = Tensor(np.full(self.v.shape, params.v_reset, dtype=self.v.dtype))
        self.resizable = True


def spike_fn(u: Tensor, slope: float, mode: SpikeMode = SpikeMode.HARD) -> Tensor:
    """Heaviside of u in hard mode (Θ(0) = 1), logistic σ(slope·u) in soft mode."""
    sig = stable_sigmoid(slope * u.values)
    if mode == SpikeMode.SOFT:
        out = sig
    else:
        out = (u.values >= 0).astype(u.dtype)
    surrogate = (slope * sig * (1 - sig)).astype(u.dtype)
    return record("spike", out.astype(u.dtype), (u,), lambda g: (g * surrogate,))


def lif_step(state: LIFState, x: Tensor, params: LIFParams,
             mode: SpikeMode = SpikeMode.HARD) -> Tuple[Tensor, LIFState]:
    v_prev = state.v
    if v_prev is None or (state.resizable and v_prev.shape != x.shape):
        v_prev = Tensor(np.full(x.shape, params.v_reset, dtype=x.dtype))
    elif v_prev.shape != x.shape:
        raise ShapeError(f"LIF input {x.shape} does not match membrane state {v_prev.shape}")

    h = v_prev + (x - v_prev) * (1.0 / params.tau_m)
    s = spike_fn(h - params.v_th, params.surrogate_slope, mode)
    v_next = h * (1.0 - s) + s * params.v_reset
    return s, LIFState(v=v_next, resizable=False)


def encode_repeat(image: Tensor, timesteps: int) -> Tensor:
    """Present the same raw-pixel input at every timestep: [B×…] → [T×B×…]."""
    if timesteps < 1:
        raise ShapeError(f"timestep count must be ≥ 1, got {timesteps}")
    if not image.requires_grad:
        return Tensor(np.repeat(image.values[None], timesteps, axis=0), dtype=image.dtype)
    return stack([image] * timesteps, axis=0)


def firing_rate_readout(spikes: Tensor) -> Tensor:
    """Mean activation over the leading T axis."""
    if spikes.ndim < 2 or spikes.shape[0] < 1:
        raise ShapeError(f"spike train must be [T×B×…] with T ≥ 1, got {spikes.shape}")
    return reduce_mean(spikes, axis=0)


def reset_states(network):
    """Return every LIF layer of `network` to v_reset; required between input sequences."""
    for module in network.modules():
        state = getattr(module, "state", None)
        if isinstance(state, LIFState):
            module.reset()
    return network
