from typing import Dict, List, Optional, Tuple

import numpy as np

from core.arch.layers import (BatchNorm, Conv2d, ForwardContext, GlobalAvgPool, InputTrace, LIF, Linear, MaxPool,
                              Module, ReLU, SkipBegin, SkipEnd)
from core.arch.spec import Activation, ArchSpec, BlockType, ModelKind, walk
from core.autodiff.tensor import Tensor
from core.errors import CheckpointError, ShapeError
from core.snn.lif import LIFParams, SpikeMode, encode_repeat, firing_rate_readout, reset_states

HEAD_ID = "head"


class ModelInstance:
    def __init__(self, spec: ArchSpec, layers: List[Module], head: Optional[Linear],
                 lif: LIFParams, timesteps: int):
        self.spec = spec
        self.layers = layers
        self.head = head
        self.lif = lif
        self.timesteps = timesteps
        self.training = False
        self.mode = SpikeMode.HARD
        self.trace: Dict[str, InputTrace] = {}

    @property
    def spiking(self) -> bool:
        return self.spec.kind == ModelKind.SNN

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def modules(self):
        for layer in self.layers:
            yield from layer.modules()
        if self.head is not None:
            yield self.head

    def parameters(self) -> List[Tensor]:
        return [p for m in self.modules() for p in m.parameters()]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [item for m in self.modules() for item in m.named_parameters()]

    def train(self, flag: bool = True) -> "ModelInstance":
        self.training = flag
        return self

    def eval(self) -> "ModelInstance":
        return self.train(False)

    def reset_states(self) -> "ModelInstance":
        return reset_states(self)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.values.copy() for name, p in self.named_parameters()}
        for m in self.modules():
            state.update({name: buf.copy() for name, buf in m.buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            if name not in state or state[name].shape != p.shape:
                raise CheckpointError(f"checkpoint entry '{name}' missing or mis-shaped for {self.spec.name}")
            p.values = state[name].astype(p.dtype).copy()
        for m in self.modules():
            for name, buf in m.buffers().items():
                if name not in state:
                    raise CheckpointError(f"checkpoint buffer '{name}' missing for {self.spec.name}")
                buf[...] = state[name]

    def __call__(self, images: Tensor) -> Tensor:
        return forward_features(self, images)


def count_parameters(model_or_spec) -> int:
    model = model_or_spec if isinstance(model_or_spec, ModelInstance) else build_model(model_or_spec, seed=0)
    return int(sum(p.size for p in model.parameters()))


def build_model(spec: ArchSpec, seed: int, lif: LIFParams | None = None, timesteps: int = 4) -> ModelInstance:
    """Instantiate `spec` with Kaiming-uniform (fan-in) weights drawn from `seed`."""
    rng = np.random.default_rng(seed)
    lif = lif or LIFParams()
    layers: List[Module] = []
    for shape in walk(spec):
        block = shape.block
        if block.type == BlockType.CONV:
            layers.append(Conv2d(shape.layer_id, shape.in_shape[0], block.out_channels, block.kernel,
                                 block.stride, block.padding, block.bias, block.floor, rng))
        elif block.type == BlockType.NORM:
            layers.append(BatchNorm(shape.layer_id, shape.in_shape[0]))
        elif block.type == BlockType.ACT:
            layers.append(LIF(shape.layer_id, lif) if block.activation == Activation.LIF else ReLU())
        elif block.type == BlockType.MAXPOOL:
            layers.append(MaxPool(block.window, block.stride))
        elif block.type == BlockType.AVGPOOL:
            layers.append(GlobalAvgPool())
        elif block.type == BlockType.LINEAR:
            layers.append(Linear(shape.layer_id, shape.in_shape[0], block.out_features, rng))
        elif block.type == BlockType.SKIP_BEGIN:
            layers.append(SkipBegin())
        elif block.type == BlockType.SKIP_END:
            if shape.projection is None:
                layers.append(SkipEnd())
            else:
                start_shape, stride = shape.projection
                proj_id = f"proj{shape.index}"
                conv = Conv2d(proj_id, start_shape[0], shape.out_shape[0], 1, stride, 0, False, stride > 1, rng)
                layers.append(SkipEnd(conv, BatchNorm(f"{proj_id}.norm", shape.out_shape[0])))
    head = Linear(HEAD_ID, spec.feature_dim, spec.classes, rng) if spec.classes else None
    return ModelInstance(spec, layers, head, lif, timesteps)


def _check_input(model: ModelInstance, images: Tensor):
    expected = (model.spec.in_channels, model.spec.input_size, model.spec.input_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"{model.spec.name} expects [B×{'×'.join(map(str, expected))}] input, got {images.shape}")


def forward_features(model: ModelInstance, images, trace: bool = False) -> Tensor:
    """Penultimate features [B×D]: activations for ANNs, firing rates for SNNs.

    SNN callers are responsible for `reset_states` between independent batches.
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    _check_input(model, images)
    ctx = ForwardContext(timesteps=model.timesteps if model.spiking else 1, spiking=model.spiking,
                         train=model.training, mode=model.mode)
    if trace:
        model.trace = {}
        ctx.trace = model.trace

    if model.spiking:
        x = encode_repeat(images, model.timesteps)
        x = x.reshape(model.timesteps * images.shape[0], *images.shape[1:])
    else:
        x = images

    skips: List[Tensor] = []
    for layer in model.layers:
        if isinstance(layer, SkipBegin):
            skips.append(x)
        elif isinstance(layer, SkipEnd):
            x = layer(x, skips.pop(), ctx)
        else:
            x = layer(x, ctx)

    if model.spiking:
        x = firing_rate_readout(x.reshape(model.timesteps, images.shape[0], model.feature_dim))
    return x


def forward(model: ModelInstance, images, trace: bool = False) -> Tuple[Tensor, Tensor]:
    """(features, logits) for a model that owns a classification head."""
    if model.head is None:
        raise ShapeError(f"{model.spec.name} has no classification head")
    features = forward_features(model, images, trace=trace)
    return features, model.head(features)
