"""
Declarative architecture specs for ANN teachers and SNN students.

An `ArchSpec` is an ordered list of blocks. `walk` replays the block list on a
static input shape so that model construction, MAC counting and feature-size
inference all agree on layer ids and shapes.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from core.autodiff.functional import conv_output_size
from core.errors import ConfigError, ShapeError


class ModelKind(str, Enum):
    ANN = "ann"
    SNN = "snn"


class BlockType(str, Enum):
    CONV = "conv"
    NORM = "norm"
    ACT = "act"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    LINEAR = "linear"
    SKIP_BEGIN = "skip_begin"
    SKIP_END = "skip_end"


class Activation(str, Enum):
    RELU = "relu"
    LIF = "lif"


class BlockSpec(BaseModel):
    type: BlockType
    out_channels: Optional[int] = None
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = True
    floor: bool = False
    window: int = 2
    activation: Optional[Activation] = None
    out_features: Optional[int] = None


VGG_LAYOUTS = {
    5: [64, "M", 128, "M", 256, "M", 512, "M"],
    11: [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    19: [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
         512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}

RESNET_STAGES = {
    10: [1, 1, 1, 1],
    18: [2, 2, 2, 2],
}


@dataclass
class LayerShape:
    index: int
    layer_id: str
    block: BlockSpec
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    # skip_end only: (in_shape, stride) of the 1×1 projection, None for identity
    projection: Optional[Tuple[Tuple[int, ...], int]] = None


class ArchSpec(BaseModel):
    name: str
    kind: ModelKind
    blocks: List[BlockSpec]
    in_channels: int = 3
    input_size: int = 32
    classes: Optional[int] = Field(default=10, description="None for students: the ensemble owns the head")
    feature_dim: int = 0

    @model_validator(mode="after")
    def _check_structure(self):
        shapes = list(walk(self))
        last = shapes[-1].out_shape if shapes else (self.in_channels, self.input_size, self.input_size)
        if len(last) != 1:
            raise ShapeError(f"{self.name}: blocks end with shape {last}, expected a flat feature vector")
        if self.feature_dim == 0:
            self.feature_dim = last[0]
        elif self.feature_dim != last[0]:
            raise ShapeError(f"{self.name}: feature_dim {self.feature_dim} != flattened output {last[0]}")
        return self

    def with_classes(self, classes: Optional[int]) -> "ArchSpec":
        return self.model_copy(update={"classes": classes})


def walk(spec: ArchSpec) -> Iterator[LayerShape]:
    """Yield every block with its static per-sample input/output shape."""
    shape: Tuple[int, ...] = (spec.in_channels, spec.input_size, spec.input_size)
    skips: List[Tuple[int, Tuple[int, ...]]] = []
    for index, block in enumerate(spec.blocks):
        layer_id = f"{block.type.value}{index}"
        projection = None
        if block.type == BlockType.CONV:
            _require_spatial(shape, layer_id)
            c, h, w = shape
            out_h = conv_output_size(h, block.kernel, block.stride, block.padding, block.floor)
            out_w = conv_output_size(w, block.kernel, block.stride, block.padding, block.floor)
            out = (block.out_channels, out_h, out_w)
        elif block.type == BlockType.MAXPOOL:
            _require_spatial(shape, layer_id)
            c, h, w = shape
            if block.window > h or block.window > w:
                raise ShapeError(f"{layer_id}: pool window {block.window} larger than input {h}×{w}")
            out = (c, (h - block.window) // block.stride + 1, (w - block.window) // block.stride + 1)
        elif block.type == BlockType.AVGPOOL:
            _require_spatial(shape, layer_id)
            out = (shape[0],)
        elif block.type == BlockType.LINEAR:
            if len(shape) != 1:
                raise ShapeError(f"{layer_id}: linear needs a flat input, got {shape}")
            out = (block.out_features,)
        elif block.type == BlockType.SKIP_BEGIN:
            skips.append((index, shape))
            out = shape
        elif block.type == BlockType.SKIP_END:
            if not skips:
                raise ShapeError(f"{layer_id}: skip_end without matching skip_begin")
            _, start_shape = skips.pop()
            out = shape
            if start_shape != shape:
                if len(start_shape) != 3 or len(shape) != 3 or start_shape[1] % shape[1]:
                    raise ShapeError(f"{layer_id}: cannot project skip {start_shape} onto {shape}")
                projection = (start_shape, start_shape[1] // shape[1])
        else:
            out = shape
        yield LayerShape(index, layer_id, block, shape, out, projection)
        shape = out
    if skips:
        raise ShapeError(f"{spec.name}: {len(skips)} skip_begin marker(s) never closed")


def _require_spatial(shape, layer_id):
    if len(shape) != 3:
        raise ShapeError(f"{layer_id}: expected a [C×H×W] input, got {shape}")


def _scaled(channels: int, multiplier: float) -> int:
    return max(1, int(round(channels * multiplier)))


def _activation(kind: ModelKind) -> BlockSpec:
    return BlockSpec(type=BlockType.ACT, activation=Activation.LIF if kind == ModelKind.SNN else Activation.RELU)


def _feature_projection(blocks: List[BlockSpec], kind: ModelKind, width: int):
    # ANN features stay signed so normalized clusters can point in opposite directions
    blocks.append(BlockSpec(type=BlockType.LINEAR, out_features=width))
    if kind == ModelKind.SNN:
        blocks.append(_activation(kind))


def vgg_spec(depth: int, width_scale: str = "full", kind: ModelKind | str = ModelKind.ANN, classes: Optional[int] = 10,
             width_multiplier: float = 1.0, input_size: int = 32, in_channels: int = 3,
             feature_width: Optional[int] = None) -> ArchSpec:
    """VGG family for small images; `mini` halves the last two conv widths.

    A maxpool is kept only while the feature map is at least 2×2, so the same
    layouts work for desk-scale inputs.
    """
    if depth not in VGG_LAYOUTS:
        raise ConfigError(f"unsupported VGG depth {depth}, expected one of {sorted(VGG_LAYOUTS)}")
    if width_scale not in ("full", "mini"):
        raise ConfigError(f"unknown width scale '{width_scale}'")
    kind = ModelKind(kind)
    layout = list(VGG_LAYOUTS[depth])
    if width_scale == "mini":
        conv_positions = [i for i, item in enumerate(layout) if item != "M"]
        for i in conv_positions[-2:]:
            layout[i] = layout[i] // 2

    blocks: List[BlockSpec] = []
    size = input_size
    for item in layout:
        if item == "M":
            if size >= 2:
                blocks.append(BlockSpec(type=BlockType.MAXPOOL, window=2, stride=2))
                size //= 2
            continue
        blocks.append(BlockSpec(type=BlockType.CONV, out_channels=_scaled(item, width_multiplier),
                                kernel=3, stride=1, padding=1, bias=True))
        blocks.append(BlockSpec(type=BlockType.NORM))
        blocks.append(_activation(kind))
    blocks.append(BlockSpec(type=BlockType.AVGPOOL))
    if feature_width is not None:
        _feature_projection(blocks, kind, feature_width)

    name = f"VGG{depth}{'mini' if width_scale == 'mini' else ''}"
    return ArchSpec(name=name, kind=kind, blocks=blocks, in_channels=in_channels,
                    input_size=input_size, classes=classes)


def resnet_spec(depth: int, base_channels: int = 64, kind: ModelKind | str = ModelKind.ANN,
                classes: Optional[int] = 10, width_multiplier: float = 1.0, input_size: int = 32,
                in_channels: int = 3, feature_width: Optional[int] = None) -> ArchSpec:
    """CIFAR-style ResNet: 3×3 stem, four stages of basic blocks, global average pool.

    `base_channels=54` gives the ResNet10mini widths (54, 108, 216, 432).
    """
    if depth not in RESNET_STAGES:
        raise ConfigError(f"unsupported ResNet depth {depth}, expected one of {sorted(RESNET_STAGES)}")
    kind = ModelKind(kind)
    base = _scaled(base_channels, width_multiplier)

    blocks: List[BlockSpec] = [
        BlockSpec(type=BlockType.CONV, out_channels=base, kernel=3, stride=1, padding=1, bias=False),
        BlockSpec(type=BlockType.NORM),
        _activation(kind),
    ]
    for stage, repeats in enumerate(RESNET_STAGES[depth]):
        width = base * 2 ** stage
        for r in range(repeats):
            stride = 2 if stage > 0 and r == 0 else 1
            blocks += [
                BlockSpec(type=BlockType.SKIP_BEGIN),
                BlockSpec(type=BlockType.CONV, out_channels=width, kernel=3, stride=stride, padding=1,
                          bias=False, floor=stride > 1),
                BlockSpec(type=BlockType.NORM),
                _activation(kind),
                BlockSpec(type=BlockType.CONV, out_channels=width, kernel=3, stride=1, padding=1, bias=False),
                BlockSpec(type=BlockType.NORM),
                BlockSpec(type=BlockType.SKIP_END),
                _activation(kind),
            ]
    blocks.append(BlockSpec(type=BlockType.AVGPOOL))
    if feature_width is not None:
        _feature_projection(blocks, kind, feature_width)

    name = f"ResNet{depth}{'mini' if base_channels != 64 else ''}"
    return ArchSpec(name=name, kind=kind, blocks=blocks, in_channels=in_channels,
                    input_size=input_size, classes=classes)
