"""Layer plans and runtimes for the U-Net backbones and the keypoint MLP.

A plan is the list of layers a network instantiates at a given input size.
The same plan drives weight initialisation, the forward pass and FLOPs
counting, so the three never disagree.
"""

from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from mobile_portrait.tensor import Tensor
from mobile_portrait.tensor import functional as F
from mobile_portrait.validation import DimensionError
from mobile_portrait.weights import ModelWeights


class ConvLayer(BaseModel):
    """One square-kernel convolution at a known output size."""

    model_config = ConfigDict(frozen=True)

    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    out_h: int
    out_w: int
    relu: bool = True

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def params(self) -> int:
        return self.out_channels * self.in_channels * self.kernel**2 + self.out_channels

    @property
    def mac_flops(self) -> int:
        return 2 * self.out_channels * self.in_channels * self.kernel**2 * self.out_h * self.out_w

    @property
    def bias_adds(self) -> int:
        return self.out_channels * self.out_h * self.out_w

    @property
    def activation_flops(self) -> int:
        return self.out_channels * self.out_h * self.out_w if self.relu else 0

    @property
    def flops(self) -> int:
        return self.mac_flops + self.bias_adds + self.activation_flops


class LinearLayer(BaseModel):
    """One fully connected layer."""

    model_config = ConfigDict(frozen=True)

    name: str
    in_features: int
    out_features: int
    relu: bool = True

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.out_features, self.in_features)

    @property
    def params(self) -> int:
        return self.out_features * self.in_features + self.out_features

    @property
    def mac_flops(self) -> int:
        return 2 * self.out_features * self.in_features

    @property
    def bias_adds(self) -> int:
        return self.out_features

    @property
    def activation_flops(self) -> int:
        return self.out_features if self.relu else 0

    @property
    def flops(self) -> int:
        return self.mac_flops + self.bias_adds + self.activation_flops


Layer = ConvLayer | LinearLayer


class UNetSpec(BaseModel):
    """Channel/depth schedule of a plain convolutional U-Net."""

    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    channels: list[int] = Field(..., min_length=1, description="Channels per resolution level")
    convs_per_block: int = Field(default=1, ge=1)
    fusion: bool = Field(default=False, description="Bottleneck fusion conv for multiview features")

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def divisor(self) -> int:
        """Input sizes must be multiples of this."""
        return 2 ** (self.depth - 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.channels[-1]

    def bottleneck_size(self, height: int, width: int) -> tuple[int, int]:
        return height // self.divisor, width // self.divisor

    def check_size(self, height: int, width: int, what: str) -> None:
        for axis, size in (("height", height), ("width", width)):
            if size % self.divisor:
                raise DimensionError(
                    f"{what} input must be a multiple of {self.divisor}",
                    axis=axis, expected=f"multiple of {self.divisor}", actual=size,
                )

    def plan(self, prefix: str, height: int, width: int) -> list[ConvLayer]:
        """Layers in execution order for an input of ``height`` x ``width``."""
        self.check_size(height, width, prefix)
        c = self.channels
        n = self.convs_per_block
        sizes = [(height // 2**i, width // 2**i) for i in range(self.depth)]
        layers = [ConvLayer(name=f"{prefix}.stem", in_channels=self.in_channels, out_channels=c[0],
                            out_h=height, out_w=width)]
        for i in range(self.depth):
            h, w = sizes[i]
            for j in range(n):
                layers.append(ConvLayer(name=f"{prefix}.enc{i}.conv{j}", in_channels=c[i],
                                        out_channels=c[i], out_h=h, out_w=w))
            if i < self.depth - 1:
                layers.append(ConvLayer(name=f"{prefix}.down{i}", in_channels=c[i], out_channels=c[i + 1],
                                        stride=2, out_h=sizes[i + 1][0], out_w=sizes[i + 1][1]))
        if self.fusion:
            h, w = sizes[-1]
            layers.append(ConvLayer(name=f"{prefix}.fuse", in_channels=2 * c[-1], out_channels=c[-1],
                                    out_h=h, out_w=w))
        for i in range(self.depth - 2, -1, -1):
            h, w = sizes[i]
            layers.append(ConvLayer(name=f"{prefix}.dec{i}.conv0", in_channels=c[i + 1] + c[i],
                                    out_channels=c[i], out_h=h, out_w=w))
            for j in range(1, n):
                layers.append(ConvLayer(name=f"{prefix}.dec{i}.conv{j}", in_channels=c[i],
                                        out_channels=c[i], out_h=h, out_w=w))
        layers.append(ConvLayer(name=f"{prefix}.head", in_channels=c[0], out_channels=self.out_channels,
                                out_h=height, out_w=width, relu=False))
        return layers


def mlp_plan(prefix: str, sizes: Sequence[int]) -> list[LinearLayer]:
    """Fully connected stack; ReLU after every layer but the last."""
    last = len(sizes) - 2
    return [
        LinearLayer(name=f"{prefix}.fc{i}", in_features=sizes[i], out_features=sizes[i + 1], relu=i < last)
        for i in range(len(sizes) - 1)
    ]


# ============ Initialisation ============


def init_layers(
    layers: Sequence[Layer], weights: ModelWeights, rng: np.random.Generator, zero: Sequence[str] = ()
) -> None:
    """Add He-initialised weights and zero biases for every layer.

    Layers named in ``zero`` get all-zero weights.
    """
    for layer in layers:
        shape = layer.weight_shape
        fan_in = int(np.prod(shape[1:]))
        if layer.name in zero:
            w = np.zeros(shape, dtype=np.float32)
        else:
            w = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        weights.add(f"{layer.name}.weight", w)
        weights.add(f"{layer.name}.bias", np.zeros(shape[0], dtype=np.float32))


def layer_tensor_names(layers: Sequence[Layer]) -> list[str]:
    return [f"{layer.name}.{part}" for layer in layers for part in ("weight", "bias")]


# ============ Runtime ============


class UNet:
    """Forward pass of a UNetSpec over weights stored under ``prefix``."""

    def __init__(self, spec: UNetSpec, prefix: str, weights: ModelWeights):
        self.spec = spec
        self.prefix = prefix
        self.weights = weights

    def require(self) -> None:
        layers = self.spec.plan(self.prefix, self.spec.divisor, self.spec.divisor)
        self.weights.require(layer_tensor_names(layers), component=self.prefix)

    def conv(self, x: Tensor, name: str, stride: int = 1, relu: bool = True) -> Tensor:
        w = self.weights[f"{self.prefix}.{name}.weight"]
        b = self.weights[f"{self.prefix}.{name}.bias"]
        y = F.conv2d(x, w, b, stride=stride, padding=w.shape[2] // 2)
        return F.relu(y) if relu else y

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Down path through the last downblock: (bottleneck, skips)."""
        self.spec.check_size(x.shape[2], x.shape[3], self.prefix)
        h = self.conv(x, "stem")
        skips = []
        for i in range(self.spec.depth):
            for j in range(self.spec.convs_per_block):
                h = self.conv(h, f"enc{i}.conv{j}")
            if i < self.spec.depth - 1:
                skips.append(h)
                h = self.conv(h, f"down{i}", stride=2)
        return h, skips

    def fuse(self, bottleneck: Tensor, views: Tensor | None) -> Tensor:
        """Merge the current bottleneck with (averaged) multiview features.

        An absent bank feeds zeros into the bank input slots.
        """
        if views is None:
            views = Tensor(np.zeros(bottleneck.shape, dtype=np.float32))
        return self.conv(F.concat([bottleneck, views], axis=1), "fuse")

    def decode(self, h: Tensor, skips: list[Tensor]) -> Tensor:
        for i in range(self.spec.depth - 2, -1, -1):
            skip = skips[i]
            up = F.resize(h, skip.shape[2], skip.shape[3], mode="nearest")
            h = self.conv(F.concat([up, skip], axis=1), f"dec{i}.conv0")
            for j in range(1, self.spec.convs_per_block):
                h = self.conv(h, f"dec{i}.conv{j}")
        return h

    def head(self, h: Tensor, name: str = "head") -> Tensor:
        return self.conv(h, name, relu=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.decode(*self.encode(x)))


def mlp_forward(x: Tensor, layers: Sequence[LinearLayer], weights: ModelWeights) -> Tensor:
    for layer in layers:
        x = F.linear(x, weights[f"{layer.name}.weight"], weights[f"{layer.name}.bias"])
        if layer.relu:
            x = F.relu(x)
    return x
