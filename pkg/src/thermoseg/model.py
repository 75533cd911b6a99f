"""Miniature dilated-residual segmentation network with edge-conditioned blocks.

Four stages of basic residual blocks behind a strided stem; the last stage
trades its stride for dilation so the deepest feature map sits at 1/8 of the
input resolution, then an atrous-pyramid head and a 1x1 classifier produce
logits that are bilinearly upsampled back to the input size.

Stages conv2_x..conv4_x can be built as edge-conditioned blocks: a GFT layer
placed after the block's first BN+relu, fed by the edge map whose scale index
matches the stage.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, add, concat, relu, spatial_mean
from .conditioning import GFTLayer
from .edges import EdgeStack
from .nn import BatchNorm2d, Conv2d, make_seeder
from .ops import bilinear_resize

STAGE_NAMES = ("conv2_x", "conv3_x", "conv4_x", "conv5_x")
GFT_CANDIDATE_STAGES = ("conv2_x", "conv3_x", "conv4_x")
OUTPUT_STRIDE = 8


@dataclass
class ModelConfig:
    stage_channels: tuple = (8, 16, 32, 48)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    gft_stages: tuple = ()
    conditioning: str = "gft"  # gft | sft
    atrous_rates: tuple = (1, 6, 12)
    aspp_channels: int = 32
    num_classes: int = 6
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.gft_stages = tuple(self.gft_stages)
        self.atrous_rates = tuple(int(r) for r in self.atrous_rates)
        if len(self.stage_channels) != len(STAGE_NAMES) or len(self.blocks_per_stage) != len(STAGE_NAMES):
            raise ValueError(f"need {len(STAGE_NAMES)} stage channel/block counts")
        for s in self.gft_stages:
            if s not in GFT_CANDIDATE_STAGES:
                raise ValueError(f"invalid GFT stage {s!r}; choose from {GFT_CANDIDATE_STAGES}")
        if self.conditioning not in ("gft", "sft"):
            raise ValueError(f"conditioning must be 'gft' or 'sft', got {self.conditioning!r}")
        if not self.atrous_rates:
            raise ValueError("atrous_rates must be non-empty")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def uses_edges(self) -> bool:
        return bool(self.gft_stages)


class BasicBlock:
    """conv-BN-relu, conv-BN + projection skip, relu."""

    def __init__(self, name: str, in_channels: int, out_channels: int, stride: int,
                 dilation: int, seeder):
        self.name = name
        self.conv1 = Conv2d(name + ".conv1", in_channels, out_channels, 3, stride=stride,
                            padding=dilation, dilation=dilation, bias=False, rng=seeder(name + ".conv1"))
        self.bn1 = BatchNorm2d(name + ".bn1", out_channels)
        self.conv2 = Conv2d(name + ".conv2", out_channels, out_channels, 3,
                            padding=dilation, dilation=dilation, bias=False, rng=seeder(name + ".conv2"))
        self.bn2 = BatchNorm2d(name + ".bn2", out_channels)
        if stride != 1 or in_channels != out_channels:
            self.down = Conv2d(name + ".down", in_channels, out_channels, 1, stride=stride,
                               bias=False, rng=seeder(name + ".down"))
            self.down_bn = BatchNorm2d(name + ".down_bn", out_channels)
        else:
            self.down = None
            self.down_bn = None

    def _condition(self, h: Tensor, edge, bypass: bool) -> Tensor:
        return h

    def forward(self, x: Tensor, edge=None, train: bool = False, bypass_gft: bool = False) -> Tensor:
        h = relu(self.bn1(self.conv1(x), train))
        h = self._condition(h, edge, bypass_gft)
        h = self.bn2(self.conv2(h), train)
        identity = x if self.down is None else self.down_bn(self.down(x), train)
        return relu(add(h, identity))

    def children(self):
        layers = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.down is not None:
            layers += [self.down, self.down_bn]
        return layers

    def named_parameters(self):
        for layer in self.children():
            yield from layer.named_parameters()

    def named_buffers(self):
        for layer in self.children():
            yield from layer.named_buffers()


class ECBlock(BasicBlock):
    """Residual block with a gated feature-wise transform after the first relu."""

    def __init__(self, name: str, cond_name: str, in_channels: int, out_channels: int,
                 stride: int, dilation: int, seeder, gated: bool = True):
        super().__init__(name, in_channels, out_channels, stride, dilation, seeder)
        self.gft = GFTLayer(cond_name, out_channels, seeder, gated=gated)

    def _condition(self, h: Tensor, edge, bypass: bool) -> Tensor:
        if bypass:
            return h
        if edge is None:
            raise ValueError(f"{self.name}: edge-conditioned block forward without an edge map")
        return self.gft(h, edge)

    def children(self):
        return super().children() + [self.gft]


class ASPP:
    """Parallel atrous branches plus a pooled branch, fused by a 1x1 conv."""

    def __init__(self, name: str, in_channels: int, out_channels: int, rates, seeder):
        self.name = name
        self.point = Conv2d(name + ".point", in_channels, out_channels, 1, rng=seeder(name + ".point"))
        self.branches = [
            Conv2d(f"{name}.rate{r}", in_channels, out_channels, 3, padding=r, dilation=r,
                   rng=seeder(f"{name}.rate{r}"))
            for r in rates
        ]
        self.pool_conv = Conv2d(name + ".pool", in_channels, out_channels, 1, rng=seeder(name + ".pool"))
        fused_in = out_channels * (len(self.branches) + 2)
        self.fuse = Conv2d(name + ".fuse", fused_in, out_channels, 1, rng=seeder(name + ".fuse"))

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        outs = [relu(self.point(x))]
        outs += [relu(branch(x)) for branch in self.branches]
        pooled = relu(self.pool_conv(spatial_mean(x)))
        outs.append(bilinear_resize(pooled, h, w))
        return relu(self.fuse(concat(outs, axis=1)))

    def children(self):
        return [self.point, *self.branches, self.pool_conv, self.fuse]

    def named_parameters(self):
        for layer in self.children():
            yield from layer.named_parameters()

    def named_buffers(self):
        for layer in self.children():
            yield from layer.named_buffers()


# per-stage (stride of first block, dilation) under output stride 8
_STAGE_GEOMETRY = {"conv2_x": (1, 1), "conv3_x": (2, 1), "conv4_x": (2, 1), "conv5_x": (1, 2)}


class SegModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        seeder = make_seeder(config.seed)
        ch = config.stage_channels
        self.stem = Conv2d("stem.conv", 1, ch[0], 3, stride=2, padding=1, bias=False,
                           rng=seeder("stem.conv"))
        self.stem_bn = BatchNorm2d("stem.bn", ch[0])
        self.stages: list[list[BasicBlock]] = []
        in_c = ch[0]
        for si, stage_name in enumerate(STAGE_NAMES):
            stride, dilation = _STAGE_GEOMETRY[stage_name]
            blocks = []
            for bi in range(config.blocks_per_stage[si]):
                name = f"{stage_name}.{bi}"
                block_stride = stride if bi == 0 else 1
                if stage_name in config.gft_stages:
                    block = ECBlock(name, f"conditioning.{stage_name}.{bi}", in_c, ch[si],
                                    block_stride, dilation, seeder,
                                    gated=config.conditioning == "gft")
                else:
                    block = BasicBlock(name, in_c, ch[si], block_stride, dilation, seeder)
                blocks.append(block)
                in_c = ch[si]
            self.stages.append(blocks)
        self.aspp = ASPP("aspp", ch[-1], config.aspp_channels, config.atrous_rates, seeder)
        self.classifier = Conv2d("classifier", config.aspp_channels, config.num_classes, 1,
                                 rng=seeder("classifier"))

    @property
    def uses_edges(self) -> bool:
        return self.config.uses_edges

    def forward(self, image: Tensor, edges: EdgeStack | None = None, train: bool = False,
                bypass_gft: bool = False) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ValueError(f"model expects Nx1xHxW input, got shape {image.shape}")
        if self.uses_edges and not bypass_gft:
            if edges is None:
                raise ValueError("model has edge-conditioned stages but no edge maps were given")
            if len(edges.scales) < len(GFT_CANDIDATE_STAGES):
                raise ValueError(f"need {len(GFT_CANDIDATE_STAGES)} edge scales, got {len(edges.scales)}")
        n, _, h, w = image.shape
        x = relu(self.stem_bn(self.stem(image), train))
        for si, blocks in enumerate(self.stages):
            edge = None
            if STAGE_NAMES[si] in self.config.gft_stages and not bypass_gft:
                edge = edges.scales[si]
            for block in blocks:
                x = block.forward(x, edge=edge, train=train, bypass_gft=bypass_gft)
        x = self.aspp(x)
        logits = self.classifier(x)
        return bilinear_resize(logits, h, w)

    def children(self):
        layers = [self.stem, self.stem_bn]
        for blocks in self.stages:
            layers.extend(blocks)
        layers += [self.aspp, self.classifier]
        return layers

    def leaf_layers(self):
        """Flatten nested blocks down to parameter-owning layers."""
        out = []
        stack = list(self.children())
        while stack:
            layer = stack.pop(0)
            if hasattr(layer, "children"):
                stack = list(layer.children()) + stack
            else:
                out.append(layer)
        return out

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        out = OrderedDict()
        for layer in self.children():
            for name, p in layer.named_parameters():
                out[name] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((name, p.data) for name, p in self.named_parameters().items())
        for layer in self.children():
            for name, buf in layer.named_buffers():
                out[name] = buf
        return out

    def load_state_dict(self, arrays, skip_prefixes: tuple = ()) -> None:
        """Load parameters and BN running stats by name; shapes must match.

        Parameters under `skip_prefixes` keep their fresh initialization
        (classifier reset between stages with different label sets). Extra
        entries under a skipped prefix are ignored; any other mismatch is an
        error.
        """
        def skipped(name):
            return any(name.startswith(p) for p in skip_prefixes)

        params = self.named_parameters()
        buffer_owners = {}
        for layer in self.leaf_layers():
            if isinstance(layer, BatchNorm2d):
                buffer_owners[layer.name + ".running_mean"] = (layer, "running_mean")
                buffer_owners[layer.name + ".running_var"] = (layer, "running_var")
        seen = set()
        for name, value in arrays.items():
            if skipped(name):
                continue
            if name in params:
                p = params[name]
                if p.data.shape != value.shape:
                    raise ValueError(f"checkpoint entry {name}: shape {value.shape} != model {p.data.shape}")
                p.data = value.astype(p.data.dtype)
                p.momentum_buf = np.zeros_like(p.data)
                seen.add(name)
            elif name in buffer_owners:
                layer, suffix = buffer_owners[name]
                layer.load_buffer(suffix, value)
                seen.add(name)
            else:
                raise ValueError(f"checkpoint entry {name} does not exist in the model")
        missing = [n for n in params if n not in seen and not skipped(n)]
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")


def build_model(config: ModelConfig) -> SegModel:
    """Deterministically initialized model; same config + seed, same weights."""
    return SegModel(config)
