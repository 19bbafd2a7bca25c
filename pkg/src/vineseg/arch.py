"""U-Net builders: the scratch encoder-decoder and the Xception-like variant.

A :class:`Model` is a small DAG: an ordered list of named layers, each naming
the layers whose outputs it consumes (``"input"`` is the network input).
Forward evaluation walks the list once; :func:`summarize` propagates shapes
statically so that full-scale (544x800) specs can be inspected without running them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .tensor import Tensor

FULL_SCALE_UNET_FILTERS = (32, 64, 128, 256, 512)
FULL_SCALE_XCEPTION_FILTERS = (32, 64, 128)
FULL_SCALE_INPUT_SHAPE = (3, 544, 800)
DESK_FILTERS = (16, 32, 64)
DESK_INPUT_SHAPE = (3, 64, 64)

BLOCKS = ("dense_double", "separable_double")
SKIP_MERGES = ("add", "concat")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class UNetSpec:
    input_shape: tuple = DESK_INPUT_SHAPE
    encoder_filters: tuple = DESK_FILTERS
    block: str = "dense_double"
    skip_merge: str = "add"
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "encoder_filters", tuple(int(v) for v in self.encoder_filters))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.encoder_filters)

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if not self.encoder_filters:
            raise SpecError("encoder_filters must not be empty")
        if any(b <= a for a, b in zip(self.encoder_filters, self.encoder_filters[1:])):
            raise SpecError(f"encoder_filters must be strictly increasing, got {list(self.encoder_filters)}")
        if min(self.encoder_filters) < 1:
            raise SpecError("filter counts must be positive")
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.block not in BLOCKS:
            raise SpecError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.skip_merge not in SKIP_MERGES:
            raise SpecError(f"skip_merge must be one of {SKIP_MERGES}, got {self.skip_merge!r}")
        div = 2 ** (self.levels - 1)
        _, h, w = self.input_shape
        if h % div or w % div:
            raise SpecError(
                f"input {h}x{w} is not divisible by 2^{self.levels - 1} = {div} "
                f"required by {self.levels} resolution levels"
            )


@dataclass
class Layer:
    name: str
    module: object
    inputs: tuple


@dataclass
class Model:
    input_shape: tuple
    layers: list
    output: str
    skips: list = field(default_factory=list)  # (encoder layer, merge layer)
    variant: str = "custom"

    def __post_init__(self):
        names = {"input"}
        for layer in self.layers:
            missing = [i for i in layer.inputs if i not in names]
            if missing:
                raise SpecError(f"layer {layer.name!r} consumes undefined {missing}")
            if layer.name in names:
                raise SpecError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
        if self.output not in names:
            raise SpecError(f"output {self.output!r} is not a layer")

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        values = {"input": x}
        # drop activations once their last consumer ran
        last_use = {}
        for i, layer in enumerate(self.layers):
            for name in layer.inputs:
                last_use[name] = i
        for i, layer in enumerate(self.layers):
            values[layer.name] = layer.module(*(values[n] for n in layer.inputs))
            for name in layer.inputs:
                if last_use[name] == i and name != self.output:
                    del values[name]
        return values[self.output]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for layer in self.layers:
            for pname, t in layer.module.parameters().items():
                params[f"{layer.name}.{pname}"] = t
        return params

    def num_params(self) -> int:
        return sum(layer.module.num_params() for layer in self.layers)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise SpecError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise SpecError(f"{name}: shape {arr.shape} does not match parameter {p.shape}")
            p.data = arr.copy()

    def output_shapes(self) -> dict[str, tuple]:
        shapes = {"input": tuple(self.input_shape)}
        for layer in self.layers:
            shapes[layer.name] = layer.module.output_shape(*(shapes[n] for n in layer.inputs))
        return shapes


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []

    def add(self, name: str, module, *inputs: str) -> str:
        self.layers.append(Layer(name, module, tuple(inputs)))
        return name

    def block(self, prefix: str, kind: str, src: str, in_ch: int, out_ch: int) -> str:
        cls = nn.Conv2d if kind == "dense_double" else nn.SeparableConv2d
        a = self.add(f"{prefix}.conv1", cls(in_ch, out_ch, 3, rng=self.rng), src)
        return self.add(f"{prefix}.conv2", cls(out_ch, out_ch, 3, rng=self.rng), a)

    def project(self, name: str, src: str, in_ch: int, out_ch: int) -> str:
        return self.add(name, nn.Conv2d(in_ch, out_ch, 1, activation=None, rng=self.rng), src)


def build_unet(spec: UNetSpec, seed: int = 0) -> Model:
    """Symmetric encoder-decoder with one skip merge per level above the bottleneck.

    Encoder level: two 3×3 convs then 2×2 max-pool. Decoder level: nearest ×2
    upsampling, merge with the matching encoder output, two 3×3 convs. With
    ``skip_merge="add"`` the upsampled tensor is first projected by a 1×1 conv
    to the encoder width.
    """
    spec.validate()
    b = _Builder(seed)
    filters = spec.encoder_filters
    in_ch = spec.input_shape[0]
    src = "input"
    encoder_out = []
    for lvl, f in enumerate(filters, start=1):
        last = lvl == len(filters)
        src = b.block("bottleneck" if last else f"enc{lvl}", spec.block, src, in_ch, f)
        in_ch = f
        if not last:
            encoder_out.append((src, f))
            src = b.add(f"enc{lvl}.pool", nn.MaxPool2x2(), src)
    skips = []
    for lvl in range(len(filters) - 1, 0, -1):
        skip, f = encoder_out[lvl - 1]
        up = b.add(f"dec{lvl}.up", nn.Upsample2x(), src)
        if spec.skip_merge == "add":
            if in_ch != f:
                up = b.project(f"dec{lvl}.proj", up, in_ch, f)
            merged = b.add(f"dec{lvl}.merge", nn.Add(), up, skip)
            merged_ch = f
        else:
            merged = b.add(f"dec{lvl}.merge", nn.Concat(), up, skip)
            merged_ch = in_ch + f
        skips.append((skip, merged))
        src = b.block(f"dec{lvl}", spec.block, merged, merged_ch, f)
        in_ch = f
    out = b.add("logits", nn.Conv2d(in_ch, spec.num_classes, 1, activation=None, rng=b.rng), src)
    return Model(spec.input_shape, b.layers, out, skips, variant="unet")


def build_xception_unet(spec: UNetSpec, seed: int = 0, residual: bool = True) -> Model:
    """Xception-like U-Net built from double separable-conv blocks.

    Every block's output is summed with the running output that entered it
    (through a 1×1 projection when widths differ), so residuals chain from
    each block to the next instead of crossing from encoder to decoder.
    Encoder blocks are followed by max-pooling, decoder blocks are preceded by
    upsampling. ``residual=False`` builds the same stack without the sums.
    """
    spec.validate()
    if spec.block != "separable_double":
        raise SpecError("build_xception_unet requires block='separable_double'")
    b = _Builder(seed)
    filters = spec.encoder_filters
    in_ch = spec.input_shape[0]
    src = "input"
    skips = []

    def res_block(prefix: str, src: str, in_ch: int, f: int) -> str:
        h = b.block(prefix, "separable_double", src, in_ch, f)
        if not residual:
            return h
        shortcut = b.project(f"{prefix}.proj", src, in_ch, f) if in_ch != f else src
        merged = b.add(f"{prefix}.res", nn.Add(), h, shortcut)
        skips.append((src, merged))
        return merged

    for lvl, f in enumerate(filters, start=1):
        last = lvl == len(filters)
        src = res_block("bottleneck" if last else f"enc{lvl}", src, in_ch, f)
        in_ch = f
        if not last:
            src = b.add(f"enc{lvl}.pool", nn.MaxPool2x2(), src)
    for lvl in range(len(filters) - 1, 0, -1):
        f = filters[lvl - 1]
        src = b.add(f"dec{lvl}.up", nn.Upsample2x(), src)
        src = res_block(f"dec{lvl}", src, in_ch, f)
        in_ch = f
    out = b.add("logits", nn.Conv2d(in_ch, spec.num_classes, 1, activation=None, rng=b.rng), src)
    return Model(spec.input_shape, b.layers, out, skips, variant="xception")


def build_model(spec: UNetSpec, variant: str = "unet", seed: int = 0) -> Model:
    if variant == "unet":
        return build_unet(spec, seed)
    if variant == "xception":
        return build_xception_unet(spec, seed)
    raise SpecError(f"unknown architecture variant {variant!r}")


def summary_rows(model: Model) -> list[tuple[str, str, tuple, int]]:
    shapes = model.output_shapes()
    return [(l.name, l.module.kind, shapes[l.name], l.module.num_params()) for l in model.layers]


def summarize(model: Model) -> str:
    rows = summary_rows(model)
    out_shape = model.output_shapes()[model.output]
    header = ("layer", "type", "output shape", "params")
    body = [(n, k, "x".join(map(str, s)), f"{p:,}") for n, k, s, p in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(4)]

    def fmt(r):
        return "  ".join(
            r[i].rjust(widths[i]) if i == 3 else r[i].ljust(widths[i]) for i in range(4)
        ).rstrip()

    rule = "-" * len(fmt(header))
    total = sum(r[3] for r in rows)
    lines = [fmt(header), rule] + [fmt(r) for r in body] + [rule]
    lines.append(f"input {'x'.join(map(str, model.input_shape))}  "
                 f"output {'x'.join(map(str, out_shape))}")
    lines.append(f"total params: {total:,}")
    return "\n".join(lines)


def full_scale_unet_spec(num_classes: int = 3) -> UNetSpec:
    return UNetSpec(FULL_SCALE_INPUT_SHAPE, FULL_SCALE_UNET_FILTERS, "dense_double", "add", num_classes)


def full_scale_xception_spec(num_classes: int = 3, input_shape: Sequence[int] = FULL_SCALE_INPUT_SHAPE) -> UNetSpec:
    return UNetSpec(tuple(input_shape), FULL_SCALE_XCEPTION_FILTERS, "separable_double", "add", num_classes)
