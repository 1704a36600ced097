"""Residual CNN classifiers built from a declarative spec.

Two named variants ship: ``resnet_micro``, a desk-scale basic-block network
for 32x32 inputs, and ``resnet50``, the full bottleneck topology for
224x224 inputs (builds and forward-checks; too large to train in CI).

A model is a spec plus a flat named parameter map; the forward pass wires
layers from the map on the fly, so save/load, head replacement and freezing
all operate on plain named tensors. Input normalization (per-channel mean
and std, stored under ``input_norm.``) is applied inside ``forward`` so a
weight file is self-contained; fresh builds start at the identity (mean 0,
std 1) and the training loop fills in train-split statistics.

Frozen parameters are tracked as a set of concrete names. A residual
block's batchnorm whose parameters are frozen runs in inference mode even
during training, so fully frozen subtrees stay bit-unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .autodiff import Tensor, no_grad, relu
from .errors import InvalidGeometry, InvalidSpec, ShapeMismatch

VARIANTS = ("resnet_micro", "resnet50")

_BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class ResidualBlockSpec:
    """One residual block: branch channels plus shortcut handling.

    ``projection`` must be set whenever in_ch != out_ch or stride != 1;
    the shortcut is then a 1x1 conv (+ batchnorm). mid_ch == out_ch means
    a basic 2-conv block, otherwise a 1x1-3x3-1x1 bottleneck.
    """

    in_ch: int
    mid_ch: int
    out_ch: int
    stride: int = 1
    projection: bool = False

    @property
    def is_bottleneck(self) -> bool:
        return self.mid_ch != self.out_ch

    def validate(self):
        if min(self.in_ch, self.mid_ch, self.out_ch) < 1 or self.stride < 1:
            raise InvalidSpec(f"block channels/stride must be positive: {self}")
        needs_proj = self.in_ch != self.out_ch or self.stride != 1
        if needs_proj and not self.projection:
            raise InvalidSpec(f"block changes shape but has no projection: {self}")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a residual classifier.

    ``stages`` holds (block_count, first_block_spec) pairs; blocks after
    the first in a stage repeat with stride 1, matched channels and no
    projection.
    """

    variant_name: str
    input_size: int
    stem_out: int
    stem_kernel: int
    stem_stride: int
    stem_pad: int
    stem_pool: bool
    stages: tuple[tuple[int, ResidualBlockSpec], ...]
    head_classes: int
    in_channels: int = 3

    @property
    def feat_dim(self) -> int:
        return self.stages[-1][1].out_ch

    def block_rows(self):
        """Expand stages into (stage_idx, block_idx, ResidualBlockSpec) rows."""
        rows = []
        for si, (count, first) in enumerate(self.stages, start=1):
            rows.append((si, 1, first))
            rest = ResidualBlockSpec(first.out_ch, first.mid_ch, first.out_ch, 1, False)
            for bi in range(2, count + 1):
                rows.append((si, bi, rest))
        return rows

    def validate(self):
        if self.head_classes < 2:
            raise InvalidSpec(f"head_classes must be >= 2, got {self.head_classes}")
        if not self.stages:
            raise InvalidSpec("spec needs at least one stage")
        if min(self.stem_out, self.stem_kernel, self.stem_stride, self.input_size) < 1 or self.stem_pad < 0:
            raise InvalidSpec("stem geometry must be positive")
        prev = self.stem_out
        for count, first in self.stages:
            if count < 1:
                raise InvalidSpec(f"stage block count must be >= 1, got {count}")
            first.validate()
            if first.in_ch != prev:
                raise InvalidSpec(f"stage expects {first.in_ch} input channels, previous produces {prev}")
            prev = first.out_ch
        # the spatial path must survive down to the pooling head
        size = (self.input_size + 2 * self.stem_pad - self.stem_kernel) // self.stem_stride + 1
        if self.stem_pool:
            size = (size - 3) // 2 + 1
        for _, first in self.stages:
            size = (size + 2 - 3) // first.stride + 1
        if size < 1:
            raise InvalidSpec(f"input size {self.input_size} collapses to {size} before pooling")


def micro_spec(head_classes: int = 10, input_size: int = 32) -> ModelSpec:
    """Desk-scale variant for 32x32 inputs: a 16-channel stem and three
    basic blocks widening to 128 features.

    The generous final width is what makes the few-shot training recipe
    (Adam at 2e-4 for a few hundred steps) work from random init: the
    reachable logit adjustment grows with feature count while the
    He-initialized logit noise does not.
    """
    return ModelSpec(
        variant_name="resnet_micro",
        input_size=input_size,
        stem_out=16, stem_kernel=3, stem_stride=1, stem_pad=1, stem_pool=False,
        stages=(
            (1, ResidualBlockSpec(16, 32, 32, 2, True)),
            (1, ResidualBlockSpec(32, 64, 64, 2, True)),
            (1, ResidualBlockSpec(64, 128, 128, 1, True)),
        ),
        head_classes=head_classes,
    )


def resnet50_spec(head_classes: int = 1000) -> ModelSpec:
    """Standard 50-layer bottleneck topology for 224x224 inputs."""
    stages = []
    in_ch = 64
    for count, mid, stride in ((3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)):
        out = mid * _BOTTLENECK_EXPANSION
        stages.append((count, ResidualBlockSpec(in_ch, mid, out, stride, True)))
        in_ch = out
    return ModelSpec(
        variant_name="resnet50",
        input_size=224,
        stem_out=64, stem_kernel=7, stem_stride=2, stem_pad=3, stem_pool=True,
        stages=tuple(stages),
        head_classes=head_classes,
    )


def make_spec(variant: str, head_classes: int) -> ModelSpec:
    if variant == "resnet_micro":
        return micro_spec(head_classes)
    if variant == "resnet50":
        return resnet50_spec(head_classes)
    raise InvalidSpec(f"unknown model variant {variant!r}")


# --- spec <-> config grammar -------------------------------------------------

def format_spec(spec: ModelSpec) -> str:
    """Canonical key=value rendering; stable for byte-exact round trips."""
    lines = [
        f"variant={spec.variant_name}",
        f"in_channels={spec.in_channels}",
        f"input_size={spec.input_size}",
        f"stem_out={spec.stem_out}",
        f"stem_kernel={spec.stem_kernel}",
        f"stem_stride={spec.stem_stride}",
        f"stem_pad={spec.stem_pad}",
        f"stem_pool={int(spec.stem_pool)}",
        f"head_classes={spec.head_classes}",
    ]
    for count, first in spec.stages:
        kind = "bottleneck" if first.is_bottleneck else "basic"
        lines.append(f"stage={count},{kind},{first.mid_ch},{first.out_ch},{first.stride}")
    return "\n".join(lines) + "\n"


def parse_spec(text: str) -> ModelSpec:
    scalars = {}
    stage_rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidSpec(f"spec line {lineno} is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        if key == "stage":
            stage_rows.append(value)
        else:
            scalars[key] = value
    required = ("variant", "in_channels", "input_size", "stem_out", "stem_kernel",
                "stem_stride", "stem_pad", "stem_pool", "head_classes")
    missing = [k for k in required if k not in scalars]
    if missing:
        raise InvalidSpec(f"spec is missing keys: {missing}")
    unknown = set(scalars) - set(required)
    if unknown:
        raise InvalidSpec(f"spec has unknown keys: {sorted(unknown)}")
    try:
        ints = {k: int(scalars[k]) for k in required if k != "variant"}
    except ValueError as exc:
        raise InvalidSpec(f"non-integer spec value: {exc}") from None

    stages = []
    in_ch = ints["stem_out"]
    for row in stage_rows:
        parts = row.split(",")
        if len(parts) != 5 or parts[1] not in ("basic", "bottleneck"):
            raise InvalidSpec(f"bad stage row: {row!r}")
        count, mid, out, stride = int(parts[0]), int(parts[2]), int(parts[3]), int(parts[4])
        if parts[1] == "basic" and mid != out:
            raise InvalidSpec(f"basic stage must have mid == out: {row!r}")
        if parts[1] == "bottleneck" and mid == out:
            raise InvalidSpec(f"bottleneck stage must have mid != out: {row!r}")
        proj = in_ch != out or stride != 1
        stages.append((count, ResidualBlockSpec(in_ch, mid, out, stride, proj)))
        in_ch = out
    spec = ModelSpec(
        variant_name=scalars["variant"],
        input_size=ints["input_size"],
        stem_out=ints["stem_out"],
        stem_kernel=ints["stem_kernel"],
        stem_stride=ints["stem_stride"],
        stem_pad=ints["stem_pad"],
        stem_pool=bool(ints["stem_pool"]),
        stages=tuple(stages),
        head_classes=ints["head_classes"],
        in_channels=ints["in_channels"],
    )
    spec.validate()
    return spec


# --- parameter map -----------------------------------------------------------

# non-trainable state that still lives in the parameter map (and weight files)
_STATS_SUFFIXES = (".running_mean", ".running_var")
_NORM_PREFIX = "input_norm."


def _bn_shapes(prefix: str, ch: int):
    return [
        (f"{prefix}.gamma", (ch,)),
        (f"{prefix}.beta", (ch,)),
        (f"{prefix}.running_mean", (ch,)),
        (f"{prefix}.running_var", (ch,)),
    ]


def spec_param_shapes(spec: ModelSpec):
    """Ordered (name, shape) list declared by a spec; the single source of
    truth for build, serialization and parameter counting."""
    shapes = [
        ("input_norm.mean", (spec.in_channels,)),
        ("input_norm.std", (spec.in_channels,)),
        ("stem.conv.weight", (spec.stem_out, spec.in_channels, spec.stem_kernel, spec.stem_kernel)),
    ]
    shapes += _bn_shapes("stem.bn", spec.stem_out)
    for si, bi, blk in spec.block_rows():
        p = f"stage{si}.block{bi}"
        if blk.is_bottleneck:
            shapes.append((f"{p}.conv1.weight", (blk.mid_ch, blk.in_ch, 1, 1)))
            shapes += _bn_shapes(f"{p}.bn1", blk.mid_ch)
            shapes.append((f"{p}.conv2.weight", (blk.mid_ch, blk.mid_ch, 3, 3)))
            shapes += _bn_shapes(f"{p}.bn2", blk.mid_ch)
            shapes.append((f"{p}.conv3.weight", (blk.out_ch, blk.mid_ch, 1, 1)))
            shapes += _bn_shapes(f"{p}.bn3", blk.out_ch)
        else:
            shapes.append((f"{p}.conv1.weight", (blk.out_ch, blk.in_ch, 3, 3)))
            shapes += _bn_shapes(f"{p}.bn1", blk.out_ch)
            shapes.append((f"{p}.conv2.weight", (blk.out_ch, blk.out_ch, 3, 3)))
            shapes += _bn_shapes(f"{p}.bn2", blk.out_ch)
        if blk.projection:
            shapes.append((f"{p}.proj.conv.weight", (blk.out_ch, blk.in_ch, 1, 1)))
            shapes += _bn_shapes(f"{p}.proj.bn", blk.out_ch)
    shapes.append(("head.weight", (spec.feat_dim, spec.head_classes)))
    shapes.append(("head.bias", (spec.head_classes,)))
    return shapes


def is_trainable_name(name: str) -> bool:
    return not name.startswith(_NORM_PREFIX) and not name.endswith(_STATS_SUFFIXES)


def _init_param(name: str, shape, rng) -> Tensor:
    if name.endswith(".weight") and len(shape) in (2, 4):
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    elif name.endswith((".gamma", ".running_var")) or name == "input_norm.std":
        data = np.ones(shape, dtype=np.float32)
    else:  # beta, bias, running_mean, input_norm.mean
        data = np.zeros(shape, dtype=np.float32)
    return Tensor(data, requires_grad=is_trainable_name(name))


@dataclass
class Model:
    spec: ModelSpec
    parameters: dict[str, Tensor]
    frozen: set[str] = field(default_factory=set)

    def trainable_names(self):
        return [n for n, t in self.parameters.items() if t.requires_grad]

    def parameter_count(self, trainable_only: bool = True) -> int:
        return sum(t.size for n, t in self.parameters.items()
                   if not trainable_only or t.requires_grad)

    def clone(self) -> "Model":
        params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                  for n, t in self.parameters.items()}
        return Model(self.spec, params, set(self.frozen))

    def head_weight(self) -> Tensor:
        return self.parameters["head.weight"]

    # -- layer views over the parameter map -------------------------------

    def _bn(self, prefix: str, training: bool) -> nn.BatchNormParams:
        p = self.parameters
        # frozen batchnorm uses running stats even during training
        mode = training and f"{prefix}.gamma" not in self.frozen
        return nn.BatchNormParams(
            gamma=p[f"{prefix}.gamma"], beta=p[f"{prefix}.beta"],
            running_mean=p[f"{prefix}.running_mean"], running_var=p[f"{prefix}.running_var"],
            training_mode=mode,
        )

    def _conv(self, name: str, stride: int, padding: int) -> nn.Conv2dParams:
        return nn.Conv2dParams(self.parameters[name], None, stride=stride, padding=padding)

    def forward(self, images: Tensor, training: bool = False) -> Tensor:
        """Run the classifier; returns pre-softmax logits [b, classes]."""
        spec = self.spec
        if images.data.ndim != 4 or images.shape[1] != spec.in_channels:
            raise ShapeMismatch(f"expected [b,{spec.in_channels},h,w] input, got {images.shape}")
        if images.shape[2] != spec.input_size or images.shape[3] != spec.input_size:
            raise InvalidGeometry(
                f"{spec.variant_name} expects {spec.input_size}x{spec.input_size} input, "
                f"got {images.shape[2]}x{images.shape[3]}")
        mean = self.parameters["input_norm.mean"].data.reshape(1, -1, 1, 1)
        std = self.parameters["input_norm.std"].data.reshape(1, -1, 1, 1)
        x = Tensor((images.data - mean) / std)

        x = relu(nn.batchnorm(
            nn.conv2d(x, self._conv("stem.conv.weight", spec.stem_stride, spec.stem_pad)),
            self._bn("stem.bn", training)))
        if spec.stem_pool:
            x = nn.maxpool2d(x, 3, 2)
        for si, bi, blk in spec.block_rows():
            x = residual_forward(x, self.block_layers(si, bi, training=training))
        feats = nn.global_avgpool(x)
        return nn.dense(feats, self.parameters["head.weight"], self.parameters["head.bias"])

    def block_layers(self, stage: int, block: int, training: bool = False) -> "BlockLayers":
        blk = dict(((si, bi), b) for si, bi, b in self.spec.block_rows())[(stage, block)]
        p = f"stage{stage}.block{block}"
        if blk.is_bottleneck:
            convs = [self._conv(f"{p}.conv1.weight", 1, 0),
                     self._conv(f"{p}.conv2.weight", blk.stride, 1),
                     self._conv(f"{p}.conv3.weight", 1, 0)]
            bns = [self._bn(f"{p}.bn{i}", training) for i in (1, 2, 3)]
        else:
            convs = [self._conv(f"{p}.conv1.weight", blk.stride, 1),
                     self._conv(f"{p}.conv2.weight", 1, 1)]
            bns = [self._bn(f"{p}.bn{i}", training) for i in (1, 2)]
        proj_conv = proj_bn = None
        if blk.projection:
            proj_conv = self._conv(f"{p}.proj.conv.weight", blk.stride, 0)
            proj_bn = self._bn(f"{p}.proj.bn", training)
        return BlockLayers(blk, convs, bns, proj_conv, proj_bn)

    def predict(self, images: Tensor):
        """Argmax class per row (eval mode); ties go to the lowest index."""
        with no_grad():
            logits = self.forward(images, training=False)
        return [int(i) for i in np.argmax(logits.data, axis=1)]


@dataclass
class BlockLayers:
    """Runtime wiring of one residual block over the parameter map."""
    spec: ResidualBlockSpec
    convs: list
    bns: list
    proj_conv: nn.Conv2dParams | None = None
    proj_bn: nn.BatchNormParams | None = None


def residual_forward(x: Tensor, block: BlockLayers) -> Tensor:
    """relu(F(x) + shortcut(x)); shortcut is identity or a 1x1 projection."""
    h = x
    last = len(block.convs) - 1
    for i, (conv, bn) in enumerate(zip(block.convs, block.bns)):
        h = nn.batchnorm(nn.conv2d(h, conv), bn)
        if i != last:
            h = relu(h)
    if block.proj_conv is not None:
        shortcut = nn.batchnorm(nn.conv2d(x, block.proj_conv), block.proj_bn)
    else:
        shortcut = x
    return relu(h + shortcut)


def build(spec: ModelSpec, seed: int) -> Model:
    """He-uniform conv/dense weights, unit gammas, zero biases; deterministic
    for a fixed seed."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params = {name: _init_param(name, shape, rng) for name, shape in spec_param_shapes(spec)}
    return Model(spec, params)


def replace_head(m: Model, new_classes: int, seed: int) -> Model:
    """Swap the classifier head for ``new_classes`` outputs; every non-head
    parameter is carried over bit-exactly and the head leaves the frozen set."""
    if new_classes < 2:
        raise InvalidSpec(f"new_classes must be >= 2, got {new_classes}")
    new_spec = replace(m.spec, head_classes=new_classes)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params = {}
    for name, shape in spec_param_shapes(new_spec):
        if name.startswith("head."):
            params[name] = _init_param(name, shape, rng)
        else:
            src = m.parameters[name]
            params[name] = Tensor(src.data.copy(), requires_grad=src.requires_grad)
    frozen = {n for n in m.frozen if not n.startswith("head.")}
    return Model(new_spec, params, frozen)


def forward(m: Model, images: Tensor, training: bool = False) -> Tensor:
    return m.forward(images, training=training)


def predict(m: Model, images: Tensor):
    return m.predict(images)
