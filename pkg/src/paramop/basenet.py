"""The task base network: a fully convolutional image-to-image net whose
weights are supplied externally on every forward pass.

Default architecture (1-based layer indices, depth 20): 3x3 convolutions
throughout, stride-2 downsampling at layer 3, a 4x4 stride-2 transposed
convolution at layer 18, the intermediate layers 4..17 paired into residual
blocks with dilated (rate 2) convolutions, and instance norm + relu after
every layer except the last.  With the defaults this gives 696,256
convolution weights and 2,432 instance-norm weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, apply_op
from .errors import ContractViolation, DimensionError

AUTO = -1  # sentinel: derive the field from depth


@dataclass(frozen=True)
class BaseNetConfig:
    """Architecture description.

    With the defaults (depth 20) the layout is: downsample at layer 3,
    residual pairs 4..17, transposed conv at layer 18, norm+relu after layers
    1..19.  AUTO fields resolve to that canonical layout scaled to ``depth``
    when depth is even and >= 8, and to a plain stack (no down/up sampling,
    no residual blocks) otherwise.  Pass None explicitly to disable a
    structural feature.
    """

    depth: int = 20
    channels: int = 64
    kernel: int = 3
    input_channels: int = 4  # RGB + edge map
    output_channels: int = 3
    downsample_layer: Optional[int] = AUTO  # canonical: 3
    upsample_layer: Optional[int] = AUTO  # canonical: depth - 2
    residual_start: Optional[int] = AUTO  # canonical: 4
    residual_end: Optional[int] = AUTO  # inclusive, canonical: depth - 3
    dilation_rate: int = 2
    norm_after: Optional[tuple[int, ...]] = None  # default: all layers but the last
    conv_bias: bool = False

    def __post_init__(self):
        canonical = self.depth >= 8 and self.depth % 2 == 0

        def resolve(name, value):
            if value == AUTO:
                object.__setattr__(self, name, value_for(name) if canonical else None)

        def value_for(name):
            return {
                "downsample_layer": 3,
                "upsample_layer": self.depth - 2,
                "residual_start": 4,
                "residual_end": self.depth - 3,
            }[name]

        for name in ("downsample_layer", "upsample_layer", "residual_start", "residual_end"):
            resolve(name, getattr(self, name))
        if self.norm_after is None:
            object.__setattr__(self, "norm_after", tuple(range(1, self.depth)))
        else:
            object.__setattr__(self, "norm_after", tuple(sorted(set(self.norm_after))))
        self._validate()

    def _validate(self):
        if self.depth < 1:
            raise ContractViolation("depth must be at least 1")
        if self.kernel % 2 != 1:
            raise ContractViolation("kernel size must be odd")
        if (self.downsample_layer is None) != (self.upsample_layer is None):
            raise ContractViolation("downsample and upsample layers must be set together")
        if (self.residual_start is None) != (self.residual_end is None):
            raise ContractViolation("residual_start and residual_end must be set together")
        if self.downsample_layer is not None:
            if not (1 < self.downsample_layer < self.upsample_layer < self.depth):
                raise ContractViolation(
                    f"need 1 < downsample({self.downsample_layer}) < upsample({self.upsample_layer}) < depth({self.depth})"
                )
        if self.residual_start is not None:
            lo, hi = self.residual_start, self.residual_end
            if (hi - lo + 1) % 2 != 0:
                raise ContractViolation(f"residual range {lo}..{hi} must pair an even number of layers")
            if not (1 < lo <= hi < self.depth):
                raise ContractViolation(f"residual range {lo}..{hi} must be interior")
            if self.downsample_layer is not None and not (self.downsample_layer < lo and hi < self.upsample_layer):
                raise ContractViolation(
                    f"need downsample({self.downsample_layer}) < residual({lo}..{hi}) < upsample({self.upsample_layer})"
                )
        if any(i < 1 or i > self.depth for i in self.norm_after):
            raise ContractViolation("norm_after indices out of range")
        if self.conv_bias:
            raise ContractViolation("conv biases are unsupported: the following normalization cancels them and WeightSet carries kernels plus norm affine only")

    # -- per-layer geometry ------------------------------------------------

    def layer_kind(self, i: int) -> str:
        return "deconv" if i == self.upsample_layer else "conv"

    def layer_channels(self, i: int) -> tuple[int, int]:
        cin = self.input_channels if i == 1 else self.channels
        cout = self.output_channels if i == self.depth else self.channels
        return cin, cout

    def layer_geometry(self, i: int) -> tuple[int, int, int, int]:
        """(kernel, stride, dilation, padding) of layer i."""
        if i == self.upsample_layer:
            return 4, 2, 1, 1
        k = self.kernel
        stride = 2 if i == self.downsample_layer else 1
        in_residual = self.residual_start is not None and self.residual_start <= i <= self.residual_end
        dil = self.dilation_rate if in_residual else 1
        pad = dil * (k - 1) // 2
        return k, stride, dil, pad

    def kernel_shape(self, i: int) -> tuple[int, int, int, int]:
        cin, cout = self.layer_channels(i)
        k = self.layer_geometry(i)[0]
        if self.layer_kind(i) == "deconv":
            return (cin, cout, k, k)  # conv_transpose layout
        return (cout, cin, k, k)

    def norm_width(self, i: int) -> int:
        return self.layer_channels(i)[1]

    def block_of(self, i: int) -> Optional[tuple[int, int]]:
        """The (first, second) residual pair containing layer i, if any."""
        if self.residual_start is not None and self.residual_start <= i <= self.residual_end:
            first = self.residual_start + 2 * ((i - self.residual_start) // 2)
            return first, first + 1
        return None


def count_parameters(config: BaseNetConfig) -> tuple[int, int]:
    """(convolution scalar count, instance-norm scalar count) of the net."""
    conv = 0
    for i in range(1, config.depth + 1):
        cin, cout, kh, kw = config.kernel_shape(i)
        conv += cin * cout * kh * kw
    norm = sum(2 * config.norm_width(i) for i in config.norm_after)
    return conv, norm


class WeightSet:
    """The full set of per-layer tensors the base network consumes.

    kernels maps 1-based layer index to its conv (or transposed-conv) kernel;
    scales/shifts map each norm_after index to its [C] affine vectors.
    """

    def __init__(self, kernels: dict[int, Tensor], scales: dict[int, Tensor], shifts: dict[int, Tensor]):
        self.kernels = kernels
        self.scales = scales
        self.shifts = shifts

    def validate(self, config: BaseNetConfig) -> None:
        for i in range(1, config.depth + 1):
            if i not in self.kernels:
                raise DimensionError(f"missing kernel for layer {i}")
            want = config.kernel_shape(i)
            got = self.kernels[i].shape
            if tuple(got) != want:
                raise DimensionError(f"layer {i} kernel shape {got}, config wants {want}")
        for i in config.norm_after:
            c = config.norm_width(i)
            for name, table in (("scale", self.scales), ("shift", self.shifts)):
                if i not in table:
                    raise DimensionError(f"missing norm {name} for layer {i}")
                if tuple(table[i].shape) != (c,):
                    raise DimensionError(f"layer {i} norm {name} shape {table[i].shape}, config wants ({c},)")
        extra = set(self.scales) - set(config.norm_after)
        if extra:
            raise DimensionError(f"norm parameters present for layers without norm: {sorted(extra)}")

    def scalar_count(self) -> int:
        total = sum(t.size for t in self.kernels.values())
        total += sum(t.size for t in self.scales.values())
        total += sum(t.size for t in self.shifts.values())
        return total

    def tensors(self) -> Iterable[Tensor]:
        yield from self.kernels.values()
        yield from self.scales.values()
        yield from self.shifts.values()


def init_weights(config: BaseNetConfig, rng: np.random.Generator, dtype=np.float32, requires_grad: bool = False) -> WeightSet:
    """Conventional random initialization: kernels uniform in
    +-1/sqrt(fan_in), norm scale 1 and shift 0."""
    kernels = {}
    for i in range(1, config.depth + 1):
        shape = config.kernel_shape(i)
        if config.layer_kind(i) == "deconv":
            fan_in = shape[0] * shape[2] * shape[3]
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        bound = 1.0 / np.sqrt(fan_in)
        kernels[i] = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=requires_grad)
    scales = {i: Tensor(np.ones(config.norm_width(i), dtype=dtype), requires_grad=requires_grad) for i in config.norm_after}
    shifts = {i: Tensor(np.zeros(config.norm_width(i), dtype=dtype), requires_grad=requires_grad) for i in config.norm_after}
    return WeightSet(kernels, scales, shifts)


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial normalization with learnable affine.

    y = scale * (x - mean) / sqrt(var + eps) + shift, statistics over HxW
    (population variance).  Differentiable in x, scale, and shift.
    """
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    if x.data.ndim != 4:
        raise DimensionError(f"instance_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("instance_norm: empty spatial extent")
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"instance_norm: scale/shift {scale.shape}/{shift.shape} must be ({c},)")
    dt = x.data.dtype
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x.data - mu) * inv
    out = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]

    def bwd(g):
        dshift = g.sum(axis=(0, 2, 3))
        dscale = (g * xhat).sum(axis=(0, 2, 3))
        gx = g * scale.data[None, :, None, None]
        m1 = gx.mean(axis=(2, 3), keepdims=True)
        m2 = (gx * xhat).mean(axis=(2, 3), keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        return dx, dscale, dshift

    return apply_op((x, scale, shift), out.astype(dt, copy=False), bwd)


# ---------------------------------------------------------------------------
# Forward execution
# ---------------------------------------------------------------------------

# A stage is one atomic step of the forward pass.  Residual blocks expand to
# skip_save ... skip_add around their two conv/norm pairs; splitting at stage
# granularity is what lets the cheap-tuning path resume mid-network.


def stage_plan(config: BaseNetConfig) -> list[tuple[str, int]]:
    stages: list[tuple[str, int]] = []
    for i in range(1, config.depth + 1):
        block = config.block_of(i)
        if block and i == block[0]:
            stages.append(("skip_save", i))
        stages.append(("conv", i))
        if i in config.norm_after:
            stages.append(("norm", i))
        if block and i == block[1]:
            stages.append(("skip_add", i))
            stages.append(("relu", i))
        elif i in config.norm_after:
            stages.append(("relu", i))
    return stages


def run_stages(
    config: BaseNetConfig,
    weights: WeightSet,
    x: Tensor,
    stages: list[tuple[str, int]],
    start: int = 0,
    skip: Optional[Tensor] = None,
    stop: Optional[int] = None,
) -> tuple[Tensor, Optional[Tensor]]:
    """Execute stages[start:stop] from activation x; returns (x, pending skip)."""
    for kind, i in stages[start : stop if stop is not None else len(stages)]:
        if kind == "conv":
            k, stride, dil, pad = config.layer_geometry(i)
            if config.layer_kind(i) == "deconv":
                x = ad.conv_transpose2d(x, weights.kernels[i], stride=stride, padding=pad)
            else:
                x = ad.conv2d(x, weights.kernels[i], stride=stride, dilation=dil, padding=pad)
        elif kind == "norm":
            x = instance_norm(x, weights.scales[i], weights.shifts[i])
        elif kind == "relu":
            x = ad.relu(x)
        elif kind == "skip_save":
            skip = x
        elif kind == "skip_add":
            x = ad.add(x, skip)
            skip = None
        else:  # pragma: no cover
            raise AssertionError(kind)
    return x, skip


def forward_base(config: BaseNetConfig, weights: WeightSet, image: Tensor, edge: Tensor) -> Tensor:
    """Full forward pass on concat(image, edge); output is [N, 3, H, W].

    H and W must be even so the stride-2 down/up pair restores the input
    resolution exactly.
    """
    if image.data.ndim != 4 or edge.data.ndim != 4:
        raise DimensionError(f"forward_base expects 4-D inputs, got {image.shape}/{edge.shape}")
    n, c, h, w = image.shape
    if edge.shape != (n, config.input_channels - c, h, w):
        raise DimensionError(f"edge shape {edge.shape} does not complement image {image.shape} to {config.input_channels} channels")
    if h % 2 or w % 2:
        raise ContractViolation(f"input spatial size must be even, got {h}x{w}")
    weights.validate(config)
    x = ad.concat([image, edge], axis=1)
    out, _ = run_stages(config, weights, x, stage_plan(config))
    return out
