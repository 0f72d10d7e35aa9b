"""The weight-learning network: affine maps from the operator-parameter
vector to the predicted portion of the base network's WeightSet.

Each predicted slot i carries its own fully connected map
``W_i = A_i @ gamma + B_i`` (optionally a two-stage stack, with or without a
relu in between).  Everything outside the predicted slots is held in plain
shared tensors that train directly.

The slot specification controls which scalars are predicted: every conv
kernel, every norm affine pair, a single layer's kernel or norm pair, or one
input/output channel slice of a single kernel.  Single-layer specs enable the
cheap parameter-tuning mode: activations up to the adjustable layer are
cached once per input, and a new gamma only re-runs the layers after it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .basenet import BaseNetConfig, WeightSet, run_stages, stage_plan
from .errors import CacheInvalidError, ContractViolation, DimensionError

SLOT_MODES = ("all_conv", "all_norm", "norm_at", "conv_at", "conv_channel1_at", "conv_channel2_at")
SINGLE_LAYER_MODES = ("norm_at", "conv_at", "conv_channel1_at", "conv_channel2_at")


@dataclass(frozen=True)
class LearnedSlotSpec:
    """Which WeightSet scalars the weight-learning network predicts."""

    mode: str
    layer: Optional[int] = None

    def __post_init__(self):
        if self.mode not in SLOT_MODES:
            raise ContractViolation(f"unknown slot mode {self.mode!r}")
        if self.mode in SINGLE_LAYER_MODES and self.layer is None:
            raise ContractViolation(f"slot mode {self.mode} needs a layer index")
        if self.mode not in SINGLE_LAYER_MODES and self.layer is not None:
            raise ContractViolation(f"slot mode {self.mode} takes no layer index")


@dataclass(frozen=True)
class Slot:
    name: str
    layer: int
    kind: str  # conv | norm | conv_channel1 | conv_channel2
    shape: tuple[int, ...]  # shape of the predicted piece

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def enumerate_slots(config: BaseNetConfig, spec: LearnedSlotSpec) -> list[Slot]:
    def conv_slot(i):
        return Slot(f"conv{i}", i, "conv", config.kernel_shape(i))

    def norm_slot(i):
        if i not in config.norm_after:
            raise ContractViolation(f"layer {i} has no instance norm")
        return Slot(f"norm{i}", i, "norm", (2 * config.norm_width(i),))

    if spec.mode == "all_conv":
        return [conv_slot(i) for i in range(1, config.depth + 1)]
    if spec.mode == "all_norm":
        return [norm_slot(i) for i in config.norm_after]
    if spec.mode == "norm_at":
        return [norm_slot(spec.layer)]
    if spec.mode == "conv_at":
        return [conv_slot(spec.layer)]
    i = spec.layer
    shape = config.kernel_shape(i)
    if spec.mode == "conv_channel1_at":
        if shape[1] < 2:
            raise ContractViolation("conv_channel1 slice needs at least 2 input channels")
        return [Slot(f"conv{i}.c1", i, "conv_channel1", (shape[0], 1, shape[2], shape[3]))]
    if shape[0] < 2:
        raise ContractViolation("conv_channel2 slice needs at least 2 output channels")
    return [Slot(f"conv{i}.c2", i, "conv_channel2", (1, shape[1], shape[2], shape[3]))]


class WeightLearningNet:
    """Per-slot affine stacks plus the directly trained shared weights."""

    def __init__(self, config, slot_spec, m, fc_depth, fc_relu, params, shared):
        if m < 1:
            raise ContractViolation("gamma dimension m must be >= 1")
        if fc_depth not in (1, 2):
            raise ContractViolation("fc_depth must be 1 or 2")
        self.config = config
        self.slot_spec = slot_spec
        self.m = m
        self.fc_depth = fc_depth
        self.fc_relu = fc_relu
        self.slots = enumerate_slots(config, slot_spec)
        self.params = params  # name -> Tensor, per-slot fc parameters
        self.shared = shared  # name -> Tensor, non-predicted WeightSet pieces

    # -- construction --------------------------------------------------

    @classmethod
    def create(
        cls,
        config: BaseNetConfig,
        slot_spec: LearnedSlotSpec,
        m: int,
        fc_depth: int = 1,
        fc_relu: bool = False,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ) -> "WeightLearningNet":
        rng = rng or np.random.default_rng(0)
        slots = enumerate_slots(config, slot_spec)
        params: dict[str, Tensor] = {}

        def uniform(shape, bound):
            return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

        for slot in slots:
            n = slot.size
            if slot.kind == "norm":
                c = n // 2
                a_bound = 0.2
                b_init = np.concatenate([np.ones(c, dtype=dtype), np.zeros(c, dtype=dtype)])
            else:
                kshape = config.kernel_shape(slot.layer)
                if config.layer_kind(slot.layer) == "deconv":
                    fan_in = kshape[0] * kshape[2] * kshape[3]
                else:
                    fan_in = kshape[1] * kshape[2] * kshape[3]
                a_bound = 1.0 / np.sqrt(fan_in)
                b_init = rng.uniform(-a_bound, a_bound, n).astype(dtype)
            if fc_depth == 1:
                params[f"{slot.name}.A"] = uniform((n, m), a_bound)
                params[f"{slot.name}.B"] = Tensor(b_init, requires_grad=True)
            else:
                h = n  # hidden width matches the slot size
                # b1 spread places relu kinks inside the normalized gamma
                # range, so the fc_relu variant is genuinely nonlinear there
                params[f"{slot.name}.A1"] = uniform((h, m), 1.0 / np.sqrt(m))
                params[f"{slot.name}.b1"] = uniform((h,), 0.5)
                params[f"{slot.name}.A2"] = uniform((n, h), a_bound / np.sqrt(h))
                params[f"{slot.name}.B"] = Tensor(b_init, requires_grad=True)

        shared: dict[str, Tensor] = {}
        predicted = {s.layer: s for s in slots}

        def kernel_init(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

        for i in range(1, config.depth + 1):
            shape = config.kernel_shape(i)
            fan_in = shape[0] * shape[2] * shape[3] if config.layer_kind(i) == "deconv" else shape[1] * shape[2] * shape[3]
            slot = predicted.get(i)
            if slot is None or slot.kind == "norm":
                shared[f"conv{i}"] = kernel_init(shape, fan_in)
            elif slot.kind == "conv_channel1":
                rest = (shape[0], shape[1] - 1, shape[2], shape[3])
                shared[f"conv{i}.rest"] = kernel_init(rest, fan_in)
            elif slot.kind == "conv_channel2":
                rest = (shape[0] - 1, shape[1], shape[2], shape[3])
                shared[f"conv{i}.rest"] = kernel_init(rest, fan_in)
        norm_predicted = {s.layer for s in slots if s.kind == "norm"}
        for i in config.norm_after:
            if i in norm_predicted:
                continue
            c = config.norm_width(i)
            shared[f"scale{i}"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
            shared[f"shift{i}"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        return cls(config, slot_spec, m, fc_depth, fc_relu, params, shared)

    # -- bookkeeping ----------------------------------------------------

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def predicted_count(self) -> int:
        return sum(s.size for s in self.slots)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        items = [(f"params.{k}", v) for k, v in sorted(self.params.items())]
        items += [(f"shared.{k}", v) for k, v in sorted(self.shared.items())]
        return items

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.trainable():
            t.zero_grad()

    def fingerprint(self) -> str:
        """Hash of the architecture plus the shared (gamma-independent) weights."""
        h = hashlib.sha256()
        h.update(repr(self.config).encode())
        h.update(repr(self.slot_spec).encode())
        h.update(f"m={self.m} depth={self.fc_depth} relu={self.fc_relu}".encode())
        for name in sorted(self.shared):
            h.update(name.encode())
            h.update(self.shared[name].data.tobytes())
        return h.hexdigest()

    def _gamma_tensor(self, gamma) -> Tensor:
        g = np.asarray(gamma, dtype=self.dtype).reshape(-1)
        if g.shape[0] != self.m:
            raise DimensionError(f"gamma has {g.shape[0]} coordinates, net expects {self.m}")
        if not np.all(np.isfinite(g)):
            raise ContractViolation("gamma coordinates must be finite")
        return Tensor(g)

    # -- prediction -----------------------------------------------------

    def _slot_vector(self, slot: Slot, gamma_t: Tensor) -> Tensor:
        if self.fc_depth == 1:
            return ad.affine(gamma_t, self.params[f"{slot.name}.A"], self.params[f"{slot.name}.B"])
        hidden = ad.affine(gamma_t, self.params[f"{slot.name}.A1"], self.params[f"{slot.name}.b1"])
        if self.fc_relu:
            hidden = ad.relu(hidden)
        return ad.affine(hidden, self.params[f"{slot.name}.A2"], self.params[f"{slot.name}.B"])

    def _slot_pieces(self, gamma_t: Tensor) -> dict[str, dict]:
        """Predicted tensors per layer: {'kernel': t} or {'scale': t, 'shift': t}."""
        out: dict[int, dict] = {}
        for slot in self.slots:
            vec = self._slot_vector(slot, gamma_t)
            if slot.kind == "norm":
                c = slot.size // 2
                out[slot.layer] = {
                    "scale": ad.narrow(vec, 0, c),
                    "shift": ad.narrow(vec, c, c),
                }
            else:
                piece = ad.reshape(vec, slot.shape)
                if slot.kind == "conv_channel1":
                    kernel = ad.concat([piece, self.shared[f"conv{slot.layer}.rest"]], axis=1)
                elif slot.kind == "conv_channel2":
                    kernel = ad.concat([piece, self.shared[f"conv{slot.layer}.rest"]], axis=0)
                else:
                    kernel = piece
                out[slot.layer] = {"kernel": kernel}
        return out


def predict_weights(net: WeightLearningNet, gamma) -> WeightSet:
    """Assemble the full WeightSet for gamma: predicted slots from the fc
    stacks, everything else straight from the shared tensors."""
    cfg = net.config
    gamma_t = net._gamma_tensor(gamma)
    pieces = net._slot_pieces(gamma_t)
    kernels: dict[int, Tensor] = {}
    scales: dict[int, Tensor] = {}
    shifts: dict[int, Tensor] = {}
    for i in range(1, cfg.depth + 1):
        piece = pieces.get(i)
        if piece is not None and "kernel" in piece:
            kernels[i] = piece["kernel"]
        else:
            kernels[i] = net.shared[f"conv{i}"]
    for i in cfg.norm_after:
        piece = pieces.get(i)
        if piece is not None and "scale" in piece:
            scales[i] = piece["scale"]
            shifts[i] = piece["shift"]
        else:
            scales[i] = net.shared[f"scale{i}"]
            shifts[i] = net.shared[f"shift{i}"]
    return WeightSet(kernels, scales, shifts)


def predict_cheap(net: WeightLearningNet, gamma) -> tuple[Tensor, Tensor]:
    """(scale, shift) of the single adjustable norm layer; 2*C scalars."""
    if net.slot_spec.mode != "norm_at":
        raise ContractViolation(f"predict_cheap needs a norm_at slot spec, net has {net.slot_spec.mode}")
    gamma_t = net._gamma_tensor(gamma)
    piece = net._slot_pieces(gamma_t)[net.slot_spec.layer]
    return piece["scale"], piece["shift"]


def multipath_expand(A, B, gamma, x: Tensor, kernel_shape, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Evaluate the predicted-kernel convolution as parallel basis paths:
    sum_k gamma_k * (A[:,k] as kernel) (*) x  +  (B as kernel) (*) x.

    Algebraically identical to conv2d(x, reshape(A @ gamma + B)) when the
    prediction is affine in gamma.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    kernel_shape = tuple(int(s) for s in kernel_shape)
    n = int(np.prod(kernel_shape))
    if A.ndim != 2 or A.shape[0] != n or A.shape[1] != gamma.shape[0] or B.shape != (n,):
        raise DimensionError(f"multipath: A {A.shape}, B {B.shape} incompatible with kernel {kernel_shape} and m={gamma.shape[0]}")
    out = ad.conv2d(x, Tensor(B.reshape(kernel_shape).astype(x.dtype)), stride=stride, dilation=dilation, padding=padding)
    for k in range(gamma.shape[0]):
        path = ad.conv2d(x, Tensor(A[:, k].reshape(kernel_shape).astype(x.dtype)), stride=stride, dilation=dilation, padding=padding)
        out = ad.add(out, ad.scale(path, float(gamma[k])))
    return out


# ---------------------------------------------------------------------------
# Cheap parameter tuning: activation caching
# ---------------------------------------------------------------------------


@dataclass
class ActivationCache:
    """Feature map entering the first recomputed stage, plus validity keys.

    For an adjustable layer inside a residual block the pending skip tensor
    is stored as well (it enters the block before the adjustable layer but is
    consumed after it)."""

    input_fingerprint: str
    net_fingerprint: str
    layer: int
    resume_stage: int
    feature: np.ndarray
    skip: Optional[np.ndarray]
    layers_recomputed: int


def _input_fingerprint(image: Tensor, edge: Tensor) -> str:
    h = hashlib.sha256()
    for t in (image, edge):
        h.update(repr((t.shape, t.dtype.str)).encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def _resume_point(config: BaseNetConfig, spec: LearnedSlotSpec) -> tuple[int, int]:
    """(stage index to resume from, conv+norm stages from there on)."""
    plan = stage_plan(config)
    first_kind = "norm" if spec.mode == "norm_at" else "conv"
    resume = None
    for idx, (kind, i) in enumerate(plan):
        if i == spec.layer and kind == first_kind:
            resume = idx
            break
    assert resume is not None
    recomputed = sum(1 for kind, _ in plan[resume:] if kind in ("conv", "norm"))
    return resume, recomputed


def _shared_weightset(net: WeightLearningNet) -> WeightSet:
    """Partial WeightSet holding only the gamma-independent pieces."""
    cfg = net.config
    kernels = {}
    for i in range(1, cfg.depth + 1):
        t = net.shared.get(f"conv{i}")
        if t is not None:
            kernels[i] = t
    scales = {i: net.shared[f"scale{i}"] for i in cfg.norm_after if f"scale{i}" in net.shared}
    shifts = {i: net.shared[f"shift{i}"] for i in cfg.norm_after if f"shift{i}" in net.shared}
    return WeightSet(kernels, scales, shifts)


def build_cache(config: BaseNetConfig, net: WeightLearningNet, image: Tensor, edge: Tensor) -> ActivationCache:
    """Run the gamma-independent prefix once and store the entering feature."""
    if net.slot_spec.mode not in SINGLE_LAYER_MODES:
        raise ContractViolation(f"activation caching needs a single adjustable layer, slot spec is {net.slot_spec.mode}")
    if config is not net.config and config != net.config:
        raise ContractViolation("config does not match the weight-learning net")
    n, c, h, w = image.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"input spatial size must be even, got {h}x{w}")
    resume, recomputed = _resume_point(config, net.slot_spec)
    plan = stage_plan(config)
    x = ad.concat([image, edge], axis=1)
    x, skip = run_stages(config, _shared_weightset(net), x, plan, start=0, stop=resume)
    block = config.block_of(net.slot_spec.layer)
    pending_skip = None
    if skip is not None and block is not None:
        # skip is consumed at the block's skip_add, which lies after resume
        pending_skip = skip.data
    return ActivationCache(
        input_fingerprint=_input_fingerprint(image, edge),
        net_fingerprint=net.fingerprint(),
        layer=net.slot_spec.layer,
        resume_stage=resume,
        feature=x.data,
        skip=pending_skip,
        layers_recomputed=recomputed,
    )


def cached_forward(config: BaseNetConfig, net: WeightLearningNet, cache: ActivationCache, gamma) -> tuple[Tensor, int]:
    """Re-evaluate only the layers at and after the adjustable layer.

    Output is bit-identical to forward_base with the predict_weights
    WeightSet because the suffix runs the same stage code on the same stored
    prefix activation.  Returns (output, number of conv/norm layers re-run).
    """
    if cache.net_fingerprint != net.fingerprint():
        raise CacheInvalidError("cache is stale: config or shared weights changed")
    gamma_t = net._gamma_tensor(gamma)
    pieces = net._slot_pieces(gamma_t)[net.slot_spec.layer]
    shared = _shared_weightset(net)
    kernels = dict(shared.kernels)
    scales = dict(shared.scales)
    shifts = dict(shared.shifts)
    if "kernel" in pieces:
        kernels[net.slot_spec.layer] = pieces["kernel"]
    else:
        scales[net.slot_spec.layer] = pieces["scale"]
        shifts[net.slot_spec.layer] = pieces["shift"]
    ws = WeightSet(kernels, scales, shifts)
    x = Tensor(cache.feature)
    skip = Tensor(cache.skip) if cache.skip is not None else None
    out, _ = run_stages(config, ws, x, stage_plan(config), start=cache.resume_stage, skip=skip)
    return out, cache.layers_recomputed
