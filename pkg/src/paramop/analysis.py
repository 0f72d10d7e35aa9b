"""Analysis procedures: effective receptive field, cross-model weight
statistics, the multi-path equivalence harness, unseen-parameter
interpolation, and parameter-count accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .basenet import BaseNetConfig, WeightSet, count_parameters, forward_base
from .errors import ContractViolation
from .hypernet import LearnedSlotSpec, WeightLearningNet, enumerate_slots, multipath_expand, predict_weights
from .operators import edge_map


# ---------------------------------------------------------------------------
# Effective receptive field
# ---------------------------------------------------------------------------


@dataclass
class ErfMask:
    mask: np.ndarray  # boolean (H, W)
    point: tuple[int, int]  # (x, y)
    threshold: float
    gamma: list[float]
    degenerate: bool = False

    def coverage(self) -> int:
        return int(self.mask.sum())


def effective_receptive_field(
    config: BaseNetConfig,
    net: WeightLearningNet,
    gamma,
    image: np.ndarray,
    point: tuple[int, int],
) -> ErfMask:
    """Input pixels whose gradient w.r.t. the output at ``point`` exceeds
    0.025 * grad_max.

    The output gradient is seeded with 1 on all three channels at the query
    point and zero elsewhere; the input-gradient magnitude per pixel is the
    max over the image channels."""
    x, y = point
    h, w = image.shape[:2]
    if not (0 <= x < w and 0 <= y < h):
        raise ContractViolation(f"point {point} outside {w}x{h} image")
    img_t = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1))[None].astype(np.float32), requires_grad=True)
    edge_t = Tensor(edge_map(image)[None].astype(np.float32))
    seed = np.zeros((1, config.output_channels, h, w), dtype=np.float32)
    seed[0, :, y, x] = 1.0
    with Tape() as tape:
        out = forward_base(config, predict_weights(net, gamma), img_t, edge_t)
        probe = ad.tsum(ad.mul(out, Tensor(seed)))
    backward(tape, probe)
    grad = np.abs(img_t.grad[0]).max(axis=0)  # (H, W), max over channels
    gmax = float(grad.max())
    if gmax == 0.0:
        return ErfMask(np.zeros((h, w), dtype=bool), point, 0.0, list(np.atleast_1d(gamma)), degenerate=True)
    thr = 0.025 * gmax
    return ErfMask(grad > thr, point, thr, [float(v) for v in np.atleast_1d(gamma)])


def theoretical_receptive_field(config: BaseNetConfig, point: tuple[int, int], height: int, width: int) -> np.ndarray:
    """Upper bound on the receptive field from strides/dilations alone.

    Walks the layers in reverse, propagating the index interval that can
    influence the output point.  Residual skips never extend the interval
    because every in-block convolution's support contains its center.

    Instance norm couples every spatial position through its per-channel
    statistics, so the interval bound is only sound for norm-free
    architectures; with any norm layer present the bound is the full image."""
    if config.norm_after:
        return np.ones((height, width), dtype=bool)
    sizes = [(height, width)]
    for i in range(1, config.depth + 1):
        ph, pw = sizes[-1]
        if config.layer_kind(i) == "deconv":
            sizes.append((ph * 2, pw * 2))
        elif i == config.downsample_layer:
            sizes.append((ph // 2, pw // 2))
        else:
            sizes.append((ph, pw))

    def back_interval(lo, hi, i, size):
        k, stride, dil, pad = config.layer_geometry(i)
        if config.layer_kind(i) == "deconv":
            new_lo = int(np.ceil((lo + pad - (k - 1)) / stride))
            new_hi = (hi + pad) // stride
        else:
            new_lo = stride * lo - pad
            new_hi = stride * hi - pad + dil * (k - 1)
        return max(new_lo, 0), min(new_hi, size - 1)

    x, y = point
    ylo = yhi = y
    xlo = xhi = x
    for i in range(config.depth, 0, -1):
        in_h, in_w = sizes[i - 1]
        ylo, yhi = back_interval(ylo, yhi, i, in_h)
        xlo, xhi = back_interval(xlo, xhi, i, in_w)
    mask = np.zeros((height, width), dtype=bool)
    mask[ylo : yhi + 1, xlo : xhi + 1] = True
    return mask


def erf_overlay(image: np.ndarray, erf: ErfMask, color=(0.0, 1.0, 0.0), strength: float = 0.6) -> np.ndarray:
    """Mark mask pixels in a fixed color over the input image."""
    out = np.array(image, dtype=np.float64, copy=True)
    tint = np.asarray(color, dtype=np.float64)
    out[erf.mask] = (1 - strength) * out[erf.mask] + strength * tint
    x, y = erf.point
    out[y, x] = (1.0, 0.0, 0.0)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Weight statistics (cross-model kernel comparison)
# ---------------------------------------------------------------------------


@dataclass
class LayerStats:
    layer: int
    correlation: Optional[float]  # None when a side has zero variance
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float


@dataclass
class WeightStats:
    layers: list[LayerStats] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            [
                {
                    "layer": s.layer,
                    "correlation": s.correlation,
                    "mean_a": s.mean_a,
                    "mean_b": s.mean_b,
                    "var_a": s.var_a,
                    "var_b": s.var_b,
                }
                for s in self.layers
            ]
        )


def weight_statistics(w_a: WeightSet, w_b: WeightSet) -> WeightStats:
    """Per-layer Pearson correlation between flattened kernels, plus each
    model's mean and population variance."""
    if sorted(w_a.kernels) != sorted(w_b.kernels):
        raise ContractViolation("weight sets come from different configs")
    stats = WeightStats()
    for i in sorted(w_a.kernels):
        a = w_a.kernels[i].data.astype(np.float64).ravel()
        b = w_b.kernels[i].data.astype(np.float64).ravel()
        if a.shape != b.shape:
            raise ContractViolation(f"layer {i} kernel shapes differ: {a.shape} vs {b.shape}")
        va = float(a.var())
        vb = float(b.var())
        if va == 0.0 or vb == 0.0:
            corr = None
        else:
            corr = float(np.corrcoef(a, b)[0, 1])
        stats.layers.append(LayerStats(i, corr, float(a.mean()), float(b.mean()), va, vb))
    return stats


# ---------------------------------------------------------------------------
# Multi-path equivalence harness
# ---------------------------------------------------------------------------


@dataclass
class MultipathReport:
    passed: bool
    worst_error: float
    tol: float
    trials: int
    worst_slot: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "passed": self.passed,
                "worst_error": self.worst_error,
                "tol": self.tol,
                "trials": self.trials,
                "worst_slot": self.worst_slot,
            }
        )


def _effective_affine(net: WeightLearningNet, slot) -> tuple[np.ndarray, np.ndarray]:
    """Basis kernels by evaluation: B = predict(0), A[:,k] = predict(e_k) - B.

    Exact for a single fc stage; for deeper stacks this is the affine model
    the equivalence claim asserts, so nonlinear variants show up as
    violations."""
    zero = np.zeros(net.m)
    b = net._slot_vector(slot, net._gamma_tensor(zero)).data.astype(np.float64)
    a = np.empty((b.shape[0], net.m))
    for k in range(net.m):
        e = np.zeros(net.m)
        e[k] = 1.0
        a[:, k] = net._slot_vector(slot, net._gamma_tensor(e)).data.astype(np.float64) - b
    return a, b


def verify_multipath(net: WeightLearningNet, trials: int = 100, tol: float = 1e-5, seed: int = 0) -> MultipathReport:
    """Check predicted-kernel convolution == gamma-weighted multi-path sum on
    random (slot, gamma, input) draws; reports the worst deviation instead of
    raising, so nonlinear weight nets surface as failed reports."""
    conv_slots = [s for s in net.slots if s.kind == "conv"]
    if not conv_slots:
        raise ContractViolation("net predicts no full conv kernels")
    rng = np.random.default_rng(seed)
    dtype = net.dtype
    worst = 0.0
    worst_slot = None
    for t in range(trials):
        slot = conv_slots[rng.integers(len(conv_slots))]
        a_eff, b_eff = _effective_affine(net, slot)
        gamma = rng.random(net.m)
        cin = slot.shape[1]
        x = Tensor(rng.standard_normal((1, cin, 6, 6)).astype(dtype))
        kernel = net._slot_vector(slot, net._gamma_tensor(gamma))
        direct = ad.conv2d(x, ad.reshape(kernel, slot.shape), padding=1)
        multi = multipath_expand(a_eff, b_eff, gamma, x, slot.shape, padding=1)
        err = float(np.abs(direct.data - multi.data).max())
        if err > worst:
            worst = err
            worst_slot = slot.name
    return MultipathReport(passed=worst <= tol, worst_error=worst, tol=tol, trials=trials, worst_slot=worst_slot)


# ---------------------------------------------------------------------------
# Interpolation on unseen parameters
# ---------------------------------------------------------------------------


@dataclass
class InterpolationReport:
    operator: str
    train_scores: dict  # gamma -> (psnr, ssim)
    test_scores: dict
    gaps: dict  # gamma -> psnr difference vs linear interpolation of neighbors

    def to_json(self) -> str:
        return json.dumps(
            {
                "operator": self.operator,
                "train": {str(k): v for k, v in self.train_scores.items()},
                "test": {str(k): v for k, v in self.test_scores.items()},
                "gaps": {str(k): v for k, v in self.gaps.items()},
            }
        )


def interpolation_eval(cfg, net, operator: str, train_gammas: Sequence[float], test_gammas: Sequence[float], eval_images) -> InterpolationReport:
    """Score seen and unseen parameter values; the gap compares each unseen
    value's PSNR with the linear interpolation of its bracketing neighbors'.

    Values outside the convex hull of the training set are rejected."""
    from .training import evaluate

    train_gammas = sorted(float(g) for g in train_gammas)
    lo, hi = train_gammas[0], train_gammas[-1]
    for g in test_gammas:
        if g < lo or g > hi:
            raise ContractViolation(f"test gamma {g} outside training hull [{lo}, {hi}]")
    spec_name = operator
    all_gammas = sorted({*train_gammas, *(float(g) for g in test_gammas)})
    reports = evaluate(cfg, net, eval_images, eval_gammas={spec_name: [[g] for g in all_gammas]})
    score = {r.gamma[0]: (r.psnr, r.ssim) for r in reports if r.operator == spec_name}
    gaps = {}
    for g in test_gammas:
        g = float(g)
        left = max(v for v in train_gammas if v <= g)
        right = min(v for v in train_gammas if v >= g)
        if left == right:
            interp = score[left][0]
        else:
            t = (g - left) / (right - left)
            interp = (1 - t) * score[left][0] + t * score[right][0]
        gaps[g] = score[g][0] - interp
    return InterpolationReport(
        operator=spec_name,
        train_scores={g: score[g] for g in train_gammas},
        test_scores={float(g): score[float(g)] for g in test_gammas},
        gaps=gaps,
    )


# ---------------------------------------------------------------------------
# Model-size accounting
# ---------------------------------------------------------------------------


@dataclass
class CountReport:
    conv_count: int
    norm_count: int
    predicted_count: int
    fc_count: int
    shared_count: int
    total_saved: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def count_report(config: BaseNetConfig, mode: str = "all_conv", layer: Optional[int] = None, m: int = 2) -> CountReport:
    """Scalar counts of a d=1 deployment: the fc layers store
    predicted * (m + 1) scalars, everything unpredicted is saved directly."""
    if m < 1:
        raise ContractViolation(f"gamma dimension must be >= 1, got {m}")
    conv_count, norm_count = count_parameters(config)
    slots = enumerate_slots(config, LearnedSlotSpec(mode, layer))
    predicted = sum(s.size for s in slots)
    fc_count = predicted * (m + 1)
    shared = conv_count + norm_count - predicted
    return CountReport(
        conv_count=conv_count,
        norm_count=norm_count,
        predicted_count=predicted,
        fc_count=fc_count,
        shared_count=shared,
        total_saved=fc_count + shared,
    )
