"""Joint end-to-end training of the weight-learning and base networks, with
on-the-fly pair synthesis from the reference operators, and PSNR/SSIM
evaluation.

Each step samples one operator and one parameter value, synthesizes a batch
of (input, target) patches, runs gamma through the weight-learning network
into the base network, and takes an Adam step on the pixel-wise L2 loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .basenet import BaseNetConfig, forward_base
from .corpus import make_corpus
from .errors import ContractViolation, DimensionError, NumericError, ParameterError
from .hypernet import LearnedSlotSpec, WeightLearningNet, predict_weights
from .operators import OperatorSpec, apply_operator, edge_map, get_operator, normalize_gamma, sample_parameter


# ---------------------------------------------------------------------------
# Pair synthesis
# ---------------------------------------------------------------------------


def make_pair(spec: OperatorSpec, gamma_raw, clean, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(network input, target) for one operator application.

    Filtering operators keep the clean image as input and produce the
    filtered target; restoration operators corrupt the input and keep the
    clean image as target."""
    processed = apply_operator(spec.name, clean, gamma_raw, seed=seed)
    if spec.kind == "restore":
        return processed, np.asarray(clean, dtype=np.float64)
    return np.asarray(clean, dtype=np.float64), processed


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over all elements (pixel-wise L2, RGB)."""
    return ad.sqdiff_mean(pred, target)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on [0,1] data, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = ((a - b) ** 2).mean()
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _ssim_window() -> np.ndarray:
    t = np.arange(_SSIM_WIN) - (_SSIM_WIN - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * _SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    v = sliding_window_view(x, (_SSIM_WIN, _SSIM_WIN))
    return np.tensordot(v, win, axes=([2, 3], [0, 1]))


def ssim(a, b, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), L=1, computed
    per channel over valid window positions and averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim != 3 or a.shape[0] < _SSIM_WIN or a.shape[1] < _SSIM_WIN:
        raise ContractViolation(f"ssim needs (H,W,C) with H,W >= {_SSIM_WIN}, got {a.shape}")
    win = _ssim_window()
    c1 = k1 * k1
    c2 = k2 * k2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx = _windowed_mean(x, win)
        my = _windowed_mean(y, win)
        sxx = _windowed_mean(x * x, win) - mx * mx
        syy = _windowed_mean(y * y, win) - my * my
        sxy = _windowed_mean(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer with the usual (0.9, 0.999, 1e-8) constants."""

    def __init__(self, tensors: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.tensors]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.tensors]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.tensors, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data - update.astype(p.data.dtype)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Configuration and evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperConfig:
    mode: str = "all_conv"
    layer: Optional[int] = None
    fc_depth: int = 1
    fc_relu: bool = False

    def slot_spec(self) -> LearnedSlotSpec:
        return LearnedSlotSpec(self.mode, self.layer)


@dataclass
class TrainConfig:
    operators: list[str] = field(default_factory=lambda: ["gaussian"])
    base: BaseNetConfig = field(default_factory=BaseNetConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)
    patch_size: int = 64
    batch_size: int = 4
    steps: int = 1000
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_decay_at: tuple[float, ...] = (0.6, 0.8)  # fractions of steps, x0.5 each
    seed: int = 0
    checkpoint_path: Optional[str] = None
    eval_every: int = 0  # 0: only at the end
    eval_images: int = 4
    gamma_values: dict = field(default_factory=dict)  # operator -> fixed raw values

    def __post_init__(self):
        if self.patch_size % 2:
            raise ContractViolation("patch_size must be even")
        if self.steps <= 0:
            raise ContractViolation("steps must be positive")
        if not self.operators:
            raise ContractViolation("at least one operator required")

    @property
    def joint(self) -> bool:
        return len(self.operators) > 1

    def specs(self) -> list[OperatorSpec]:
        out = []
        for name in self.operators:
            spec = get_operator(name)[0]
            if name in self.gamma_values:
                spec = spec.with_values(tuple(self.gamma_values[name]))
            out.append(spec)
        return out

    @property
    def gamma_dim(self) -> int:
        m = max(len(s.param_names) for s in self.specs())
        return m + 1 if self.joint else m


def gamma_vector(cfg: TrainConfig, spec: OperatorSpec, raw) -> np.ndarray:
    g = normalize_gamma(spec, raw, include_id=cfg.joint)
    if g.shape[0] < cfg.gamma_dim:
        g = np.concatenate([g, np.zeros(cfg.gamma_dim - g.shape[0])])
    return g


@dataclass
class EvalReport:
    step: int
    operator: str
    gamma: list[float]
    psnr: float
    ssim: float

    def json_line(self) -> str:
        return json.dumps(
            {"step": self.step, "operator": self.operator, "gamma": self.gamma, "psnr": self.psnr, "ssim": self.ssim}
        )


def default_eval_gammas(spec: OperatorSpec) -> list[list[float]]:
    """lo / mid / hi of the first parameter, midpoint in its sampling space."""
    if spec.values is not None:
        return [[v] for v in spec.values]
    lo, hi = spec.ranges[0]
    mid = float(np.sqrt(lo * hi)) if spec.spaces[0] == "log" else (lo + hi) / 2.0
    return [[lo], [mid], [hi]]


def _batch_tensors(inputs, targets, dtype=np.float32):
    imgs = np.stack([i.transpose(2, 0, 1) for i in inputs]).astype(dtype)
    tgts = np.stack([t.transpose(2, 0, 1) for t in targets]).astype(dtype)
    edges = np.stack([edge_map(i) for i in inputs]).astype(dtype)
    return Tensor(imgs), Tensor(edges), Tensor(tgts)


def evaluate(
    cfg: TrainConfig,
    net: WeightLearningNet,
    eval_images: Sequence[np.ndarray],
    step: int = 0,
    eval_gammas: Optional[dict] = None,
) -> list[EvalReport]:
    """Mean PSNR/SSIM per (operator, gamma) over the eval set.

    Deterministic: degradation seeds are fixed by (operator, gamma, image)
    position, so the same net and eval set always reproduce the report."""
    reports = []
    for spec in cfg.specs():
        gammas = (eval_gammas or {}).get(spec.name) or default_eval_gammas(spec)
        for raw in gammas:
            ps, ss = [], []
            for idx, img in enumerate(eval_images):
                inp, tgt = make_pair(spec, raw, img, seed=1000 + idx)
                img_t, edge_t, _ = _batch_tensors([inp], [tgt])
                ws = predict_weights(net, gamma_vector(cfg, spec, raw))
                out = forward_base(cfg.base, ws, img_t, edge_t)
                pred = np.clip(out.data[0].transpose(1, 2, 0).astype(np.float64), 0.0, 1.0)
                ps.append(psnr(pred, tgt))
                ss.append(ssim(pred, tgt))
            reports.append(EvalReport(step, spec.name, [float(v) for v in np.atleast_1d(raw)], float(np.mean(ps)), float(np.mean(ss))))
    return reports


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    cfg: TrainConfig,
    corpus: Optional[Sequence[np.ndarray]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[WeightLearningNet, list[EvalReport]]:
    """Run the end-to-end loop; returns the trained net and all EvalReports.

    The corpus is any list of images at least patch_size on each side; when
    omitted, a procedural corpus is generated.  The last ``eval_images``
    entries are held out for evaluation.  A NaN/Inf loss aborts with the
    offending step reported."""
    rng = np.random.default_rng(cfg.seed)
    if corpus is None:
        corpus = make_corpus(24, max(cfg.patch_size, 2 * cfg.patch_size), seed=cfg.seed)
    corpus = [np.asarray(im, dtype=np.float64) for im in corpus]
    if not corpus:
        raise ContractViolation("corpus must not be empty")
    for im in corpus:
        if im.shape[0] < cfg.patch_size or im.shape[1] < cfg.patch_size:
            raise ContractViolation(f"corpus image {im.shape} smaller than patch_size {cfg.patch_size}")
    n_eval = min(cfg.eval_images, max(1, len(corpus) // 4))
    train_images = corpus[:-n_eval] if len(corpus) > n_eval else corpus
    eval_images = corpus[-n_eval:]

    specs = cfg.specs()
    net = WeightLearningNet.create(
        cfg.base, cfg.hyper.slot_spec(), m=cfg.gamma_dim, fc_depth=cfg.hyper.fc_depth, fc_relu=cfg.hyper.fc_relu, rng=rng
    )
    adam = Adam(net.trainable(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)
    decay_steps = {int(f * cfg.steps) for f in cfg.lr_decay_at}
    reports: list[EvalReport] = []

    def emit(rs):
        reports.extend(rs)
        if log:
            for r in rs:
                log(r.json_line())

    for step in range(1, cfg.steps + 1):
        if step in decay_steps:
            adam.lr *= 0.5
        spec = specs[rng.integers(len(specs))]
        raw = sample_parameter(spec, rng)
        gamma = gamma_vector(cfg, spec, raw)
        inputs, targets = [], []
        for _ in range(cfg.batch_size):
            img = train_images[rng.integers(len(train_images))]
            y = rng.integers(img.shape[0] - cfg.patch_size + 1)
            x = rng.integers(img.shape[1] - cfg.patch_size + 1)
            patch = img[y : y + cfg.patch_size, x : x + cfg.patch_size]
            inp, tgt = make_pair(spec, raw, patch, seed=int(rng.integers(2**31)))
            inputs.append(inp)
            targets.append(tgt)
        img_t, edge_t, tgt_t = _batch_tensors(inputs, targets)
        net.zero_grad()
        with Tape() as tape:
            ws = predict_weights(net, gamma)
            out = forward_base(cfg.base, ws, img_t, edge_t)
            loss = l2_loss(out, tgt_t)
        if not np.isfinite(loss.data):
            raise NumericError(f"loss diverged (non-finite) at step {step}")
        backward(tape, loss)
        adam.step()
        if cfg.eval_every and step % cfg.eval_every == 0:
            emit(evaluate(cfg, net, eval_images, step=step))

    emit(evaluate(cfg, net, eval_images, step=cfg.steps))
    if cfg.checkpoint_path:
        from .checkpoint import save_checkpoint

        save_checkpoint(cfg.checkpoint_path, net, cfg)
    return net, reports
