"""Reference implementations of the parameterized image operators.

These are the ground-truth transforms used to synthesize training pairs: the
smoothing family (L0 gradient minimization, weighted-least-squares, rolling
guidance, plain Gaussian) and the restoration degradations (bicubic
super-resolution input synthesis, Gaussian noise).  The edge-map input
feature and the parameter normalization/sampling rules live here too.

Images are numpy arrays of shape (H, W, 3) with float64 values in [0, 1];
``validate_image`` clamps on the way in and every operator clamps on the way
out.  All operators are pure functions of (input, parameters, seed).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, DimensionError, NumericError, ParameterError, RegistryError


def validate_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("image values must be finite")
    return np.clip(arr, 0.0, 1.0)


def _clip(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Edge map input feature
# ---------------------------------------------------------------------------


def edge_map(img) -> np.ndarray:
    """Mean absolute 4-neighbor difference, summed over channels and divided
    by 4; replicate padding at the borders.  Returns shape (1, H, W)."""
    img = validate_image(img)
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    c = p[1:-1, 1:-1]
    e = (
        np.abs(c - p[1:-1, :-2])
        + np.abs(c - p[1:-1, 2:])
        + np.abs(c - p[:-2, 1:-1])
        + np.abs(c - p[2:, 1:-1])
    ).sum(axis=2) / 4.0
    return e[None]


# ---------------------------------------------------------------------------
# Gaussian blur (also the rolling-guidance initialization)
# ---------------------------------------------------------------------------


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    p = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img)
    n = img.shape[axis]
    sl = [slice(None)] * img.ndim
    for i, w in enumerate(kernel):
        sl[axis] = slice(i, i + n)
        out += w * p[tuple(sl)]
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable truncated Gaussian (radius ceil(3 sigma)), kernel normalized
    to sum 1, replicate borders."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    img = validate_image(img)
    k = _gaussian_kernel(sigma)
    return _clip(_blur_axis(_blur_axis(img, k, 0), k, 1))


# ---------------------------------------------------------------------------
# L0 gradient minimization
# ---------------------------------------------------------------------------


def l0_smooth(img, lam: float, kappa: float = 2.0, beta_max: float = 1e5) -> np.ndarray:
    """Half-quadratic splitting for piecewise-flat smoothing.

    Alternates (a) hard-thresholding the circular image gradients at
    lam/beta with (b) a frequency-domain quadratic solve, on the schedule
    beta: 2*lam -> beta_max with beta <- kappa*beta.
    """
    if lam <= 0:
        raise ParameterError(f"lambda must be positive, got {lam}")
    img = validate_image(img)
    h_, w_ = img.shape[:2]
    ux = np.fft.fftfreq(w_)[None, :]
    uy = np.fft.fftfreq(h_)[:, None]
    otf_x = np.exp(2j * np.pi * ux) - 1.0  # circular forward difference, width axis
    otf_y = np.exp(2j * np.pi * uy) - 1.0
    denom = (np.abs(otf_x) ** 2 + np.abs(otf_y) ** 2)[..., None]
    f_img = np.fft.fft2(img, axes=(0, 1))
    s = img
    beta = 2.0 * lam
    while beta < beta_max:
        gx = np.roll(s, -1, axis=1) - s
        gy = np.roll(s, -1, axis=0) - s
        weak = (gx * gx + gy * gy).sum(axis=2) < lam / beta
        gx[weak] = 0.0
        gy[weak] = 0.0
        rhs = f_img + beta * (
            np.conj(otf_x)[..., None] * np.fft.fft2(gx, axes=(0, 1))
            + np.conj(otf_y)[..., None] * np.fft.fft2(gy, axes=(0, 1))
        )
        s = np.real(np.fft.ifft2(rhs / (1.0 + beta * denom), axes=(0, 1)))
        beta *= kappa
    return _clip(s)


# ---------------------------------------------------------------------------
# Weighted least squares smoothing
# ---------------------------------------------------------------------------


def _wls_system(img: np.ndarray, lam: float, alpha: float, eps_w: float) -> sp.csr_matrix:
    h, w = img.shape[:2]
    lum = 0.2126 * img[..., 0] + 0.7152 * img[..., 1] + 0.0722 * img[..., 2]
    ell = np.log(lum + 1e-4)
    wx = 1.0 / (np.abs(ell[:, 1:] - ell[:, :-1]) ** alpha + eps_w)  # (h, w-1)
    wy = 1.0 / (np.abs(ell[1:, :] - ell[:-1, :]) ** alpha + eps_w)  # (h-1, w)
    idx = np.arange(h * w).reshape(h, w)
    rows = np.concatenate([idx[:, :-1].ravel(), idx[1:, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[:-1, :].ravel()])
    vals = np.concatenate([wx.ravel(), wy.ravel()])
    adj = sp.coo_matrix((vals, (rows, cols)), shape=(h * w, h * w))
    adj = adj + adj.T
    lap = sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj
    return (sp.identity(h * w) + lam * lap).tocsr()


def wls_smooth(img, lam: float, alpha: float = 1.2, tol: float = 1e-6, max_iter: int = 20000) -> np.ndarray:
    """Per-channel solve of (Id + lam * L) u = g, where L is the 4-neighbor
    graph Laplacian weighted by 1/(|d log-luminance|^alpha + 1e-4).

    Solved by Jacobi-preconditioned conjugate gradients; the relative
    residual is verified to be <= tol and a NumericError reports it
    otherwise.  lam = 0 returns the input unchanged.
    """
    if lam < 0:
        raise ParameterError(f"lambda must be non-negative, got {lam}")
    img = validate_image(img)
    if lam == 0:
        return img.copy()
    h, w = img.shape[:2]
    a = _wls_system(img, lam, alpha, eps_w=1e-4)
    precond = sp.diags(1.0 / a.diagonal())
    out = np.empty_like(img)
    for c in range(3):
        b = img[..., c].ravel()
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            out[..., c] = 0.0
            continue
        u, _ = spla.cg(a, b, rtol=tol * 0.1, atol=0.0, maxiter=max_iter, M=precond)
        rel = np.linalg.norm(a @ u - b) / bnorm
        if rel > tol:
            raise NumericError(f"WLS solve did not converge: relative residual {rel:.3e} > {tol:.1e}")
        out[..., c] = u.reshape(h, w)
    return _clip(out)


# ---------------------------------------------------------------------------
# Rolling guidance filter
# ---------------------------------------------------------------------------


def joint_bilateral(img, guide, sigma_s: float, sigma_r: float) -> np.ndarray:
    """Joint bilateral filter: spatial Gaussian window of radius
    ceil(3 sigma_s), range Gaussian on the guide (squared L2 over channels),
    replicate-padded sampling, per-pixel weight normalization."""
    if sigma_s <= 0 or sigma_r <= 0:
        raise ParameterError(f"sigmas must be positive, got sigma_s={sigma_s}, sigma_r={sigma_r}")
    img = validate_image(img)
    guide = validate_image(guide)
    if img.shape != guide.shape:
        raise DimensionError(f"image {img.shape} and guide {guide.shape} differ")
    h, w = img.shape[:2]
    r = int(np.ceil(3.0 * sigma_s))
    ip = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    gp = np.pad(guide, ((r, r), (r, r), (0, 0)), mode="edge")
    num = np.zeros_like(img)
    den = np.zeros((h, w), dtype=np.float64)
    inv_s = -1.0 / (2.0 * sigma_s * sigma_s)
    inv_r = -1.0 / (2.0 * sigma_r * sigma_r)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = np.exp((dy * dy + dx * dx) * inv_s)
            gwin = gp[r + dy : r + dy + h, r + dx : r + dx + w]
            diff2 = ((gwin - guide) ** 2).sum(axis=2)
            wgt = ws * np.exp(diff2 * inv_r)
            num += wgt[..., None] * ip[r + dy : r + dy + h, r + dx : r + dx + w]
            den += wgt
    return num / den[..., None]


def rgf_smooth(img, sigma_s: float, sigma_r: float = 0.1, iters: int = 4) -> np.ndarray:
    """Rolling guidance: start from a Gaussian-blurred guide, then repeatedly
    joint-bilateral filter the original image against the evolving guide."""
    if sigma_s <= 0 or sigma_r <= 0:
        raise ParameterError(f"sigmas must be positive, got sigma_s={sigma_s}, sigma_r={sigma_r}")
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    img = validate_image(img)
    j = gaussian_blur(img, sigma_s)
    for _ in range(iters):
        j = joint_bilateral(img, j, sigma_s, sigma_r)
    return _clip(j)


# ---------------------------------------------------------------------------
# Super-resolution degradation (bicubic down + up)
# ---------------------------------------------------------------------------


def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    return np.where(
        at <= 1.0,
        (a + 2.0) * at**3 - (a + 3.0) * at**2 + 1.0,
        np.where(at < 2.0, a * at**3 - 5.0 * a * at**2 + 8.0 * a * at - 4.0 * a, 0.0),
    )


def _resize_axis(img: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    in_size = img.shape[axis]
    step = in_size / out_size
    src = (np.arange(out_size) + 0.5) * step - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    out = None
    for j in (-1, 0, 1, 2):
        idx = np.clip(base + j, 0, in_size - 1)
        wshape = [1] * img.ndim
        wshape[axis] = out_size
        wgt = _cubic_weight(frac - j).reshape(wshape)
        piece = wgt * np.take(img, idx, axis=axis)
        out = piece if out is None else out + piece
    return out


def bicubic_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom (a = -0.5) 4-tap bicubic resampling, pixel-center aligned,
    replicate borders."""
    img = validate_image(img)
    return _clip(_resize_axis(_resize_axis(img, out_h, 0), out_w, 1))


def degrade_sr(img, scale: int) -> np.ndarray:
    """Bicubic downsample by an integer factor then bicubic upsample back,
    producing the blurry restoration input at the original resolution."""
    img = validate_image(img)
    scale = int(scale)
    if scale < 2:
        raise ParameterError(f"scale must be >= 2, got {scale}")
    h, w = img.shape[:2]
    if h % scale or w % scale:
        raise ContractViolation(f"image size {h}x{w} not divisible by scale {scale}")
    low = bicubic_resize(img, h // scale, w // scale)
    return bicubic_resize(low, h, w)


# ---------------------------------------------------------------------------
# Gaussian noise
# ---------------------------------------------------------------------------


def add_gaussian_noise(img, sigma: float, seed: int) -> np.ndarray:
    """i.i.d. Gaussian noise with standard deviation sigma on the 0-255
    convention (divided by 255 internally), clamped to [0, 1].  The noise is
    exactly ``default_rng(seed).normal(0, sigma/255, img.shape)``."""
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    img = validate_image(img)
    noise = np.random.default_rng(seed).normal(0.0, sigma / 255.0, img.shape)
    return _clip(img + noise)


# ---------------------------------------------------------------------------
# Operator registry, parameter normalization and sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatorSpec:
    """Name, parameter ranges/sampling spaces, and joint-training id of one
    registered operator.  ``values``, when set, restricts sampling to a
    discrete set inside the range (integer SR scales, fixed-value training)."""

    name: str
    param_names: tuple[str, ...]
    ranges: tuple[tuple[float, float], ...]
    spaces: tuple[str, ...]
    operator_id: float
    kind: str  # "filter" | "restore"
    values: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if len(self.param_names) != len(self.ranges) or len(self.ranges) != len(self.spaces):
            raise ParameterError(f"{self.name}: param_names/ranges/spaces lengths differ")
        if not self.param_names:
            raise ParameterError(f"{self.name}: at least one parameter required")
        for (lo, hi), space in zip(self.ranges, self.spaces):
            if not lo < hi:
                raise ParameterError(f"{self.name}: range ({lo}, {hi}) needs lo < hi")
            if space not in ("log", "linear"):
                raise ParameterError(f"{self.name}: unknown sampling space {space!r}")
            if space == "log" and lo <= 0:
                raise ParameterError(f"{self.name}: log space requires lo > 0")
        if not 0.0 < self.operator_id <= 1.0:
            raise ParameterError(f"{self.name}: operator id must be in (0, 1], got {self.operator_id}")
        if self.kind not in ("filter", "restore"):
            raise ParameterError(f"{self.name}: kind must be filter or restore")
        if self.values is not None:
            for v in self.values:
                for (lo, hi) in [self.ranges[0]]:
                    if not lo <= v <= hi:
                        raise ParameterError(f"{self.name}: discrete value {v} outside range ({lo}, {hi})")

    def with_values(self, values) -> "OperatorSpec":
        return dataclasses.replace(self, values=tuple(values))


def normalize_gamma(spec: OperatorSpec, raw, include_id: bool = False) -> np.ndarray:
    """Rescale raw parameter values into [0, 1] per their sampling space;
    with include_id, prepend the operator id (joint-training layout)."""
    raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    if raw.shape[0] != len(spec.param_names):
        raise ParameterError(f"{spec.name}: expected {len(spec.param_names)} parameters, got {raw.shape[0]}")
    out = np.empty_like(raw)
    for i, (v, (lo, hi), space) in enumerate(zip(raw, spec.ranges, spec.spaces)):
        if not lo <= v <= hi:
            raise ParameterError(f"{spec.name}: parameter {spec.param_names[i]}={v} outside [{lo}, {hi}]")
        if space == "log":
            out[i] = (np.log(v) - np.log(lo)) / (np.log(hi) - np.log(lo))
        else:
            out[i] = (v - lo) / (hi - lo)
    if include_id:
        out = np.concatenate([[spec.operator_id], out])
    return out


def sample_parameter(spec: OperatorSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform sampling in each parameter's own space (or uniform choice over
    the discrete value set when one is pinned)."""
    if spec.values is not None:
        return np.array([spec.values[rng.integers(len(spec.values))]], dtype=np.float64)
    out = np.empty(len(spec.param_names), dtype=np.float64)
    for i, ((lo, hi), space) in enumerate(zip(spec.ranges, spec.spaces)):
        if space == "log":
            out[i] = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        else:
            out[i] = rng.uniform(lo, hi)
    return out


_REGISTRY: dict[str, tuple[OperatorSpec, Callable]] = {}


def register_operator(spec: OperatorSpec, fn: Callable) -> None:
    for existing, _ in _REGISTRY.values():
        if existing.name != spec.name and existing.operator_id == spec.operator_id:
            raise ParameterError(f"operator id {spec.operator_id} already used by {existing.name}")
    _REGISTRY[spec.name] = (spec, fn)


def get_operator(name: str) -> tuple[OperatorSpec, Callable]:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown operator {name!r}; registered: {sorted(_REGISTRY)}") from None


def operator_specs() -> list[OperatorSpec]:
    return [spec for spec, _ in _REGISTRY.values()]


def apply_operator(name: str, img, params, seed: int = 0) -> np.ndarray:
    spec, fn = get_operator(name)
    params = np.atleast_1d(np.asarray(params, dtype=np.float64))
    if params.shape[0] != len(spec.param_names):
        raise ParameterError(f"{spec.name}: expected {len(spec.param_names)} parameters, got {params.shape[0]}")
    return fn(img, params, seed)


register_operator(
    OperatorSpec("l0", ("lam",), ((0.002, 0.2),), ("log",), 0.1, "filter"),
    lambda img, p, seed: l0_smooth(img, p[0]),
)
register_operator(
    OperatorSpec("wls", ("lam",), ((0.1, 10.0),), ("log",), 0.2, "filter"),
    lambda img, p, seed: wls_smooth(img, p[0]),
)
register_operator(
    OperatorSpec("rgf", ("sigma_s",), ((1.0, 10.0),), ("linear",), 0.3, "filter"),
    lambda img, p, seed: rgf_smooth(img, p[0]),
)
register_operator(
    OperatorSpec("gaussian", ("sigma",), ((0.5, 2.0),), ("linear",), 0.4, "filter"),
    lambda img, p, seed: gaussian_blur(img, p[0]),
)
register_operator(
    OperatorSpec("sr", ("scale",), ((2.0, 4.0),), ("linear",), 0.5, "restore", values=(2.0, 3.0, 4.0)),
    lambda img, p, seed: degrade_sr(img, int(round(p[0]))),
)
register_operator(
    OperatorSpec("noise", ("sigma",), ((15.0, 50.0),), ("linear",), 0.6, "restore"),
    lambda img, p, seed: add_gaussian_noise(img, p[0], seed),
)
register_operator(
    OperatorSpec("identity", ("strength",), ((0.0, 1.0),), ("linear",), 1.0, "filter"),
    lambda img, p, seed: validate_image(img),
)
