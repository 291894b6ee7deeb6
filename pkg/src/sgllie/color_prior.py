"""Illumination-invariant structure prior extraction.

An RGB image is mapped through a fixed Gaussian color model to spectral
intensity planes (E, E_lambda, E_lambdalambda); first spatial derivatives
of each plane, taken with Gaussian-derivative filters at a learnable scale
sigma, are divided by the smoothed intensity and reduced to a single edge
strength W. The normalized response standardizes log(W^2 + eps) per image.

Because every ratio has numerator and denominator proportional to the
input, W is invariant to global rescaling of linear intensity. The
division is stabilized with an image-relative epsilon (a fixed additive
epsilon would destroy that invariance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imageops import conv2d, reflect_pad2d
from .tensor import Tensor

# Gaussian color model: rows map linear RGB to E, E_lambda, E_lambdalambda.
GCM_RGB_TO_E = np.array([
    [0.06, 0.63, 0.27],
    [0.30, 0.04, -0.35],
    [0.34, -0.60, 0.17],
])

# relative division guard: denom = E_smoothed + DIV_EPS * mean(E_smoothed)
DIV_EPS = 1e-4

# below this, the per-image std of log(W^2+eps) counts as degenerate
DEGENERATE_STD = 1e-12


@dataclass
class PriorConfig:
    """Scale, stabilizers, and trainability of the prior extractor."""

    log2_sigma: float = 0.0          # sigma = 2**log2_sigma pixels
    epsilon: float = 1e-4            # inside log(W^2 + epsilon)
    kernel_truncation: float = 3.0   # kernel half-width = ceil(trunc * sigma)
    trainable_sigma: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kernel_truncation < 3:
            raise ValueError("kernel_truncation must be >= 3")

    @property
    def sigma(self) -> float:
        return 2.0 ** self.log2_sigma


@dataclass
class GaussianColorPlanes:
    """Spectral intensity and its first two spectral derivatives, [B,1,H,W]."""

    e: Tensor
    e_lambda: Tensor
    e_lambda2: Tensor


@dataclass
class PriorMap:
    """Edge strength W (w_raw >= 0) and its standardized response."""

    w_raw: Tensor
    w_norm: Tensor | None = None


def rgb_to_gaussian_color(image: Tensor) -> GaussianColorPlanes:
    """Per-pixel linear map of [B,3,H,W] RGB through the color model."""
    image = T._as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected [B,3,H,W] RGB, got {image.shape}")
    r = image[:, 0:1]
    g = image[:, 1:2]
    b = image[:, 2:3]
    m = GCM_RGB_TO_E
    planes = [r * float(m[i, 0]) + g * float(m[i, 1]) + b * float(m[i, 2])
              for i in range(3)]
    return GaussianColorPlanes(*planes)


def sigma_tensor(config: PriorConfig, log2_sigma: Tensor | None = None) -> Tensor:
    """sigma = 2**log2_sigma as a differentiable scalar tensor."""
    if log2_sigma is None:
        log2_sigma = Tensor(config.log2_sigma)
    return T.exp(log2_sigma * math.log(2.0))


def gaussian_kernel_1d(sigma: Tensor, order: int, radius: int) -> Tensor:
    """Sampled Gaussian-derivative kernel of the given order, length 2r+1.

    Differentiable in sigma. Normalizations pin the discrete responses:
    order 0 sums to 1; order 1 yields exactly 1 on a unit ramp; order 2
    sums to 0 and yields exactly 1 on the curvature of t^2/2.
    """
    if order not in (0, 1, 2):
        raise ValueError("derivative order must be 0, 1, or 2")
    if radius < 1:
        raise ValueError("kernel radius must be >= 1")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    t_const = Tensor(t)
    inv_two_var = 0.5 / T.square(sigma)
    g = T.exp(Tensor(-(t ** 2)) * inv_two_var)
    g0 = g / T.sum_all(g)
    if order == 0:
        return g0
    if order == 1:
        k = t_const * g0
        return k / T.sum_all(t_const * k)
    k = (Tensor(t ** 2) - T.square(sigma)) * g0
    k = k - T.sum_all(k) * (1.0 / len(t))
    return k * (2.0 / T.sum_all(Tensor(t ** 2) * k))


def gaussian_derivative(plane: Tensor, order_x: int, order_y: int,
                        sigma: Tensor | float,
                        truncation: float = 3.0) -> Tensor:
    """Separable Gaussian-derivative filtering with reflection borders.

    `plane` is [B,1,H,W]; output keeps that shape. Order (0,0) is plain
    smoothing. The kernel half-width follows the current sigma value;
    gradients w.r.t. sigma treat the width as fixed.
    """
    if not isinstance(sigma, Tensor):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        sigma = Tensor(float(sigma))
    if float(sigma.data) <= 0:
        raise ValueError("sigma must be positive")
    radius = max(1, int(math.ceil(truncation * float(sigma.data))))
    ky = gaussian_kernel_1d(sigma, order_y, radius)
    kx = gaussian_kernel_1d(sigma, order_x, radius)
    n = 2 * radius + 1
    padded = reflect_pad2d(plane, radius)
    out = conv2d(padded, T.reshape(ky, (1, 1, n, 1)))
    return conv2d(out, T.reshape(kx, (1, 1, 1, n)))


def _ratio_terms(planes: GaussianColorPlanes, sigma: Tensor,
                 truncation: float) -> list[Tensor]:
    """The six spatial-derivative-to-intensity ratios."""
    e_smooth = gaussian_derivative(planes.e, 0, 0, sigma, truncation)
    scale = T.mean_axis(e_smooth, (2, 3), keepdims=True)
    denom = e_smooth + scale * DIV_EPS
    black = (scale.data == 0.0).astype(denom.dtype)
    if black.any():  # all-black image: 0/0 guarded to exactly 0
        denom = denom + Tensor(black)
    terms = []
    for plane in (planes.e, planes.e_lambda, planes.e_lambda2):
        for ox, oy in ((1, 0), (0, 1)):
            d = gaussian_derivative(plane, ox, oy, sigma, truncation)
            terms.append(d / denom)
    return terms


def w_invariant(planes: GaussianColorPlanes, config: PriorConfig,
                log2_sigma: Tensor | None = None) -> PriorMap:
    """Edge strength W = sqrt of the summed squared ratio terms."""
    sigma = sigma_tensor(config, log2_sigma)
    ss = _sum_squares(planes, sigma, config.kernel_truncation)
    return PriorMap(w_raw=T.sqrt(ss))


def _sum_squares(planes: GaussianColorPlanes, sigma: Tensor,
                 truncation: float) -> Tensor:
    terms = _ratio_terms(planes, sigma, truncation)
    ss = T.square(terms[0])
    for t in terms[1:]:
        ss = ss + T.square(t)
    return ss


def ciconv(image: Tensor, config: PriorConfig,
           log2_sigma: Tensor | None = None) -> PriorMap:
    """Full prior: W plus the per-image standardized log response.

    w_norm = (log(W^2 + eps) - mean) / std, statistics taken per image
    over all spatial positions. Images with degenerate (constant) W yield
    exactly zero w_norm.
    """
    planes = rgb_to_gaussian_color(image)
    sigma = sigma_tensor(config, log2_sigma)
    ss = _sum_squares(planes, sigma, config.kernel_truncation)
    logw = T.log(ss + config.epsilon)

    mu = T.mean_axis(logw, (2, 3), keepdims=True)
    centered = logw - mu
    var = T.mean_axis(T.square(centered), (2, 3), keepdims=True)
    std = T.sqrt(var)

    degenerate = (std.data < DEGENERATE_STD).astype(std.dtype)
    safe_std = std + Tensor(degenerate)          # avoid 0-division
    w_norm = (centered / safe_std) * Tensor(1.0 - degenerate)
    return PriorMap(w_raw=T.sqrt(ss), w_norm=w_norm)
