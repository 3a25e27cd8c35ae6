"""Composite depth loss: point-wise L1, gradient L1 and SSIM."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from ..errors import ShapeError


@dataclass(frozen=True)
class LossSpec:
    w_depth: float = 0.1
    w_grad: float = 1.0
    w_ssim: float = 1.0
    ssim_window: int = 7
    ssim_sigma: float = 1.5
    target_lo: float = 10.0
    target_hi: float = 1000.0

    def __post_init__(self):
        weights = (self.w_depth, self.w_grad, self.w_ssim)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one positive")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if not self.target_hi > self.target_lo:
            raise ValueError("target range must be increasing")

    @property
    def data_range(self) -> float:
        return self.target_hi - self.target_lo

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 7, sigma: float = 1.5,
         data_range: float = 990.0) -> torch.Tensor:
    """Mean structural similarity over valid (unpadded) Gaussian windows.

    ``x``/``y`` are N x 1 x H x W with H, W >= ``window``.
    """
    if x.shape != y.shape:
        raise ShapeError(f"SSIM inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ShapeError(f"SSIM needs spatial dims >= {window}, got {tuple(x.shape[-2:])}")
    w = gaussian_window(window, sigma, x.dtype).to(x.device)[None, None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x * mu_x
    syy = F.conv2d(y * y, w) - mu_y * mu_y
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).mean()


def image_gradients(t: torch.Tensor):
    """Forward differences along u (width) and v (height)."""
    return t[..., :, 1:] - t[..., :, :-1], t[..., 1:, :] - t[..., :-1, :]


def composite_loss(pred: torch.Tensor, target: torch.Tensor, spec: LossSpec = LossSpec()):
    """Return ``(total, terms)``; ``terms`` holds the unweighted ``depth``,
    ``grad`` and ``ssim`` (= (1 - SSIM) / 2) tensors."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    depth = (pred - target).abs().mean()
    pu, pv = image_gradients(pred)
    tu, tv = image_gradients(target)
    grad = (pu - tu).abs().mean() + (pv - tv).abs().mean()
    s = ssim(pred, target, spec.ssim_window, spec.ssim_sigma, spec.data_range)
    ssim_term = (1.0 - s) / 2.0
    total = spec.w_depth * depth + spec.w_grad * grad + spec.w_ssim * ssim_term
    return total, {"depth": depth, "grad": grad, "ssim": ssim_term}
