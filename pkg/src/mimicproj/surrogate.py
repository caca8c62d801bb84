"""Corruption surrogate: a shallow network that learns to mimic an unknown
test-time corruption while the latent codes are being optimized.

Layout: an affine warp layer (6 parameters per image regressed by a small
head), a 4-layer conv stack, a learnable per-channel multiplicative mask (no
bias), and an additive shortcut from the warp output. No nonlinearity after
the final sum, so the exact identity function is representable (zero conv
output + identity warp).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

IDENTITY_THETA = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def stl_warp(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Differentiable affine warp (spatial transformer layer).

    x: (N,C,H,W); theta: (N,6) or (6,) rows [a11,a12,tx,a21,a22,ty] of the
    2x3 matrix mapping normalized output coords to input sampling coords
    (align_corners=True convention, x right / y down, bilinear sampling,
    zero fill outside the input).
    """
    if theta.dim() == 1:
        theta = theta.unsqueeze(0).expand(x.shape[0], 6)
    mat = theta.reshape(-1, 2, 3)
    grid = F.affine_grid(mat, list(x.shape), align_corners=True)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=True)


class AffineHead(nn.Module):
    """Regresses the 6 warp coefficients from globally pooled image features.

    Outputs identity + max_deviation * tanh(fc(features)): the final layer is
    zero-initialized so the warp starts exactly at the identity, and the tanh
    keeps the coefficients inside a recoverable range (an unbounded head can
    run the sampling grid off the image in a few optimizer steps, after which
    warp gradients vanish and it never comes back).
    """

    def __init__(self, channels: int, hidden: int = 32, max_deviation: float = 1.0):
        super().__init__()
        self.max_deviation = max_deviation
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 6)
        # 1/hidden on the conditioned path: with a normalized-gradient optimizer
        # every weight steps at ~lr, so an unscaled 32-wide fan-in would drive
        # theta ~32x faster than the latents and win the fitting race outright.
        self.path_scale = 1.0 / hidden
        self.register_buffer("identity", torch.tensor(IDENTITY_THETA))
        self.reset_to_identity_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3))
        h = F.leaky_relu(self.fc1(pooled), 0.2)
        pre = self.path_scale * F.linear(h, self.fc2.weight) + self.fc2.bias
        return self.identity + self.max_deviation * torch.tanh(pre)

    def reset_to_identity_(self):
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)


class CorruptionSurrogate(nn.Module):
    """f_hat(x) = mask * conv_stack(warp(x)) + warp(x).

    The shortcut is taken after the warp layer so purely affine corruptions
    are representable by the residual path alone; `shortcut_from_input=True`
    switches the tap point to the raw input instead.
    """

    CONV_WIDTHS = (8, 16, 16)

    def __init__(self, resolution: tuple[int, int, int], seed: int | None = None,
                 shortcut_from_input: bool = False, conv_out_init_std: float = 0.05):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        c, h, w = resolution
        self.resolution = (c, h, w)
        self.shortcut_from_input = shortcut_from_input
        self.head = AffineHead(c)
        widths = [c, *self.CONV_WIDTHS, c]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], kernel_size=3, padding=1)
            for i in range(4)
        )
        # The residual branch starts small (low-variance final layer) so the
        # whole surrogate begins close to the identity map; a full-variance
        # branch drowns the latent gradients in random conv features.
        nn.init.normal_(self.convs[-1].weight, 0.0, conv_out_init_std)
        nn.init.zeros_(self.convs[-1].bias)
        self.mask = nn.Parameter(torch.empty(1, c, h, w).uniform_(0.9, 1.1))

    def conv_stack(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), 0.2)
        return self.convs[-1](x)  # no nonlinearity after the last layer

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != torch.Size(self.resolution):
            raise ValueError(f"expected input {self.resolution}, got {tuple(x.shape[1:])}")
        theta = self.head(x)
        warped = stl_warp(x, theta)
        skip = x if self.shortcut_from_input else warped
        return self.mask * self.conv_stack(warped) + skip

    def force_identity_(self) -> "CorruptionSurrogate":
        """Configure the exact identity function: identity warp, zeroed conv output."""
        self.head.reset_to_identity_()
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)
        return self

    def freeze_(self) -> "CorruptionSurrogate":
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def init_surrogate(resolution: tuple[int, int, int], seed: int = 0,
                   shortcut_from_input: bool = False,
                   conv_out_init_std: float = 0.05) -> CorruptionSurrogate:
    """Fresh surrogate: identity warp head, random conv stack, mask ~ U[0.9, 1.1]."""
    return CorruptionSurrogate(resolution, seed=seed,
                               shortcut_from_input=shortcut_from_input,
                               conv_out_init_std=conv_out_init_std)


def identity_surrogate(resolution: tuple[int, int, int]) -> CorruptionSurrogate:
    """Surrogate pinned to the exact identity configuration."""
    return CorruptionSurrogate(resolution, seed=0).force_identity_()
