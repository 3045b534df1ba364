"""Rule-based domain adaptation: density-driven intensity rewriting plus
selective Gaussian noise injection.

The pipeline per B-scan is: local-density map -> rewrite/permission rules
-> seeded Gaussian noise where permitted. The two rules:

1. density > density_threshold: intensity rewritten to ``set_intensity``
   and the pixel never receives noise;
2. a pixel brighter than ``bright_threshold`` sitting in a low-density
   neighborhood (density <= low_density_threshold) shields its 8-connected
   neighbors from noise (the bright pixel itself is governed by rule 1).

Core functions accept plain 2D uint8 arrays so they compose with both
:class:`~octadapt.data.ImageTensor` contents and small test fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Domain, ImageTensor, RangeTag, Volume
from .errors import ContractError


@dataclass
class TraditionalParams:
    density_window: int = 7
    density_threshold: float = 128.0
    bright_threshold: float = 225.0
    set_intensity: int = 196
    low_density_threshold: float = 64.0
    noise_mu: float = 0.0
    noise_sigma: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.density_window < 3 or self.density_window % 2 == 0:
            raise ContractError("density_window must be odd and >= 3")
        for name in ("density_threshold", "low_density_threshold"):
            v = getattr(self, name)
            if not 0 <= v <= 255:
                raise ContractError(f"{name} must be in [0, 255], got {v}")
        if self.noise_sigma <= 0:
            raise ContractError("noise_sigma must be > 0")
        if not 0 <= self.set_intensity <= 255:
            raise ContractError("set_intensity must be in [0, 255]")


def _as_u8_plane(img) -> np.ndarray:
    if isinstance(img, ImageTensor):
        if img.range_tag != RangeTag.RAW_U8:
            raise ContractError("traditional adaptation expects RAW_U8 images")
        return img.values
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ContractError("expected a 2D uint8 image plane")
    return arr


def density_map(img, window: int) -> np.ndarray:
    """Mean intensity over the window x window neighborhood of each pixel,
    with edge replication padding. Exact: integer window sums divided by
    the window area."""
    arr = _as_u8_plane(img)
    if window % 2 == 0:
        raise ContractError(f"density window must be odd, got {window}")
    if window < 1 or window > min(arr.shape):
        raise ContractError(
            f"density window {window} exceeds image dims {arr.shape}")
    pad = window // 2
    padded = np.pad(arr.astype(np.int64), pad, mode="edge")
    # summed-area table with a zero border; window sums stay exact in int64
    sat = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=sat[1:, 1:])
    h, w = arr.shape
    sums = (sat[window:window + h, window:window + w]
            - sat[:h, window:window + w]
            - sat[window:window + h, :w]
            + sat[:h, :w])
    return sums / float(window * window)


def build_noise_mask(img, density: np.ndarray, p: TraditionalParams):
    """Apply the two rewrite/shield rules.

    Returns ``(rewritten, allow_noise)`` where ``allow_noise`` is a boolean
    map of pixels permitted to receive noise. Pure function: byte-identical
    outputs across runs.
    """
    arr = _as_u8_plane(img)
    if density.shape != arr.shape:
        raise ContractError("density map dims must match image dims")
    rewritten = arr.copy()
    allow = np.ones(arr.shape, dtype=bool)

    dense = density > p.density_threshold
    rewritten[dense] = p.set_intensity
    allow[dense] = False

    shield_src = (arr > p.bright_threshold) & (density <= p.low_density_threshold)
    if shield_src.any():
        shielded = np.zeros(arr.shape, dtype=bool)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue  # the bright pixel itself is not shielded
                shifted = np.zeros(arr.shape, dtype=bool)
                ys = slice(max(dy, 0), arr.shape[0] + min(dy, 0))
                yd = slice(max(-dy, 0), arr.shape[0] + min(-dy, 0))
                xs = slice(max(dx, 0), arr.shape[1] + min(dx, 0))
                xd = slice(max(-dx, 0), arr.shape[1] + min(-dx, 0))
                shifted[yd, xd] = shield_src[ys, xs]
                shielded |= shifted
        allow[shielded] = False
    return rewritten, allow


def inject_gaussian(img, allow: np.ndarray, p: TraditionalParams,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Add seeded Gaussian noise N(mu, sigma^2) where permitted, saturating
    at [0, 255]. Shielded pixels pass through unchanged."""
    arr = _as_u8_plane(img)
    if allow.shape != arr.shape:
        raise ContractError("noise mask dims must match image dims")
    if p.noise_sigma <= 0:
        raise ContractError("noise_sigma must be > 0")
    if rng is None:
        rng = np.random.default_rng([p.seed])
    noise = rng.normal(p.noise_mu, p.noise_sigma, size=arr.shape)
    out = arr.astype(np.float64)
    out[allow] += noise[allow]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def adapt_bscan(arr: np.ndarray, p: TraditionalParams,
                rng: np.random.Generator | None = None) -> np.ndarray:
    density = density_map(arr, p.density_window)
    rewritten, allow = build_noise_mask(arr, density, p)
    return inject_gaussian(rewritten, allow, p, rng=rng)


def adapt_traditional(vol: Volume, p: TraditionalParams) -> Volume:
    """Adapt every B-scan of a raw volume; flips the domain tag and suffixes
    the id. Reproducible: each B-scan's noise stream is derived from
    ``(p.seed, scan_index)``."""
    if vol.range_tag != RangeTag.RAW_U8:
        raise ContractError("adapt_traditional expects a RAW_U8 volume")
    adapted = []
    for i, b in enumerate(vol.bscans):
        rng = np.random.default_rng([p.seed, i])
        adapted.append(ImageTensor(adapt_bscan(b.values, p, rng), RangeTag.RAW_U8))
    target = Domain.B if vol.domain == Domain.A else Domain.A
    return Volume(id=f"{vol.id}-trad", bscans=adapted, masks=vol.masks,
                  domain=target)
