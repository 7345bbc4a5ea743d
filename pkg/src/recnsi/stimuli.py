"""Parametric bar and grating stimuli for virtual neurophysiology.

All renderers are pure and deterministic; pixel values stay in [0, 1].
"""

from dataclasses import dataclass

import numpy as np

BAR_ORIENTATIONS = tuple(np.arange(16) * 22.5)          # degrees
BAR_LENGTHS = tuple(range(5, 46, 2))                    # pixels
GRATING_FREQUENCIES = tuple(range(0, 16))               # cycles per image
GRATING_DIAMETERS = tuple(range(5, 46, 2))              # pixels
DEFAULT_CONTRAST = 0.30
APERTURE_BLUR_SIGMA = 1.0
PROBE_IMAGE_SIZE = 48


@dataclass(frozen=True)
class BarStimulus:
    orientation: float          # degrees
    length: int                 # pixels
    center: tuple               # (y, x) pixel coordinates
    width: int = 2


@dataclass(frozen=True)
class GratingStimulus:
    spatial_frequency: float    # cycles per image
    diameter: float = None      # pixels; None = full image
    orientation: float = 0.0    # degrees
    phase: float = 0.0          # radians
    contrast: float = DEFAULT_CONTRAST
    center: tuple = None        # (y, x); None = image center


def bar_grid_centers(image_size: int):
    """5x5 grid of bar centers spaced 5 px around the image center."""
    c = (image_size - 1) / 2.0
    offsets = np.arange(-2, 3) * 5.0
    return [(c + dy, c + dx) for dy in offsets for dx in offsets]


def render_bar(spec: BarStimulus, image_size: int, subsamples: int = 4) -> np.ndarray:
    """Black bar (0) on a white background (1); anti-aliased by pixel-coverage
    sampling on a subsamples x subsamples grid per pixel."""
    # a bar is symmetric under 180-degree rotation; normalizing first makes
    # the identity bitwise instead of up-to-rounding
    theta = np.deg2rad(spec.orientation % 180.0)
    ux, uy = np.cos(theta), np.sin(theta)         # bar axis
    cy, cx = spec.center
    # subpixel sample offsets within each pixel
    off = (np.arange(subsamples) + 0.5) / subsamples - 0.5
    yy, xx = np.mgrid[:image_size, :image_size].astype(float)
    cover = np.zeros((image_size, image_size))
    half_l, half_w = spec.length / 2.0, spec.width / 2.0
    for oy in off:
        for ox in off:
            dy = yy + oy - cy
            dx = xx + ox - cx
            along = dx * ux + dy * uy
            across = -dx * uy + dy * ux
            cover += (np.abs(along) <= half_l) & (np.abs(across) <= half_w)
    cover /= subsamples * subsamples
    return 1.0 - cover


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(4 * sigma)))
    t = np.arange(-radius, radius + 1)
    kern = np.exp(-0.5 * (t / sigma) ** 2)
    kern /= kern.sum()
    pad = np.pad(img, radius, mode="edge")
    tmp = np.apply_along_axis(lambda r: np.convolve(r, kern, mode="valid"), 1, pad)
    return np.apply_along_axis(lambda c: np.convolve(c, kern, mode="valid"), 0, tmp)


def render_grating(spec: GratingStimulus, image_size: int) -> np.ndarray:
    """Sine grating 0.5*(1 + contrast*sin(2 pi f (x cos + y sin)/W + phase))
    inside a Gaussian-blurred disk aperture, on a mid-gray background."""
    c = (image_size - 1) / 2.0
    cy, cx = spec.center if spec.center is not None else (c, c)
    theta = np.deg2rad(spec.orientation)
    yy, xx = np.mgrid[:image_size, :image_size].astype(float)
    coord = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    grating = 0.5 * (1.0 + spec.contrast * np.sin(
        2.0 * np.pi * spec.spatial_frequency * coord / image_size + spec.phase))
    if spec.diameter is None:
        return grating
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    mask = _gaussian_blur((r <= spec.diameter / 2.0).astype(float),
                          APERTURE_BLUR_SIGMA)
    return 0.5 + mask * (grating - 0.5)
