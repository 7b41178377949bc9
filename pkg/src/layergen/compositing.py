"""Layered-image data model and alpha compositing algebra.

A layered image holds one opaque RGB background plus K depth-ordered RGBA
foreground layers (index 1 = bottom-most). All pixel data is linear color in
[0, 1], stored as float64 numpy arrays that are frozen after construction so
instances can be shared freely between worker threads.

Internal convention is straight (non-premultiplied) alpha: the blend equations
carry explicit alpha-times-color products, and keeping layers straight avoids
silently multiplying alpha in twice. ``premultiply`` is provided as an exported
preprocessing step; it tags the result so a second application is rejected.

Compositing is plain source-over. Two equivalent evaluations are provided:

* ``composite_recursive`` — bottom-up recursion
  ``I_k = (1 - a_k) * I_{k-1} + a_k * c_k``
* ``composite_closed_form`` — the unrolled sum: background attenuated by the
  product of all transmittances, plus each layer's contribution occluded by
  every layer above it.

Both are convex combinations per pixel, so outputs stay in [0, 1]; they agree
to floating-point accumulation error (<= 1e-6 abs, typically ~1e-15).

8-bit file I/O (see ``layergen.archive``) quantizes with round-half-up; the
worst-case round-trip error of a single quantization is 1/510 per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Tolerance for the premultiplied invariant color <= alpha.
PREMULTIPLY_EPS = 1e-6

# Max abs error introduced by one round-half-up 8-bit quantization.
QUANTIZATION_ERROR_BOUND = 1.0 / 510.0


def _frozen_unit_array(values, ndim: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{what} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"{what} values must lie in [0, 1], got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AlphaMap:
    """Per-pixel coverage in [0, 1], shape (H, W)."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_unit_array(self.values, 2, "alpha"))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class RgbImage:
    """Linear-color RGB image in [0, 1], shape (H, W, 3)."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_unit_array(self.values, 3, "color")
        if arr.shape[2] != 3:
            raise ValueError(f"color must have 3 channels, got shape {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True)
class RgbaLayer:
    """One foreground layer: color + alpha, straight unless flagged."""

    color: RgbImage
    alpha: AlphaMap
    premultiplied: bool = False

    def __post_init__(self):
        if self.color.shape != self.alpha.shape:
            raise ValueError(
                f"color shape {self.color.shape} != alpha shape {self.alpha.shape}"
            )
        if self.premultiplied:
            excess = self.color.values - self.alpha.values[:, :, None]
            if excess.max() > PREMULTIPLY_EPS:
                raise ValueError(
                    "premultiplied layer violates color <= alpha "
                    f"(max excess {excess.max():.3g})"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape


@dataclass(frozen=True)
class LayeredImage:
    """RGB background plus K >= 0 foreground layers, bottom-most first."""

    background: RgbImage
    foregrounds: tuple[RgbaLayer, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "foregrounds", tuple(self.foregrounds))
        for i, layer in enumerate(self.foregrounds, start=1):
            if layer.shape != self.background.shape:
                raise ValueError(
                    f"foreground {i} shape {layer.shape} != background "
                    f"shape {self.background.shape}"
                )

    @property
    def k(self) -> int:
        return len(self.foregrounds)

    @property
    def shape(self) -> tuple[int, int]:
        return self.background.shape


def premultiply(layer: RgbaLayer) -> RgbaLayer:
    """Multiply color by alpha elementwise and tag the layer premultiplied.

    Rejects layers already tagged: a second multiplication would silently
    darken the image.
    """
    if layer.premultiplied:
        raise ValueError("layer is already premultiplied")
    color = layer.color.values * layer.alpha.values[:, :, None]
    return RgbaLayer(RgbImage(color), layer.alpha, premultiplied=True)


def unpremultiply(layer: RgbaLayer, alpha_floor: float = 1e-3) -> RgbaLayer:
    """Inverse of ``premultiply``; color where alpha <= alpha_floor is zeroed."""
    if not layer.premultiplied:
        raise ValueError("layer is not premultiplied")
    a = layer.alpha.values[:, :, None]
    safe = np.where(a > alpha_floor, a, 1.0)
    color = np.where(a > alpha_floor, layer.color.values / safe, 0.0)
    return RgbaLayer(RgbImage(np.clip(color, 0.0, 1.0)), layer.alpha, premultiplied=False)


def _require_straight(img: LayeredImage, op: str) -> None:
    for i, layer in enumerate(img.foregrounds, start=1):
        if layer.premultiplied:
            raise ValueError(f"{op} requires straight alpha; foreground {i} is premultiplied")


def composite_recursive(img: LayeredImage) -> RgbImage:
    """Source-over blend, bottom-up: I_k = (1 - a_k) * I_{k-1} + a_k * c_k."""
    _require_straight(img, "composite_recursive")
    out = img.background.values.copy()
    for layer in img.foregrounds:
        a = layer.alpha.values[:, :, None]
        out = (1.0 - a) * out + a * layer.color.values
    return RgbImage(np.clip(out, 0.0, 1.0))


def composite_closed_form(img: LayeredImage) -> RgbImage:
    """Closed-form composite: attenuated background plus occluded contributions.

    Equals ``composite_recursive`` up to floating-point accumulation.
    """
    _require_straight(img, "composite_closed_form")
    out = background_visibility(img).values[:, :, None] * img.background.values
    for k in range(1, img.k + 1):
        out = out + _contribution_values(img, k)
    return RgbImage(np.clip(out, 0.0, 1.0))


def background_visibility(img: LayeredImage) -> AlphaMap:
    """Per-pixel product of (1 - alpha) over all foregrounds; empty product is 1."""
    vis = np.ones(img.shape, dtype=np.float64)
    for layer in img.foregrounds:
        vis = vis * (1.0 - layer.alpha.values)
    return AlphaMap(np.clip(vis, 0.0, 1.0))


def _contribution_values(img: LayeredImage, k: int) -> np.ndarray:
    layer = img.foregrounds[k - 1]
    occlusion = np.ones(img.shape, dtype=np.float64)
    for upper in img.foregrounds[k:]:
        occlusion = occlusion * (1.0 - upper.alpha.values)
    return (occlusion * layer.alpha.values)[:, :, None] * layer.color.values


def layer_contribution(img: LayeredImage, k: int) -> RgbImage:
    """Contribution of foreground k (1-based, bottom-most = 1) to the composite.

    Returns alpha_k * color_k attenuated by the transmittance of every layer
    above k. Summing all contributions plus the attenuated background
    reconstructs the closed-form composite exactly.
    """
    _require_straight(img, "layer_contribution")
    if not 1 <= k <= img.k:
        raise IndexError(f"layer index {k} out of range 1..{img.k}")
    return RgbImage(np.clip(_contribution_values(img, k), 0.0, 1.0))


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """Dequantize uint8 to [0, 1] float64."""
    return np.asarray(raw, dtype=np.float64) / 255.0
