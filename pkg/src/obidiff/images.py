"""Grayscale image primitives: loading, binarization, IoU, boxes, masking.

Images are 2-D float numpy arrays with values in [0, 1], white strokes on a
black background. On disk they are 8-bit single-channel PNGs; the loader
divides by 255 and the writer rounds half-up.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MIN_SIDE = 8


class EmptyGlyphError(ValueError):
    """Raised when an operation needs white pixels and the image has none."""


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check shape and value range, returning the array as float32."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG and map [0, 255] -> [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write as 8-bit grayscale PNG, rounding half-up."""
    arr = validate_image(img)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q, mode="L").save(path)


def invert_glyph(img: np.ndarray) -> np.ndarray:
    """Flip the color configuration: out = 1 - in.

    Computed in float64 so double inversion reproduces any 8-bit-derived
    image bit-exactly.
    """
    validate_image(img)
    return 1.0 - np.asarray(img, dtype=np.float64)


def glyph_mask(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize: bit set iff pixel value > threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return np.asarray(img) > threshold


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Two empty masks count as perfectly aligned (IoU 1.0).
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    inter = np.count_nonzero(a & b)
    return inter / union


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel-index bounding box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self) -> None:
        if not (0 <= self.row_min <= self.row_max and 0 <= self.col_min <= self.col_max):
            raise ValueError(f"degenerate bbox {self}")

    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)


def bounding_box(glyph: np.ndarray, threshold: float = 0.5) -> BBox:
    """Tightest box around all pixels above threshold."""
    mask = glyph_mask(glyph, threshold)
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise EmptyGlyphError("no pixels above threshold; cannot compute bounding box")
    r = np.where(rows)[0]
    c = np.where(cols)[0]
    return BBox(int(r[0]), int(c[0]), int(r[-1]), int(c[-1]))


def mask_style(
    style: np.ndarray,
    glyph: np.ndarray,
    dual: bool = False,
    threshold: float = 0.5,
    fill: float = 0.5,
) -> np.ndarray:
    """Blank the character region of a style image.

    Fills the glyph's bounding box so the style pathway cannot see the
    character. The fill is mid-gray, not the black background value: a black
    box reads as a confidently empty region and downstream models suppress
    strokes there, while mid-gray marks the region as unknown. With ``dual``
    the style image's own character box is blanked too (union of the two
    boxes); if the style has no above-threshold pixels only the glyph box is
    used.
    """
    style = validate_image(style, "style")
    glyph = validate_image(glyph, "glyph")
    if style.shape != glyph.shape:
        raise ValueError(f"shape mismatch: style {style.shape} vs glyph {glyph.shape}")
    out = style.copy()
    box = bounding_box(glyph, threshold)
    out[box.row_min : box.row_max + 1, box.col_min : box.col_max + 1] = fill
    if dual:
        try:
            sbox = bounding_box(style, threshold)
        except EmptyGlyphError:
            sbox = None
        if sbox is not None:
            out[sbox.row_min : sbox.row_max + 1, sbox.col_min : sbox.col_max + 1] = fill
    return out
