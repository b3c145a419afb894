"""Procedural aligned-pair synthesis: glyph templates and rubbing-style noise.

Each class id owns a fixed stroke template (a handful of polylines), so all
images of one class share topology; the seed only jitters control points
slightly. Style images are built from a glyph by degrading it with one of
four noise types and a textured background, with parameter ranges chosen so
the glyph-mask IoU of a (glyph, style) pair straddles the 0.8 quality gate.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from scipy import ndimage

from .images import glyph_mask, iou, validate_image


class NoiseType(str, Enum):
    STROKE_BROKEN = "stroke_broken"
    BONE_CRACKED = "bone_cracked"
    EDGES = "edges"
    DENSE_WHITE_REGIONS = "dense_white_regions"


NOISE_TYPES = tuple(NoiseType)

# Stroke width scales with resolution; 7 px at the 128 px reference size.
_REF_STROKE_WIDTH = 7.0 / 128.0


def _template_rng(class_id: int) -> np.random.Generator:
    return np.random.default_rng(0xC1A55 + 1_000_003 * int(class_id))


def _class_polylines(class_id: int) -> list[np.ndarray]:
    """Fixed per-class stroke layout in unit coordinates."""
    rng = _template_rng(class_id)
    n_strokes = int(rng.integers(3, 6))
    strokes = []
    for _ in range(n_strokes):
        n_pts = int(rng.integers(2, 5))
        pts = rng.uniform(0.12, 0.88, size=(n_pts, 2))
        # Stretch each stroke so it is not a tiny blob.
        while np.linalg.norm(pts[-1] - pts[0]) < 0.3:
            pts[-1] = rng.uniform(0.12, 0.88, size=2)
        strokes.append(pts)
    return strokes


def _render_polylines(strokes: list[np.ndarray], resolution: int, width: float) -> np.ndarray:
    """Rasterize polylines as white strokes of the given width."""
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    pix = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    dmin = np.full(pix.shape[0], np.inf)
    for pts in strokes:
        p = pts * (resolution - 1)
        for a, b in zip(p[:-1], p[1:]):
            ab = b - a
            denom = float(ab @ ab)
            if denom == 0.0:
                t = np.zeros(pix.shape[0])
            else:
                t = np.clip((pix - a) @ ab / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d = np.linalg.norm(pix - proj, axis=1)
            dmin = np.minimum(dmin, d)
    img = (dmin <= width / 2.0).astype(np.float32).reshape(resolution, resolution)
    return img


def synth_glyph(class_id: int, seed: int, resolution: int = 128) -> np.ndarray:
    """Deterministic procedural glyph: white strokes on black.

    The stroke layout is a pure function of class_id; the seed adds a small
    positional jitter so same-class images stay structure-aligned. White
    coverage is kept within [0.02, 0.20] of the image.
    """
    if resolution < 32:
        raise ValueError(f"resolution must be >= 32, got {resolution}")
    strokes = _class_polylines(class_id)
    jit = np.random.default_rng((int(class_id) << 32) ^ (int(seed) & 0xFFFFFFFF))
    strokes = [pts + jit.normal(0.0, 0.008, size=pts.shape) for pts in strokes]
    strokes = [np.clip(pts, 0.02, 0.98) for pts in strokes]

    width = _REF_STROKE_WIDTH * resolution
    img = _render_polylines(strokes, resolution, width)
    # Clamp white coverage into [0.02, 0.20] by adjusting stroke width.
    for _ in range(12):
        frac = float(img.mean())
        if frac > 0.20:
            width *= 0.85
        elif frac < 0.02:
            width *= 1.3
        else:
            break
        img = _render_polylines(strokes, resolution, width)
    return img


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], scale: int = 4) -> np.ndarray:
    """Low-frequency noise in [0, 1] via upsampled coarse grid."""
    h, w = shape
    coarse = rng.random((max(2, h // scale), max(2, w // scale)))
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.clip(ys.astype(int), 0, coarse.shape[0] - 2)
    x0 = np.clip(xs.astype(int), 0, coarse.shape[1] - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _disk_coverage(
    rng: np.random.Generator,
    shape: tuple[int, int],
    allowed: np.ndarray,
    target_frac: float,
    r_lo: int,
    r_hi: int,
) -> np.ndarray:
    """Boolean mask of random disks inside `allowed` covering ~target_frac of it."""
    h, w = shape
    cover = np.zeros(shape, dtype=bool)
    allowed_n = max(1, int(allowed.sum()))
    ys, xs = np.where(allowed)
    if len(ys) == 0:
        return cover
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(600):
        if cover.sum() / allowed_n >= target_frac:
            break
        i = int(rng.integers(len(ys)))
        r = float(rng.uniform(r_lo, r_hi))
        d2 = (yy - ys[i]) ** 2 + (xx - xs[i]) ** 2
        cover |= (d2 <= r * r) & allowed
    return cover


def _crack_polyline(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """A jagged path crossing the image from one border to the opposite one."""
    n = int(rng.integers(4, 8))
    ts = np.linspace(0.0, 1.0, n)
    if rng.random() < 0.5:  # vertical crossing
        xs = np.clip(rng.uniform(0.1, 0.9) + rng.normal(0, 0.12, n).cumsum() * 0.4, 0.02, 0.98)
        pts = np.stack([ts, xs], axis=1)
    else:
        ys = np.clip(rng.uniform(0.1, 0.9) + rng.normal(0, 0.12, n).cumsum() * 0.4, 0.02, 0.98)
        pts = np.stack([ys, ts], axis=1)
    return pts


def synth_noise(glyph: np.ndarray, noise_type: NoiseType, seed: int) -> np.ndarray:
    """Degrade a clean glyph into a rubbing-style image.

    Deterministic per (glyph, noise_type, seed). All variants add a textured
    dark background and mild intensity jitter; the bright additions of
    bone_cracked / edges / dense_white_regions are dimmed if needed so the
    glyph-mask IoU against the input stays >= 0.5.
    """
    glyph = validate_image(glyph, "glyph")
    noise_type = NoiseType(noise_type)
    h, w = glyph.shape
    rng = np.random.default_rng([0xB0E5, int(seed), NOISE_TYPES.index(noise_type)])

    support = glyph_mask(glyph)
    base = 0.06 + 0.20 * _smooth_noise(rng, (h, w))  # background texture, max 0.26
    out = np.where(support, glyph, base.astype(np.float32))

    added = np.zeros((h, w), dtype=np.float32)  # bright additions outside the strokes
    if noise_type is NoiseType.STROKE_BROKEN:
        target = float(rng.uniform(0.10, 0.40))
        erased = _disk_coverage(rng, (h, w), support, target, r_lo=2, r_hi=max(3, h // 12))
        out = np.where(erased, base.astype(np.float32), out)
    elif noise_type is NoiseType.BONE_CRACKED:
        n_cracks = int(rng.integers(1, 4))
        width = float(rng.uniform(0.8, 1.8)) * h / 64.0
        cracks = _render_polylines([_crack_polyline(rng, h) for _ in range(n_cracks)], h, width)
        added = cracks * rng.uniform(0.7, 0.95)
    elif noise_type is NoiseType.EDGES:
        side = int(rng.integers(4))
        depth = rng.uniform(0.10, 0.30) * (h if side < 2 else w)
        profile = depth * (0.6 + 0.8 * _smooth_noise(rng, (1, w if side < 2 else h))[0])
        yy, xx = np.mgrid[0:h, 0:w]
        if side == 0:
            region = yy < profile[None, :]
        elif side == 1:
            region = (h - 1 - yy) < profile[None, :]
        elif side == 2:
            region = xx < profile[:, None]
        else:
            region = (w - 1 - xx) < profile[:, None]
        intensity = rng.uniform(0.22, 0.58, size=(h, w)).astype(np.float32)
        added = np.where(region, intensity, 0.0).astype(np.float32)
    elif noise_type is NoiseType.DENSE_WHITE_REGIONS:
        # Blobs concentrate in a band around the strokes so they merge with
        # the character. A dense sub-threshold mottling layer perturbs
        # recognition while staying invisible to the binary glyph mask; a
        # sparser bright layer keeps pairs straddling the quality gate.
        band = ndimage.binary_dilation(support, iterations=max(2, h // 10))
        r_hi = max(2, h // 16)
        dim_target = float(rng.uniform(0.30, 0.65))
        dim = _disk_coverage(rng, (h, w), band, dim_target, r_lo=1, r_hi=r_hi)
        bright_target = float(rng.uniform(0.02, 0.12))
        bright = _disk_coverage(rng, (h, w), band, bright_target, r_lo=1, r_hi=r_hi)
        dim_int = rng.uniform(0.25, 0.45, size=(h, w)).astype(np.float32)
        bright_int = rng.uniform(0.50, 0.90, size=(h, w)).astype(np.float32)
        added = np.where(bright, bright_int, np.where(dim, dim_int, 0.0)).astype(np.float32)

    jitter = rng.uniform(-0.1, 0.1, size=(h, w)).astype(np.float32)
    if noise_type is NoiseType.STROKE_BROKEN:
        # Whole-image jitter would push eroded-but-bright pixels back above
        # threshold; keep the stroke support untouched except where erased.
        out = np.clip(out + np.where(support & (out > 0.5), np.minimum(jitter, 0.0), jitter), 0.0, 1.0)
        return out.astype(np.float32)

    out = np.clip(np.maximum(out, added) + jitter, 0.0, 1.0)
    # Dim bright additions until alignment with the input glyph stays usable.
    for _ in range(20):
        if iou(glyph_mask(glyph), glyph_mask(out)) >= 0.5:
            break
        added *= 0.85
        out = np.clip(np.maximum(np.where(support, glyph, base.astype(np.float32)), added) + jitter, 0.0, 1.0)
    return out.astype(np.float32)
