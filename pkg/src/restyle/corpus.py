"""Seeded synthetic image corpus.

Content images carry coarse spatial structure (ramps, polygons, smooth
noise); style images carry strong repeated texture statistics (checkers,
stripes, multi-octave noise, blob fields). Every image is a deterministic
function of (seed, role, index), so corpora are reproducible by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ROLE_TAGS = {"content": 0, "style": 1, "test_content": 2, "test_style": 3}


@dataclass(frozen=True)
class CorpusSpec:
    seed: int
    size: int
    content_count: int
    style_count: int


def _rng_for(spec, role, index):
    return np.random.default_rng([spec.seed, _ROLE_TAGS[role], index])


def _grid(size):
    t = (np.arange(size) + 0.5) / size
    return np.meshgrid(t, t, indexing="ij")


def _bilinear(grid, size):
    """Bilinear upsampling of a small (g, g[, c]) grid to (size, size[, c])."""
    g = grid.shape[0]
    t = (np.arange(size) + 0.5) / size * (g - 1)
    i0 = np.floor(t).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    f = (t - i0).astype(np.float32)
    a = grid[np.ix_(i0, i0)]
    b = grid[np.ix_(i0, i1)]
    c = grid[np.ix_(i1, i0)]
    d = grid[np.ix_(i1, i1)]
    fy = f[:, None] if grid.ndim == 2 else f[:, None, None]
    fx = f[None, :] if grid.ndim == 2 else f[None, :, None]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return top * (1 - fy) + bot * fy


def _two_colors(rng, min_dist=0.35):
    c0 = rng.random(3)
    c1 = rng.random(3)
    while np.abs(c0 - c1).max() < min_dist:
        c1 = rng.random(3)
    return c0.astype(np.float32), c1.astype(np.float32)


def gradient_field(rng, size):
    yy, xx = _grid(size)
    ang = rng.uniform(0, 2 * np.pi)
    t = np.cos(ang) * xx + np.sin(ang) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-6)
    c0, c1 = _two_colors(rng)
    return (c0 + t[:, :, None] * (c1 - c0)).astype(np.float32)


def random_polygons(rng, size):
    img = np.tile(rng.random(3).astype(np.float32), (size, size, 1))
    yy, xx = _grid(size)
    for _ in range(int(rng.integers(3, 7))):
        verts = rng.random((3, 2))
        color = rng.random(3).astype(np.float32)
        inside = np.ones((size, size), dtype=bool)
        for i in range(3):
            ax, ay = verts[i]
            bx, by = verts[(i + 1) % 3]
            cx, cy = verts[(i + 2) % 3]
            side = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
            ref = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            inside &= side * ref >= 0
        img[inside] = color
    return img


def blurred_noise(rng, size):
    g = int(rng.integers(5, 11))
    grid = rng.random((g, g, 3)).astype(np.float32)
    return np.clip(_bilinear(grid, size), 0, 1)


def checkerboard(rng, size):
    cell = int(rng.choice([4, 6, 8, 12, 16]))
    oy, ox = int(rng.integers(cell)), int(rng.integers(cell))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    mask = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(bool)
    c0, c1 = _two_colors(rng)
    img = np.where(mask[:, :, None], c0, c1)
    return img.astype(np.float32)


def stripes(rng, size):
    yy, xx = _grid(size)
    ang = rng.uniform(0, np.pi)
    period = rng.uniform(0.08, 0.3)
    t = (np.cos(ang) * xx + np.sin(ang) * yy) / period
    mask = (t - np.floor(t)) < rng.uniform(0.35, 0.65)
    c0, c1 = _two_colors(rng)
    return np.where(mask[:, :, None], c0, c1).astype(np.float32)


def value_noise(rng, size):
    img = np.zeros((size, size, 3), dtype=np.float32)
    total = 0.0
    g = int(rng.choice([3, 4, 5]))
    for octave in range(3):
        weight = 1.0 / (2 ** octave)
        grid = rng.random((g, g, 3)).astype(np.float32)
        img += weight * _bilinear(grid, size)
        total += weight
        g = min(2 * g, size)
    img /= total
    lo, hi = img.min(), img.max()
    return ((img - lo) / max(hi - lo, 1e-6)).astype(np.float32)


def blob_field(rng, size):
    img = np.tile(rng.random(3).astype(np.float32), (size, size, 1))
    yy, xx = _grid(size)
    for _ in range(int(rng.integers(6, 14))):
        cy, cx = rng.random(2)
        sigma = rng.uniform(0.04, 0.15)
        color = rng.random(3).astype(np.float32)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)).astype(np.float32)
        img = img * (1 - w[:, :, None]) + color * w[:, :, None]
    return np.clip(img, 0, 1).astype(np.float32)


CONTENT_GENERATORS = (gradient_field, random_polygons, blurred_noise)
STYLE_GENERATORS = (checkerboard, stripes, value_noise, blob_field)


def content_image(spec: CorpusSpec, index, role="content"):
    rng = _rng_for(spec, role, index)
    return CONTENT_GENERATORS[index % len(CONTENT_GENERATORS)](rng, spec.size)


def style_image(spec: CorpusSpec, index, role="style"):
    rng = _rng_for(spec, role, index)
    return STYLE_GENERATORS[index % len(STYLE_GENERATORS)](rng, spec.size)


def make_corpus(spec: CorpusSpec):
    """Training corpus: (contents, styles) lists of (size, size, 3) images."""
    contents = [content_image(spec, i) for i in range(spec.content_count)]
    styles = [style_image(spec, i) for i in range(spec.style_count)]
    return contents, styles


def make_test_pairs(spec: CorpusSpec, count):
    """Held-out (content, style) pairs drawn from separate seed streams."""
    return [(content_image(spec, i, role="test_content"),
             style_image(spec, i, role="test_style")) for i in range(count)]
