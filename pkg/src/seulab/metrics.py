"""Image scoring: embedding-cosine quality score and corruption geometry.

The quality score is 100 * max(0, cos(E_I, E_T)) between pooled
unit-norm embeddings.  The image side uses a fixed seeded linear
projection (a stand-in for a learned encoder, deterministic and
config-independent); the text side mean-pools the prompt-embedding rows.

Corruption statistics quantify what corrupted outputs look like: the
relative L2 deviation from a baseline image, the fraction of pixels
whose channel-max difference exceeds a threshold, and the connected
component structure of that mask (many small components = noise-like
damage, few large ones = block-like damage).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

_PROJECTION_SEED = 0x5EED_1A6E


class ZeroNormError(ValueError):
    """Cosine similarity is undefined against a zero vector."""


def clip_like_score(image_embedding: np.ndarray, text_embedding: np.ndarray) -> float:
    """100 * max(0, cosine similarity), clamped into [0, 100]."""
    a = np.asarray(image_embedding, dtype=np.float64).reshape(-1)
    b = np.asarray(text_embedding, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"embedding widths differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine undefined for zero-norm embedding")
    if np.array_equal(a, b):
        return 100.0  # cos(x, x) = 1 exactly; avoid sqrt round-off
    cos = float(np.dot(a, b) / (na * nb))
    cos = min(1.0, max(-1.0, cos))
    return 100.0 * max(0.0, cos)


@lru_cache(maxsize=8)
def _image_projection(n_pixels: int, width: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([_PROJECTION_SEED, n_pixels, width])
    ))
    return rng.standard_normal((width, n_pixels)) / np.sqrt(n_pixels)


def toy_image_embed(image: np.ndarray, width: int = 32) -> np.ndarray:
    """Deterministic unit-norm embedding of an image.

    A fixed seeded projection of the mean-centered pixels, normalized.
    Centering keeps the embedding about image content: without it the
    shared brightness component of every generated image dominates the
    projection and all cosines collapse onto one fixed direction.  The
    same image always embeds identically; a constant image (zero after
    centering) is the degenerate case and comes back as the zero vector.
    """
    flat = np.asarray(image, dtype=np.float64).reshape(-1)
    vec = _image_projection(flat.size, width) @ (flat - flat.mean())
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec = vec / norm
    return vec


def pool_text_embedding(text_embedding: np.ndarray) -> np.ndarray:
    """Mean-pool embedding rows to one unit-norm vector."""
    pooled = np.asarray(text_embedding, dtype=np.float64).mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm > 0.0:
        pooled = pooled / norm
    return pooled


DEFAULT_PIXEL_THRESHOLD = 2.0 / 255.0


@dataclass(frozen=True)
class CorruptionStats:
    """Geometry of the difference between an image and its baseline."""

    rel_deviation: float
    corrupted_fraction: float
    component_count: int
    mean_component_area: float


def corruption_stats(
    image: np.ndarray,
    baseline: np.ndarray,
    threshold: float = DEFAULT_PIXEL_THRESHOLD,
) -> CorruptionStats:
    """Compare an image against a baseline of the same shape.

    The corrupted-pixel mask contains pixels whose channel-max absolute
    difference exceeds the threshold; components use 4-connectivity.
    """
    img = np.asarray(image, dtype=np.float64)
    base = np.asarray(baseline, dtype=np.float64)
    if img.shape != base.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {base.shape}")
    diff = np.abs(img - base)
    base_norm = float(np.linalg.norm(base))
    diff_norm = float(np.linalg.norm(diff))
    if base_norm > 0.0:
        rel = diff_norm / base_norm
    else:
        rel = 0.0 if diff_norm == 0.0 else float("inf")
    mask = diff.max(axis=0) > threshold if img.ndim == 3 else diff > threshold
    corrupted = int(mask.sum())
    fraction = corrupted / mask.size
    if corrupted == 0:
        return CorruptionStats(rel, fraction, 0, 0.0)
    _, count = ndimage.label(mask)
    return CorruptionStats(rel, fraction, int(count), corrupted / count)
