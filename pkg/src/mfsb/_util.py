"""Shared numerics helpers: seeded RNG streams and order-canonical reductions.

Every stochastic object in the package is derived from an integer seed
through :func:`seed_sequence`, so a run is reproducible from the seed alone.
Cross-particle reductions go through :func:`pmean` / :func:`lexsorted_lstsq`,
which process the addends in a canonical order; this makes ensemble solves
bit-exactly equivariant under particle relabeling.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "seed_sequence",
    "rng_from",
    "pmean",
    "lexsorted_lstsq",
    "fmt17",
]


def seed_sequence(seed: int, *path: int) -> np.random.SeedSequence:
    """SeedSequence for stream ``path`` under root ``seed``."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))


def rng_from(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for stream ``path`` under root ``seed``."""
    return np.random.default_rng(seed_sequence(seed, *path))


def pmean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean along ``axis`` with sorted summation.

    The addends are sorted before accumulation, so the result is identical
    (to the bit) for any permutation of the reduced axis.
    """
    a = np.asarray(a, dtype=float)
    s = np.sort(a, axis=axis)
    return s.sum(axis=axis) / a.shape[axis]


def lexsorted_lstsq(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares coefficients with rows processed in canonical order.

    Rows of ``(features | targets)`` are sorted lexicographically before the
    solve, so the coefficients are invariant under row permutations.  Uses
    the QR-based LAPACK driver (much faster than the SVD path on tall thin
    systems) and falls back to the SVD driver if it fails.
    """
    from scipy.linalg import lstsq as _sp_lstsq

    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    flat = targets.reshape(features.shape[0], -1)
    rows = np.concatenate([features, flat], axis=1)
    order = np.lexsort(rows.T[::-1])
    A, B = features[order], flat[order]
    try:
        coeffs = _sp_lstsq(A, B, lapack_driver="gelsy", check_finite=False)[0]
    except Exception:
        coeffs, _, _, _ = np.linalg.lstsq(A, B, rcond=None)
    return coeffs.reshape((features.shape[1],) + targets.shape[1:])


def fmt17(x: float) -> str:
    """Format a float with 17 significant digits (round-trip exact)."""
    return format(float(x), ".17g")
