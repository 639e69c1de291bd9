"""Synthetic datasets for the desk-scale experiments."""

from typing import NamedTuple

import numpy as np

from .rng import make_rng, substream

__all__ = [
    "MOON_CENTERS",
    "Multiview",
    "Sequences",
    "TwoMoons",
    "gen_sequences",
    "gen_synthetic_multiview",
    "gen_twomoon",
    "majority_label",
]

# upper moon is the unit half-circle at the origin; the lower one is flipped
# and shifted so the two interleave
MOON_CENTERS = np.array([[0.0, 0.0], [1.0, 0.5]])


class TwoMoons(NamedTuple):
    x: np.ndarray  # (n, 2)
    y: np.ndarray  # (n,) in {0, 1}
    labeled: np.ndarray  # (2,) indices: leftmost point of moon 0, then of moon 1


def gen_twomoon(n, noise, seed):
    """Two interleaved unit half-circles, ``n // 2`` points on the upper moon
    and the rest on the lower, plus isotropic Gaussian noise of std ``noise``.

    Angles are evenly spaced on ``[0, pi]``, so the seed only drives the
    noise.  The labeled point of each moon is its leftmost (smallest first
    coordinate) sample.
    """
    n = int(n)
    if n < 10:
        raise ValueError(f"need n >= 10, got {n}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    rng = make_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)]) + MOON_CENTERS[0]
    lower = np.column_stack([-np.cos(t1), -np.sin(t1)]) + MOON_CENTERS[1]
    x = np.vstack([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    labeled = np.array([np.argmin(np.where(y == c, x[:, 0], np.inf)) for c in (0, 1)])
    return TwoMoons(x, y, labeled)


class Sequences(NamedTuple):
    x: np.ndarray  # (n, length, vocab) corrupted one-hot inputs
    y: np.ndarray  # (n,) majority token of the clean sequence
    tokens: np.ndarray  # (n, length) clean tokens


def majority_label(tokens, vocab):
    """Most frequent token per row; ties go to the tied token that occurs
    first in the sequence, which keeps the rule symmetric across tokens."""
    tokens = np.asarray(tokens)
    counts = np.stack([(tokens == v).sum(axis=1) for v in range(vocab)], axis=1)
    tied = counts == counts.max(axis=1, keepdims=True)
    first_tied = tied[np.arange(tokens.shape[0])[:, None], tokens]
    return tokens[np.arange(tokens.shape[0]), np.argmax(first_tied, axis=1)]


def gen_sequences(n, length, vocab, corruption, seed):
    """Uniform random token sequences labeled by their majority token.  The
    inputs are one-hot codes plus i.i.d. Gaussian noise of std ``corruption``."""
    if n < 1 or length < 1 or vocab < 2:
        raise ValueError(f"need n >= 1, length >= 1, vocab >= 2; got {n}, {length}, {vocab}")
    if corruption < 0:
        raise ValueError(f"corruption must be non-negative, got {corruption}")
    rng = make_rng(seed)
    tokens = rng.integers(0, vocab, size=(n, length))
    x = np.eye(vocab)[tokens] + corruption * rng.standard_normal((n, length, vocab))
    return Sequences(x, majority_label(tokens, vocab), tokens)


class Multiview(NamedTuple):
    x: np.ndarray  # (n, d_obs) first view
    y: np.ndarray  # (n, d_obs) second view
    labels: np.ndarray  # (n,) in {0, ..., classes - 1}
    z: np.ndarray  # (n, d_latent) latent codes


def gen_synthetic_multiview(
    n, d_latent, d_obs, noise_x, noise_y, classes, seed, separation=4.0, shared_maps=False
):
    """Two nonlinear noisy views of a shared class-structured latent.

    Class ``c`` has latent mean ``separation * e_c`` (unit covariance), so
    any two means are ``separation * sqrt(2)`` apart.  Views are
    ``x = A tanh(B z) + noise_x * e`` and ``y = C tanh(D z) + noise_y * e'``
    with Gaussian generator matrices.  Substream 0 of ``seed`` draws the
    maps, substream 1 the samples.  ``shared_maps`` sets ``C = A, D = B``.
    """
    if n < 1 or d_obs < 1 or classes < 2:
        raise ValueError(f"need n >= 1, d_obs >= 1, classes >= 2; got {n}, {d_obs}, {classes}")
    if d_latent < classes:
        raise ValueError(f"d_latent={d_latent} must be at least classes={classes}")
    if noise_x < 0 or noise_y < 0:
        raise ValueError(f"noise levels must be non-negative, got {noise_x}, {noise_y}")
    maps = substream(seed, 0)
    b = maps.standard_normal((d_obs, d_latent)) / np.sqrt(d_latent)
    a = maps.standard_normal((d_obs, d_obs)) / np.sqrt(d_obs)
    d = maps.standard_normal((d_obs, d_latent)) / np.sqrt(d_latent)
    c = maps.standard_normal((d_obs, d_obs)) / np.sqrt(d_obs)
    if shared_maps:
        c, d = a, b
    rng = substream(seed, 1)
    labels = rng.integers(0, classes, size=n)
    z = separation * np.eye(d_latent)[labels] + rng.standard_normal((n, d_latent))
    x = np.tanh(z @ b.T) @ a.T + noise_x * rng.standard_normal((n, d_obs))
    y = np.tanh(z @ d.T) @ c.T + noise_y * rng.standard_normal((n, d_obs))
    return Multiview(x, y, labels, z)
