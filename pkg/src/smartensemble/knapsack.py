"""The knapsack layer: exact top-k selection with a perturbed-optimizer backward.

Forward
    ``b = argmax_b  c.b  s.t.  sum(b) = k,  b in {0,1}^n``, i.e. a 0/1 mask
    over the k largest scores. Ties go to the lower index.

Backward
    The mask is piecewise constant in the scores, so its true derivative is
    zero almost everywhere. The layer instead differentiates the smoothed map
    ``E_z[topk(c + eps*z)]`` with z standard normal, whose Jacobian is

        J = (s/m) * sum_i topk(c + eps*z_i) z_i^T,

    where ``s = 1/eps`` in the ``"berthet"`` scaling (the exact gradient of
    the smoothed map) and ``s = 1`` in the ``"paper-literal"`` scaling.

Noise is drawn from a Philox (counter-based) generator keyed by
``(noise_seed, counter)`` so each training step gets its own reproducible
stream.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError

GRAD_SCALINGS = ("berthet", "paper-literal")
NORMALIZE_ORDERS = ("before", "after")


@dataclass(frozen=True)
class KnapsackConfig:
    """Size of the sub-ensemble and Monte-Carlo settings of the backward pass.

    ``normalize`` chooses where score normalisation sits relative to the
    solve: ``"before"`` normalises and then solves; ``"after"`` solves on the
    raw scores and normalises afterwards (the Jacobian is then taken at the
    normalised scores). Both produce the same mask, since the solution is
    invariant to positive rescaling.
    """

    k: int
    epsilon: float = 1.0
    m: int = 100
    grad_scaling: str = "berthet"
    noise_seed: int = 0
    normalize: str = "before"

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if self.m < 1:
            raise ContractError(f"m must be >= 1, got {self.m}")
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")
        if self.grad_scaling not in GRAD_SCALINGS:
            raise ContractError(f"grad_scaling must be one of {GRAD_SCALINGS}")
        if self.normalize not in NORMALIZE_ORDERS:
            raise ContractError(f"normalize must be one of {NORMALIZE_ORDERS}")

    @property
    def scale(self):
        return 1.0 / self.epsilon if self.grad_scaling == "berthet" else 1.0


def _check_k(n, k):
    if not 1 <= k <= n:
        raise ContractError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")


def topk_indices(scores, k) -> list:
    """Indices of the k largest scores, via a size-k min-heap: O(n log k).

    The heap root is the weakest kept entry: smallest score, and among equal
    scores the largest index, so a later equal score never displaces it.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.shape[0]
    _check_k(n, k)
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    values = scores.tolist()
    heap = [(values[i], -i) for i in range(k)]
    heapq.heapify(heap)
    root = heap[0][0]
    for i in range(k, n):
        v = values[i]
        if v > root:
            heapq.heapreplace(heap, (v, -i))
            root = heap[0][0]
    return sorted(-neg for _, neg in heap)


def topk_select(scores, k) -> np.ndarray:
    """0/1 mask (int8) of the k largest scores, lower index winning ties."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    mask = np.zeros(scores.shape[0], dtype=np.int8)
    mask[topk_indices(scores, k)] = 1
    return mask


def topk_select_batch(scores, k) -> np.ndarray:
    """Row-wise :func:`topk_select` for an array of shape (..., n), as float64.

    A stable sort on the negated scores keeps equal scores in index order, so
    ties resolve exactly as in :func:`topk_select`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    _check_k(scores.shape[-1], k)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(scores.shape, dtype=np.float64)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def normalize_scores(scores) -> np.ndarray:
    """``c / ||c||_2`` (row-wise for 2-D input); rows with norm <= 1e-12 are left as is."""
    scores = np.asarray(scores, dtype=np.float64)
    norms = np.sqrt((scores * scores).sum(axis=-1, keepdims=True))
    ok = norms > ad.NORM_GUARD
    return np.where(ok, scores / np.where(ok, norms, 1.0), scores)


def noise(seed, counter, shape) -> np.ndarray:
    """Standard normal draws from the Philox stream keyed by (seed, counter)."""
    bitgen = np.random.Philox(key=np.array([seed, counter], dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal(shape)


def _sample_noise(config: KnapsackConfig, n, counter, z):
    if z is None:
        return noise(config.noise_seed, counter, (config.m, n))
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != n:
        raise DimensionError(f"noise of shape {z.shape} does not match n={n}")
    return z


def perturbed_masks(scores, config: KnapsackConfig, counter=0, z=None):
    """Masks ``topk(c + eps*z_i)`` for each noise row; returns ``(masks, z)``."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    _check_k(n, config.k)
    z = _sample_noise(config, n, counter, z)
    perturbed = scores[..., None, :] + config.epsilon * z
    return topk_select_batch(perturbed, config.k), z


def smoothed_forward(scores, config: KnapsackConfig, counter=0, z=None) -> np.ndarray:
    """Monte-Carlo estimate of ``E[topk(c + eps*z)]``.

    Each row of the estimate lies in [0, 1] and sums to k. Passing the same
    ``z`` (or the same seed and counter) to two calls gives common random
    numbers, which is what a finite-difference check needs.
    """
    masks, _ = perturbed_masks(scores, config, counter, z)
    return masks.mean(axis=-2)


def perturbed_jacobian(scores, config: KnapsackConfig, counter=0, z=None) -> np.ndarray:
    """Monte-Carlo Jacobian ``(s/m) sum_i topk(c + eps z_i) z_i^T``.

    Entry ``[a, b]`` estimates d(smoothed mask)_a / d(score)_b. For a batch of
    score rows (batch, n) with noise (batch, m, n) it returns (batch, n, n).
    """
    masks, z = perturbed_masks(scores, config, counter, z)
    m = masks.shape[-2]
    return config.scale * np.matmul(np.swapaxes(masks, -1, -2), z) / m


def knapsack_layer(
    scores: ad.Tensor, config: KnapsackConfig, tape: ad.Tape, counter=0, z=None, smooth=False
) -> ad.Tensor:
    """Record the layer on ``tape``: hard top-k forward, Monte-Carlo Jacobian backward.

    ``scores`` is (n,) or (batch, n). With ``normalize="before"`` the scores
    are normalised on the tape first and both the mask and the Jacobian are
    computed at the normalised point. ``smooth=True`` swaps the hard mask for
    the Monte-Carlo smoothed one (same noise), which makes the layer the exact
    derivative of a smooth surrogate; it is meant for gradient checks.
    """
    if scores.tape is not tape:
        raise ContractError("scores tensor is not on the given tape")
    n = scores.shape[-1]
    _check_k(n, config.k)
    raw = scores.data
    normed = ad.normalize_rows(scores)
    if z is None:
        z = noise(config.noise_seed, counter, raw.shape[:-1] + (config.m, n))
    J = perturbed_jacobian(normed.data, config, z=z)
    if smooth:
        mask = smoothed_forward(normed.data, config, z=z)
    else:
        mask = topk_select_batch(normed.data if config.normalize == "before" else raw, config.k)
    return ad.custom_node(mask, normed, J, op="knapsack")
