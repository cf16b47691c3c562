"""Agents, prediction matrices, smoothed voting and the baseline consensus rules.

A prediction matrix P stacks the agents' softmax outputs as columns: P[:, j]
is agent j's class distribution. For a batch of inputs P has shape
(batch, c, n). All argmax tie-breaks go to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .nn import MLPSpec, ParamSet, mlp_forward


@dataclass
class AgentModel:
    """A trained MLP classifier together with the classes it specialises in."""

    id: int
    spec: MLPSpec
    params: ParamSet
    specialty: tuple
    train_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.specialty = tuple(sorted(int(s) for s in self.specialty))
        c = self.spec.output_size
        if len(self.specialty) not in (1, 2) or not all(0 <= s < c for s in self.specialty):
            raise ContractError(f"agent {self.id}: specialty {self.specialty} invalid for {c} classes")
        if self.spec.output_mode != "softmax":
            raise ContractError(f"agent {self.id}: agents must end in a softmax")

    @property
    def input_size(self):
        return self.spec.input_size

    @property
    def n_classes(self):
        return self.spec.output_size

    def predict_proba(self, x) -> np.ndarray:
        return mlp_forward(self.spec, self.params, np.atleast_2d(x))


@dataclass
class EnsemblePrediction:
    y_hat: np.ndarray
    label: int
    mask: np.ndarray


def collect_predictions(agents, x) -> np.ndarray:
    """Evaluate frozen agents on x.

    x of shape (d,) gives P of shape (c, n); x of shape (batch, d) gives
    (batch, c, n).
    """
    if not agents:
        raise ContractError("need at least one agent")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    for a in agents:
        if a.input_size != X.shape[1]:
            raise DimensionError(f"agent {a.id} expects width {a.input_size}, input has shape {x.shape}")
    P = np.stack([a.predict_proba(X) for a in agents], axis=-1)
    return P[0] if single else P


def mask_and_vote(P, b: ad.Tensor, tape: ad.Tape) -> ad.Tensor:
    """Smoothed vote ``softmax(sum_j b_j P[:, j])`` recorded on ``tape``.

    P is a constant (c, n) or (batch, c, n) array; gradients flow to ``b``.
    """
    P = np.asarray(P, dtype=np.float64)
    if b.shape[-1] != P.shape[-1]:
        raise DimensionError(f"mask of length {b.shape[-1]} for {P.shape[-1]} agents")
    masked = ad.mask_columns(tape.constant(P, name="P"), b)
    votes = ad.sum_columns(masked)
    return ad.softmax_rows(votes)


def smoothed_vote(P, b) -> np.ndarray:
    """Tape-free :func:`mask_and_vote`."""
    P = np.asarray(P, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != P.shape[-1]:
        raise DimensionError(f"mask of length {b.shape[-1]} for {P.shape[-1]} agents")
    v = (P * b[..., None, :]).sum(axis=-1)
    v = v - v.max(axis=-1, keepdims=True)
    e = np.exp(v)
    return e / e.sum(axis=-1, keepdims=True)


def vote(P, b) -> EnsemblePrediction:
    y_hat = smoothed_vote(P, b)
    return EnsemblePrediction(y_hat, predict_class(y_hat), np.asarray(b))


def predict_class(y_hat):
    """Lowest-index argmax; vectorised over leading axes."""
    y_hat = np.asarray(y_hat)
    if y_hat.size == 0 or y_hat.shape[-1] == 0:
        raise ContractError("cannot take the argmax of an empty vector")
    out = np.argmax(y_hat, axis=-1)
    return int(out) if out.ndim == 0 else out


def baseline_unweighted_average(P):
    """Argmax of the mean softmax column."""
    P = np.asarray(P, dtype=np.float64)
    return predict_class(P.mean(axis=-1))


def baseline_majority_vote(P):
    """Plurality over hard per-agent predictions."""
    P = np.asarray(P, dtype=np.float64)
    c = P.shape[-2]
    votes = np.argmax(P, axis=-2)  # (..., n)
    counts = (votes[..., None, :] == np.arange(c)[:, None]).sum(axis=-1)
    return predict_class(counts)


def random_subsets(n, k, size, rng) -> np.ndarray:
    """``size`` independent uniform k-subsets of range(n), as an int array."""
    if not 1 <= k <= n:
        raise ContractError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    keys = rng.random((size, n))
    return np.sort(np.argsort(keys, axis=1)[:, :k], axis=1)


def baseline_random_selection(P, k, rng):
    """Unweighted average over a uniformly drawn k-subset of agents.

    For a batch (batch, c, n) each row gets its own subset. With k = n every
    agent is always selected and no random numbers are consumed.
    """
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    if k == n:
        return baseline_unweighted_average(P)
    single = P.ndim == 2
    Pb = P[None] if single else P
    idx = random_subsets(n, k, Pb.shape[0], rng)
    mask = np.zeros((Pb.shape[0], n))
    np.put_along_axis(mask, idx, 1.0, axis=1)
    out = predict_class((Pb * mask[:, None, :]).sum(axis=-1) / k)
    return int(out[0]) if single else out
