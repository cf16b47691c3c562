"""Multi-layer perceptrons, parameter sets, optimisers and checkpoints.

Both the ensemble agents and the selection net are plain ReLU MLPs. Agents
end in a softmax over classes; the selection net emits raw scores, one per
ensemble member.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError

CHECKPOINT_VERSION = 1
OUTPUT_MODES = ("softmax", "scores")


@dataclass(frozen=True)
class MLPSpec:
    layer_sizes: tuple
    output_mode: str = "softmax"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"MLPSpec needs >= 2 positive layer sizes, got {self.layer_sizes}")
        if self.output_mode not in OUTPUT_MODES:
            raise ContractError(f"output_mode must be one of {OUTPUT_MODES}, got {self.output_mode!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_size(self):
        return self.layer_sizes[0]

    @property
    def output_size(self):
        return self.layer_sizes[-1]

    def to_dict(self):
        return {"layer_sizes": list(self.layer_sizes), "output_mode": self.output_mode}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_sizes"]), d.get("output_mode", "softmax"))


@dataclass
class ParamSet:
    """Per-layer weights (fan_in x fan_out) and biases."""

    weights: list
    biases: list

    def blocks(self):
        """Yield ``(name, array)`` in a fixed order: w0, b0, w1, b1, ..."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"w{i}", w
            yield f"b{i}", b

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self.blocks()])

    def with_flat(self, vector) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        out, pos = [], 0
        for _, a in self.blocks():
            out.append(vector[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vector.size:
            raise DimensionError(f"flat vector has {vector.size} entries, parameters need {pos}")
        return ParamSet(out[0::2], out[1::2])

    def copy(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, a in self.blocks():
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    def bind(self, tape: ad.Tape, requires_grad=True) -> "BoundParams":
        ws = [tape.leaf(w, requires_grad, name=f"w{i}") for i, w in enumerate(self.weights)]
        bs = [tape.leaf(b, requires_grad, name=f"b{i}") for i, b in enumerate(self.biases)]
        return BoundParams(ws, bs)


@dataclass
class BoundParams:
    """A ParamSet whose arrays are leaves of a tape."""

    weights: list
    biases: list

    def grads(self) -> ParamSet:
        """Gradients collected by the last ``tape.backward`` call."""
        def g(t):
            return t.grad if t.grad is not None else np.zeros_like(t.data)

        return ParamSet([g(w) for w in self.weights], [g(b) for b in self.biases])


def init_params(spec: MLPSpec, seed: int) -> ParamSet:
    """He-style uniform weights in [-sqrt(6/fan_in), sqrt(6/fan_in)], zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParamSet(weights, biases)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_forward(spec: MLPSpec, params, x, tape: Optional[ad.Tape] = None):
    """Run the MLP on a (batch, d) input.

    Without a tape this is a plain numpy evaluation (used for frozen agents)
    and ``params`` must be a :class:`ParamSet`. With a tape, ``params`` may be
    a :class:`BoundParams` (to collect gradients) or a ParamSet, which is then
    recorded as constants.
    """
    if tape is None:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != spec.input_size:
            raise DimensionError(f"input of shape {h.shape} does not match input width {spec.input_size}")
        last = len(params.weights) - 1
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return _softmax(h) if spec.output_mode == "softmax" else h

    if isinstance(params, ParamSet):
        params = params.bind(tape, requires_grad=False)
    h = x if isinstance(x, ad.Tensor) else tape.constant(x)
    if h.data.ndim != 2 or h.shape[1] != spec.input_size:
        raise DimensionError(f"input of shape {h.shape} does not match input width {spec.input_size}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add_bias(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
    return ad.softmax_rows(h) if spec.output_mode == "softmax" else h


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[list] = None
    v: Optional[list] = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ContractError("learning rate must be non-negative")


def optimizer_step(state: OptimizerState, params: ParamSet, grads: ParamSet) -> ParamSet:
    """Apply one update and return the new parameters.

    ``state`` is advanced in place (step counter, Adam moments).
    """
    names = [name for name, _ in params.blocks()]
    p_blocks = [a for _, a in params.blocks()]
    g_blocks = [a for _, a in grads.blocks()]
    for name, p, g in zip(names, p_blocks, g_blocks):
        if p.shape != g.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in parameter block {name} ({bad} entries)")

    lr = state.learning_rate
    state.step += 1
    if state.kind == "sgd":
        new = [p - lr * g for p, g in zip(p_blocks, g_blocks)]
    else:
        if state.m is None:
            state.m = [np.zeros_like(p) for p in p_blocks]
            state.v = [np.zeros_like(p) for p in p_blocks]
        b1, b2, t = state.beta1, state.beta2, state.step
        new = []
        for i, (p, g) in enumerate(zip(p_blocks, g_blocks)):
            state.m[i] = b1 * state.m[i] + (1 - b1) * g
            state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
            m_hat = state.m[i] / (1 - b1**t)
            v_hat = state.v[i] / (1 - b2**t)
            new.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return ParamSet(new[0::2], new[1::2])


# -- checkpoints -------------------------------------------------------------


def checkpoint_dict(spec: MLPSpec, params: ParamSet, seed=None, **extra) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "params": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(params.weights, params.biases)],
        "seed": seed,
    }
    doc.update(extra)
    return doc


def params_from_checkpoint(doc: dict):
    """Parse a checkpoint document into ``(spec, params, doc)``."""
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')!r}")
    spec = MLPSpec.from_dict(doc["spec"])
    weights = [np.asarray(layer["w"], dtype=np.float64) for layer in doc["params"]]
    biases = [np.asarray(layer["b"], dtype=np.float64) for layer in doc["params"]]
    expected = list(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]))
    if [w.shape for w in weights] != expected or [b.shape for b in biases] != [(o,) for _, o in expected]:
        raise FormatError("checkpoint parameter shapes do not match its spec")
    return spec, ParamSet(weights, biases), doc


def save_checkpoint(path, spec: MLPSpec, params: ParamSet, seed=None, **extra):
    # json writes floats with repr(), the shortest string that round-trips exactly
    with open(path, "w") as f:
        json.dump(checkpoint_dict(spec, params, seed, **extra), f)


def load_checkpoint(path):
    with open(path) as f:
        return params_from_checkpoint(json.load(f))
