"""Datasets: IDX files, specialised training splits and a synthetic task.

The synthetic task replaces trained agents by *oracle agents*, deterministic
functions of the input whose accuracy on their specialty classes and on the
remaining classes is set directly. That keeps end-to-end experiments fast
while reproducing the accuracy profile of specialised agents.
"""

from __future__ import annotations

import gzip
import hashlib
import itertools
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError, FormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# average share of specialty-class samples per agent training set
RHO_PRESETS = {"mnist": 0.732, "cifar10": 0.552, "utkface": 0.583, "fer2013": 0.444}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.features.shape[0] if self.features.ndim else 0} feature rows for {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, split or self.split)


# -- IDX ---------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for a magic number", offset=0)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) < header + size:
        raise FormatError(f"{what}: payload needs {size} bytes, file has {len(raw) - header}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 pixels of an IDX image file, shape (N, rows, cols)."""
    return _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, 3, f"images {path}")


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, 1, f"labels {path}")


def load_idx(images_path, labels_path, n_classes=None, split="train") -> Dataset:
    """Load an IDX image/label pair as flattened pixels scaled to [0, 1].

    Files may be gzip-compressed. ``n_classes`` defaults to max label + 1.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        # the count field sits right after the magic number
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4)
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    c = n_classes if n_classes is not None else int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels.astype(np.int64), c, split)


def write_idx(images_path, labels_path, images, labels, compress=None):
    """Write uint8 images (N, rows, cols) and labels (N,) as IDX files.

    Compressed with gzip when ``compress`` is true, or when it is None and
    the path ends in ``.gz``.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise ContractError("IDX pixel and label data must be uint8")
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise DimensionError(f"images {images.shape} / labels {labels.shape} are not a matching IDX pair")
    blobs = [
        (images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()),
        (labels_path, struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()),
    ]
    for path, blob in blobs:
        gz = compress if compress is not None else str(path).endswith(".gz")
        with open(path, "wb") as f:
            f.write(gzip.compress(blob, mtime=0) if gz else blob)


def select_classes(ds: Dataset, classes) -> Dataset:
    """Keep only ``classes`` and relabel them 0..len(classes)-1 in the given order."""
    classes = [int(c) for c in classes]
    lut = np.full(max(ds.n_classes, max(classes) + 1), -1, dtype=np.int64)
    lut[classes] = np.arange(len(classes))
    keep = np.isin(ds.labels, classes)
    return Dataset(ds.features[keep], lut[ds.labels[keep]], len(classes), ds.split)


def split_validation(ds: Dataset, fraction, rng) -> tuple:
    """Random (train, valid) partition with ``round(fraction*N)`` validation rows."""
    order = rng.permutation(len(ds))
    n_valid = int(round(fraction * len(ds)))
    return ds.subset(np.sort(order[n_valid:]), "train"), ds.subset(np.sort(order[:n_valid]), "valid")


# -- specialisation ----------------------------------------------------------


def enumerate_specializations(c) -> list:
    """All single classes, then all pairs, in lexicographic order."""
    if c < 2:
        raise ContractError(f"need at least 2 classes, got {c}")
    return [(i,) for i in range(c)] + list(itertools.combinations(range(c), 2))


def compose_specialized_split(master: Dataset, specialty, rho, target_size, rng) -> Dataset:
    """Draw an agent training set where specialty classes are over-represented.

    ``ceil(rho * target_size)`` rows come from the specialty classes (split
    evenly, the first class taking any odd one); each remaining row picks a
    non-specialty class uniformly at random and then a sample of it. Sampling
    is without replacement until a class pool runs dry.
    """
    if target_size <= 0:
        raise ContractError(f"target_size must be positive, got {target_size}")
    specialty = tuple(sorted(set(int(s) for s in specialty)))
    if not specialty:
        raise ContractError("specialty must name at least one class")
    if not 0 <= rho <= 1:
        raise ContractError(f"rho must lie in [0, 1], got {rho}")
    c = master.n_classes
    others = [k for k in range(c) if k not in specialty]
    pools = {k: np.flatnonzero(master.labels == k) for k in range(c)}
    for k in specialty + tuple(others):
        if pools[k].size == 0:
            raise ContractError(f"master dataset has no samples of class {k}")

    quota = min(math.ceil(rho * target_size), target_size)
    per_class = {k: quota // len(specialty) for k in specialty}
    for k in specialty[: quota % len(specialty)]:
        per_class[k] += 1
    rest = target_size - quota
    if rest and not others:
        raise ContractError("no non-specialty classes to fill the remainder")
    if rest:
        drawn = rng.integers(0, len(others), size=rest)
        for j, k in enumerate(others):
            per_class[k] = int(np.count_nonzero(drawn == j))

    chosen = []
    for k in sorted(per_class):
        want, pool = per_class[k], pools[k]
        if want == 0:
            continue
        if want <= pool.size:
            chosen.append(rng.choice(pool, size=want, replace=False))
        else:
            logger.warning("class %d has %d samples, %d requested; sampling with replacement", k, pool.size, want)
            chosen.append(np.concatenate([pool, rng.choice(pool, size=want - pool.size, replace=True)]))
    idx = np.concatenate(chosen)
    return master.subset(idx[rng.permutation(idx.size)], "train")


def specialty_accuracy(pred, labels, specialty, n_classes) -> dict:
    """Specialised / complementary / overall accuracy in percent."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    inside = np.isin(labels, list(specialty))
    correct = pred == labels

    def pct(sel):
        return float(100.0 * correct[sel].mean()) if sel.any() else float("nan")

    return {
        "specialized": pct(inside),
        "complementary": pct(~inside),
        "overall": pct(np.ones_like(inside)),
    }


# -- synthetic task ----------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def _row_keys(X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    return np.array(
        [int.from_bytes(hashlib.blake2b(row.tobytes(), digest_size=8).digest(), "little") for row in X],
        dtype=np.uint64,
    )


def _uniforms(keys: np.ndarray, salt: int, count: int) -> np.ndarray:
    """``count`` deterministic U[0,1) values per key, shape (len(keys), count)."""
    with np.errstate(over="ignore"):
        base = _splitmix64(keys ^ _splitmix64(np.uint64(salt & 0xFFFFFFFFFFFFFFFF)))
        lanes = base[:, None] + np.arange(1, count + 1, dtype=np.uint64)[None, :] * np.uint64(0xD1B54A32D192ED03)
    return (_splitmix64(lanes) >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass
class OracleAgent:
    """A scripted agent with prescribed accuracy inside and outside its specialty.

    The agent reads the class of x as its nearest class centre. It is right
    with probability ``p_s`` when that class is one of its specialties and
    ``p_c`` otherwise. A wrong answer is the runner-up centre (the class x is
    most easily confused with) with probability ``confusion``, otherwise a
    uniformly chosen wrong class. The output puts logit ``margin`` on the
    answer plus a little uniform jitter. All randomness is a hash of (x, id,
    seed), so the agent is a fixed function of its input.
    """

    id: int
    specialty: tuple
    centers: np.ndarray
    p_s: float
    p_c: float
    confusion: float = 0.0
    margin: float = 2.0
    jitter: float = 0.05
    seed: int = 0
    train_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.specialty = tuple(sorted(int(s) for s in self.specialty))
        self.centers = np.asarray(self.centers, dtype=np.float64)

    @property
    def input_size(self):
        return self.centers.shape[1]

    @property
    def n_classes(self):
        return self.centers.shape[0]

    def predict_proba(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if X.shape[1] != self.input_size:
            raise DimensionError(f"agent {self.id} expects width {self.input_size}, got {X.shape}")
        c = self.n_classes
        d2 = ((X[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=-1)
        order = np.argsort(d2, axis=1, kind="stable")
        seen, runner_up = order[:, 0], order[:, 1]

        u = _uniforms(_row_keys(X), self.seed * 1_000_003 + self.id, 3 + c)
        p = np.where(np.isin(seen, self.specialty), self.p_s, self.p_c)
        correct = u[:, 0] < p
        # uniform wrong class: skip over the perceived class
        offset = np.minimum((u[:, 2] * (c - 1)).astype(np.int64), c - 2)
        uniform_wrong = (seen + 1 + offset) % c
        wrong = np.where(u[:, 1] < self.confusion, runner_up, uniform_wrong)
        answer = np.where(correct, seen, wrong)

        logits = self.jitter * (u[:, 3:] - 0.5)
        logits[np.arange(X.shape[0]), answer] += self.margin
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = "oracle"
        d["specialty"] = list(self.specialty)
        d["centers"] = self.centers.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k not in ("kind", "version")}
        return cls(**d)


@dataclass
class SyntheticTaskSpec:
    """Clustered features plus oracle agents with a specialised accuracy profile.

    Class centres are drawn uniformly from [0.2, 0.8]^d unless given. The
    defaults follow the age-estimation profile: 5 classes, specialised
    accuracy 0.932 and complementary accuracy 0.252.
    """

    c: int = 5
    d: int = 16
    sigma: float = 0.05
    p_s: float = 0.932
    p_c: float = 0.252
    confusion: float = 0.4
    margin: float = 2.0
    jitter: float = 0.05
    n_train: int = 5000
    n_valid: int = 1000
    n_test: int = 1000
    seed: int = 0
    centers: Optional[list] = None

    def __post_init__(self):
        if not 0 < self.p_c < self.p_s <= 1:
            raise ContractError(f"need 0 < p_c < p_s <= 1, got p_c={self.p_c}, p_s={self.p_s}")
        if self.c < 2 or self.d < 1:
            raise ContractError("need c >= 2 and d >= 1")
        if not 0 <= self.confusion <= 1:
            raise ContractError("confusion must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def generate_synthetic_task(spec: SyntheticTaskSpec):
    """Build ``((train, valid, test), agents)`` for a synthetic task.

    One oracle agent per specialty from :func:`enumerate_specializations`.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=np.float64)
        if centers.shape != (spec.c, spec.d):
            raise DimensionError(f"centers have shape {centers.shape}, expected {(spec.c, spec.d)}")
    else:
        centers = rng.uniform(0.2, 0.8, size=(spec.c, spec.d))

    splits = []
    for name, size in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        labels = rng.permutation(np.arange(size) % spec.c)
        features = centers[labels] + spec.sigma * rng.standard_normal((size, spec.d))
        splits.append(Dataset(np.clip(features, 0.0, 1.0), labels, spec.c, name))

    agents = [
        OracleAgent(
            id=i,
            specialty=s,
            centers=centers,
            p_s=spec.p_s,
            p_c=spec.p_c,
            confusion=spec.confusion,
            margin=spec.margin,
            jitter=spec.jitter,
            seed=spec.seed,
        )
        for i, s in enumerate(enumerate_specializations(spec.c))
    ]
    test = splits[2]
    for a in agents:
        pred = np.argmax(a.predict_proba(test.features), axis=1)
        a.train_stats = specialty_accuracy(pred, test.labels, a.specialty, spec.c)
    return tuple(splits), agents
