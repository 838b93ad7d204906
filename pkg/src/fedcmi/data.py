"""Synthetic two-modality data, client partitioning and modality availability."""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import ParameterError
from .rng import stream

MAGIC = b"FCMI"
FORMAT_VERSION = 1


class Availability(str, Enum):
    BOTH = "both"
    M0 = "m0"
    M1 = "m1"

    @property
    def has_m0(self) -> bool:
        return self is not Availability.M1

    @property
    def has_m1(self) -> bool:
        return self is not Availability.M0


@dataclass(frozen=True)
class DataSpec:
    num_classes: int = 4
    dim_m0: int = 16
    dim_m1: int = 16
    scale_m0: float = 2.0
    scale_m1: float = 0.7
    noise_m0: float = 1.0
    noise_m1: float = 1.0
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.dim_m0 < 1 or self.dim_m1 < 1:
            raise ParameterError("modality dims must be >= 1")
        if self.noise_m0 <= 0 or self.noise_m1 <= 0:
            raise ParameterError("noise std must be positive")
        if self.scale_m0 < 0 or self.scale_m1 < 0:
            raise ParameterError("class-mean scale must be non-negative")
        if self.n_train < 0 or self.n_test < 0:
            raise ParameterError("sample counts must be non-negative")

    def dim(self, modality: int) -> int:
        return (self.dim_m0, self.dim_m1)[modality]

    def scale(self, modality: int) -> float:
        return (self.scale_m0, self.scale_m1)[modality]

    def noise(self, modality: int) -> float:
        return (self.noise_m0, self.noise_m1)[modality]


@dataclass
class MultimodalDataset:
    x_m0: np.ndarray
    x_m1: np.ndarray
    y: np.ndarray
    mask: np.ndarray  # (n, 2) bool, column m is True when modality m is present
    num_classes: int

    def __post_init__(self):
        n = len(self.y)
        if self.x_m0.shape[0] != n or self.x_m1.shape[0] != n or self.mask.shape != (n, 2):
            raise ParameterError("dataset fields are not aligned on n")
        if n and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ParameterError("labels out of range")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultimodalDataset(self.x_m0[idx], self.x_m1[idx], self.y[idx], self.mask[idx], self.num_classes)

    def with_availability(self, avail: Availability) -> "MultimodalDataset":
        """Shard view where absent modalities are NaN-poisoned and masked out."""
        mask = self.mask.copy()
        x0, x1 = self.x_m0, self.x_m1
        if not avail.has_m0:
            mask[:, 0] = False
            x0 = np.full_like(x0, np.nan)
        if not avail.has_m1:
            mask[:, 1] = False
            x1 = np.full_like(x1, np.nan)
        return MultimodalDataset(x0, x1, self.y, mask, self.num_classes)

    def modality(self, m: int) -> np.ndarray:
        return self.x_m0 if m == 0 else self.x_m1

    def to_bytes(self) -> bytes:
        n = len(self.y)
        header = MAGIC + struct.pack("<5I", FORMAT_VERSION, n, self.num_classes, self.x_m0.shape[1], self.x_m1.shape[1])
        return b"".join([
            header,
            np.ascontiguousarray(self.x_m0, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.x_m1, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.y, dtype="<u4").tobytes(),
            np.ascontiguousarray(self.mask, dtype="u1").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "MultimodalDataset":
        if buf[:4] != MAGIC:
            raise ValueError("not an FCMI dataset file")
        version, n, C, d0, d1 = struct.unpack_from("<5I", buf, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version {version}")
        off = 24
        sizes = [n * d0 * 8, n * d1 * 8, n * 4, n * 2]
        if len(buf) != off + sum(sizes):
            raise ValueError("truncated or oversized dataset file")
        x0 = np.frombuffer(buf, "<f8", n * d0, off).reshape(n, d0).astype(np.float64)
        off += sizes[0]
        x1 = np.frombuffer(buf, "<f8", n * d1, off).reshape(n, d1).astype(np.float64)
        off += sizes[1]
        y = np.frombuffer(buf, "<u4", n, off).astype(np.int64)
        off += sizes[2]
        mask = np.frombuffer(buf, "u1", n * 2, off).reshape(n, 2).astype(bool)
        return cls(x0, x1, y, mask, int(C))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MultimodalDataset":
        return cls.from_bytes(Path(path).read_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# generation


def _centered_unit_rows(rng: np.random.Generator, C: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((C, dim))
    g -= g.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return g / norms


def class_means(spec: DataSpec, modality: int) -> np.ndarray:
    """Unit-norm class means for one modality, shape ``(C, d_m)``.

    The first ``d_m // 2`` coordinates carry a latent direction shared by both
    modalities (drawn once per class), the rest a direction unique to the
    modality. Rows are centred across classes before normalising, which keeps
    the classes separated even in one dimension.
    """
    C, d = spec.num_classes, spec.dim(modality)
    shared_dim = d // 2
    own_dim = d - shared_dim
    parts = []
    if shared_dim:
        shared = _centered_unit_rows(stream(spec.seed, "means-shared", shared_dim), C, shared_dim)
        parts.append(np.sqrt(shared_dim / d) * shared)
    own = _centered_unit_rows(stream(spec.seed, "means-own", modality, own_dim), C, own_dim)
    parts.append(np.sqrt(own_dim / d) * own)
    return np.concatenate(parts, axis=1)


_SPLITS = {"train": 0, "test": 1}


def generate_dataset(spec: DataSpec, split: str = "train") -> MultimodalDataset:
    spec.validate()
    n = spec.n_train if split == "train" else spec.n_test
    sid = _SPLITS[split]
    C = spec.num_classes
    y = np.arange(n, dtype=np.int64) % C
    stream(spec.seed, "labels", sid).shuffle(y)
    xs = []
    for m in (0, 1):
        mu = class_means(spec, m)
        noise = stream(spec.seed, "noise", sid, m).standard_normal((n, spec.dim(m)))
        xs.append(spec.scale(m) * mu[y] + spec.noise(m) * noise)
    return MultimodalDataset(xs[0], xs[1], y, np.ones((n, 2), dtype=bool), C)


def nearest_mean_accuracy(x: np.ndarray, y: np.ndarray, means: np.ndarray) -> float:
    """Top-1 accuracy of assigning each row to its nearest mean (ties to lowest index)."""
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == y))


def fit_class_means(x: np.ndarray, y: np.ndarray, C: int) -> np.ndarray:
    return np.stack([x[y == c].mean(axis=0) if np.any(y == c) else np.zeros(x.shape[1]) for c in range(C)])


def bayes_oracle_accuracy(spec: DataSpec, modality: int, draws: int = 100_000, seed: int = 12345) -> tuple[float, float]:
    """Monte-Carlo Bayes accuracy for one modality, with its standard error.

    Uses fresh draws from a stream unrelated to dataset generation. With
    equiprobable classes and shared isotropic noise the Bayes rule is the
    nearest true class mean.
    """
    spec.validate()
    C = spec.num_classes
    rng = stream(seed, "bayes-oracle", spec.seed, modality)
    mu = spec.scale(modality) * class_means(spec, modality)
    hits = 0
    done = 0
    chunk = 20_000
    while done < draws:
        k = min(chunk, draws - done)
        y = rng.integers(0, C, size=k)
        x = mu[y] + spec.noise(modality) * rng.standard_normal((k, spec.dim(modality)))
        d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
        hits += int(np.sum(np.argmin(d2, axis=1) == y))
        done += k
    acc = hits / draws
    return acc, float(np.sqrt(acc * (1 - acc) / draws))


# ---------------------------------------------------------------------------
# partitioning and availability


def iid_partition(n_samples: int, num_clients: int, seed: int) -> list[np.ndarray]:
    if num_clients < 1 or num_clients > n_samples:
        raise ParameterError("need 1 <= clients <= samples")
    perm = stream(seed, "iid-partition").permutation(n_samples)
    return [np.sort(part) for part in np.array_split(perm, num_clients)]


def dirichlet_partition(labels, num_clients: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Per-class Dirichlet(alpha) shares dealt to clients; no client left empty."""
    labels = np.asarray(labels)
    n = len(labels)
    if num_clients < 1:
        raise ParameterError("need at least one client")
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    if num_clients > n:
        raise ParameterError(f"{num_clients} clients but only {n} samples")
    rng = stream(seed, "dirichlet-partition")
    parts: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for client, chunk in enumerate(np.split(idx, cuts)):
            parts[client].extend(chunk.tolist())
    # repair empty clients by moving one sample from the currently largest client
    for client in range(num_clients):
        if not parts[client]:
            donor = max(range(num_clients), key=lambda i: (len(parts[i]), -i))
            parts[client].append(parts[donor].pop())
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def assign_modalities(num_clients: int, both_fraction: float, seed: int) -> list[Availability]:
    if not 0.0 <= both_fraction <= 1.0:
        raise ParameterError("both_fraction must lie in [0, 1]")
    rng = stream(seed, "modality-assign")
    n_both = int(np.floor(both_fraction * num_clients + 1e-9))
    order = rng.permutation(num_clients)
    out = [Availability.BOTH] * num_clients
    single = rng.integers(0, 2, size=num_clients)
    for rank, client in enumerate(order):
        if rank >= n_both:
            out[client] = Availability.M0 if single[client] == 0 else Availability.M1
    return out


def modality_dropout(avail: list[Availability], drop_prob: float, seed: int) -> list[Availability]:
    """Demote each both-modality client to one random modality with ``drop_prob``."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ParameterError("drop_prob must lie in [0, 1]")
    rng = stream(seed, "modality-dropout")
    u = rng.random(len(avail))
    pick = rng.integers(0, 2, size=len(avail))
    out = []
    for i, a in enumerate(avail):
        if a is Availability.BOTH and u[i] < drop_prob:
            a = Availability.M0 if pick[i] == 0 else Availability.M1
        out.append(a)
    return out


@dataclass
class ClientAssignment:
    indices: list[np.ndarray]
    availability: list[Availability]

    def __post_init__(self):
        if len(self.indices) != len(self.availability):
            raise ParameterError("indices and availability disagree on client count")

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {
            "clients": [
                {"id": i, "size": int(len(ix)), "availability": a.value}
                for i, (ix, a) in enumerate(zip(self.indices, self.availability))
            ]
        }


def build_assignment(
    labels,
    num_clients: int,
    *,
    alpha: float | None,
    both_fraction: float,
    drop_prob: float,
    seed: int,
) -> ClientAssignment:
    """IID split when ``alpha`` is None, otherwise Dirichlet; then modalities and dropout."""
    if alpha is None:
        idx = iid_partition(len(labels), num_clients, seed)
    else:
        idx = dirichlet_partition(labels, num_clients, alpha, seed)
    avail = assign_modalities(num_clients, both_fraction, seed)
    avail = modality_dropout(avail, drop_prob, seed)
    return ClientAssignment(idx, avail)


def spec_dict(spec: DataSpec) -> dict:
    return dataclasses.asdict(spec)
