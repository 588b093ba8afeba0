"""Synthetic tasks, CIFAR-10 binary ingestion, online sampling, and losses."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Tuple

import numpy as np

from .errors import ConfigError, DomainError, EmptyDataset, FormatError
from .numerics import Rng

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 x 32 x 32 pixels


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    provenance: str  # synthetic_teacher | synthetic_gaussian | cifar10

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} "
                "do not form an (N, d) / (N,) pair"
            )

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class LossKind:
    """Scalar loss with Lipschitz derivative in f (mse: 1, logistic: 1/4)."""

    kind: str
    lipschitz_deriv: float

    def loss_and_deriv(self, f: float, y: float) -> Tuple[float, float]:
        return loss_and_deriv(self, f, y)


MSE = LossKind("mse", lipschitz_deriv=1.0)
LOGISTIC = LossKind("logistic", lipschitz_deriv=0.25)


def get_loss(kind: str) -> LossKind:
    try:
        return {"mse": MSE, "logistic": LOGISTIC}[kind]
    except KeyError:
        raise ConfigError(f"unknown loss {kind!r}", field="loss") from None


def loss_and_deriv(kind: LossKind, f: float, y: float) -> Tuple[float, float]:
    if kind.kind == "mse":
        r = f - y
        return 0.5 * r * r, r
    if kind.kind == "logistic":
        if y not in (-1.0, 1.0):
            raise DomainError(f"logistic loss needs y in {{-1, +1}}, got {y}")
        z = y * f
        # log1p/expit-style stable forms for large |z|
        loss = np.logaddexp(0.0, -z)
        deriv = -y / (1.0 + np.exp(z)) if z > -30 else -y
        return float(loss), float(deriv)
    raise ConfigError(f"unknown loss {kind.kind!r}", field="loss")


def sphere_inputs(rng: Rng, N: int, d: int) -> np.ndarray:
    """N i.i.d. points uniform on the radius-sqrt(d) sphere in R^d."""
    if N < 1 or d < 1:
        raise ConfigError(f"need N, d >= 1, got ({N}, {d})")
    g = rng.standard_normal(N, d)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return g / norms * np.sqrt(d)


def teacher_labels(
    inputs: np.ndarray,
    rng: Rng,
    teacher: str = "narrow_resnet",
    noise_std: float = 0.0,
) -> np.ndarray:
    """Labels from a randomly drawn teacher, standardized to unit variance.

    linear: y = w . x / sqrt(d). narrow_resnet: a width-8 depth-2 relu
    residual net with random Gaussian weights. Outputs are standardized
    (unit empirical variance, mean kept) before noise is added.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    N, d = inputs.shape
    if teacher == "linear":
        w = rng.standard_normal(d)
        raw = inputs @ w / np.sqrt(d)
        # linear teacher keeps its sign symmetry: scale only
        scale = np.sqrt(np.mean(raw**2))
        y = raw / scale if scale > 0 else raw
    elif teacher == "narrow_resnet":
        width, depth = 8, 2
        U = rng.standard_normal(width, d)
        Ws = [rng.standard_normal(width, width) for _ in range(depth)]
        v = rng.standard_normal(width)
        h = inputs @ U.T / np.sqrt(d)
        for W in Ws:
            h = h + np.maximum(h, 0.0) @ W.T / np.sqrt(depth * width)
        raw = h @ v / np.sqrt(width)
        std = float(np.std(raw))
        y = (raw - np.mean(raw)) / std if std > 0 else raw
    else:
        raise ConfigError(f"unknown teacher {teacher!r}", field="teacher")
    if noise_std > 0:
        y = y + noise_std * rng.standard_normal(N)
    return y


def teacher_dataset(
    rng: Rng, N: int, d: int, teacher: str = "narrow_resnet", noise_std: float = 0.0
) -> Dataset:
    inputs = sphere_inputs(rng, N, d)
    labels = teacher_labels(inputs, rng, teacher=teacher, noise_std=noise_std)
    return Dataset(inputs, labels, "synthetic_teacher")


def data_dir() -> str:
    return os.environ.get("NFDLAB_DATA_DIR", "./data")


def read_cifar10_records(path) -> Tuple[np.ndarray, np.ndarray]:
    """Raw (labels uint8 (N,), pixels uint8 (N, 3072)) from one binary file."""
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise IOError(f"cannot read {path}: {exc}") from exc
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {raw.size} is not a positive multiple of "
            f"{CIFAR_RECORD_BYTES}"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.max(initial=0) > 9:
        raise FormatError(f"{path}: label byte outside 0..9")
    return labels.copy(), records[:, 1:].copy()


def write_cifar10_records(path, labels: np.ndarray, pixels: np.ndarray) -> None:
    """Serialize raw records back to the binary layout (round-trip helper)."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.shape != (labels.shape[0], CIFAR_RECORD_BYTES - 1):
        raise FormatError(
            f"pixels shape {pixels.shape} does not match {labels.shape[0]} records"
        )
    np.hstack([labels, pixels]).tofile(path)


def cifar10_read(
    path, max_records: Optional[int] = None, downsample_to_d: Optional[int] = None
) -> Dataset:
    """Desk-scale CIFAR-10 subset with scalar +/-1 targets.

    Pixels are scaled to [0,1] and per-feature standardized over the loaded
    subset; labels are one-vs-rest (class 0 = +1, rest = -1) because the
    networks have a scalar output. Optional average-pool downsampling to
    d features (d must divide 3072).
    """
    labels_raw, pixels_raw = read_cifar10_records(path)
    if max_records is not None:
        labels_raw = labels_raw[:max_records]
        pixels_raw = pixels_raw[:max_records]
    x = pixels_raw.astype(np.float64) / 255.0
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    x = (x - mean) / std
    if downsample_to_d is not None:
        d = int(downsample_to_d)
        if d < 1 or x.shape[1] % d != 0:
            raise ConfigError(
                f"downsample_to_d={d} must divide {x.shape[1]}",
                field="downsample_to_d",
            )
        x = x.reshape(x.shape[0], d, -1).mean(axis=2)
        # re-center pooled features so the standardization contract holds
        x = x - x.mean(axis=0)
    y = np.where(labels_raw == 0, 1.0, -1.0)
    return Dataset(x, y, "cifar10")


def online_sampler(dataset: Dataset, rng: Rng) -> Iterator[Tuple[np.ndarray, float]]:
    """I.i.d. uniform-with-replacement (x, y) stream, reproducible from rng."""
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot sample from an empty dataset")
    while True:
        i = int(rng.integers(0, n))
        yield dataset.inputs[i], float(dataset.labels[i])
