"""Synthetic IQ datasets: modulation, channel, framing, splits and device partitions."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedpoison import binio
from fedpoison.errors import ConfigurationError, FormatError, InputError

log = logging.getLogger(__name__)

GENERATOR_VERSION = "fedpoison-synth-1"
DATASET_MAGIC = b"FPSIM1"

SCHEMES = ("BPSK", "QPSK", "PSK8", "PAM4", "QAM16", "QAM64", "CPFSK", "GFSK")
SCHEME_ORDER = {"BPSK": 2, "QPSK": 4, "PSK8": 8, "PAM4": 4, "QAM16": 16, "QAM64": 64, "CPFSK": 2, "GFSK": 2}
_ALIASES = {"8PSK": "PSK8", "16QAM": "QAM16", "64QAM": "QAM64", "4PAM": "PAM4"}

FSK_MOD_INDEX = 0.5
GFSK_BT = 0.35
GFSK_SPAN_SYMBOLS = 4


def canonical_scheme(name: str) -> str:
    key = _ALIASES.get(name.upper(), name.upper())
    if key not in SCHEME_ORDER:
        raise ConfigurationError(f"unknown modulation scheme {name!r}; known: {', '.join(SCHEMES)}")
    return key


# ---------------------------------------------------------------- modulation


def _gray(k: np.ndarray) -> np.ndarray:
    return k ^ (k >> 1)


def _gray_pam(m: int) -> np.ndarray:
    """Amplitude for each symbol value of an m-level Gray-coded PAM (unnormalised odd integers)."""
    k = np.arange(m)
    levels = 2 * k - (m - 1)
    table = np.empty(m)
    table[_gray(k)] = levels
    return table


def constellation(scheme: str) -> np.ndarray:
    """Unit-average-power points indexed by symbol value (linear schemes only)."""
    scheme = canonical_scheme(scheme)
    if scheme == "BPSK":
        pts = np.array([1.0, -1.0], dtype=complex)
    elif scheme == "QPSK":
        s = np.arange(4)
        pts = ((1 - 2 * (s >> 1)) + 1j * (1 - 2 * (s & 1))).astype(complex)
    elif scheme == "PSK8":
        k = np.arange(8)
        pts = np.empty(8, dtype=complex)
        pts[_gray(k)] = np.exp(2j * np.pi * k / 8)
    elif scheme == "PAM4":
        pts = _gray_pam(4).astype(complex)
    elif scheme in ("QAM16", "QAM64"):
        side = int(math.isqrt(SCHEME_ORDER[scheme]))
        bits = side.bit_length() - 1
        pam = _gray_pam(side)
        s = np.arange(side * side)
        pts = pam[s >> bits] + 1j * pam[s & (side - 1)]
    else:
        raise ConfigurationError(f"{scheme} is not a linear constellation")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def _gaussian_taps(sps: int) -> np.ndarray:
    t = np.arange(-GFSK_SPAN_SYMBOLS * sps // 2, GFSK_SPAN_SYMBOLS * sps // 2 + 1) / sps
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * GFSK_BT)
    taps = np.exp(-(t**2) / (2 * sigma**2))
    return taps / taps.sum()


def modulate(symbols, scheme: str, samples_per_symbol: int = 8) -> np.ndarray:
    """Complex baseband for a symbol stream (1-d) or a batch of streams (2-d).

    Linear schemes use a rectangular pulse; CPFSK/GFSK are binary,
    phase-continuous and constant-envelope.
    """
    scheme = canonical_scheme(scheme)
    if samples_per_symbol < 1:
        raise ConfigurationError("samples_per_symbol must be positive")
    sym = np.asarray(symbols, dtype=np.int64)
    order = SCHEME_ORDER[scheme]
    if sym.size and (sym.min() < 0 or sym.max() >= order):
        raise InputError(f"symbol values must lie in [0, {order}) for {scheme}")
    sps = samples_per_symbol
    if scheme in ("CPFSK", "GFSK"):
        freq = np.repeat(2.0 * sym - 1.0, sps, axis=-1)
        if scheme == "GFSK":
            taps = _gaussian_taps(sps)
            flat = freq.reshape(-1, freq.shape[-1])
            # centre slice of the full convolution; "same" mode misbehaves when taps outgrow the frame
            h, n = len(taps) // 2, freq.shape[-1]
            freq = np.stack([np.convolve(row, taps)[h : h + n] for row in flat]).reshape(freq.shape)
        phase = np.pi * FSK_MOD_INDEX * np.cumsum(freq, axis=-1) / sps
        return np.exp(1j * phase)
    return np.repeat(constellation(scheme)[sym], sps, axis=-1)


# ------------------------------------------------------------------- channel


@dataclass(frozen=True)
class ChannelSpec:
    snr_db: float = 10.0
    fading: str = "none"
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigurationError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if self.fading not in ("none", "rayleigh_flat"):
            raise ConfigurationError(f"fading must be 'none' or 'rayleigh_flat', got {self.fading!r}")


def apply_channel(clean: np.ndarray, spec: ChannelSpec, rng: np.random.Generator) -> np.ndarray:
    """``sqrt(rho) * H * s + n`` along the last axis.

    The noise is circular complex Gaussian with variance equal to the clean
    signal's mean power, so the received SNR is ``rho = 10**(snr_db/10)``.
    ``snr_db = inf`` is the noise-free limit and returns ``H * s``.
    """
    s = np.asarray(clean, dtype=complex)
    if s.size == 0:
        raise InputError("cannot pass an empty sequence through the channel")
    batch_shape = s.shape[:-1]
    if spec.fading == "rayleigh_flat":
        h = (rng.standard_normal(batch_shape) + 1j * rng.standard_normal(batch_shape)) / np.sqrt(2)
        s = s * np.asarray(h)[..., None]
    if math.isinf(spec.snr_db):
        return s
    rho = 10.0 ** (spec.snr_db / 10.0)
    power = np.mean(np.abs(np.asarray(clean)) ** 2, axis=-1, keepdims=True)
    noise = rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape)
    return np.sqrt(rho) * s + noise * np.sqrt(power / 2.0)


# -------------------------------------------------------------------- frames


def to_real_frame(seq: np.ndarray) -> np.ndarray:
    """``l x 2`` (I, Q) unit-energy frame; accepts a batch ``N x l``."""
    seq = np.asarray(seq)
    if np.iscomplexobj(seq):
        frames = np.stack([seq.real, seq.imag], axis=-1)
    else:
        frames = np.asarray(seq, dtype=np.float64)
        if frames.shape[-1] != 2:
            raise InputError(f"real frames must have 2 columns, got shape {frames.shape}")
    return normalize_energy(frames)


def normalize_energy(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    energy = np.sum(frames**2, axis=(-2, -1), keepdims=True)
    if np.any(energy == 0) or not np.all(np.isfinite(energy)):
        raise InputError("cannot normalise a zero-energy or non-finite frame")
    return frames / np.sqrt(energy)


def frame_energy(frames: np.ndarray) -> np.ndarray:
    return np.sum(np.asarray(frames, dtype=np.float64) ** 2, axis=(-2, -1))


# ------------------------------------------------------------------- dataset


@dataclass
class LabeledDataset:
    frames: np.ndarray  # N x l x 2, float32
    labels: np.ndarray  # N, int64
    scheme_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scheme_names = tuple(self.scheme_names)
        if self.frames.size == 0 and self.frames.ndim != 3:
            self.frames = self.frames.reshape(0, 0, 2)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 2:
            raise InputError(f"frames must be N x l x 2, got shape {self.frames.shape}")
        if len(self.frames) != len(self.labels):
            raise InputError(f"{len(self.frames)} frames but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.scheme_names)

    @property
    def length(self) -> int:
        return self.frames.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.frames[idx], self.labels[idx], self.scheme_names, dict(self.meta))

    def replace(self, frames=None, labels=None) -> LabeledDataset:
        return LabeledDataset(
            self.frames if frames is None else frames,
            self.labels if labels is None else labels,
            self.scheme_names,
            dict(self.meta),
        )

    def equals(self, other: LabeledDataset) -> bool:
        return (
            self.scheme_names == other.scheme_names
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
        )


def generate_dataset(
    schemes,
    frames_per_class: int,
    spec: ChannelSpec | None = None,
    length: int = 128,
    seed: int | None = None,
    samples_per_symbol: int = 8,
) -> LabeledDataset:
    """Balanced dataset of ``frames_per_class`` frames per scheme, class-major order."""
    spec = spec or ChannelSpec()
    if frames_per_class < 1:
        raise ConfigurationError("frames_per_class must be at least 1")
    names = tuple(canonical_scheme(s) for s in schemes)
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate schemes in {list(schemes)}")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n_sym = -(-length // samples_per_symbol)
    frames, labels = [], []
    for c, scheme in enumerate(names):
        sym = rng.integers(0, SCHEME_ORDER[scheme], size=(frames_per_class, n_sym))
        clean = modulate(sym, scheme, samples_per_symbol)[:, :length]
        rx = apply_channel(clean, spec, rng)
        frames.append(to_real_frame(rx).astype(np.float32))
        labels.append(np.full(frames_per_class, c, dtype=np.int64))
    meta = {"snr_db": float(spec.snr_db), "seed": int(seed), "generator_version": GENERATOR_VERSION}
    return LabeledDataset(np.concatenate(frames), np.concatenate(labels), names, meta)


def split_indices(labels: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise InputError(f"class {c} has {len(idx)} frame(s); need at least 2 to split")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(len(idx) * train_fraction)), 1), len(idx) - 1)
        train.append(idx[:n_train])
        test.append(idx[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_train_test(dataset: LabeledDataset, train_fraction: float = 0.75, seed: int = 0):
    """Stratified split into (train, test)."""
    tr, te = split_indices(dataset.labels, train_fraction, seed)
    return dataset.subset(tr), dataset.subset(te)


# --------------------------------------------------------------- partitions


@dataclass
class PartitionPlan:
    device_index_lists: list[np.ndarray]
    mode: str
    params: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def num_devices(self) -> int:
        return len(self.device_index_lists)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.device_index_lists]


def partition_iid(train: LabeledDataset, K: int, seed: int) -> PartitionPlan:
    """Equal-size (+-1), class-balanced (+-1 per class) disjoint shards."""
    if K < 1:
        raise ConfigurationError("K must be positive")
    if len(train) < K:
        raise ConfigurationError(f"cannot split {len(train)} frames over {K} devices")
    rng = np.random.default_rng(seed)
    order = np.concatenate(
        [rng.permutation(np.flatnonzero(train.labels == c)) for c in range(train.num_classes)]
    )
    shards = [rng.permutation(order[k::K]) for k in range(K)]
    return PartitionPlan(shards, "iid")


def partition_noniid(
    train: LabeledDataset,
    K: int,
    quantity_mean: float,
    quantity_std: float,
    labels_per_device: int,
    seed: int,
) -> PartitionPlan:
    """Label-skewed shards: each device draws ``labels_per_device`` classes and a
    Normal(quantity_mean, quantity_std) frame count, sampled without replacement
    from what is left of those classes."""
    C = train.num_classes
    if labels_per_device > C:
        raise ConfigurationError(f"labels_per_device={labels_per_device} exceeds class count {C}")
    if labels_per_device < 1 or quantity_mean <= 0 or quantity_std < 0 or K < 1:
        raise ConfigurationError("invalid non-iid partition parameters")
    rng = np.random.default_rng(seed)
    remaining = {c: list(rng.permutation(np.flatnonzero(train.labels == c))) for c in range(C)}
    shards, warnings, targets = [], [], []
    for k in range(K):
        classes = np.sort(rng.choice(C, size=labels_per_device, replace=False))
        target = max(int(round(rng.normal(quantity_mean, quantity_std))), labels_per_device)
        targets.append(target)
        pool = np.concatenate([np.asarray(remaining[c], dtype=np.int64) for c in classes])
        take = min(target, len(pool))
        if take < target:
            msg = f"device {k}: pool of classes {classes.tolist()} exhausted, {take}/{target} frames"
            warnings.append(msg)
            log.warning(msg)
        chosen = rng.choice(pool, size=take, replace=False) if take else np.zeros(0, dtype=np.int64)
        chosen_set = set(chosen.tolist())
        for c in classes:
            remaining[c] = [i for i in remaining[c] if i not in chosen_set]
        shards.append(np.asarray(chosen, dtype=np.int64))
    params = {
        "quantity_mean": quantity_mean,
        "quantity_std": quantity_std,
        "labels_per_device": labels_per_device,
        "targets": targets,
    }
    return PartitionPlan(shards, "noniid", params, warnings)


# ---------------------------------------------------------------------- I/O


def dataset_to_bytes(ds: LabeledDataset) -> bytes:
    if ds.num_classes > 256:
        raise ConfigurationError("the dataset format stores labels as u8 (at most 256 classes)")
    w = binio.Writer()
    snr = float(ds.meta.get("snr_db", float("nan")))
    seed = int(ds.meta.get("seed", 0)) & 0xFFFFFFFFFFFFFFFF
    w.pack("IIQdQ", ds.num_classes, ds.length, len(ds), snr, seed)
    for name in ds.scheme_names:
        w.string(name)
    records = np.empty(len(ds), dtype=_record_dtype(ds.length))
    records["iq"] = ds.frames
    records["label"] = ds.labels
    w.raw(records.tobytes())
    return binio.frame(DATASET_MAGIC, w.payload())


def _record_dtype(length: int) -> np.dtype:
    return np.dtype([("iq", "<f4", (length, 2)), ("label", "u1")])


def dataset_from_bytes(data: bytes) -> LabeledDataset:
    r = binio.unframe(data, DATASET_MAGIC)
    C, length, count, snr, seed = r.unpack("IIQdQ", "header")
    names = tuple(r.string(f"scheme name {i}") for i in range(C))
    rec = _record_dtype(length)
    start = r.offset
    records = np.frombuffer(r.take(count * rec.itemsize, "frame records"), dtype=rec)
    if r.offset != len(r.data):
        raise FormatError(f"{len(r.data) - r.offset} unexpected trailing bytes", r.offset)
    labels = records["label"].astype(np.int64)
    if count and labels.max() >= C:
        bad = int(np.argmax(labels >= C))
        raise FormatError(f"label {labels[bad]} out of range for {C} classes", start + bad * rec.itemsize + rec.itemsize - 1)
    frames = records["iq"].astype(np.float32).reshape(count, length, 2)
    meta = {"snr_db": snr, "seed": seed, "generator_version": "file"}
    return LabeledDataset(frames, labels, names, meta)


def save_dataset(ds: LabeledDataset, path: str | os.PathLike) -> None:
    binio.atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path: str | os.PathLike) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def from_arrays(iq, labels, scheme_names, snr_db: float = float("nan"), seed: int = 0) -> LabeledDataset:
    """Ingest externally prepared data: ``iq`` is N x l x 2 (I, Q) or complex N x l.

    Frames are unit-energy normalised so they match generated data.
    """
    iq = np.asarray(iq)
    frames = to_real_frame(iq) if len(iq) else np.zeros((0, 0, 2))
    meta = {"snr_db": float(snr_db), "seed": int(seed), "generator_version": "external"}
    return LabeledDataset(frames, labels, scheme_names, meta)
