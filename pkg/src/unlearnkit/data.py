"""Synthetic classification data with a controllable identity/task overlap.

Each sample is a class prototype plus an identity-specific offset plus
Gaussian noise, embedded into the input space by a fixed orthonormal frame
and affinely squashed into a declared input range. The ``entanglement``
dial sets the fraction of each identity offset's energy that lies inside
the task-relevant subspace: at 0 the identities are invisible to a
task-subspace classifier, at 1 they fully overlap the class directions.

Splits are built at identity level so that the forget / retain / unseen
partitions never share a subject. Datasets persist to a small versioned
binary format with a payload checksum.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataFormatError

_DATASET_MAGIC = b"UNLKDS01"
_DATASET_VERSION = 1
_SPLIT_ORDER = ("retain", "forget", "unseen", "test")

# identity offsets are this much larger than unit scale; per-identity structure
# has to be prominent enough that a trained classifier memorizes it
_IDENTITY_AMPLITUDE = 2.0


@dataclass(frozen=True)
class GenConfig:
    num_identities: int = 40
    samples_per_identity: int = 50
    task_classes: int = 4
    task_dim: int = 4
    identity_dim: int = 4
    input_dim: int = 16
    entanglement: float = 0.6
    noise_sigma: float = 0.1
    input_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 42

    def validate(self) -> None:
        for name in ("num_identities", "samples_per_identity", "task_classes",
                     "task_dim", "identity_dim", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.entanglement <= 1.0:
            raise ConfigError(f"entanglement must be in [0, 1], got {self.entanglement}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.input_dim < self.task_dim + self.identity_dim:
            raise ConfigError(
                "input_dim must be >= task_dim + identity_dim "
                f"({self.input_dim} < {self.task_dim + self.identity_dim})"
            )
        lo, hi = self.input_range
        if not lo < hi:
            raise ConfigError(f"input_range must satisfy lo < hi, got {self.input_range}")


@dataclass(frozen=True)
class SyntheticSample:
    input: np.ndarray
    task_label: int
    identity_id: int


@dataclass(frozen=True)
class Dataset:
    """Column view of a sample list: inputs (n, d), labels (n,), identities (n,)."""

    inputs: np.ndarray
    labels: np.ndarray
    identities: np.ndarray
    input_range: tuple[float, float] | None = None
    gen_config: GenConfig | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.inputs[i], int(self.labels[i]), int(self.identities[i]))

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.inputs[idx], self.labels[idx], self.identities[idx],
                       self.input_range, None)


@dataclass(frozen=True)
class DatasetSplits:
    retain: Dataset
    forget: Dataset
    unseen: Dataset
    test: Dataset
    split_seed: int
    input_range: tuple[float, float] | None = None
    gen_config: GenConfig | None = None

    def split(self, name: str) -> Dataset:
        return getattr(self, name)


@dataclass(frozen=True)
class LatentFrame:
    """The deterministic geometry behind one GenConfig, exposed for analysis."""

    prototypes: np.ndarray      # (task_classes, task_dim)
    identity_task: np.ndarray   # (num_identities, task_dim), energy = entanglement
    identity_orth: np.ndarray   # (num_identities, identity_dim), energy = 1 - entanglement
    basis: np.ndarray           # (input_dim, task_dim + identity_dim), orthonormal columns
    raw_bound: float            # latent coordinates mapped from [-raw_bound, raw_bound]

    @property
    def task_basis(self) -> np.ndarray:
        return self.basis[:, : self.prototypes.shape[1]]


def latent_frame(config: GenConfig) -> LatentFrame:
    """Prototypes, identity offsets and embedding frame for a config (seed-determined)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    protos = rng.normal(size=(config.task_classes, config.task_dim))

    def _unit_rows(m: np.ndarray) -> np.ndarray:
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    id_task = _unit_rows(rng.normal(size=(config.num_identities, config.task_dim)))
    id_orth = _unit_rows(rng.normal(size=(config.num_identities, config.identity_dim)))
    id_task = _IDENTITY_AMPLITUDE * np.sqrt(config.entanglement) * id_task
    id_orth = _IDENTITY_AMPLITUDE * np.sqrt(1.0 - config.entanglement) * id_orth

    latent_dim = config.task_dim + config.identity_dim
    g = rng.normal(size=(config.input_dim, latent_dim))
    basis, _ = np.linalg.qr(g)
    raw_bound = 3.0 + _IDENTITY_AMPLITUDE + 4.0 * config.noise_sigma
    return LatentFrame(protos, id_task, id_orth, basis, raw_bound)


def generate(config: GenConfig) -> Dataset:
    """Deterministic sample list; task labels cycle within each identity.

    Cycling keeps every identity (and hence every identity-level split)
    class-balanced. Inputs are clipped to the declared range after the
    affine squash; with default scales the clip almost never fires.
    """
    frame = latent_frame(config)
    noise_rng = np.random.default_rng([config.seed, 1])
    n = config.num_identities * config.samples_per_identity
    latent_dim = config.task_dim + config.identity_dim

    identities = np.repeat(np.arange(config.num_identities), config.samples_per_identity)
    labels = np.tile(np.arange(config.samples_per_identity) % config.task_classes,
                     config.num_identities)

    latent = np.zeros((n, latent_dim))
    latent[:, : config.task_dim] = frame.prototypes[labels] + frame.identity_task[identities]
    latent[:, config.task_dim:] = frame.identity_orth[identities]
    latent += noise_rng.normal(0.0, config.noise_sigma, size=(n, latent_dim))

    raw = latent @ frame.basis.T
    lo, hi = config.input_range
    scaled = lo + (raw + frame.raw_bound) * (hi - lo) / (2.0 * frame.raw_bound)
    inputs = np.clip(scaled, lo, hi)
    return Dataset(inputs, labels.astype(np.int64), identities.astype(np.int64),
                   config.input_range, config)


def make_splits(
    samples: Dataset,
    forget_identity_fraction: float,
    unseen_identity_fraction: float,
    test_fraction: float,
    split_seed: int,
) -> DatasetSplits:
    """Partition identities into forget / unseen / remaining, then split the
    remaining identities' samples into retain and test by sample fraction."""
    for name, frac in (("forget_identity_fraction", forget_identity_fraction),
                       ("unseen_identity_fraction", unseen_identity_fraction),
                       ("test_fraction", test_fraction)):
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {frac}")
    ids = np.unique(samples.identities)
    n_forget = int(round(forget_identity_fraction * len(ids)))
    n_unseen = int(round(unseen_identity_fraction * len(ids)))
    if n_forget < 1 or n_unseen < 1 or n_forget + n_unseen >= len(ids):
        raise ConfigError(
            f"fractions ({forget_identity_fraction}, {unseen_identity_fraction}) "
            f"infeasible for {len(ids)} identities"
        )
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(ids)
    forget_ids = set(perm[:n_forget].tolist())
    unseen_ids = set(perm[n_forget:n_forget + n_unseen].tolist())

    all_idx = np.arange(len(samples))
    forget_idx = all_idx[np.isin(samples.identities, list(forget_ids))]
    unseen_idx = all_idx[np.isin(samples.identities, list(unseen_ids))]
    remaining = all_idx[~np.isin(samples.identities, list(forget_ids | unseen_ids))]

    n_test = int(round(test_fraction * len(remaining)))
    if n_test < 1 or n_test >= len(remaining):
        raise ConfigError(
            f"test_fraction {test_fraction} infeasible for {len(remaining)} remaining samples"
        )
    sample_perm = rng.permutation(remaining)
    test_idx = np.sort(sample_perm[:n_test])
    retain_idx = np.sort(sample_perm[n_test:])

    return DatasetSplits(
        retain=samples.subset(retain_idx),
        forget=samples.subset(np.sort(forget_idx)),
        unseen=samples.subset(np.sort(unseen_idx)),
        test=samples.subset(test_idx),
        split_seed=int(split_seed),
        input_range=samples.input_range,
        gen_config=samples.gen_config,
    )


def _pack_gen_config(cfg: GenConfig) -> bytes:
    return struct.pack(
        "<6I4dQ",
        cfg.num_identities, cfg.samples_per_identity, cfg.task_classes,
        cfg.task_dim, cfg.identity_dim, cfg.input_dim,
        cfg.entanglement, cfg.noise_sigma, cfg.input_range[0], cfg.input_range[1],
        cfg.seed,
    )


def _unpack_gen_config(raw: bytes, off: int) -> tuple[GenConfig, int]:
    size = struct.calcsize("<6I4dQ")
    vals = struct.unpack_from("<6I4dQ", raw, off)
    cfg = GenConfig(
        num_identities=vals[0], samples_per_identity=vals[1], task_classes=vals[2],
        task_dim=vals[3], identity_dim=vals[4], input_dim=vals[5],
        entanglement=vals[6], noise_sigma=vals[7], input_range=(vals[8], vals[9]),
        seed=vals[10],
    )
    return cfg, off + size


def _payload_bytes(splits: DatasetSplits, input_dim: int) -> bytes:
    parts = []
    for tag, name in enumerate(_SPLIT_ORDER):
        ds = splits.split(name)
        if ds.inputs.shape[1] != input_dim:
            raise ValueError(f"{name} split input dim {ds.inputs.shape[1]} != {input_dim}")
        for i in range(len(ds)):
            parts.append(np.ascontiguousarray(ds.inputs[i], dtype="<f8").tobytes())
            parts.append(struct.pack("<3I", int(ds.labels[i]), int(ds.identities[i]), tag))
    return b"".join(parts)


def save_dataset(splits: DatasetSplits, path) -> None:
    """Versioned binary file: header with checksum and config echo, then rows."""
    input_dim = splits.retain.inputs.shape[1]
    payload = _payload_bytes(splits, input_dim)
    lo, hi = splits.input_range if splits.input_range is not None else (np.nan, np.nan)
    header = [
        _DATASET_MAGIC,
        struct.pack("<II", _DATASET_VERSION, zlib.crc32(payload)),
        struct.pack("<B", 1 if splits.gen_config is not None else 0),
    ]
    if splits.gen_config is not None:
        header.append(_pack_gen_config(splits.gen_config))
    header.append(struct.pack("<Q2dI", splits.split_seed, lo, hi, input_dim))
    header.append(struct.pack("<4I", *(len(splits.split(name)) for name in _SPLIT_ORDER)))
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(payload)


def load_dataset(path) -> DatasetSplits:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_DATASET_MAGIC)] != _DATASET_MAGIC:
        raise DataFormatError("not a dataset file (bad magic)")
    off = len(_DATASET_MAGIC)
    try:
        version, checksum = struct.unpack_from("<II", raw, off)
        off += 8
        if version != _DATASET_VERSION:
            raise DataFormatError(f"unsupported dataset format version {version}")
        (has_cfg,) = struct.unpack_from("<B", raw, off)
        off += 1
        gen_config = None
        if has_cfg:
            gen_config, off = _unpack_gen_config(raw, off)
        split_seed, lo, hi, input_dim = struct.unpack_from("<Q2dI", raw, off)
        off += struct.calcsize("<Q2dI")
        counts = struct.unpack_from("<4I", raw, off)
        off += 16
    except struct.error as exc:
        raise DataFormatError(f"truncated dataset header: {exc}") from exc

    payload = raw[off:]
    row_size = 8 * input_dim + 12
    if len(payload) != row_size * sum(counts):
        raise DataFormatError("dataset payload length does not match header counts")
    if zlib.crc32(payload) != checksum:
        raise DataFormatError("dataset payload checksum mismatch")

    input_range = None if np.isnan(lo) else (lo, hi)
    datasets = {}
    pos = 0
    for tag, (name, count) in enumerate(zip(_SPLIT_ORDER, counts)):
        inputs = np.zeros((count, input_dim))
        labels = np.zeros(count, dtype=np.int64)
        identities = np.zeros(count, dtype=np.int64)
        for i in range(count):
            inputs[i] = np.frombuffer(payload, dtype="<f8", count=input_dim, offset=pos)
            pos += 8 * input_dim
            label, ident, row_tag = struct.unpack_from("<3I", payload, pos)
            pos += 12
            if row_tag != tag:
                raise DataFormatError(f"row tagged {row_tag} inside {name} block")
            labels[i] = label
            identities[i] = ident
        datasets[name] = Dataset(inputs, labels, identities, input_range, None)
    return DatasetSplits(split_seed=int(split_seed), input_range=input_range,
                         gen_config=gen_config, **datasets)


def with_gen_config(splits: DatasetSplits, cfg: GenConfig) -> DatasetSplits:
    return replace(splits, gen_config=cfg)
