"""Synthetic factor datasets and the on-disk dataset formats.

Generator layout per sample of class ``c``::

    latent = [disc_scale * z_c ; shared_scale * a * u_j ; intra_scale * eps A_c]
    x      = mixer(latent) + N(0, noise^2)

``z_c`` is a fixed per-class code, ``u_j`` a direction drawn from a pool that
is global to both splits, ``A_c`` a class-specific covariance factor.  With
``atoms_per_class = k > 0`` every class draws ``j`` from its own ``k`` pool
atoms, so atoms are shared by several classes without being class-free.
Test classes get fresh codes, atom subsets and covariance factors but reuse
the shared pool and the mixer, so anything learned about shared factors on
train classes carries over to test classes.

The defaults make the class code weak next to the shared and intra factors:
a model that only separates the training classes tends to lean on whatever
cue separates those particular classes and discards the rest.

Binary layout (little-endian)::

    b"DIVA" | u32 version=1 | u32 n_total | u32 F | u32 n_classes
    f32[n_total * F] features (row-major) | u32[n_total] labels
    u8[n_classes] split flags (0 train, 1 test)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DIVA"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
TRAIN, TEST = 0, 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


@dataclass
class SynthConfig:
    n_train_classes: int = 20
    n_test_classes: int = 20
    samples_per_class: int = 30
    disc_dim: int = 8
    shared_dim: int = 8
    intra_dim: int = 4
    obs_dim: int = 64
    mixing_depth: int = 2
    noise: float = 0.2
    shared_pool: int = 16
    atoms_per_class: int = 2
    disc_scale: float = 0.3
    shared_scale: float = 1.5
    intra_scale: float = 1.0
    mixer_gain: float = 1.5
    seed: int = 0

    def __post_init__(self):
        dims = dict(
            n_train_classes=self.n_train_classes,
            n_test_classes=self.n_test_classes,
            samples_per_class=self.samples_per_class,
            disc_dim=self.disc_dim,
            shared_dim=self.shared_dim,
            intra_dim=self.intra_dim,
            obs_dim=self.obs_dim,
            mixing_depth=self.mixing_depth,
            shared_pool=self.shared_pool,
        )
        bad = [k for k, v in dims.items() if int(v) < 1]
        if bad:
            raise ValueError(f"must be >= 1: {', '.join(bad)}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.atoms_per_class < 0:
            raise ValueError("atoms_per_class must be >= 0 (0 lets every class use the whole pool)")
        if self.n_train_classes + self.n_test_classes > 256 * 256 * 256:
            raise ValueError("too many classes")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # one flag per class id
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.uint8)
        self.validate()

    def validate(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be N x F with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.split)):
            raise ValueError("labels must index the split table")
        if np.any(self.split > 1):
            raise ValueError("split flags must be 0 (train) or 1 (test)")

    @property
    def n_total(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.split)

    def indices(self, which: int) -> np.ndarray:
        return np.flatnonzero(self.split[self.labels] == which)

    @property
    def train_idx(self) -> np.ndarray:
        return self.indices(TRAIN)

    @property
    def test_idx(self) -> np.ndarray:
        return self.indices(TEST)

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split, other.split)
        )


def _mixer(cfg: SynthConfig, rng: np.random.Generator):
    latent = cfg.disc_dim + cfg.shared_dim + cfg.intra_dim
    widths = [latent] + [cfg.obs_dim] * cfg.mixing_depth
    layers = []
    for fi, fo in zip(widths[:-1], widths[1:]):
        layers.append((rng.standard_normal((fi, fo)) * cfg.mixer_gain / np.sqrt(fi), 0.1 * rng.standard_normal(fo)))

    def apply(h):
        for i, (W, b) in enumerate(layers):
            h = h @ W + b
            if i < len(layers) - 1:
                h = np.tanh(h)
        return h

    return apply


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.n_train_classes + cfg.n_test_classes
    mixer = _mixer(cfg, rng)
    pool = rng.standard_normal((cfg.shared_pool, cfg.shared_dim))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    codes = rng.standard_normal((n_classes, cfg.disc_dim))
    intra_maps = rng.standard_normal((n_classes, cfg.intra_dim, cfg.intra_dim)) / np.sqrt(cfg.intra_dim)

    m = cfg.samples_per_class
    labels = np.repeat(np.arange(n_classes), m)
    if cfg.atoms_per_class:
        # each class draws its shared factors from its own few pool atoms
        k = min(cfg.atoms_per_class, cfg.shared_pool)
        usage = np.stack([rng.choice(cfg.shared_pool, size=k, replace=False) for _ in range(n_classes)])
        atoms = usage[labels, rng.integers(k, size=labels.size)]
    else:
        atoms = rng.integers(cfg.shared_pool, size=labels.size)
    amps = rng.standard_normal(labels.size)
    shared = amps[:, None] * pool[atoms]
    eps = rng.standard_normal((labels.size, cfg.intra_dim))
    intra = np.einsum("ni,nij->nj", eps, intra_maps[labels])
    latent = np.concatenate(
        [cfg.disc_scale * codes[labels], cfg.shared_scale * shared, cfg.intra_scale * intra], axis=1
    )
    x = mixer(latent) + cfg.noise * rng.standard_normal((labels.size, cfg.obs_dim))
    split = np.array([TRAIN] * cfg.n_train_classes + [TEST] * cfg.n_test_classes, dtype=np.uint8)
    # store what the file format can hold so round trips are exact
    return Dataset(x.astype(np.float32).astype(np.float64), labels, split)


# ------------------------------------------------------------------ binary


def dataset_bytes(ds: Dataset) -> bytes:
    if ds.n_classes > 0xFFFFFFFF or ds.n_total > 0xFFFFFFFF:
        raise ValueError("dataset too large for the format")
    parts = [
        _HEADER.pack(MAGIC, VERSION, ds.n_total, ds.dim, ds.n_classes),
        ds.features.astype("<f4").tobytes(),
        ds.labels.astype("<u4").tobytes(),
        ds.split.astype("u1").tobytes(),
    ]
    return b"".join(parts)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n_total, F, n_classes = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    sections = [("features", n_total * F * 4), ("labels", n_total * 4), ("split flags", n_classes)]
    chunks = {}
    for name, size in sections:
        if len(buf) < off + size:
            raise FormatError(f"truncated {name}", len(buf))
        chunks[name] = buf[off : off + size]
        off += size
    if len(buf) != off:
        raise FormatError("trailing bytes after split flags", off)
    features = np.frombuffer(chunks["features"], dtype="<f4").reshape(n_total, F).astype(np.float64)
    labels = np.frombuffer(chunks["labels"], dtype="<u4").astype(np.int64)
    split = np.frombuffer(chunks["split flags"], dtype="u1").copy()
    try:
        return Dataset(features, labels, split)
    except ValueError as exc:
        raise FormatError(str(exc), _HEADER.size) from exc


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# --------------------------------------------------------------------- csv


def export_csv(ds: Dataset, path) -> None:
    """One row per sample: F features, integer label, split flag."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(ds.split[y])])


def import_csv(path) -> Dataset:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((lineno, row))
    if not rows:
        raise ValueError("empty csv")
    width = len(rows[0][1])
    if width < 3:
        raise ValueError("rows need at least one feature, a label and a split flag")
    feats, raw_labels, flags = [], [], {}
    for lineno, row in rows:
        if len(row) != width:
            raise ValueError(f"line {lineno}: ragged row ({len(row)} fields, expected {width})")
        try:
            feats.append([float(v) for v in row[:-2]])
            y, s = int(row[-2]), int(row[-1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        if s not in (TRAIN, TEST):
            raise ValueError(f"line {lineno}: split flag must be 0 or 1")
        if flags.setdefault(y, s) != s:
            raise ValueError(f"line {lineno}: class {y} appears in both splits")
        raw_labels.append(y)
    classes = sorted(flags)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[y] for y in raw_labels])
    split = np.array([flags[c] for c in classes], dtype=np.uint8)
    ds = Dataset(np.array(feats), labels, split)
    ds.meta["class_ids"] = classes
    return ds
