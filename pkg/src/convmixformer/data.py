"""Feature-sequence files, dataset manifests, and the synthetic gesture generator.

CMF1 layout (all little-endian)::

    offset 0   4 bytes   magic b"CMF1"
    offset 4   u32       T (frames)
    offset 8   u32       D (feature width)
    offset 12  u32       label
    offset 16  u32       modality id
    offset 20  T*D f32   features, row-major, frames outermost

Features are widened to float64 on read.

Manifest layout (UTF-8 text, one record per line)::

    cmf-manifest 1
    T <int>
    D <int>
    n <int>
    split <train|test>
    modalities <tag>[,<tag>...]
    samples <count>
    <sample_id> <relative path> <label>     # repeated <count> times

Paths are relative to the manifest's directory.  Blank lines and lines
starting with ``#`` are ignored.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

MAGIC = b"CMF1"
HEADER = struct.Struct("<4sIIII")
MODALITIES = ("color", "depth", "ir", "normals", "optical_flow", "synthetic")
MANIFEST_TAG = "cmf-manifest 1"

PathLike = Union[str, os.PathLike]


def modality_id(tag: str) -> int:
    try:
        return MODALITIES.index(tag)
    except ValueError:
        raise ValidationError(f"unknown modality {tag!r}; expected one of {MODALITIES}") from None


@dataclass
class FeatureSequence:
    features: np.ndarray  # [T, D]
    label: int
    modality: str = "synthetic"
    sample_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or 0 in self.features.shape:
            raise ValidationError(f"features must be a non-empty [T, D] matrix, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValidationError(f"sample {self.sample_id!r} has non-finite features")
        if self.label < 0:
            raise ValidationError(f"label must be non-negative, got {self.label}")
        modality_id(self.modality)

    @property
    def shape(self) -> tuple:
        return self.features.shape


def encode_features(seq: FeatureSequence) -> bytes:
    t, d = seq.shape
    payload = np.ascontiguousarray(seq.features, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, t, d, seq.label, modality_id(seq.modality)) + payload


def decode_features(buf: bytes, num_classes: Optional[int] = None, sample_id: str = "") -> FeatureSequence:
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", offset=len(buf))
    magic, t, d, label, mod = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if t == 0 or d == 0:
        raise FormatError(f"empty feature matrix T={t} D={d}", offset=4)
    if mod >= len(MODALITIES):
        raise FormatError(f"unknown modality id {mod}", offset=16)
    if num_classes is not None and label >= num_classes:
        raise FormatError(f"label {label} >= num_classes {num_classes}", offset=12)
    need = HEADER.size + 4 * t * d
    if len(buf) < need:
        raise FormatError(f"truncated payload: {len(buf)} of {need} bytes", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", offset=need)
    feats = np.frombuffer(buf, dtype="<f4", count=t * d, offset=HEADER.size).reshape(t, d)
    if not np.isfinite(feats).all():
        bad = int(np.flatnonzero(~np.isfinite(feats.reshape(-1)))[0])
        raise FormatError("non-finite feature value", offset=HEADER.size + 4 * bad)
    return FeatureSequence(feats.astype(np.float64), int(label), MODALITIES[mod], sample_id)


def write_features(seq: FeatureSequence, sink: Union[PathLike, BinaryIO]) -> None:
    data = encode_features(seq)
    if isinstance(sink, (str, os.PathLike)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)


def read_features(source: Union[PathLike, BinaryIO, bytes], num_classes: Optional[int] = None) -> FeatureSequence:
    if isinstance(source, bytes):
        return decode_features(source, num_classes)
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        return decode_features(path.read_bytes(), num_classes, sample_id=path.stem)
    return decode_features(source.read(), num_classes)


# --- manifests -------------------------------------------------------------------------

@dataclass
class SampleRecord:
    sample_id: str
    path: str
    label: int


@dataclass
class DatasetManifest:
    seq_len: int
    feature_dim: int
    num_classes: int
    split: str
    modalities: list = field(default_factory=lambda: ["synthetic"])
    samples: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def resolve(self, record: SampleRecord) -> Path:
        return self.root / record.path

    def load(self, record: SampleRecord) -> FeatureSequence:
        seq = read_features(self.resolve(record), self.num_classes)
        seq.sample_id = record.sample_id
        if seq.shape != (self.seq_len, self.feature_dim):
            raise ValidationError(
                f"{record.sample_id}: shape {seq.shape} != manifest ({self.seq_len}, {self.feature_dim})"
            )
        if seq.label != record.label:
            raise ValidationError(f"{record.sample_id}: file label {seq.label} != manifest label {record.label}")
        return seq

    def load_arrays(self) -> tuple[np.ndarray, np.ndarray, list]:
        """All samples as ([N, T, D] features, [N] labels, ids)."""
        seqs = [self.load(r) for r in self.samples]
        x = np.stack([s.features for s in seqs]) if seqs else np.zeros((0, self.seq_len, self.feature_dim))
        return x, self.labels(), [s.sample_id for s in seqs]

    def check(self) -> None:
        """Validate every referenced file against the header and labels."""
        for r in self.samples:
            if not 0 <= r.label < self.num_classes:
                raise ValidationError(f"{r.sample_id}: label {r.label} outside [0, {self.num_classes})")
            self.load(r)
        if self.split == "train" and self.samples:
            missing = set(range(self.num_classes)) - {r.label for r in self.samples}
            if missing:
                raise ValidationError(f"train split has no samples for classes {sorted(missing)}")


def format_manifest(m: DatasetManifest) -> str:
    lines = [
        MANIFEST_TAG,
        f"T {m.seq_len}",
        f"D {m.feature_dim}",
        f"n {m.num_classes}",
        f"split {m.split}",
        f"modalities {','.join(m.modalities)}",
        f"samples {len(m.samples)}",
    ]
    lines += [f"{r.sample_id} {r.path} {r.label}" for r in m.samples]
    return "\n".join(lines) + "\n"


def write_manifest(m: DatasetManifest, path: PathLike) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


def parse_manifest(text: str, root: PathLike = ".") -> DatasetManifest:
    rows = [
        (i + 1, line.strip())
        for i, line in enumerate(text.splitlines())
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not rows or rows[0][1] != MANIFEST_TAG:
        raise FormatError(f"manifest must start with {MANIFEST_TAG!r}", offset=rows[0][0] if rows else 0)
    header = {}
    keys = ("T", "D", "n", "split", "modalities", "samples")
    for lineno, line in rows[1:1 + len(keys)]:
        key, _, value = line.partition(" ")
        if key not in keys or key in header:
            raise FormatError(f"unexpected header line {line!r}", offset=lineno)
        header[key] = value.strip()
    if len(header) != len(keys):
        raise FormatError(f"manifest header missing {sorted(set(keys) - set(header))}")
    try:
        t, d, n, count = (int(header[k]) for k in ("T", "D", "n", "samples"))
    except ValueError as exc:
        raise FormatError(f"non-integer header value: {exc}") from None
    if header["split"] not in ("train", "test"):
        raise FormatError(f"split must be train or test, got {header['split']!r}")
    modalities = header["modalities"].split(",")
    for tag in modalities:
        modality_id(tag)
    body = rows[1 + len(keys):]
    if len(body) != count:
        raise FormatError(f"header declares {count} samples, found {len(body)}")
    samples = []
    for lineno, line in body:
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"sample line needs 'id path label', got {line!r}", offset=lineno)
        try:
            label = int(parts[2])
        except ValueError:
            raise FormatError(f"bad label {parts[2]!r}", offset=lineno) from None
        samples.append(SampleRecord(parts[0], parts[1], label))
    return DatasetManifest(t, d, n, header["split"], modalities, samples, Path(root))


def read_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


# --- synthetic data ----------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    seq_len: int = 16
    feature_dim: int = 32
    samples_per_class: int = 50
    test_samples_per_class: int = 25
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.seq_len < 4:
            raise ConfigError("seq_len must be >= 4")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.samples_per_class < 1 or self.test_samples_per_class < 0:
            raise ConfigError("samples_per_class must be >= 1 and test_samples_per_class >= 0")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class ClassPattern:
    basis: np.ndarray  # [n, D]
    offset: np.ndarray  # [n, D]


def class_patterns(spec: SyntheticSpec) -> ClassPattern:
    rng = np.random.default_rng([spec.seed, 0])
    basis = rng.standard_normal((spec.n_classes, spec.feature_dim))
    offset = rng.standard_normal((spec.n_classes, spec.feature_dim))
    return ClassPattern(basis, offset)


def render_sample(pattern: ClassPattern, label: int, phase: float, seq_len: int) -> np.ndarray:
    """Noise-free [T, D] features of class ``label`` at the given phase."""
    t = np.arange(seq_len)
    wave = np.sin(2.0 * np.pi * (label + 1) * t / seq_len + phase)
    return wave[:, None] * pattern.basis[label][None, :] + pattern.offset[label][None, :]


def synthesize(spec: SyntheticSpec, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Generate (features [N, T, D], labels [N], phases [N]) for one split.

    Each split draws from its own seeded stream; class patterns are shared.
    """
    spec.validate()
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    per_class = spec.samples_per_class if split == "train" else spec.test_samples_per_class
    pattern = class_patterns(spec)
    rng = np.random.default_rng([spec.seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(spec.n_classes), per_class)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=labels.size)
    feats = np.empty((labels.size, spec.seq_len, spec.feature_dim))
    for i, (c, ph) in enumerate(zip(labels, phases)):
        feats[i] = render_sample(pattern, int(c), float(ph), spec.seq_len)
    feats += spec.noise_sigma * rng.standard_normal(feats.shape)
    return feats, labels, phases


def gen_synthetic(spec: SyntheticSpec, out_dir: PathLike) -> dict[str, DatasetManifest]:
    """Write CMF1 files plus ``train.manifest`` / ``test.manifest`` under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    manifests = {}
    for split in ("train", "test"):
        feats, labels, _ = synthesize(spec, split)
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i, (x, y) in enumerate(zip(feats, labels)):
            sid = f"{split}-{i:05d}"
            rel = f"{split}/{sid}.cmf"
            write_features(FeatureSequence(x, int(y), "synthetic", sid), out / rel)
            records.append(SampleRecord(sid, rel, int(y)))
        m = DatasetManifest(spec.seq_len, spec.feature_dim, spec.n_classes, split, ["synthetic"], records, out)
        write_manifest(m, out / f"{split}.manifest")
        manifests[split] = m
    return manifests


def load_manifest_bytes(path: PathLike) -> bytes:
    """Concatenate a manifest and its files; used for byte-level determinism checks."""
    m = read_manifest(path)
    buf = io.BytesIO()
    buf.write(Path(path).read_bytes())
    for r in m.samples:
        buf.write(m.resolve(r).read_bytes())
    return buf.getvalue()
