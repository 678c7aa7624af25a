"""Core data types and file formats.

Embedding container (binary):
    magic "EMB1" | u8 role (0=raw, 1=feature, 2=logits) | u32 n | u32 d
    (little-endian) | n*d f32 values, row-major.

CSV alternative: header ``utt_id,f0,...,f{d-1}``, UTF-8, "." decimal.
Manifest: JSON Lines, one ``{"utt_id", "label", "split"}`` record per line.

Matrices are held in memory as float64; the binary payload is f32, so
anything loaded from disk round-trips bit-exactly (f32 -> f64 -> f32 is
exact). Downstream math always accumulates in float64.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, DataError, FormatError

MAGIC = b"EMB1"
ROLES = ("raw", "feature", "logits")
_ROLE_CODE = {name: i for i, name in enumerate(ROLES)}
SPLITS = ("train", "dev", "eval")

_HEADER = struct.Struct("<BII")  # role byte, n, d (after the 4 magic bytes)


def _atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a temp file + rename so readers never see a partial file."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class FeatureMatrix:
    """An (n, d) float64 matrix tagged with what its rows are.

    role "raw" = extractor output, "feature" = encoder output,
    "logits" = classifier head output (d then equals the class count).
    """

    data: np.ndarray
    role: str = "feature"

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise DataError(f"expected 2-D data, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise DataError(f"matrix must be at least 1x1, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise DataError("matrix entries must be finite")
        if self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r}, expected one of {ROLES}")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "data", a)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


def save_features(m: FeatureMatrix, path) -> None:
    """Write the binary container. The f32 payload is written atomically."""
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    header = MAGIC + _HEADER.pack(_ROLE_CODE[m.role], m.n, m.d)
    _atomic_write_bytes(path, header + payload)


def load_features(path) -> FeatureMatrix:
    """Read a feature file, binary or CSV (sniffed by the magic bytes)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != MAGIC:
            return _load_features_csv_file(path)[0]
        rest = fh.read(_HEADER.size)
        if len(rest) != _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        role_code, n, d = _HEADER.unpack(rest)
        if role_code >= len(ROLES):
            raise FormatError(f"{path}: unknown role byte {role_code}")
        if n < 1 or d < 1:
            raise FormatError(f"{path}: header declares empty matrix ({n}x{d})")
        payload = fh.read()
    expected = 4 * n * d
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: header declares {n}x{d} ({expected} payload bytes), "
            f"found {len(payload)}"
        )
    a = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise CorruptionError(f"{path}: payload contains non-finite values")
    return FeatureMatrix(a, role=ROLES[role_code])


def save_features_csv(m: FeatureMatrix, path, utt_ids=None) -> None:
    """CSV twin of save_features; ids default to row indices ("r0", "r1", ...)."""
    if utt_ids is None:
        utt_ids = [f"r{i}" for i in range(m.n)]
    if len(utt_ids) != m.n:
        raise DataError(f"{len(utt_ids)} ids for {m.n} rows")
    lines = ["utt_id," + ",".join(f"f{j}" for j in range(m.d))]
    for uid, row in zip(utt_ids, m.data):
        lines.append(str(uid) + "," + ",".join(repr(float(v)) for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_features_csv(path, role: str = "raw"):
    """Load the CSV variant; returns (FeatureMatrix, utt_ids).

    CSV carries no role byte, so the caller declares one (default "raw").
    """
    return _load_features_csv_file(path, role)


def _load_features_csv_file(path, role: str = "raw"):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        if not cols or cols[0] != "utt_id":
            raise FormatError(f"{path}: not a feature CSV (header {header!r})")
        d = len(cols) - 1
        if d < 1 or cols[1:] != [f"f{j}" for j in range(d)]:
            raise FormatError(f"{path}: malformed feature CSV header")
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 1:
                raise CorruptionError(
                    f"{path}:{lineno}: expected {d + 1} fields, got {len(parts)}"
                )
            ids.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise CorruptionError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return FeatureMatrix(np.array(rows, dtype=np.float64), role=role), ids


@dataclass(frozen=True)
class ClassTaxonomy:
    """Class-id layout: real, the known fakes, and the held-out novel fake."""

    real_class: int = 0
    known_fake_classes: tuple = (1, 2, 3, 4, 5, 6)
    ood_class: int = 7

    def __post_init__(self):
        ids = [self.real_class, *self.known_fake_classes, self.ood_class]
        if len(set(ids)) != len(ids):
            raise DataError(f"class ids must be disjoint, got {ids}")

    @property
    def train_classes(self) -> tuple:
        return (self.real_class, *self.known_fake_classes)

    @property
    def all_classes(self) -> tuple:
        return (*self.train_classes, self.ood_class)


DEFAULT_TAXONOMY = ClassTaxonomy()


@dataclass(frozen=True)
class ManifestRecord:
    utt_id: str
    label: int  # 0..7, or -1 for unlabeled
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    """Per-utterance labels and split assignment.

    Label 7 (the novel algorithm) may appear only in the eval split.
    """

    records: tuple = field(default_factory=tuple)

    def __post_init__(self):
        recs = tuple(self.records)
        seen = set()
        for r in recs:
            if r.utt_id in seen:
                raise DataError(f"duplicate utt_id {r.utt_id!r}")
            seen.add(r.utt_id)
            if r.split not in SPLITS:
                raise DataError(f"{r.utt_id}: unknown split {r.split!r}")
            if not (-1 <= r.label <= 7):
                raise DataError(f"{r.utt_id}: label {r.label} outside -1..7")
            if r.label == 7 and r.split in ("train", "dev"):
                raise DataError(
                    f"{r.utt_id}: class 7 must not appear in split {r.split!r}"
                )
        object.__setattr__(self, "records", recs)

    def split(self, name: str) -> tuple:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return tuple(r for r in self.records if r.split == name)

    def labels(self, name: str) -> np.ndarray:
        return np.array([r.label for r in self.split(name)], dtype=np.int64)

    def ids(self, name: str) -> list:
        return [r.utt_id for r in self.split(name)]

    def counts(self, name: str) -> dict:
        out: dict = {}
        for r in self.split(name):
            out[r.label] = out.get(r.label, 0) + 1
        return dict(sorted(out.items()))


def save_manifest(man: DatasetManifest, path) -> None:
    lines = [
        json.dumps({"utt_id": r.utt_id, "label": r.label, "split": r.split})
        for r in man.records
    ]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            try:
                records.append(
                    ManifestRecord(
                        utt_id=str(obj["utt_id"]),
                        label=int(obj["label"]),
                        split=str(obj["split"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record: {exc}") from None
    return DatasetManifest(tuple(records))
