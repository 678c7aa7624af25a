"""The desk-scale network: raw -> hidden (ReLU) -> feature -> head.

Three head variants share the trunk:
  RE        a single direction vector w0 (one-class gate),
  FD        a 6-way linear head over fake algorithms (labels 1..6),
  one-stage a 7-way linear head over labels 0..6.

Checkpoint format (little-endian):
    magic "MLP1" | u8 version (1) | u8 stage (0=RE, 1=FD, 2=one-stage)
    | u32 d_raw | u32 d_hidden | u32 d_feature | u32 n_classes
    | n_classes * i32 class ids
    | f64 blobs in order: W1, b1, W2, b2, then w0 (RE) or W_head, b_head.
Parameters are stored as f64, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .containers import FeatureMatrix, _atomic_write_bytes
from .errors import CorruptionError, DataError, FormatError

STAGES = ("RE", "FD", "one-stage")
_STAGE_CODE = {name: i for i, name in enumerate(STAGES)}

_MAGIC = b"MLP1"
_VERSION = 1
_HEAD = struct.Struct("<BBIIII")  # version, stage, d_raw, d_hidden, d_feat, c


@dataclass(frozen=True)
class MlpModel:
    stage: str
    W1: np.ndarray  # (d_raw, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    W2: np.ndarray  # (d_hidden, d_feature)
    b2: np.ndarray  # (d_feature,)
    head_w0: np.ndarray | None = None  # (d_feature,), RE only
    head_W: np.ndarray | None = None  # (d_feature, c), FD / one-stage
    head_b: np.ndarray | None = None  # (c,)
    class_ids: tuple = ()  # logits column -> class label

    def __post_init__(self):
        if self.stage not in STAGES:
            raise DataError(f"unknown stage {self.stage!r}")
        for name in ("W1", "b1", "W2", "b2", "head_w0", "head_W", "head_b"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.ascontiguousarray(v, dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise DataError(f"{name} contains non-finite values")
            object.__setattr__(self, name, v)
        if self.W1.ndim != 2 or self.b1.shape != (self.W1.shape[1],):
            raise DataError("W1/b1 shape mismatch")
        if self.W2.shape[0] != self.W1.shape[1] or self.b2.shape != (self.W2.shape[1],):
            raise DataError("W2/b2 shape mismatch")
        if self.stage == "RE":
            if self.head_w0 is None or self.head_W is not None:
                raise DataError("RE model must carry w0 and no linear head")
            if self.head_w0.shape != (self.d_feature,):
                raise DataError("w0 dimension mismatch")
            if np.linalg.norm(self.head_w0) == 0.0:
                raise DataError("w0 must be nonzero")
        else:
            if self.head_W is None or self.head_b is None or self.head_w0 is not None:
                raise DataError(f"{self.stage} model must carry a linear head")
            c = self.head_W.shape[1]
            if self.head_W.shape[0] != self.d_feature or self.head_b.shape != (c,):
                raise DataError("head shape mismatch")
            if len(self.class_ids) != c:
                raise DataError(f"{c}-way head with {len(self.class_ids)} class ids")
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))

    @property
    def d_raw(self) -> int:
        return self.W1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def d_feature(self) -> int:
        return self.W2.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.head_W is None else self.head_W.shape[1]


@dataclass(frozen=True)
class ForwardPass:
    features: FeatureMatrix  # penultimate activations, pre-normalization
    logits: FeatureMatrix | None = None
    oc_scores: np.ndarray | None = None


def forward(model: MlpModel, x) -> ForwardPass:
    """Pure forward pass; features are the raw (unnormalized) encoder output."""
    xa = x.data if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    if xa.ndim != 2 or xa.shape[1] != model.d_raw:
        raise DataError(
            f"input is {xa.shape}, model expects (*, {model.d_raw})"
        )
    h = np.maximum(xa @ model.W1 + model.b1, 0.0)
    f = h @ model.W2 + model.b2
    feats = FeatureMatrix(f, role="feature")
    if model.stage == "RE":
        norms = np.linalg.norm(f, axis=1)
        w0 = model.head_w0 / np.linalg.norm(model.head_w0)
        # a zero feature row has no angle; score it 0 (well below any gate)
        # instead of erroring, so inference never dies on one dead sample
        oc = (f @ w0) / np.where(norms > 0, norms, 1.0)
        return ForwardPass(features=feats, oc_scores=oc)
    logits = FeatureMatrix(f @ model.head_W + model.head_b, role="logits")
    return ForwardPass(features=feats, logits=logits)


def save_model(model: MlpModel, path) -> None:
    parts = [
        _MAGIC,
        _HEAD.pack(_VERSION, _STAGE_CODE[model.stage], model.d_raw,
                   model.d_hidden, model.d_feature, model.n_classes),
        np.asarray(model.class_ids, dtype="<i4").tobytes(),
        model.W1.astype("<f8").tobytes(),
        model.b1.astype("<f8").tobytes(),
        model.W2.astype("<f8").tobytes(),
        model.b2.astype("<f8").tobytes(),
    ]
    if model.stage == "RE":
        parts.append(model.head_w0.astype("<f8").tobytes())
    else:
        parts.append(model.head_W.astype("<f8").tobytes())
        parts.append(model.head_b.astype("<f8").tobytes())
    _atomic_write_bytes(path, b"".join(parts))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    if len(blob) < 4 + _HEAD.size:
        raise CorruptionError(f"{path}: truncated header")
    version, stage_code, d_raw, d_hidden, d_feat, c = _HEAD.unpack_from(blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if stage_code >= len(STAGES):
        raise FormatError(f"{path}: unknown stage code {stage_code}")
    stage = STAGES[stage_code]
    off = 4 + _HEAD.size

    def take(count, dtype, shape):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(blob):
            raise CorruptionError(f"{path}: truncated at offset {off}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr.astype(np.float64).reshape(shape) if dtype == "<f8" \
            else arr.reshape(shape)

    class_ids = tuple(int(v) for v in take(c, "<i4", (c,)))
    W1 = take(d_raw * d_hidden, "<f8", (d_raw, d_hidden))
    b1 = take(d_hidden, "<f8", (d_hidden,))
    W2 = take(d_hidden * d_feat, "<f8", (d_hidden, d_feat))
    b2 = take(d_feat, "<f8", (d_feat,))
    kw: dict = {}
    if stage == "RE":
        kw["head_w0"] = take(d_feat, "<f8", (d_feat,))
    else:
        kw["head_W"] = take(d_feat * c, "<f8", (d_feat, c))
        kw["head_b"] = take(c, "<f8", (c,))
    if off != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - off} trailing bytes")
    try:
        return MlpModel(stage=stage, W1=W1, b1=b1, W2=W2, b2=b2,
                        class_ids=class_ids, **kw)
    except DataError as exc:
        raise CorruptionError(f"{path}: {exc}") from None
