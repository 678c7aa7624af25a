"""Desk-scale synthetic stand-in for the source-tracing dataset.

Each class is a Gaussian blob around its own center; the centers are
mutually orthogonal directions scaled so every pair sits exactly
``cluster_separation`` apart. The eval split gets extra additive noise
(``eval_shift_sigma``) to mimic the covariate shift between training and
test recordings, and class 7 (the novel algorithm) exists only in eval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .containers import DatasetManifest, FeatureMatrix, ManifestRecord
from .errors import ConfigError


def _default_counts() -> dict:
    return {
        "train": {c: 400 for c in range(7)},
        "dev": {c: 150 for c in range(7)},
        "eval": {c: 500 for c in range(8)},
    }


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    dim_raw: int = 32
    per_class_counts: dict = field(default_factory=_default_counts)
    cluster_separation: float = 8.0
    within_class_sigma: float = 0.8
    eval_shift_sigma: float = 0.24  # 0.3 x within_class_sigma by default

    def __post_init__(self):
        if self.dim_raw < 1:
            raise ConfigError(f"dim_raw must be positive, got {self.dim_raw}")
        if self.cluster_separation <= 0:
            raise ConfigError("cluster_separation must be positive")
        if self.within_class_sigma < 0 or self.eval_shift_sigma < 0:
            raise ConfigError("sigmas must be nonnegative")
        for split, counts in self.per_class_counts.items():
            if split not in ("train", "dev", "eval"):
                raise ConfigError(f"unknown split {split!r} in per_class_counts")
            for cls, cnt in counts.items():
                if not (0 <= int(cls) <= 7):
                    raise ConfigError(f"class {cls} outside 0..7")
                if cnt < 1:
                    raise ConfigError(f"count for class {cls} must be >= 1")
                if int(cls) == 7 and split in ("train", "dev"):
                    raise ConfigError(
                        f"class 7 is eval-only, found in split {split!r}"
                    )

    @property
    def classes(self) -> list:
        seen = set()
        for counts in self.per_class_counts.values():
            seen.update(int(c) for c in counts)
        return sorted(seen)


def _orthonormal_rows(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    """k orthonormal d-vectors by modified Gram-Schmidt.

    Hand-rolled rather than QR: plain numpy arithmetic gives the same bits
    on every platform, while LAPACK QR sign conventions can differ.
    """
    if k > d:
        raise ConfigError(f"need dim_raw >= {k} for {k} separated centers, got {d}")
    for _ in range(8):
        m = rng.standard_normal((k, d))
        ok = True
        for i in range(k):
            for j in range(i):
                m[i] -= (m[i] @ m[j]) * m[j]
            norm = np.linalg.norm(m[i])
            if norm < 1e-8:
                ok = False
                break
            m[i] /= norm
        if ok:
            return m
    raise ConfigError("failed to draw independent center directions")


def generate_synthetic(cfg: SynthConfig):
    """Return ({split: FeatureMatrix}, DatasetManifest), deterministic by seed.

    Matrices are quantized through f32 so the in-memory values match a
    save/load round-trip through the binary container bit-for-bit.
    """
    rng = np.random.default_rng(cfg.seed)
    classes = cfg.classes
    dirs = _orthonormal_rows(rng, len(classes), cfg.dim_raw)
    # orthonormal u_i: |s*u_i - s*u_j| = s*sqrt(2), so this scale makes every
    # pair of centers exactly cluster_separation apart
    centers = {
        c: dirs[i] * (cfg.cluster_separation / np.sqrt(2.0))
        for i, c in enumerate(classes)
    }

    matrices = {}
    records = []
    for split in ("train", "dev", "eval"):
        counts = cfg.per_class_counts.get(split, {})
        if not counts:
            continue
        blocks = []
        for cls in sorted(int(c) for c in counts):
            n = int(counts[cls])
            x = centers[cls] + cfg.within_class_sigma * rng.standard_normal(
                (n, cfg.dim_raw)
            )
            if split == "eval" and cfg.eval_shift_sigma > 0:
                x = x + cfg.eval_shift_sigma * rng.standard_normal(x.shape)
            blocks.append(x)
            records.extend(
                ManifestRecord(f"{split}_c{cls}_{i:04d}", cls, split)
                for i in range(n)
            )
        data = np.vstack(blocks).astype(np.float32).astype(np.float64)
        matrices[split] = FeatureMatrix(data, role="raw")

    return matrices, DatasetManifest(tuple(records))
