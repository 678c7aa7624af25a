"""Post-hoc detectors for novel deepfake algorithms.

Seven interchangeable scoring rules over classifier outputs — ``msp``,
``maxlogit``, ``energy``, ``knn``, ``mahalanobis``, ``nnguide`` and
``nsd`` — all oriented the same way: HIGHER means MORE in-distribution,
so one "score below threshold => novel algorithm" rule covers every
scorer. The bank-based scorers (knn, mahalanobis, nnguide, nsd) compare
test features against a :class:`TrainBank` built once from the training
split.

The nsd score for test sample i is

    Energy(l_i) * (1/m) * sum_j Energy(L_j) * <t_i, z_j>

with t_i / z_j the L2-normalized test / bank features and Energy the
temperature-1 logsumexp of a logit row. nnguide restricts the sum to the
k bank rows most similar to t_i (neighbors chosen by raw cosine), so at
k = m it collapses to nsd; we route that case through the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import kernels
from .containers import FeatureMatrix, _atomic_write_text
from .errors import ConfigError, CorruptionError, DataError, FormatError, NumericalError
from .numerics import l2_normalize_rows, logsumexp_rows, softmax

SCORER_KINDS = ("msp", "maxlogit", "energy", "knn", "mahalanobis", "nnguide", "nsd")

# Scorers that need a TrainBank / test logits; used by the config dispatcher.
_NEEDS_BANK = frozenset({"knn", "mahalanobis", "nnguide", "nsd"})
_NEEDS_LOGITS = frozenset({"msp", "maxlogit", "energy", "nnguide", "nsd"})
_NEEDS_FEATURES = frozenset({"knn", "mahalanobis", "nnguide", "nsd"})


def _as_2d(x, name: str) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.data
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DataError(f"{name} must be nonempty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} must be finite")
    return a


def _energy_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise Energy(l) = T * logsumexp(l / T); exact logsumexp at T=1."""
    if temperature == 1.0:
        return logsumexp_rows(logits)
    return temperature * logsumexp_rows(logits / temperature)


@dataclass(frozen=True)
class TrainBank:
    """Frozen snapshot of the training domain used by bank-based scorers.

    z holds the L2-normalized training features; energies the per-row
    logsumexp of the training logits. class_means / cov_inv are the shared
    ridge-regularized Mahalanobis statistics, present only when the bank
    was built with class labels (class_ids gives the row order of
    class_means).
    """

    z: FeatureMatrix
    energies: np.ndarray
    class_labels: np.ndarray = None
    class_ids: tuple = None
    class_means: np.ndarray = None
    cov_inv: np.ndarray = None

    def __post_init__(self):
        norms = np.linalg.norm(self.z.data, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise DataError("bank features must be L2-normalized")
        e = np.asarray(self.energies, dtype=np.float64)
        if e.shape != (self.z.n,) or not np.all(np.isfinite(e)):
            raise DataError(f"energies must be {self.z.n} finite values")
        e = e.copy()
        e.flags.writeable = False
        object.__setattr__(self, "energies", e)
        has_stats = [x is not None
                     for x in (self.class_labels, self.class_ids,
                               self.class_means, self.cov_inv)]
        if any(has_stats) and not all(has_stats):
            raise DataError("class statistics must be all present or all absent")
        if self.cov_inv is not None:
            d = self.z.d
            if self.cov_inv.shape != (d, d):
                raise DataError(f"cov_inv must be {d}x{d}")
            if not np.allclose(self.cov_inv, self.cov_inv.T, rtol=0, atol=1e-10):
                raise DataError("cov_inv must be symmetric")

    @property
    def m(self) -> int:
        return self.z.n

    @property
    def d(self) -> int:
        return self.z.d


def build_bank(train_features, train_logits, labels=None,
               ridge: float = 1e-6) -> TrainBank:
    """Normalize the training features, precompute their energies, and (if
    labels are given) cache the per-class means plus the inverse of the
    shared ridge-regularized covariance for the Mahalanobis scorer.

    The covariance is the pooled within-class scatter divided by m, with
    ridge * trace(cov)/d added to the diagonal before inversion; a matrix
    still singular after that raises NumericalError. A zero feature row
    raises DegenerateRowError.
    """
    f = _as_2d(train_features, "train features")
    l = _as_2d(train_logits, "train logits")
    if f.shape[0] != l.shape[0]:
        raise DataError(
            f"features have {f.shape[0]} rows but logits have {l.shape[0]}"
        )
    if ridge < 0:
        raise ConfigError(f"ridge must be nonnegative, got {ridge}")
    z = l2_normalize_rows(f)
    energies = logsumexp_rows(l)

    class_labels = class_ids = class_means = cov_inv = None
    if labels is not None:
        class_labels = np.array(labels, dtype=np.int64)  # copy: flags set below
        if class_labels.shape != (z.shape[0],):
            raise DataError(
                f"labels shape {class_labels.shape} != ({z.shape[0]},)"
            )
        class_ids = tuple(int(c) for c in np.unique(class_labels))
        d = z.shape[1]
        class_means = np.empty((len(class_ids), d))
        cov = np.zeros((d, d))
        for row, c in enumerate(class_ids):
            members = z[class_labels == c]
            class_means[row] = members.mean(axis=0)
            centered = members - class_means[row]
            cov += centered.T @ centered
        cov /= z.shape[0]
        cov += ridge * (np.trace(cov) / d) * np.eye(d)
        try:
            chol = cho_factor(cov, lower=True)
        except LinAlgError as exc:
            raise NumericalError(
                f"shared covariance is singular even after ridge={ridge}"
            ) from exc
        cov_inv = cho_solve(chol, np.eye(d))
        cov_inv = 0.5 * (cov_inv + cov_inv.T)
        class_labels.flags.writeable = False
        class_means.flags.writeable = False
        cov_inv.flags.writeable = False

    return TrainBank(
        z=FeatureMatrix(z, role="feature"),
        energies=energies,
        class_labels=class_labels,
        class_ids=class_ids,
        class_means=class_means,
        cov_inv=cov_inv,
    )


def score_msp(test_logits) -> np.ndarray:
    """Maximum softmax probability per row; in (1/c, 1]."""
    l = _as_2d(test_logits, "test logits")
    return np.max(softmax(l), axis=1)


def score_maxlogit(test_logits) -> np.ndarray:
    """Largest raw logit per row."""
    l = _as_2d(test_logits, "test logits")
    return np.max(l, axis=1)


def score_energy(test_logits, temperature: float = 1.0) -> np.ndarray:
    """Energy score T * logsumexp(l / T) per row (higher = more ID)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    l = _as_2d(test_logits, "test logits")
    return _energy_rows(l, temperature)


def score_knn(test_features, bank: TrainBank, k: int = 10) -> np.ndarray:
    """Negated Euclidean distance to the k-th nearest bank feature.

    Both sides are L2-normalized, so scores live in [-2, 0]; a test row
    identical to a bank row scores exactly 0 at k=1.
    """
    t = l2_normalize_rows(_as_2d(test_features, "test features"))
    return -kernels.kth_neighbor_distance(t, bank.z.data, k)


def score_mahalanobis(test_features, bank: TrainBank) -> np.ndarray:
    """Negated squared Mahalanobis distance to the nearest class mean,
    under the bank's shared ridge-regularized covariance. Always <= 0."""
    if bank.class_means is None:
        raise ConfigError("mahalanobis needs a bank built with class labels")
    t = l2_normalize_rows(_as_2d(test_features, "test features"))
    q = np.empty((t.shape[0], bank.class_means.shape[0]))
    for col, mu in enumerate(bank.class_means):
        diff = t - mu
        q[:, col] = np.einsum("ij,jk,ik->i", diff, bank.cov_inv, diff)
    # the quadratic form is nonnegative for an SPD inverse; clamp the
    # rounding noise so the <= 0 guarantee survives float arithmetic
    return -np.min(np.maximum(q, 0.0), axis=1)


def _nsd_core(test_z: np.ndarray, test_energy: np.ndarray,
              bank: TrainBank, block_size: int) -> np.ndarray:
    guide = kernels.mean_weighted_similarity(
        test_z, bank.z.data, bank.energies, block_size=block_size
    )
    return test_energy * guide


def score_nsd(test_features, test_logits, bank: TrainBank,
              block_size: int = 4096) -> np.ndarray:
    """Energy-scaled mean cosine similarity to the whole energy-weighted
    bank. The n x m similarity matrix is evaluated in blocks of
    ``block_size`` test rows, never materialized whole."""
    t = l2_normalize_rows(_as_2d(test_features, "test features"))
    l = _as_2d(test_logits, "test logits")
    if t.shape[0] != l.shape[0]:
        raise DataError(
            f"features have {t.shape[0]} rows but logits have {l.shape[0]}"
        )
    return _nsd_core(t, _energy_rows(l, 1.0), bank, block_size)


def score_nnguide(test_features, test_logits, bank: TrainBank,
                  k: int = 10, temperature: float = 1.0,
                  block_size: int = 4096) -> np.ndarray:
    """Like nsd but averaging only over each sample's k nearest bank rows
    (neighbors by raw cosine similarity). k = m is exactly nsd and is
    routed through the same code path."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    k = int(k)
    if not 1 <= k <= bank.m:
        raise ConfigError(f"k={k} outside 1..{bank.m}")
    t = l2_normalize_rows(_as_2d(test_features, "test features"))
    l = _as_2d(test_logits, "test logits")
    if t.shape[0] != l.shape[0]:
        raise DataError(
            f"features have {t.shape[0]} rows but logits have {l.shape[0]}"
        )
    te = _energy_rows(l, temperature)
    if k == bank.m:
        return _nsd_core(t, te, bank, block_size)
    guide = kernels.topk_weighted_similarity_mean(
        t, bank.z.data, bank.energies, k, block_size=block_size
    )
    return te * guide


@dataclass(frozen=True)
class OodScorerConfig:
    """Which scoring rule to run and its knobs.

    temperature applies to the energy family (energy, nnguide), k to the
    neighbor scorers (knn, nnguide; clamped to the bank size when
    dispatched through score_with_config), ridge to mahalanobis bank
    construction.
    """

    kind: str
    temperature: float = 1.0
    k: int = 10
    ridge: float = 1e-6

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise ConfigError(
                f"unknown scorer {self.kind!r}, expected one of {SCORER_KINDS}"
            )
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.ridge < 0:
            raise ConfigError(f"ridge must be nonnegative, got {self.ridge}")


def score_with_config(config: OodScorerConfig, test_features=None,
                      test_logits=None, bank: TrainBank = None) -> np.ndarray:
    """Dispatch to the scorer named by the config.

    Inputs the chosen scorer does not use may be omitted; a missing
    required input is a ConfigError. k is clamped to the bank size here
    (the direct score_* calls instead reject out-of-range k).
    """
    if config.kind in _NEEDS_BANK and bank is None:
        raise ConfigError(f"scorer {config.kind!r} needs a train bank")
    if config.kind in _NEEDS_LOGITS and test_logits is None:
        raise ConfigError(f"scorer {config.kind!r} needs test logits")
    if config.kind in _NEEDS_FEATURES and test_features is None:
        raise ConfigError(f"scorer {config.kind!r} needs test features")
    if config.kind == "msp":
        return score_msp(test_logits)
    if config.kind == "maxlogit":
        return score_maxlogit(test_logits)
    if config.kind == "energy":
        return score_energy(test_logits, temperature=config.temperature)
    if config.kind == "knn":
        return score_knn(test_features, bank, k=min(config.k, bank.m))
    if config.kind == "mahalanobis":
        return score_mahalanobis(test_features, bank)
    if config.kind == "nnguide":
        return score_nnguide(test_features, test_logits, bank,
                             k=min(config.k, bank.m),
                             temperature=config.temperature)
    return score_nsd(test_features, test_logits, bank)


def save_scores(utt_ids, scores, path) -> None:
    """Write a ``utt_id,score`` CSV; floats carry 17 significant digits so
    they round-trip exactly through f64."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if len(utt_ids) != s.shape[0]:
        raise DataError(f"{len(utt_ids)} ids for {s.shape[0]} scores")
    lines = ["utt_id,score"]
    for uid, v in zip(utt_ids, s):
        lines.append(f"{uid},{v:.17g}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_scores(path):
    """Read a scores CSV back as (utt_ids, scores)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "utt_id,score":
            raise FormatError(f"{path}: not a scores CSV (header {header!r})")
        ids, vals = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise CorruptionError(
                    f"{path}:{lineno}: expected 2 fields, got {len(parts)}"
                )
            ids.append(parts[0])
            try:
                vals.append(float(parts[1]))
            except ValueError as exc:
                raise CorruptionError(f"{path}:{lineno}: {exc}") from None
    if not vals:
        raise FormatError(f"{path}: no data rows")
    return ids, np.array(vals, dtype=np.float64)
