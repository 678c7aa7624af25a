"""Dual-stage inference, the one-stage baseline, and threshold selection.

The dual-stage procedure routes each eval sample through up to three
decisions: (1) an angular-score gate — samples at or above ``re_gate``
are declared real (class 0); (2) an OOD score against the training bank
— samples below ``ood_threshold`` are declared a novel algorithm (class
7); (3) the fake-algorithm classifier's argmax over classes 1..6. The
one-stage baseline skips the gate and argmaxes classes 0..6 directly,
with the same OOD escape hatch.

``sweep_threshold`` picks the OOD threshold maximizing macro-F1
exactly: macro-F1 is piecewise constant in the threshold, so evaluating
the midpoints between consecutive sorted unique scores (plus the two
infinite sentinels) covers every achievable value — no grid
approximation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .containers import FeatureMatrix, _atomic_write_text
from .errors import ConfigError, CorruptionError, DataError, FormatError
from .metrics import NUM_CLASSES, confusion_matrix, f1_per_class, macro_f1
from .mlp import MlpModel, forward
from .ood import OodScorerConfig, TrainBank, build_bank, score_with_config

STAGE_NAMES = ("real_gate", "id_fake", "ood_fake")

SWEEP = "sweep"  # sentinel value for RefdConfig.ood_threshold


@dataclass(frozen=True)
class RefdConfig:
    """Knobs of the dual-stage pipeline.

    ood_threshold is either a resolved real number or the string
    "sweep", meaning "pick it with sweep_threshold before inference".
    """

    re_gate: float = 0.98
    ood_scorer: OodScorerConfig = field(default=OodScorerConfig(kind="nsd"))
    ood_threshold: object = SWEEP
    ood_class: int = 7

    def __post_init__(self):
        if not -1.0 <= self.re_gate <= 1.0:
            raise ConfigError(f"re_gate must lie in [-1, 1], got {self.re_gate}")
        t = self.ood_threshold
        if isinstance(t, str):
            if t != SWEEP:
                raise ConfigError(f"ood_threshold must be a real or {SWEEP!r}")
        else:
            t = float(t)
            if math.isnan(t):
                raise ConfigError("ood_threshold must not be NaN")
            object.__setattr__(self, "ood_threshold", t)
        if not 1 <= self.ood_class < NUM_CLASSES:
            raise ConfigError(f"ood_class must lie in 1..{NUM_CLASSES - 1}")


@dataclass(frozen=True)
class Prediction:
    """One routed eval sample.

    oc_score is None when the gate never ran (one-stage baseline);
    ood_score is None when the OOD stage never ran (sample was gated).
    """

    utt_id: str
    predicted_class: int
    stage: str
    oc_score: float = None
    ood_score: float = None

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise DataError(f"unknown stage {self.stage!r}")
        c = self.predicted_class
        if not 0 <= c < NUM_CLASSES:
            raise DataError(f"predicted_class must lie in 0..{NUM_CLASSES - 1}")
        if (self.stage == "real_gate") != (c == 0):
            raise DataError("stage real_gate is exactly the class-0 outcome")
        if (self.stage == "ood_fake") != (c == NUM_CLASSES - 1):
            raise DataError("stage ood_fake is exactly the novel-class outcome")


def _default_ids(n: int) -> list:
    return [f"r{i}" for i in range(n)]


def _check_ids(utt_ids, n: int) -> list:
    if utt_ids is None:
        return _default_ids(n)
    utt_ids = [str(u) for u in utt_ids]
    if len(utt_ids) != n:
        raise DataError(f"{len(utt_ids)} utt_ids for {n} rows")
    return utt_ids


def _require_stage(model: MlpModel, stage: str) -> None:
    if model.stage != stage:
        raise ConfigError(f"model is stage {model.stage!r}, expected {stage!r}")


def _argmax_classes(logits: np.ndarray, class_ids) -> np.ndarray:
    # np.argmax takes the first maximum, so ties land on the lowest
    # class id (class_ids are ascending)
    ids = np.asarray(class_ids, dtype=np.int64)
    return ids[np.argmax(logits, axis=1)]


def _refd_parts(re_model, fd_model, eval_raw, cfg: RefdConfig, bank: TrainBank):
    """Everything threshold-independent: oc scores, the gate mask, OOD
    scores (gated rows pinned to +inf so no threshold flips a gated
    sample), and the base classes at threshold -inf."""
    _require_stage(re_model, "RE")
    _require_stage(fd_model, "FD")
    oc = forward(re_model, eval_raw).oc_scores
    fd = forward(fd_model, eval_raw)
    ood = score_with_config(cfg.ood_scorer, test_features=fd.features,
                            test_logits=fd.logits, bank=bank)
    gated = oc >= cfg.re_gate
    base = np.where(gated, 0, _argmax_classes(fd.logits.data, fd_model.class_ids))
    masked = np.where(gated, np.inf, ood)
    return oc, gated, ood, masked, base


def refd_sweep_inputs(re_model, fd_model, eval_raw, cfg: RefdConfig,
                      bank: TrainBank):
    """(scores, base_predictions) ready for sweep_threshold: gated rows
    carry score +inf, which no threshold exceeds, so the sweep can never
    relabel a gated-real sample as novel."""
    _, _, _, masked, base = _refd_parts(re_model, fd_model, eval_raw, cfg, bank)
    return masked, base


def infer_refd(re_model, fd_model, eval_raw, cfg: RefdConfig,
               bank: TrainBank, utt_ids=None) -> list:
    """Run the full dual-stage decision per sample; cfg.ood_threshold
    must already be a number (run the sweep first)."""
    if cfg.ood_threshold == SWEEP:
        raise ConfigError("ood_threshold is unresolved; run sweep_threshold first")
    oc, gated, ood, masked, base = _refd_parts(re_model, fd_model, eval_raw,
                                               cfg, bank)
    utt_ids = _check_ids(utt_ids, oc.shape[0])
    out = []
    for i, uid in enumerate(utt_ids):
        if gated[i]:
            out.append(Prediction(uid, 0, "real_gate",
                                  oc_score=float(oc[i]), ood_score=None))
        elif masked[i] < cfg.ood_threshold:
            out.append(Prediction(uid, cfg.ood_class, "ood_fake",
                                  oc_score=float(oc[i]),
                                  ood_score=float(ood[i])))
        else:
            out.append(Prediction(uid, int(base[i]), "id_fake",
                                  oc_score=float(oc[i]),
                                  ood_score=float(ood[i])))
    return out


def one_stage_sweep_inputs(model, eval_raw, ood_scorer: OodScorerConfig,
                           bank: TrainBank):
    """(scores, base_predictions) for sweeping the one-stage baseline."""
    _require_stage(model, "one-stage")
    out = forward(model, eval_raw)
    ood = score_with_config(ood_scorer, test_features=out.features,
                            test_logits=out.logits, bank=bank)
    base = _argmax_classes(out.logits.data, model.class_ids)
    return ood, base


def infer_one_stage(model, eval_raw, ood_scorer: OodScorerConfig,
                    ood_threshold: float, bank: TrainBank,
                    utt_ids=None, ood_class: int = 7) -> list:
    """One-stage baseline: argmax over classes 0..6 with an OOD escape.

    Real is an ordinary ID class here, so there is no angular gate and
    oc_score stays None; a class-0 argmax still reports stage real_gate
    to keep the stage/class pairing uniform across pipelines.
    """
    if isinstance(ood_threshold, str):
        raise ConfigError("ood_threshold is unresolved; run sweep_threshold first")
    ood, base = one_stage_sweep_inputs(model, eval_raw, ood_scorer, bank)
    utt_ids = _check_ids(utt_ids, ood.shape[0])
    thr = float(ood_threshold)
    out = []
    for i, uid in enumerate(utt_ids):
        if ood[i] < thr:
            out.append(Prediction(uid, ood_class, "ood_fake",
                                  ood_score=float(ood[i])))
        else:
            c = int(base[i])
            stage = "real_gate" if c == 0 else "id_fake"
            out.append(Prediction(uid, c, stage, ood_score=float(ood[i])))
    return out


def _midpoint(a: float, b: float) -> float:
    # a + (b-a)/2 rather than (a+b)/2: immune to same-sign overflow, and
    # b = +inf degenerates to +inf, which dedupes with the top sentinel.
    # a = -inf would give nan, so fall back to b itself (any threshold in
    # (-inf, b] separates the groups identically).
    if a == -math.inf:
        return b
    return a + (b - a) / 2.0


def sweep_threshold(scores, base_predictions, labels, ood_class: int = 7,
                    class_set=None):
    """Exact max-macro-F1 threshold search.

    A sample flips to ood_class wherever its score < threshold. Returns
    (best_threshold, best_macro_f1, curve) with curve the full
    (threshold, macro_f1) list over all candidates, thresholds
    ascending. Ties go to the smallest threshold. Candidates are the
    midpoints between consecutive sorted unique scores plus -inf (nothing
    flipped) and +inf (everything finite flipped); macro-F1 is constant
    between consecutive scores, so this scan is exhaustive.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    base = np.asarray(base_predictions, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if s.size == 0:
        raise DataError("empty score vector")
    if not (s.shape == base.shape == y.shape):
        raise DataError(
            f"misaligned inputs: {s.shape}, {base.shape}, {y.shape}"
        )
    if np.any(np.isnan(s)):
        raise DataError("scores must not contain NaN")
    for name, v in (("base_predictions", base), ("labels", y)):
        if np.any((v < 0) | (v >= NUM_CLASSES)):
            raise DataError(f"{name} must lie in 0..{NUM_CLASSES - 1}")
    if class_set is None:
        class_set = tuple(range(NUM_CLASSES))
    class_set = tuple(int(c) for c in class_set)

    pred_count = np.bincount(base, minlength=NUM_CLASSES)
    true_count = np.bincount(y, minlength=NUM_CLASSES)
    tp = np.bincount(y[base == y], minlength=NUM_CLASSES)

    def current_macro() -> float:
        # same arithmetic as metrics.f1_per_class + metrics.macro_f1, so
        # the sweep agrees bit-for-bit with a recompute-from-scratch scan
        vals = []
        for c in class_set:
            denom = int(pred_count[c]) + int(true_count[c])
            vals.append(2.0 * int(tp[c]) / denom if denom else 0.0)
        return float(sum(vals) / len(vals))

    uniq = np.unique(s)
    candidates = [-math.inf]
    for a, b in zip(uniq[:-1], uniq[1:]):
        candidates.append(_midpoint(float(a), float(b)))
    candidates.append(math.inf)

    order = np.argsort(s, kind="stable")
    svals = s[order]
    n = s.size
    ptr = 0
    best_t = best_f = None
    curve = []
    last_t = None
    for t in candidates:
        if t == last_t:  # duplicate candidate (inf midpoint + sentinel)
            continue
        last_t = t
        while ptr < n and svals[ptr] < t:
            i = order[ptr]
            c = int(base[i])
            pred_count[c] -= 1
            pred_count[ood_class] += 1
            if y[i] == c:
                tp[c] -= 1
            if y[i] == ood_class:
                tp[ood_class] += 1
            ptr += 1
        f = current_macro()
        curve.append((float(t), f))
        if best_f is None or f > best_f:
            best_f, best_t = f, float(t)
    return best_t, best_f, curve


def build_model_bank(model: MlpModel, train_raw, labels=None,
                     ridge: float = 1e-6) -> TrainBank:
    """Snapshot a classifier's features+logits over its training inputs
    into the bank the OOD scorers compare against."""
    out = forward(model, train_raw)
    if out.logits is None:
        raise ConfigError("bank needs a classifier head, not the gate model")
    return build_bank(out.features, out.logits, labels=labels, ridge=ridge)


@dataclass(frozen=True)
class EvalReport:
    """Evaluation summary: per-class F1, their mean, the confusion
    matrix, plus enough context (thresholds, config echo, seed) to rerun."""

    per_class_f1: dict
    macro_f1: float
    confusion: tuple  # 8x8 nested tuples of ints, truth x predicted
    thresholds: dict
    config: dict
    seed: int
    timestamp: str = None

    def __post_init__(self):
        mean = sum(self.per_class_f1.values()) / len(self.per_class_f1)
        if abs(mean - self.macro_f1) > 1e-9:
            raise DataError("macro_f1 is not the mean of per_class_f1")


def build_report(predictions, labels, thresholds: dict, config: dict,
                 seed: int, class_set=None, timestamp=None) -> EvalReport:
    """Score a prediction list (or plain class vector) against labels."""
    if predictions and isinstance(predictions[0], Prediction):
        pred = np.array([p.predicted_class for p in predictions], dtype=np.int64)
    else:
        pred = np.asarray(predictions, dtype=np.int64)
    if class_set is None:
        class_set = tuple(range(NUM_CLASSES))
    per_class = f1_per_class(pred, labels, class_set)
    conf = confusion_matrix(pred, labels)
    return EvalReport(
        per_class_f1=per_class,
        macro_f1=macro_f1(per_class),
        confusion=tuple(tuple(int(v) for v in row) for row in conf),
        thresholds=dict(thresholds),
        config=dict(config),
        seed=int(seed),
        timestamp=timestamp,
    )


def report_to_json(report: EvalReport) -> str:
    """Canonical JSON: sorted keys, 2-space indent, trailing newline.
    Two runs of the same evaluation differ at most in "timestamp"."""
    doc = {
        "per_class_f1": {str(c): v for c, v in report.per_class_f1.items()},
        "macro_f1": report.macro_f1,
        "confusion": [list(row) for row in report.confusion],
        "thresholds": report.thresholds,
        "config": report.config,
        "seed": report.seed,
        "tool_version": __version__,
    }
    if report.timestamp is not None:
        doc["timestamp"] = report.timestamp
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def save_report(report: EvalReport, path) -> None:
    _atomic_write_text(path, report_to_json(report))


def load_report(path) -> dict:
    """Read a report file back as a plain dict."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a report JSON ({exc})") from None


def _fmt_opt(v) -> str:
    return "" if v is None else f"{v:.17g}"


def save_predictions(predictions, path) -> None:
    """Write the prediction CSV; absent scores become empty fields."""
    lines = ["utt_id,predicted_class,stage,oc_score,ood_score"]
    for p in predictions:
        lines.append(
            f"{p.utt_id},{p.predicted_class},{p.stage},"
            f"{_fmt_opt(p.oc_score)},{_fmt_opt(p.ood_score)}"
        )
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_predictions(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "utt_id,predicted_class,stage,oc_score,ood_score":
            raise FormatError(f"{path}: not a predictions CSV (header {header!r})")
        out = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise CorruptionError(
                    f"{path}:{lineno}: expected 5 fields, got {len(parts)}"
                )
            try:
                out.append(Prediction(
                    utt_id=parts[0],
                    predicted_class=int(parts[1]),
                    stage=parts[2],
                    oc_score=float(parts[3]) if parts[3] else None,
                    ood_score=float(parts[4]) if parts[4] else None,
                ))
            except (ValueError, DataError) as exc:
                raise CorruptionError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise FormatError(f"{path}: no data rows")
    return out
