"""Dual-stage routing, the one-stage baseline, and the exact threshold
sweep, checked against handcrafted models and a recompute-from-scratch
scan oracle."""

import json
import math
import warnings

import numpy as np
import pytest

from refd.errors import ConfigError, CorruptionError, DataError, FormatError
from refd.metrics import f1_per_class, macro_f1
from refd.mlp import MlpModel
from refd.ood import OodScorerConfig
from refd.pipeline import (
    EvalReport,
    Prediction,
    RefdConfig,
    build_model_bank,
    build_report,
    infer_one_stage,
    infer_refd,
    load_predictions,
    load_report,
    one_stage_sweep_inputs,
    refd_sweep_inputs,
    report_to_json,
    save_predictions,
    save_report,
    sweep_threshold,
)

D = 4
_I = np.eye(D)
_Z = np.zeros(D)


def re_model():
    # identity trunk: features == raw input (for nonnegative inputs), so
    # the gate score is just cos(x, e0)
    return MlpModel("RE", _I, _Z, _I, _Z, head_w0=np.array([1.0, 0, 0, 0]))


def fd_model():
    head = np.zeros((D, 6))
    head[np.arange(D), np.arange(D)] = 1.0  # logits = (x0, x1, x2, x3, 0, 0)
    return MlpModel("FD", _I, _Z, _I, _Z, head_W=head, head_b=np.zeros(6),
                    class_ids=(1, 2, 3, 4, 5, 6))


def one_stage_model():
    head = np.zeros((D, 7))
    head[np.arange(D), np.arange(D)] = 1.0
    head[0, 4] = 1.0  # column 4 copies column 0, for tie tests
    return MlpModel("one-stage", _I, _Z, _I, _Z, head_W=head,
                    head_b=np.zeros(7), class_ids=tuple(range(7)))


def rand_model(rng, stage, class_ids=(), d_raw=5):
    W1 = rng.normal(size=(d_raw, 6))
    W2 = rng.normal(size=(6, 4))
    b1, b2 = rng.normal(size=6), rng.normal(size=4)
    if stage == "RE":
        return MlpModel("RE", W1, b1, W2, b2, head_w0=rng.normal(size=4))
    return MlpModel(stage, W1, b1, W2, b2,
                    head_W=rng.normal(size=(4, len(class_ids))),
                    head_b=rng.normal(size=len(class_ids)),
                    class_ids=class_ids)


@pytest.fixture()
def bank():
    rng = np.random.default_rng(0)
    train = np.abs(rng.normal(size=(30, D))) + 0.1
    return build_model_bank(fd_model(), train)


class TestRefdConfig:
    def test_defaults(self):
        cfg = RefdConfig()
        assert cfg.re_gate == 0.98
        assert cfg.ood_threshold == "sweep"
        assert cfg.ood_scorer.kind == "nsd"
        assert cfg.ood_class == 7

    def test_gate_range(self):
        for g in (-1.5, 1.01):
            with pytest.raises(ConfigError):
                RefdConfig(re_gate=g)

    def test_threshold_forms(self):
        assert RefdConfig(ood_threshold=0.25).ood_threshold == 0.25
        with pytest.raises(ConfigError):
            RefdConfig(ood_threshold="later")
        with pytest.raises(ConfigError):
            RefdConfig(ood_threshold=float("nan"))


class TestPrediction:
    def test_stage_class_coupling(self):
        Prediction("a", 0, "real_gate", oc_score=0.99)
        Prediction("b", 7, "ood_fake", ood_score=-1.0)
        Prediction("c", 3, "id_fake")
        with pytest.raises(DataError):
            Prediction("d", 1, "real_gate")
        with pytest.raises(DataError):
            Prediction("e", 0, "id_fake")
        with pytest.raises(DataError):
            Prediction("f", 6, "ood_fake")
        with pytest.raises(DataError):
            Prediction("g", 8, "id_fake")

    def test_unknown_stage(self):
        with pytest.raises(DataError):
            Prediction("h", 2, "maybe_fake")


class TestInferRefd:
    def test_gate_takes_high_cosine(self, bank):
        x = np.array([[1.0, 0.01, 0.0, 0.0]])
        cfg = RefdConfig(ood_threshold=-math.inf)
        (p,) = infer_refd(re_model(), fd_model(), x, cfg, bank, utt_ids=["u"])
        assert p.predicted_class == 0 and p.stage == "real_gate"
        assert p.oc_score >= 0.98 and p.ood_score is None

    def test_low_score_below_threshold_is_novel(self, bank):
        x = np.array([[1.0, 1.0, 0.0, 0.0]])
        cfg = RefdConfig(ood_threshold=math.inf)
        (p,) = infer_refd(re_model(), fd_model(), x, cfg, bank)
        assert p.predicted_class == 7 and p.stage == "ood_fake"
        assert p.oc_score == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        assert p.ood_score is not None and math.isfinite(p.ood_score)

    def test_survivor_gets_argmax_plus_one(self, bank):
        x = np.array([[0.0, 0.0, 5.0, 0.0]])
        cfg = RefdConfig(ood_threshold=-math.inf)
        (p,) = infer_refd(re_model(), fd_model(), x, cfg, bank)
        assert p.predicted_class == 3 and p.stage == "id_fake"

    def test_argmax_tie_takes_lowest_class(self, bank):
        x = np.array([[2.0, 2.0, 0.0, 0.0]])
        cfg = RefdConfig(ood_threshold=-math.inf)
        (p,) = infer_refd(re_model(), fd_model(), x, cfg, bank)
        assert p.predicted_class == 1

    def test_stage_tags_partition(self, bank):
        rng = np.random.default_rng(1)
        x = np.abs(rng.normal(size=(60, D)))
        cfg = RefdConfig(re_gate=0.9, ood_threshold=float(np.median(bank.energies)))
        preds = infer_refd(re_model(), fd_model(), x, cfg, bank)
        assert len(preds) == 60
        for p in preds:
            if p.stage == "real_gate":
                assert p.predicted_class == 0 and p.ood_score is None
            elif p.stage == "ood_fake":
                assert p.predicted_class == 7
            else:
                assert 1 <= p.predicted_class <= 6

    def test_gate_monotonicity(self, bank):
        rng = np.random.default_rng(2)
        x = np.abs(rng.normal(size=(80, D)))
        counts = []
        for gate in (-1.0, 0.0, 0.5, 0.9, 0.99, 1.0):
            cfg = RefdConfig(re_gate=gate, ood_threshold=-math.inf)
            preds = infer_refd(re_model(), fd_model(), x, cfg, bank)
            counts.append(sum(p.predicted_class == 0 for p in preds))
        assert counts == sorted(counts, reverse=True)

    def test_threshold_monotonicity(self, bank):
        rng = np.random.default_rng(3)
        x = np.abs(rng.normal(size=(80, D)))
        scores, _ = refd_sweep_inputs(re_model(), fd_model(), x,
                                      RefdConfig(), bank)
        grid = [-math.inf, *np.quantile(scores[np.isfinite(scores)],
                                        [0.1, 0.5, 0.9]), math.inf]
        counts = []
        for t in grid:
            cfg = RefdConfig(ood_threshold=float(t))
            preds = infer_refd(re_model(), fd_model(), x, cfg, bank)
            counts.append(sum(p.predicted_class == 7 for p in preds))
        assert counts == sorted(counts)

    def test_unresolved_threshold_rejected(self, bank):
        with pytest.raises(ConfigError):
            infer_refd(re_model(), fd_model(), np.abs(np.eye(D)),
                       RefdConfig(), bank)

    def test_stage_mismatch_rejected(self, bank):
        cfg = RefdConfig(ood_threshold=0.0)
        with pytest.raises(ConfigError):
            infer_refd(fd_model(), fd_model(), np.eye(D), cfg, bank)
        with pytest.raises(ConfigError):
            infer_refd(re_model(), one_stage_model(), np.eye(D), cfg, bank)

    def test_sweep_inputs_pin_gated_rows(self, bank):
        x = np.array([[1.0, 0.001, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
        scores, base = refd_sweep_inputs(re_model(), fd_model(), x,
                                         RefdConfig(), bank)
        assert scores[0] == math.inf and math.isfinite(scores[1])
        assert base[0] == 0 and base[1] == 1

    def test_matches_sweep_semantics(self, bank):
        rng = np.random.default_rng(4)
        x = np.abs(rng.normal(size=(50, D)))
        cfg0 = RefdConfig()
        scores, base = refd_sweep_inputs(re_model(), fd_model(), x, cfg0, bank)
        thr = float(np.median(scores[np.isfinite(scores)]))
        preds = infer_refd(re_model(), fd_model(), x,
                           RefdConfig(ood_threshold=thr), bank)
        expected = np.where(scores < thr, 7, base)
        np.testing.assert_array_equal([p.predicted_class for p in preds],
                                      expected)


class TestInferOneStage:
    def test_below_threshold_is_novel(self, bank):
        x = np.array([[0.0, 3.0, 0.0, 0.0]])
        preds = infer_one_stage(one_stage_model(), x,
                                OodScorerConfig(kind="nsd"), math.inf, bank)
        assert preds[0].predicted_class == 7
        assert preds[0].stage == "ood_fake"
        assert preds[0].oc_score is None

    def test_real_is_an_id_class(self, bank):
        x = np.array([[4.0, 1.0, 0.0, 0.0]])
        (p,) = infer_one_stage(one_stage_model(), x,
                               OodScorerConfig(kind="nsd"), -math.inf, bank)
        assert p.predicted_class == 0 and p.stage == "real_gate"
        assert p.oc_score is None

    def test_logit_tie_takes_class_zero(self, bank):
        # crafted head copies logit 0 into logit 4, so this input ties
        x = np.array([[1.0, 0.0, 0.0, 0.0]])
        (p,) = infer_one_stage(one_stage_model(), x,
                               OodScorerConfig(kind="nsd"), -math.inf, bank)
        assert p.predicted_class == 0

    def test_stage_mismatch(self, bank):
        with pytest.raises(ConfigError):
            infer_one_stage(fd_model(), np.eye(D),
                            OodScorerConfig(kind="nsd"), 0.0, bank)

    def test_unresolved_threshold(self, bank):
        with pytest.raises(ConfigError):
            infer_one_stage(one_stage_model(), np.eye(D),
                            OodScorerConfig(kind="nsd"), "sweep", bank)


def scan_oracle(s, base, y, class_set=tuple(range(8)), ood_class=7):
    """Exhaustive threshold scan, recomputing predictions from scratch at
    every candidate position."""
    uniq = np.unique(s)
    cands = [-np.inf]
    for a, b in zip(uniq[:-1], uniq[1:]):
        cands.append(b if a == -np.inf else a + (b - a) / 2)
    cands.append(np.inf)
    best = None
    for t in cands:
        pred = np.where(s < t, ood_class, base)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f = macro_f1(f1_per_class(pred, y, class_set))
        if best is None or f > best[1]:
            best = (float(t), f)
    return best


class TestSweepThreshold:
    def test_separable_hand_case(self):
        scores = np.array([5.0, 4.0, 3.0, 1.0, 2.0])
        base = np.array([1, 2, 3, 1, 2])
        labels = np.array([1, 2, 3, 7, 7])
        t, f, curve = sweep_threshold(scores, base, labels,
                                      class_set=(1, 2, 3, 7))
        assert 2.0 < t < 3.0
        assert f == 1.0
        assert t == 2.5  # midpoint

    def test_minus_inf_sentinel_is_no_ood(self):
        scores = np.array([0.3, 0.1, 0.7])
        base = np.array([1, 2, 3])
        labels = np.array([1, 2, 7])
        _, _, curve = sweep_threshold(scores, base, labels)
        t0, f0 = curve[0]
        assert t0 == -math.inf
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert f0 == macro_f1(f1_per_class(base, labels, range(8)))

    def test_all_equal_scores_degenerate(self):
        scores = np.full(6, 2.0)
        base = np.full(6, 1)
        labels = np.full(6, 7)
        t, f, curve = sweep_threshold(scores, base, labels, class_set=(7,))
        assert [c[0] for c in curve] == [-math.inf, math.inf]
        assert t == math.inf and f == 1.0

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            n = int(rng.integers(1, 400))
            s = np.round(rng.normal(size=n), 1)  # coarse: forces ties
            base = rng.integers(0, 7, size=n)
            y = rng.integers(0, 8, size=n)
            t, f, _ = sweep_threshold(s, base, y)
            ot, of = scan_oracle(s, base, y)
            assert f == of and t == ot

    def test_score_order_invariance(self):
        rng = np.random.default_rng(6)
        s = np.round(rng.normal(size=200), 1)
        base = rng.integers(0, 7, size=200)
        y = rng.integers(0, 8, size=200)
        t1, f1, _ = sweep_threshold(s, base, y)
        t2, f2, _ = sweep_threshold(2.0 * s + 1.0, base, y)
        assert f1 == f2
        np.testing.assert_array_equal(s < t1, 2.0 * s + 1.0 < t2)

    def test_plus_inf_scores_never_flip(self):
        scores = np.array([math.inf, 1.0])
        base = np.array([0, 3])
        labels = np.array([0, 7])
        t, f, _ = sweep_threshold(scores, base, labels, class_set=(0, 7))
        assert f == 1.0
        assert t == math.inf  # only candidate that flips the finite score

    def test_first_best_threshold_wins_ties(self):
        # every threshold scores identically here: all classes right
        scores = np.array([1.0, 2.0])
        base = np.array([1, 1])
        labels = np.array([1, 1])
        t, f, curve = sweep_threshold(scores, base, labels, class_set=(1,))
        assert t == -math.inf  # smallest candidate, ties resolved downward
        assert f == curve[0][1]

    def test_curve_thresholds_ascend(self):
        rng = np.random.default_rng(7)
        s = np.round(rng.normal(size=100), 1)
        _, _, curve = sweep_threshold(s, rng.integers(0, 7, 100),
                                      rng.integers(0, 8, 100))
        ts = [c[0] for c in curve]
        assert all(a < b for a, b in zip(ts[:-1], ts[1:]))

    def test_input_validation(self):
        with pytest.raises(DataError):
            sweep_threshold([], [], [])
        with pytest.raises(DataError):
            sweep_threshold([1.0, float("nan")], [1, 1], [1, 1])
        with pytest.raises(DataError):
            sweep_threshold([1.0], [1, 2], [1])
        with pytest.raises(DataError):
            sweep_threshold([1.0], [9], [1])

    def test_one_stage_sweep_inputs_shape(self, bank):
        rng = np.random.default_rng(8)
        x = np.abs(rng.normal(size=(20, D)))
        scores, base = one_stage_sweep_inputs(one_stage_model(), x,
                                              OodScorerConfig(kind="nsd"), bank)
        assert scores.shape == (20,) and base.shape == (20,)
        assert np.all((base >= 0) & (base <= 6))


class TestBuildModelBank:
    def test_gate_model_rejected(self):
        with pytest.raises(ConfigError):
            build_model_bank(re_model(), np.abs(np.eye(D)))

    def test_bank_size_and_labels(self):
        rng = np.random.default_rng(9)
        x = np.abs(rng.normal(size=(25, D))) + 0.1
        y = rng.integers(1, 4, size=25)
        b = build_model_bank(fd_model(), x, labels=y)
        assert b.m == 25
        assert b.class_means is not None


class TestEvalReport:
    @staticmethod
    def _report(timestamp=None):
        preds = [Prediction("a", 1, "id_fake"), Prediction("b", 7, "ood_fake"),
                 Prediction("c", 0, "real_gate"), Prediction("d", 2, "id_fake")]
        labels = [1, 7, 0, 3]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return build_report(preds, labels,
                                thresholds={"re_gate": 0.98, "ood": 0.5},
                                config={"scorer": "nsd"}, seed=42,
                                timestamp=timestamp)

    def test_macro_is_mean(self):
        r = self._report()
        assert r.macro_f1 == pytest.approx(
            sum(r.per_class_f1.values()) / 8, abs=1e-15
        )

    def test_macro_mismatch_rejected(self):
        r = self._report()
        with pytest.raises(DataError):
            EvalReport(per_class_f1=r.per_class_f1, macro_f1=0.9999,
                       confusion=r.confusion, thresholds={}, config={}, seed=0)

    def test_confusion_row_sums_are_truth_counts(self):
        r = self._report()
        rows = [sum(row) for row in r.confusion]
        assert rows == [1, 1, 0, 1, 0, 0, 0, 1]

    def test_json_deterministic_modulo_timestamp(self):
        a = json.loads(report_to_json(self._report(timestamp="2026-01-01")))
        b = json.loads(report_to_json(self._report(timestamp="2026-02-02")))
        assert a != b
        del a["timestamp"], b["timestamp"]
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_json_identical_without_timestamp(self):
        assert report_to_json(self._report()) == report_to_json(self._report())

    def test_json_carries_version_and_config(self):
        doc = json.loads(report_to_json(self._report()))
        assert doc["tool_version"] and doc["config"] == {"scorer": "nsd"}
        assert doc["seed"] == 42
        assert set(doc["per_class_f1"]) == {str(c) for c in range(8)}

    def test_save_load_round_trip(self, tmp_path):
        r = self._report(timestamp="t0")
        p = tmp_path / "report.json"
        save_report(r, p)
        assert load_report(p) == json.loads(report_to_json(r))

    def test_load_rejects_non_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("not json {")
        with pytest.raises(FormatError):
            load_report(p)

    def test_plain_vector_input(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r = build_report([0, 1, 7], [0, 1, 7], thresholds={}, config={},
                             seed=0)
        assert r.macro_f1 == pytest.approx(3 / 8)


class TestPredictionsCsv:
    def test_round_trip(self, tmp_path):
        preds = [
            Prediction("u0", 0, "real_gate", oc_score=0.991, ood_score=None),
            Prediction("u1", 7, "ood_fake", oc_score=0.5, ood_score=-1.25),
            Prediction("u2", 4, "id_fake", oc_score=1 / 3, ood_score=2 / 3),
            Prediction("u3", 3, "id_fake", oc_score=None, ood_score=0.125),
        ]
        p = tmp_path / "preds.csv"
        save_predictions(preds, p)
        assert load_predictions(p) == preds

    def test_header_and_empty_fields(self, tmp_path):
        p = tmp_path / "preds.csv"
        save_predictions([Prediction("x", 0, "real_gate", oc_score=0.5)], p)
        lines = p.read_text().splitlines()
        assert lines[0] == "utt_id,predicted_class,stage,oc_score,ood_score"
        assert lines[1] == "x,0,real_gate,0.5,"

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("utt,cls\na,1\n")
        with pytest.raises(FormatError):
            load_predictions(p)

    def test_inconsistent_row_is_corruption(self, tmp_path):
        p = tmp_path / "bad2.csv"
        p.write_text("utt_id,predicted_class,stage,oc_score,ood_score\n"
                     "a,3,real_gate,0.5,0.5\n")
        with pytest.raises(CorruptionError):
            load_predictions(p)
