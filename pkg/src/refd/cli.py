"""Command-line front end: reproducible runs over the whole toolchain.

    refd gen-synth --out data/
    refd train-re --data data/ --out re.mlp
    refd train-fd --data data/ --out fd.mlp
    refd train-onestage --data data/ --out one.mlp
    refd score --model fd.mlp --data data/ --scorer all --out scores/
    refd sweep --re-model re.mlp --fd-model fd.mlp --data data/ --out curve.csv
    refd infer --re-model re.mlp --fd-model fd.mlp --data data/ \\
               --threshold 1.25 --out preds.csv
    refd eval --predictions preds.csv --data data/ --out report.json
    refd report --in report.json --label NSD --out-prefix tables

Configuration: ``--config FILE`` names a JSON file with optional
sections "synth", "train", "scorer" whose entries fill the matching
dataclass fields; explicit flags override file values, file values
override defaults. Every run writes a JSON run-log (next to its primary
output) echoing the effective config, the seed, the tool version, and
every artifact the run wrote.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error.

Environment: ``REFD_OUT_DIR`` prefixes relative ``--out`` paths;
``REFD_NUM_THREADS`` caps the BLAS thread pools (set before numpy
loads, i.e. only effective through this entry point).
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from dataclasses import asdict

from . import __version__
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    DegenerateRowError,
    FormatError,
    NumericalError,
)

SCORER_CHOICES = ("msp", "maxlogit", "energy", "knn", "mahalanobis",
                  "nnguide", "nsd")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _resolve_out(path: str, parent: bool = False) -> str:
    base = os.environ.get("REFD_OUT_DIR")
    if base and not os.path.isabs(path):
        path = os.path.join(base, path)
    if parent:
        # file outputs create their parent directory; directory outputs
        # are made by the handlers themselves
        head = os.path.dirname(path)
        if head:
            os.makedirs(head, exist_ok=True)
    return path


def _load_config_section(path, section: str) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a JSON config ({exc})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config root must be an object")
    sub = doc.get(section, {})
    if not isinstance(sub, dict):
        raise FormatError(f"{path}: section {section!r} must be an object")
    return dict(sub)


def _build_config(cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} config: {exc}") from None


def _override(kwargs: dict, args, pairs) -> dict:
    """Apply flag > file precedence: copy non-None flag values in."""
    for attr, field in pairs:
        v = getattr(args, attr)
        if v is not None:
            kwargs[field] = v
    return kwargs


def _int_keys(counts: dict) -> dict:
    return {
        split: {int(c): int(n) for c, n in per.items()}
        for split, per in counts.items()
    }


def _write_runlog(path, command: str, config: dict, seed, outputs) -> None:
    from .containers import _atomic_write_text

    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "outputs": [str(p) for p in outputs],
        "timestamp": _utc_now(),
    }
    _atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _train_config(args):
    from .training import TrainConfig

    kwargs = _load_config_section(args.config, "train")
    _override(kwargs, args, [
        ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
        ("seed", "seed"), ("hidden_dim", "hidden_dim"),
        ("feature_dim", "feature_dim"), ("eta", "mix_eta"),
    ])
    return _build_config(TrainConfig, kwargs)


def _scorer_config(args):
    from .ood import OodScorerConfig

    kwargs = _load_config_section(args.config, "scorer")
    _override(kwargs, args, [
        ("scorer", "kind"), ("k", "k"), ("temperature", "temperature"),
        ("ridge", "ridge"),
    ])
    kwargs.setdefault("kind", "nsd")
    return _build_config(OodScorerConfig, kwargs)


def _load_dataset(data_dir: str, splits=("train", "dev", "eval")):
    from .containers import load_features, load_manifest

    mats = {s: load_features(os.path.join(data_dir, f"{s}.emb")) for s in splits}
    man = load_manifest(os.path.join(data_dir, "manifest.jsonl"))
    return mats, man


def _load_model_bank(model, mats, man, ridge: float):
    """Bank over the rows the classifier was trained on."""
    import numpy as np

    from .pipeline import build_model_bank

    y = man.labels("train")
    keep = np.isin(y, model.class_ids)
    if not np.any(keep):
        raise DataError("no training rows match the model's classes")
    return build_model_bank(model, mats["train"].data[keep], labels=y[keep],
                            ridge=ridge)


def _cmd_gen_synth(args) -> None:
    from .containers import save_features, save_manifest
    from .synth import SynthConfig, generate_synthetic

    kwargs = _load_config_section(args.config, "synth")
    if "per_class_counts" in kwargs:
        kwargs["per_class_counts"] = _int_keys(kwargs["per_class_counts"])
    _override(kwargs, args, [
        ("seed", "seed"), ("dim", "dim_raw"),
        ("separation", "cluster_separation"), ("sigma", "within_class_sigma"),
        ("shift_sigma", "eval_shift_sigma"),
    ])
    cfg = _build_config(SynthConfig, kwargs)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    mats, man = generate_synthetic(cfg)
    outputs = []
    for split, m in mats.items():
        p = os.path.join(out, f"{split}.emb")
        save_features(m, p)
        outputs.append(p)
    mpath = os.path.join(out, "manifest.jsonl")
    save_manifest(man, mpath)
    outputs.append(mpath)
    _write_runlog(os.path.join(out, "runlog.json"), "gen-synth", asdict(cfg),
                  cfg.seed, outputs)


def _cmd_train(args, stage: str) -> None:
    from .mlp import save_model
    from .training import (
        train_fake_dispersion,
        train_one_stage,
        train_real_emphasis,
    )

    cfg = _train_config(args)
    mats, man = _load_dataset(args.data, splits=("train", "dev"))
    yt, yd = man.labels("train"), man.labels("dev")
    xt, xd = mats["train"].data, mats["dev"].data
    if stage == "RE":
        model = train_real_emphasis(xt, (yt > 0).astype(int),
                                    xd, (yd > 0).astype(int), cfg)
    elif stage == "FD":
        model = train_fake_dispersion(xt[yt >= 1], yt[yt >= 1],
                                      xd[yd >= 1], yd[yd >= 1], cfg)
    else:
        model = train_one_stage(xt, yt, xd, yd, cfg)
    out = _resolve_out(args.out, parent=True)
    save_model(model, out)
    _write_runlog(out + ".runlog.json", f"train ({stage})", asdict(cfg),
                  cfg.seed, [out])


def _cmd_score(args) -> None:
    from .mlp import forward, load_model
    from .ood import OodScorerConfig, save_scores, score_with_config

    all_kinds = args.scorer == "all"
    if all_kinds:
        args.scorer = None  # "all" is a fan-out, not a scorer kind
    base = _scorer_config(args)
    model = load_model(args.model)
    mats, man = _load_dataset(args.data)
    bank = _load_model_bank(model, mats, man, base.ridge)
    out = forward(model, mats[args.split])
    ids = man.ids(args.split)
    kinds = SCORER_CHOICES if all_kinds else (base.kind,)
    outdir = _resolve_out(args.out)
    os.makedirs(outdir, exist_ok=True)
    outputs = []
    for kind in kinds:
        cfg = OodScorerConfig(kind=kind, temperature=base.temperature,
                              k=base.k, ridge=base.ridge)
        scores = score_with_config(cfg, test_features=out.features,
                                   test_logits=out.logits, bank=bank)
        p = os.path.join(outdir, f"scores_{kind}.csv")
        save_scores(ids, scores, p)
        outputs.append(p)
    _write_runlog(os.path.join(outdir, "runlog.json"), "score",
                  {"scorer": asdict(base), "model": args.model,
                   "split": args.split}, None, outputs)


def _sweep_parts(args):
    """Shared by sweep and infer: models, bank, and scorer config."""
    from .mlp import load_model

    scorer = _scorer_config(args)
    mats, man = _load_dataset(args.data)
    if args.one_stage:
        model = load_model(args.one_stage)
        bank = _load_model_bank(model, mats, man, scorer.ridge)
        return scorer, mats, man, {"one": model}, bank
    re_model = load_model(args.re_model)
    fd_model = load_model(args.fd_model)
    bank = _load_model_bank(fd_model, mats, man, scorer.ridge)
    return scorer, mats, man, {"re": re_model, "fd": fd_model}, bank


def _cmd_sweep(args) -> None:
    from .containers import _atomic_write_text
    from .pipeline import (
        RefdConfig,
        one_stage_sweep_inputs,
        refd_sweep_inputs,
        sweep_threshold,
    )

    scorer, mats, man, models, bank = _sweep_parts(args)
    x = mats[args.split]
    if "one" in models:
        scores, basep = one_stage_sweep_inputs(models["one"], x, scorer, bank)
        echo = {"mode": "one-stage", "model": args.one_stage}
    else:
        cfg = RefdConfig(re_gate=args.gate, ood_scorer=scorer)
        scores, basep = refd_sweep_inputs(models["re"], models["fd"], x, cfg,
                                          bank)
        echo = {"mode": "refd", "re_model": args.re_model,
                "fd_model": args.fd_model, "re_gate": args.gate}
    labels = man.labels(args.split)
    best_t, best_f, curve = sweep_threshold(scores, basep, labels)
    out = _resolve_out(args.out, parent=True)
    lines = ["threshold,macro_f1"]
    lines.extend(f"{t:.17g},{f:.17g}" for t, f in curve)
    _atomic_write_text(out, "\n".join(lines) + "\n")
    echo.update({"scorer": asdict(scorer), "split": args.split,
                 "selected_on": args.split,
                 "best_threshold": best_t, "best_macro_f1": best_f})
    _write_runlog(out + ".runlog.json", "sweep", echo, None, [out])
    print(f"best_threshold={best_t:.17g} best_macro_f1={best_f:.17g}")


def _cmd_infer(args) -> None:
    from .pipeline import (
        RefdConfig,
        infer_one_stage,
        infer_refd,
        save_predictions,
    )

    scorer, mats, man, models, bank = _sweep_parts(args)
    x = mats[args.split]
    ids = man.ids(args.split)
    if "one" in models:
        preds = infer_one_stage(models["one"], x, scorer, args.threshold,
                                bank, utt_ids=ids)
        echo = {"mode": "one-stage", "model": args.one_stage}
    else:
        cfg = RefdConfig(re_gate=args.gate, ood_scorer=scorer,
                         ood_threshold=args.threshold)
        preds = infer_refd(models["re"], models["fd"], x, cfg, bank,
                           utt_ids=ids)
        echo = {"mode": "refd", "re_model": args.re_model,
                "fd_model": args.fd_model, "re_gate": args.gate}
    out = _resolve_out(args.out, parent=True)
    save_predictions(preds, out)
    echo.update({"scorer": asdict(scorer), "split": args.split,
                 "ood_threshold": args.threshold})
    _write_runlog(out + ".runlog.json", "infer", echo, None, [out])


def _cmd_eval(args) -> None:
    from .containers import load_manifest
    from .pipeline import build_report, load_predictions, save_report

    preds = load_predictions(args.predictions)
    man = load_manifest(os.path.join(args.data, "manifest.jsonl"))
    by_id = {r.utt_id: r.label for r in man.split(args.split)}
    labels = []
    for p in preds:
        if p.utt_id not in by_id:
            raise DataError(
                f"{p.utt_id!r} not in the {args.split} split of the manifest"
            )
        labels.append(by_id[p.utt_id])
    thresholds = {}
    if args.gate is not None:
        thresholds["re_gate"] = args.gate
    if args.threshold is not None:
        thresholds["ood_threshold"] = args.threshold
    config = {"predictions": args.predictions, "split": args.split}
    report = build_report(preds, labels, thresholds=thresholds, config=config,
                          seed=args.seed, timestamp=_utc_now())
    out = _resolve_out(args.out, parent=True)
    save_report(report, out)
    _write_runlog(out + ".runlog.json", "eval", config, args.seed, [out])


def _render_tables(rows) -> tuple:
    """rows: (label, {class id: f1}, macro). Returns (csv, aligned text),
    cells as percent with two decimals, the published-table layout."""
    header = ["method"] + [str(c) for c in range(8)] + ["AVG"]
    table = [header]
    for label, per_class, macro in rows:
        cells = [f"{100.0 * per_class[str(c)]:.2f}" for c in range(8)]
        table.append([label] + cells + [f"{100.0 * macro:.2f}"])
    csv_text = "\n".join(",".join(r) for r in table) + "\n"
    widths = [max(len(r[j]) for r in table) for j in range(len(header))]
    txt_lines = []
    for r in table:
        txt_lines.append("  ".join(
            r[0].ljust(widths[0]) if j == 0 else r[j].rjust(widths[j])
            for j in range(len(r))
        ))
    return csv_text, "\n".join(txt_lines) + "\n"


def _cmd_report(args) -> None:
    from .containers import _atomic_write_text
    from .pipeline import load_report

    labels = list(args.label or [])
    if len(labels) > len(args.inputs):
        raise ConfigError("more --label values than --in files")
    rows = []
    for i, path in enumerate(args.inputs):
        doc = load_report(path)
        if "per_class_f1" not in doc or "macro_f1" not in doc:
            raise FormatError(f"{path}: missing per_class_f1/macro_f1")
        absent = [str(c) for c in range(8) if str(c) not in doc["per_class_f1"]]
        if absent:
            raise FormatError(f"{path}: per_class_f1 missing classes {absent}")
        name = labels[i] if i < len(labels) else (
            os.path.splitext(os.path.basename(path))[0]
        )
        rows.append((name, doc["per_class_f1"], doc["macro_f1"]))
    csv_text, txt_text = _render_tables(rows)
    prefix = _resolve_out(args.out_prefix, parent=True)
    outputs = [prefix + ".csv", prefix + ".txt"]
    _atomic_write_text(outputs[0], csv_text)
    _atomic_write_text(outputs[1], txt_text)
    _write_runlog(prefix + ".runlog.json", "report",
                  {"inputs": list(args.inputs), "labels": labels}, None,
                  outputs)
    sys.stdout.write(txt_text)


def _add_config_flag(p) -> None:
    p.add_argument("--config", help="JSON config file (flag > file > default)")


def _add_train_flags(p) -> None:
    _add_config_flag(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--feature-dim", type=int)


def _add_scorer_flags(p) -> None:
    p.add_argument("--scorer", choices=SCORER_CHOICES)
    p.add_argument("--k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--ridge", type=float)


def _add_model_selection(p) -> None:
    p.add_argument("--re-model", help="gate model checkpoint (dual-stage)")
    p.add_argument("--fd-model", help="fake classifier checkpoint (dual-stage)")
    p.add_argument("--one-stage", help="one-stage checkpoint (baseline mode)")
    p.add_argument("--gate", type=float, default=0.98,
                   help="gate threshold (dual-stage only)")


def _check_model_selection(args) -> None:
    dual = args.re_model is not None and args.fd_model is not None
    if args.one_stage:
        if args.re_model or args.fd_model:
            raise _UsageError("--one-stage excludes --re-model/--fd-model")
    elif not dual:
        raise _UsageError("need --re-model and --fd-model, or --one-stage")


def build_parser() -> _Parser:
    parser = _Parser(prog="refd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic dataset")
    _add_config_flag(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--shift-sigma", type=float)
    p.set_defaults(func=_cmd_gen_synth)

    for name, stage in (("train-re", "RE"), ("train-fd", "FD"),
                        ("train-onestage", "one-stage")):
        p = sub.add_parser(name, help=f"train the {stage} model")
        _add_train_flags(p)
        if stage != "RE":
            p.add_argument("--eta", type=float,
                           help="mixed-batch loss weight (0 = plain CE)")
        else:
            p.set_defaults(eta=None)
        p.set_defaults(func=lambda a, s=stage: _cmd_train(a, s))

    p = sub.add_parser("score", help="write OOD score CSVs for a split")
    _add_config_flag(p)
    p.add_argument("--model", required=True, help="FD or one-stage checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--scorer", choices=SCORER_CHOICES + ("all",))
    p.add_argument("--k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--ridge", type=float)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("sweep", help="pick the OOD threshold maximizing macro-F1")
    _add_config_flag(p)
    _add_model_selection(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="curve CSV path")
    p.add_argument("--split", choices=("dev", "eval"), default="eval")
    _add_scorer_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("infer", help="run inference at a resolved threshold")
    _add_config_flag(p)
    _add_model_selection(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--threshold", type=float, required=True,
                   help="OOD threshold (--threshold=-inf disables the escape)")
    p.add_argument("--split", choices=("dev", "eval"), default="eval")
    _add_scorer_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score a predictions CSV against labels")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--seed", type=int, default=0,
                   help="seed recorded in the report")
    p.add_argument("--gate", type=float, help="gate echoed into the report")
    p.add_argument("--threshold", type=float,
                   help="OOD threshold echoed into the report")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="render report JSONs as comparison tables")
    p.add_argument("--in", dest="inputs", action="append", required=True,
                   help="report JSON (repeatable)")
    p.add_argument("--label", action="append",
                   help="row label, matched to --in order")
    p.add_argument("--out-prefix", required=True,
                   help="writes <prefix>.csv and <prefix>.txt")
    p.set_defaults(func=_cmd_report)

    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if getattr(args, "one_stage", "absent") != "absent":
            _check_model_selection(args)
        args.func(args)
        return 0
    except SystemExit as exc:  # --help / --version
        code = exc.code
        return int(code) if code else 0
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, DataError, DegenerateRowError, NumericalError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, CorruptionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    threads = os.environ.get("REFD_NUM_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
