"""Command-line entry point.

Stages hand off through directories: ``cohort gen`` writes BOLD or FC
CSVs plus ``manifest.json``, ``fc compute`` and ``graph build`` transform a
cohort directory, ``pretrain`` and ``train`` consume one, and ``eval`` and
``report`` read a training run.  Every stage writes ``run.json`` recording
its resolved arguments and configuration; ``rerun`` replays it.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
Diagnostics go to standard error; results go to files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import (CohortConfig, Diagnosis, compute_fc, generate_synthetic_cohort, iter_manifest,
                     pretrain_split, read_manifest, write_manifest)
from .connectome import parse_edge_rule
from .metrics import UndefinedMetricError, roc_curve
from .params import load_checkpoint, save_checkpoint
from .report import RNN_NAMES, emit_report
from .temporal import RNN_KINDS
from .training import (MetricsReport, TrainConfig, evaluate_fold, make_samples, predict_proba,
                       prepare_graphs, pretrain_gcn, run_pipeline)

__all__ = ["main", "dispatch", "build_parser", "RunManifest"]

log = logging.getLogger("hagnn")

MAX_SEED = 2**64 - 1
DEFAULT_EDGE_RULE = "topk:10"


@dataclass
class RunManifest:
    """What a stage ran with; enough to replay it via ``rerun``."""

    stage: str
    args: dict
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# argument types


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; user errors exit 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2**64), got {value}")
    return value


def _edge_rule(text: str) -> str:
    try:
        return str(parse_edge_rule(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _existing_dir(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, "no such directory", str(p))
    return p


# ---------------------------------------------------------------------------
# shared helpers


def _load_cohort(in_dir, edge_rule: str | None) -> list:
    """Subjects with FC matrices and graphs ready for training."""
    subjects = read_manifest(_existing_dir(in_dir))
    if not subjects:
        raise ValueError(f"{in_dir}: manifest lists no subjects")
    visits = [v for s in subjects for v in s.visits]
    if any(v.fc is None for v in visits):
        log.info("computing FC matrices from BOLD")
        compute_fc(subjects, drop_bold=True)
    if all(v.graph is not None for v in visits):
        if edge_rule is not None:
            log.warning("cohort has prebuilt graphs; --edge-rule %s ignored", edge_rule)
    else:
        prepare_graphs(subjects, edge_rule or DEFAULT_EDGE_RULE)
    return subjects


def _train_config(ns) -> TrainConfig:
    kw = dict(seed=ns.seed, rnn=ns.rnn, alpha=ns.alpha, gamma=ns.gamma,
              edge_rule=ns.edge_rule or DEFAULT_EDGE_RULE)
    if ns.epochs is not None:
        kw["epochs"] = ns.epochs
    if getattr(ns, "pretrain_epochs", None) is not None:
        kw["pretrain_epochs"] = ns.pretrain_epochs
    cfg = TrainConfig(**kw)
    cfg.validate()
    return cfg


def _args_dict(ns) -> dict:
    out = {}
    for k, v in vars(ns).items():
        if k in ("func",):
            continue
        out[k] = str(Path(v).resolve()) if isinstance(v, Path) else v
    return out


def _diag_name(code) -> str:
    return Diagnosis(int(code)).name


def _write_predictions(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "subject_id", "label", "prob", "from", "to"])
        for fold, sid, label, prob, (a, b) in rows:
            w.writerow([fold, sid, int(label), repr(float(prob)), _diag_name(a), _diag_name(b)])


def _read_predictions(path) -> list[dict]:
    if not Path(path).exists():
        raise FileNotFoundError(2, "no such file", str(path))
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# stages


def cmd_cohort_gen(ns) -> int:
    kw = {"seed": ns.seed}
    for flag, key in (("subjects", "n_subjects"), ("timepoints", "timepoints"), ("rois", "roi_count"),
                      ("networks", "n_networks"), ("effect_size", "effect_size"),
                      ("voxels_per_roi", "voxels_per_roi")):
        if getattr(ns, flag) is not None:
            kw[key] = getattr(ns, flag)
    if "roi_count" in kw and "n_networks" not in kw:
        kw["n_networks"] = min(CohortConfig.n_networks, kw["roi_count"])
    cfg = CohortConfig(**kw)
    cfg.validate()
    t0 = time.perf_counter()
    subjects = generate_synthetic_cohort(cfg)
    if ns.format == "fc":
        compute_fc(subjects, drop_bold=True)
    write_manifest(subjects, ns.out, kind=ns.format)
    log.info("wrote %d subjects (%d visits) to %s", len(subjects),
             sum(len(s.visits) for s in subjects), ns.out)
    RunManifest("cohort gen", _args_dict(ns), config=cfg.to_dict(),
                outputs={"manifest": "manifest.json"},
                timings={"generate": time.perf_counter() - t0}).write(ns.out)
    return 0


def cmd_fc_compute(ns) -> int:
    t0 = time.perf_counter()
    subjects = []
    for subj in iter_manifest(_existing_dir(ns.input)):
        if any(v.bold is None and v.fc is None for v in subj.visits):
            raise ValueError(f"{subj.id}: visit has neither BOLD nor FC data")
        if any(v.fc is None for v in subj.visits):
            compute_fc([subj], drop_bold=True)
        subjects.append(subj)
    write_manifest(subjects, ns.out, kind="fc")
    log.info("wrote FC matrices for %d subjects to %s", len(subjects), ns.out)
    RunManifest("fc compute", _args_dict(ns), inputs={"cohort": str(Path(ns.input).resolve())},
                outputs={"manifest": "manifest.json"},
                timings={"fc": time.perf_counter() - t0}).write(ns.out)
    return 0


def cmd_graph_build(ns) -> int:
    t0 = time.perf_counter()
    rule = ns.edge_rule or DEFAULT_EDGE_RULE
    subjects = read_manifest(_existing_dir(ns.input))
    if any(v.fc is None for s in subjects for v in s.visits):
        compute_fc(subjects, drop_bold=True)
    prepare_graphs(subjects, rule)
    write_manifest(subjects, ns.out, kind="graph")
    log.info("built %s graphs for %d subjects in %s", rule, len(subjects), ns.out)
    RunManifest("graph build", _args_dict(ns), config={"edge_rule": rule},
                inputs={"cohort": str(Path(ns.input).resolve())}, outputs={"manifest": "manifest.json"},
                timings={"graph": time.perf_counter() - t0}).write(ns.out)
    return 0


def cmd_pretrain(ns) -> int:
    t0 = time.perf_counter()
    cfg = _train_config(ns)
    subjects = _load_cohort(ns.input, ns.edge_rule)
    pre_set, _ = pretrain_split(subjects, ns.pretrain_frac, seed=ns.seed)
    t1 = time.perf_counter()
    result = pretrain_gcn(pre_set, cfg)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "gcn.json", result.gcn)
    save_checkpoint(out / "head.json", result.head)
    summary = {"pretrain_ids": [s.id for s in pre_set], "loss_history": result.history}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("pretrained GCN on %d subjects; checkpoint %s", len(pre_set), out / "gcn.json")
    RunManifest("pretrain", _args_dict(ns), config=cfg.to_dict(),
                inputs={"cohort": str(Path(ns.input).resolve())},
                outputs={"gcn": "gcn.json", "head": "head.json", "summary": "pretrain.json"},
                timings={"load": t1 - t0, "pretrain": time.perf_counter() - t1}).write(out)
    return 0


def cmd_train(ns) -> int:
    t0 = time.perf_counter()
    cfg = _train_config(ns)
    if ns.input is None:
        log.info("no --cohort given; generating the default synthetic cohort with seed %d", ns.seed)
        subjects = generate_synthetic_cohort(CohortConfig(seed=ns.seed))
        compute_fc(subjects, drop_bold=True)
        prepare_graphs(subjects, cfg.edge_rule)
        source = {"generated": CohortConfig(seed=ns.seed).to_dict()}
    else:
        subjects = _load_cohort(ns.input, ns.edge_rule)
        source = {"cohort": str(Path(ns.input).resolve())}
    pretrained = None
    if ns.pretrained is not None:
        if ns.no_pretrain:
            raise ValueError("--pretrained and --no-pretrain are mutually exclusive")
        if not Path(ns.pretrained).exists():
            raise FileNotFoundError(2, "no such file", str(ns.pretrained))
        pretrained = load_checkpoint(ns.pretrained)
        source["pretrained"] = str(Path(ns.pretrained).resolve())
    t1 = time.perf_counter()
    result = run_pipeline(subjects, cfg, pretrain=not ns.no_pretrain, pretrain_fraction=ns.pretrain_frac,
                          k=ns.folds, parallel_folds=ns.parallel_folds, hyperopt_budget=ns.hyperopt,
                          pretrained=pretrained)
    t2 = time.perf_counter()

    out = Path(ns.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(result.cv.report.to_json())
    rows = [(f.index, sid, y, p, t) for f in result.cv.folds
            for sid, y, p, t in zip(f.test_ids, f.labels, f.probs, f.transitions)]
    _write_predictions(out / "predictions.csv", rows)
    folds = [{"index": f.index, "test_ids": f.test_ids, "train_ids": f.train_ids, "val_ids": f.val_ids,
              "epochs_run": f.epochs_run, "history": f.history} for f in result.cv.folds]
    (out / "folds.json").write_text(json.dumps({"pretrain_ids": result.pretrain_ids, "folds": folds},
                                               indent=2, sort_keys=True) + "\n")
    for f in result.cv.folds:
        save_checkpoint(out / "checkpoints" / f"fold{f.index}.json", f.params)
    outputs = {"metrics": "metrics.json", "predictions": "predictions.csv", "folds": "folds.json",
               "checkpoints": [f"checkpoints/fold{f.index}.json" for f in result.cv.folds]}
    if result.pretrain is not None:
        save_checkpoint(out / "checkpoints" / "gcn_pretrained.json", result.pretrain.gcn)
        outputs["pretrained_gcn"] = "checkpoints/gcn_pretrained.json"
    mean = result.cv.report.mean
    log.info("BA %s  AUC %s  Acc %s", *(f"{mean[k]:.3f}" if mean[k] is not None else "n/a"
                                       for k in ("ba", "auc_roc", "acc")))
    RunManifest("train", _args_dict(ns), config={"train": result.config.to_dict(),
                                                 "hyperopt_trials": result.hyperopt_trials},
                inputs=source, outputs=outputs,
                timings={"load": t1 - t0, "pipeline": t2 - t1, "write": time.perf_counter() - t2}).write(out)
    return 0


def _run_dir(path) -> tuple[Path, RunManifest]:
    run = _existing_dir(path)
    mpath = run / "run.json"
    if not mpath.exists():
        raise FileNotFoundError(2, "no such file", str(mpath))
    manifest = RunManifest.read(mpath)
    if manifest.stage != "train":
        raise ValueError(f"{mpath} records a {manifest.stage!r} stage, not a training run")
    return run, manifest


def cmd_eval(ns) -> int:
    """Score a cohort with the fold models of a training run (mean probability)."""
    t0 = time.perf_counter()
    run, manifest = _run_dir(ns.run)
    cfg = TrainConfig.from_dict(manifest.config["train"])
    models = [load_checkpoint(run / p) for p in manifest.outputs["checkpoints"]]
    subjects = _load_cohort(ns.input, ns.edge_rule or cfg.edge_rule)
    d_in = subjects[0].visits[0].graph.node_features.shape[1]
    expected = models[0]["gcn.block1.sage.w_self"].shape[0]
    if d_in != expected:
        raise ValueError(f"cohort graphs have {d_in} node features; the models expect {expected}")
    samples = make_samples(subjects)
    gcfg = cfg.gcn_config(d_in)
    probs = np.mean([predict_proba(samples, m, gcfg) for m in models], axis=0)
    labels = np.array([s.label for s in samples])
    transitions = [tuple(int(d) for d in s.transition) for s in samples]
    metrics = evaluate_fold(probs, labels, transitions)
    keys = ("acc", "auc_roc", "ba", "cn_to_mci", "mci_to_ad")
    report = MetricsReport([dict(metrics, fold=0)], {k: metrics[k] for k in keys},
                           {k: (0.0 if metrics[k] is not None else None) for k in keys})
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    _write_predictions(out / "predictions.csv",
                       [(0, s.subject_id, y, p, t) for s, y, p, t in zip(samples, labels, probs, transitions)])
    log.info("scored %d subjects with %d fold models", len(samples), len(models))
    RunManifest("eval", _args_dict(ns), config={"train": cfg.to_dict()},
                inputs={"run": str(run.resolve()), "cohort": str(Path(ns.input).resolve())},
                outputs={"metrics": "metrics.json", "predictions": "predictions.csv"},
                timings={"eval": time.perf_counter() - t0}).write(out)
    return 0


def cmd_report(ns) -> int:
    src = _existing_dir(ns.input)
    mpath = src / "metrics.json"
    if not mpath.exists():
        raise FileNotFoundError(2, "no such file", str(mpath))
    report = MetricsReport.from_dict(json.loads(mpath.read_text()))
    rows = _read_predictions(src / "predictions.csv")
    rocs = []
    for k in sorted({int(r["fold"]) for r in rows}):
        fold = [r for r in rows if int(r["fold"]) == k]
        try:
            rocs.append(roc_curve([float(r["prob"]) for r in fold], [int(r["label"]) for r in fold]))
        except UndefinedMetricError:
            rocs.append(None)
    name = "HA-GNN"
    rpath = src / "run.json"
    if rpath.exists():
        cfg = RunManifest.read(rpath).config.get("train", {})
        if "rnn" in cfg:
            name = f"HA-GNN ({RNN_NAMES[cfg['rnn']]})"
    out = Path(ns.out) if ns.out is not None else src
    for p in emit_report(report, out, rocs, model_name=name):
        log.info("wrote %s", p)
    return 0


def cmd_gradcheck(ns) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    t0 = time.perf_counter()
    results = run_gradcheck(ns.seed)
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        log.warning("%s %-22s max rel err %.2e  max abs err %.2e  over %4d coords", status, r.name,
                    r.report.max_rel_err, r.report.max_abs_err, r.report.n_coords)
    failed = [r.name for r in results if not r.passed]
    log.warning("%d/%d checks passed at tolerance %g in %.1fs", len(results) - len(failed), len(results),
                TOLERANCE, time.perf_counter() - t0)
    if ns.out is not None:
        out = Path(ns.out)
        out.mkdir(parents=True, exist_ok=True)
        data = [{"name": r.name, "passed": r.passed, "max_rel_err": r.report.max_rel_err,
                 "max_abs_err": r.report.max_abs_err, "n_coords": r.report.n_coords,
                 "worst": r.report.worst} for r in results]
        (out / "gradcheck.json").write_text(json.dumps(data, indent=2) + "\n")
    return 2 if failed else 0


def cmd_rerun(ns) -> int:
    path = Path(ns.input)
    if path.is_dir():
        path = path / "run.json"
    if not path.exists():
        raise FileNotFoundError(2, "no such file", str(path))
    manifest = RunManifest.read(path)
    if manifest.stage not in STAGES:
        raise ValueError(f"{path}: unknown stage {manifest.stage!r}")
    args = dict(manifest.args)
    if ns.out is not None:
        args["out"] = str(ns.out)
    log.info("re-running %s into %s", manifest.stage, args["out"])
    return STAGES[manifest.stage](argparse.Namespace(**args))


STAGES = {
    "cohort gen": cmd_cohort_gen,
    "fc compute": cmd_fc_compute,
    "graph build": cmd_graph_build,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p, with_cv: bool) -> None:
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--rnn", choices=RNN_KINDS, default="lstm")
    p.add_argument("--alpha", type=float, default=0.9, help="focal weight of the converter class")
    p.add_argument("--gamma", type=float, default=3.0, help="focal focusing exponent")
    p.add_argument("--edge-rule", type=_edge_rule, default=None, help="topk:<k> or threshold:<tau>")
    p.add_argument("--pretrain-frac", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=None, help="training epochs per fold")
    p.add_argument("--pretrain-epochs", type=int, default=None)
    if with_cv:
        p.add_argument("--folds", type=_positive_int, default=5)
        p.add_argument("--no-pretrain", action="store_true")
        p.add_argument("--pretrained", type=Path, default=None, help="GCN checkpoint from `pretrain`")
        p.add_argument("--parallel-folds", type=_positive_int, default=1)
        p.add_argument("--hyperopt", type=int, default=0, metavar="BUDGET")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hagnn", description="Conversion prediction from longitudinal brain graphs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    stages = parser.add_subparsers(dest="stage", metavar="STAGE")

    cohort = stages.add_parser("cohort", help="synthetic cohort tools")
    cohort_sub = cohort.add_subparsers(dest="action", metavar="ACTION")
    p = cohort_sub.add_parser("gen", help="generate a synthetic longitudinal cohort")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=("bold", "fc"), default="bold")
    p.add_argument("--subjects", type=_positive_int, default=None)
    p.add_argument("--timepoints", type=_positive_int, default=None)
    p.add_argument("--rois", type=_positive_int, default=None)
    p.add_argument("--networks", type=_positive_int, default=None)
    p.add_argument("--voxels-per-roi", type=_positive_int, default=None)
    p.add_argument("--effect-size", type=float, default=None, help="0 gives a null cohort")
    p.set_defaults(func=cmd_cohort_gen)

    fc = stages.add_parser("fc", help="functional connectivity")
    fc_sub = fc.add_subparsers(dest="action", metavar="ACTION")
    p = fc_sub.add_parser("compute", help="Pearson FC matrix per visit")
    p.add_argument("--in", "--cohort", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fc_compute)

    graph = stages.add_parser("graph", help="brain graphs")
    graph_sub = graph.add_subparsers(dest="action", metavar="ACTION")
    p = graph_sub.add_parser("build", help="sparsify FC matrices into edge lists")
    p.add_argument("--in", "--cohort", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--edge-rule", type=_edge_rule, default=None, help="topk:<k> or threshold:<tau>")
    p.set_defaults(func=cmd_graph_build)

    p = stages.add_parser("pretrain", help="pretrain the GCN on single-visit diagnosis")
    p.add_argument("--in", "--cohort", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p, with_cv=False)
    p.set_defaults(func=cmd_pretrain)

    p = stages.add_parser("train", help="k-fold training and evaluation")
    p.add_argument("--in", "--cohort", dest="input", type=Path, default=None,
                   help="cohort directory; the default synthetic cohort is generated when omitted")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p, with_cv=True)
    p.set_defaults(func=cmd_train)

    p = stages.add_parser("eval", help="score a cohort with the models of a training run")
    p.add_argument("--run", type=Path, required=True, help="output directory of `train`")
    p.add_argument("--in", "--cohort", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--edge-rule", type=_edge_rule, default=None)
    p.set_defaults(func=cmd_eval)

    p = stages.add_parser("report", help="results table and ROC plots for a run")
    p.add_argument("--in", "--cohort", dest="input", type=Path, required=True,
                   help="output directory of `train` or `eval`")
    p.add_argument("--out", type=Path, default=None, help="defaults to the input directory")
    p.set_defaults(func=cmd_report)

    p = stages.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = stages.add_parser("rerun", help="replay a stage from its run.json")
    p.add_argument("--in", dest="input", type=Path, required=True, help="run.json or its directory")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_rerun)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version or a usage error
        return int(exc.code or 0)
    if getattr(ns, "func", None) is None:
        parser.print_usage(sys.stderr)
        print("hagnn: error: choose a stage (and action)", file=sys.stderr)
        return 1
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.WARNING if ns.quiet else logging.INFO, force=True)
    logging.captureWarnings(True)
    try:
        return ns.func(ns)
    except FileNotFoundError as exc:
        log.error("hagnn: missing input: %s", exc.filename or exc)
        return 1
    except (ValueError, OSError) as exc:
        log.error("hagnn: error: %s", exc)
        return 1
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2


def main() -> int:
    return dispatch(sys.argv[1:])
