"""Command-line interface: train, predict, evaluate, flatten, sweep, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command computes everything before it writes anything, so a failed run
leaves no partial output behind.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import MAX_BITS, MIN_BITS, CodeBook, ecoc_train, select_ecoc_C
from .data import (DataError, Dataset, apply_tfidf, idf_weights, read_svmlight,
                   read_svmlight_or_empty, write_svmlight)
from .inf import DEFAULT_PSI_GRID, InconsistentNodeFlattening, Scope, select
from .io import (METHODS, Bundle, BundleError, format_meta, load_bundle,
                 prune_bits, prune_model, save_bundle)
from .linreg import NumericalError, TrainConfig
from .metrics import evaluate
from .synthetic import make_planted
from .taxonomy import (Method, Taxonomy, TaxonomyError, fanout_profile, flatten,
                       level_plan, read_hierarchy)
from .topdown import (DEFAULT_C_GRID, FlatLogisticRegression, TopDownClassifier,
                      check_leaf_coverage)

log = logging.getLogger("hierflat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
INF_METHODS = ("LevelINF", "GlobalINF")
LEVEL_METHODS = ("TLF", "BLF", "MLF")
DEFAULT_BITS = 64


class UsageError(Exception):
    """Flags that contradict each other or the chosen method."""


@dataclass
class RunConfig:
    hierarchy_path: Path
    train_path: Path
    method: str
    output_dir: Path
    test_path: Path | None = None
    C_grid: tuple = DEFAULT_C_GRID
    C_selection: str = "global"
    psi: float | None = None
    psi_grid: tuple = DEFAULT_PSI_GRID
    seed: int = 0
    split_ratio: float = 0.9
    codeword_bits: int | None = None
    jobs: int | None = None
    tfidf: bool = False
    grad_tol: float = 1e-4
    max_iter: int = 1000
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method not in INF_METHODS and self.psi is not None:
            raise UsageError(f"--psi only applies to {' and '.join(INF_METHODS)}")
        if self.psi is not None and self.psi < 0:
            raise UsageError("--psi must be nonnegative")
        if any(p < 0 for p in self.psi_grid) or not self.psi_grid:
            raise UsageError("--psi-grid needs nonnegative values")
        if self.method != "ECOC" and self.codeword_bits is not None:
            raise UsageError("--codeword-bits only applies to ECOC")
        if self.method == "ECOC":
            if self.codeword_bits is None:
                self.codeword_bits = DEFAULT_BITS
            if not MIN_BITS <= self.codeword_bits <= MAX_BITS:
                raise UsageError(f"--codeword-bits must lie in [{MIN_BITS}, {MAX_BITS}]")
        if not self.C_grid or any(c <= 0 for c in self.C_grid):
            raise UsageError("--c-grid needs positive values")
        if not 0 < self.split_ratio < 1:
            raise UsageError("--split must lie strictly between 0 and 1")

    def meta(self) -> dict:
        m = {
            "version": __version__,
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "C_grid": _join(self.C_grid),
            "C_tie": "smaller",
            "grad_tol": self.grad_tol,
            "max_iter": self.max_iter,
            "tfidf": "ln(N/df)+l2" if self.tfidf else "none",
            "train": self.train_path,
            "hierarchy": self.hierarchy_path,
        }
        if self.method != "ECOC":
            m["C_selection"] = self.C_selection
            m["C_metric"] = ("topdown_validation_macro_f1" if self.C_selection == "global"
                             else "node_validation_binary_f1")
        else:
            m["C_metric"] = "ecoc_validation_macro_f1"
            m["codeword_bits"] = self.codeword_bits
        if self.method in INF_METHODS:
            m.update({
                "strategy": _strategy(self.method).value,
                "psi_grid": _join(self.psi_grid),
                "psi_tie": "smaller",
                "threshold_std": "population",
                "fstar": "validation objective with the training C",
            })
            if self.method == "LevelINF":
                m["level_psi"] = "shared"
        return m


def _join(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _floats(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _strategy(method: str) -> Scope:
    return Scope.LEVEL if method == "LevelINF" else Scope.GLOBAL


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r.get(k)) for k in columns})
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return repr(v)
    return v


def _write_files(out: Path, files: dict[str, str]) -> None:
    """Write each file through a temporary name so none is left half-written."""
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        _write_atomic(out / name, text)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# -- training -------------------------------------------------------------

FLATTENING_COLUMNS = ["node", "level", "leaf", "C", "fstar", "tau", "flagged"]
SWEEP_COLUMNS = ["psi", "n_removed", "tau", "valid_macro_f1", "best"]


def _load_training(cfg: RunConfig) -> tuple[Taxonomy, Dataset, np.ndarray | None]:
    tax = read_hierarchy(cfg.hierarchy_path)
    ds = read_svmlight(cfg.train_path)
    check_leaf_coverage(tax, ds)
    idf = None
    if cfg.tfidf:
        idf = idf_weights(ds.X)
        ds = Dataset(apply_tfidf(ds.X, idf), ds.y)
    return tax, ds, idf


def _topdown_kwargs(cfg: RunConfig) -> dict:
    return dict(C_grid=cfg.C_grid, split_ratio=cfg.split_ratio, seed=cfg.seed,
                grad_tol=cfg.grad_tol, max_iter=cfg.max_iter, n_jobs=cfg.jobs,
                C_selection=cfg.C_selection)


def _inf_estimator(cfg: RunConfig, tax: Taxonomy) -> InconsistentNodeFlattening:
    return InconsistentNodeFlattening(tax, strategy=_strategy(cfg.method).value,
                                      psi=cfg.psi, psi_grid=cfg.psi_grid,
                                      **_topdown_kwargs(cfg))


def _sweep_rows(est: InconsistentNodeFlattening) -> list[dict]:
    rows = []
    for psi, score in est.sweep_curve_:
        plan, specs = select(est.stage_model_, None, psi, est.strategy)
        tau = specs[0].tau if Scope(est.strategy) is Scope.GLOBAL else None
        rows.append({"psi": psi, "n_removed": len(plan), "tau": tau,
                     "valid_macro_f1": score, "best": psi == est.psi_})
    return rows


def _structural_report(tax: Taxonomy, removed) -> list[dict]:
    return [{"node": n, "level": tax.level_of[n], "leaf": tax.is_leaf(n),
             "flagged": n in removed} for n in tax.nodes]


def train_bundle(cfg: RunConfig, tax: Taxonomy, ds: Dataset, idf=None
                 ) -> tuple[Bundle, dict[str, str]]:
    """Train the configured method; returns the bundle and its report files."""
    meta = cfg.meta()
    meta["n_train"] = len(ds)
    reports: dict[str, str] = {}
    X, y = ds.X, ds.y

    if cfg.method == "ECOC":
        book = CodeBook.random(tax.leaves, cfg.codeword_bits, cfg.seed)
        C, _ = select_ecoc_C(ds, book, cfg.C_grid, cfg.split_ratio, cfg.seed,
                             cfg.grad_tol, cfg.max_iter, cfg.jobs)
        bits = prune_bits(ecoc_train(ds, book, TrainConfig(C, cfg.grad_tol, cfg.max_iter),
                                     cfg.jobs))
        meta.update(C=repr(C), degenerate_bits=sum(bits.degenerate))
        return Bundle("ECOC", tax, tax, ds.dim, bits=bits, codebook=book, idf=idf,
                      meta=meta), reports

    if cfg.method in INF_METHODS:
        est = _inf_estimator(cfg, tax).fit(X, y)
        meta["psi"] = repr(est.psi_) if np.isscalar(est.psi_) else str(est.psi_)
        reports["flattening.csv"] = _csv(est.flattening_report(), FLATTENING_COLUMNS)
        if est.sweep_curve_:
            reports["sweep.csv"] = _csv(_sweep_rows(est), SWEEP_COLUMNS)
    elif cfg.method == "FlatLR":
        est = FlatLogisticRegression(tax, **_topdown_kwargs(cfg)).fit(X, y)
    else:
        flattening = None if cfg.method == "TDLR" else cfg.method
        est = TopDownClassifier(tax, flattening=flattening, **_topdown_kwargs(cfg)).fit(X, y)
        if flattening:
            reports["flattening.csv"] = _csv(_structural_report(tax, est.plan_.removed),
                                             ["node", "level", "leaf", "flagged"])
    if est.C_ is not None:
        meta["C"] = repr(est.C_)
    meta["n_removed"] = len(est.original_taxonomy_.nodes) - len(est.taxonomy_.nodes)
    model = prune_model(est.model_)
    return Bundle(cfg.method, est.taxonomy_, tax, model.dim, model=model, idf=idf,
                  meta=meta), reports


def cmd_train(args) -> int:
    cfg = _config(args)
    tax, ds, idf = _load_training(cfg)
    bundle, reports = train_bundle(cfg, tax, ds, idf)
    save_bundle(bundle, cfg.output_dir, reports)
    log.info("wrote %s bundle to %s", cfg.method, cfg.output_dir)
    print(f"method={cfg.method} nodes={len(bundle.taxonomy.nodes)} out={cfg.output_dir}")
    return EXIT_OK


def _config(args, method: str | None = None) -> RunConfig:
    return RunConfig(
        hierarchy_path=Path(args.hierarchy),
        train_path=Path(args.train) if args.train else None,
        test_path=Path(args.test) if getattr(args, "test", None) else None,
        method=method or args.method,
        output_dir=Path(args.out),
        C_grid=args.c_grid,
        C_selection=args.c_selection,
        psi=getattr(args, "psi", None),
        psi_grid=args.psi_grid,
        seed=args.seed,
        split_ratio=args.split,
        codeword_bits=getattr(args, "codeword_bits", None),
        jobs=args.jobs,
        tfidf=getattr(args, "tfidf", False),
    )


# -- prediction -----------------------------------------------------------

def format_predictions(pred, paths) -> str:
    return "".join(f"{int(p)}\t{','.join(map(str, path))}\n" for p, path in zip(pred, paths))


def parse_predictions(text: str) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    pred, paths = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            leaf = int(parts[0])
            path = tuple(int(v) for v in parts[1].split(",")) if len(parts) > 1 else (leaf,)
        except ValueError:
            raise DataError(f"predictions line {lineno}: cannot parse {line!r}") from None
        if path[-1] != leaf:
            raise DataError(f"predictions line {lineno}: path does not end at leaf {leaf}")
        pred.append(leaf)
        paths.append(path)
    return np.asarray(pred, dtype=np.int64), paths


def cmd_predict(args) -> int:
    bundle = load_bundle(args.model)
    ds = read_svmlight_or_empty(args.test)
    if ds is None:
        text = ""
    else:
        if ds.dim > bundle.dim:
            raise DataError(f"test data uses feature index {ds.dim}, "
                            f"beyond the model dimension {bundle.dim}")
        text = format_predictions(*bundle.predict(ds.X))
    _write_atomic(Path(args.out), text)
    print(f"predictions={text.count(chr(10))} out={args.out}")
    return EXIT_OK


# -- evaluation -----------------------------------------------------------

def _paths_valid(paths, tax: Taxonomy) -> bool:
    for path in paths:
        if len(path) < 2 or path[0] != tax.root:
            return False
        if any(tax.parent_of.get(c) != p for p, c in zip(path, path[1:])):
            return False
    return True


def evaluation_files(true, pred, paths, tax: Taxonomy, path_tax: Taxonomy | None,
                     meta: dict) -> tuple[dict[str, str], dict]:
    report = evaluate(true, pred, tax, paths if path_tax is not None else None, path_tax)
    summary = report.summary()
    meta = {**meta, "n": len(true), **{k: repr(v) for k, v in summary.items()},
            "macro_average": "all leaves of the evaluation hierarchy",
            "levelwise": "first-error attribution" if path_tax is not None else "skipped"}
    per_class = [{"leaf": c, "precision": p, "recall": r, "f1": f,
                  "support": int(np.sum(true == c))}
                 for c, (p, r, f) in sorted(report.per_class.items())]
    files = {
        "report.txt": format_meta(meta),
        "per_class.csv": _csv(per_class, ["leaf", "precision", "recall", "f1", "support"]),
    }
    if report.levelwise:
        files["levelwise.csv"] = _csv([r._asdict() for r in report.levelwise],
                                      ["level", "error", "cum_misclassified", "unconditional"])
    return files, summary


def cmd_evaluate(args) -> int:
    tax = read_hierarchy(args.hierarchy)
    eval_tax = read_hierarchy(args.eval_hierarchy) if args.eval_hierarchy else tax
    pred, paths = parse_predictions(Path(args.predictions).read_text(encoding="utf-8"))
    truth = read_svmlight_or_empty(args.test)
    true = truth.y if truth is not None else np.zeros(0, dtype=np.int64)
    if true.size != pred.size:
        raise DataError(f"{true.size} true labels but {pred.size} predictions")
    if true.size == 0:
        raise DataError("nothing to evaluate: no examples")
    for name, labels in (("true", true), ("predicted", pred)):
        stray = sorted(set(labels.tolist()) - eval_tax.leaves)
        if stray:
            raise DataError(f"{name} labels {stray[:5]} are not leaves of the evaluation hierarchy")

    path_tax = read_hierarchy(args.path_hierarchy) if args.path_hierarchy else tax
    if all(len(p) == 1 for p in paths):
        path_tax = None  # flat predictions carry no decision path
    elif not _paths_valid(paths, path_tax):
        if args.path_hierarchy:
            raise DataError("decision paths do not follow --path-hierarchy")
        log.warning("decision paths do not follow the hierarchy; level-wise table skipped")
        path_tax = None
    meta = {"hierarchy": args.hierarchy,
            "eval_hierarchy": args.eval_hierarchy or args.hierarchy,
            "predictions": args.predictions}
    files, summary = evaluation_files(true, pred, paths, eval_tax, path_tax, meta)
    _write_files(Path(args.out), files)
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return EXIT_OK


# -- structure-only commands -----------------------------------------------

def _fanout_rows(before: Taxonomy, after: Taxonomy) -> list[dict]:
    b, a = fanout_profile(before), fanout_profile(after)
    return [{"level": k, "before": b.get(k, 0), "after": a.get(k, 0)}
            for k in sorted(set(b) | set(a))]


def cmd_flatten(args) -> int:
    method = args.method
    if method in LEVEL_METHODS:
        if args.psi is not None:
            raise UsageError("--psi only applies to LevelINF and GlobalINF")
        tax = read_hierarchy(args.hierarchy)
        plan = level_plan(tax, Method(method))
        flat = flatten(tax, plan)
        report = _csv(_structural_report(tax, plan.removed), ["node", "level", "leaf", "flagged"])
        files = {"taxonomy.txt": flat.to_text(), "flattening.csv": report}
    else:
        if not args.train:
            raise UsageError(f"{method} needs --train to fit node models")
        cfg = _config(args)
        tax, ds, _ = _load_training(cfg)
        est = _inf_estimator(cfg, tax).restructure(ds.X, ds.y)
        flat = est.taxonomy_
        files = {"taxonomy.txt": flat.to_text(),
                 "flattening.csv": _csv(est.flattening_report(), FLATTENING_COLUMNS)}
        if est.sweep_curve_:
            files["sweep.csv"] = _csv(_sweep_rows(est), SWEEP_COLUMNS)
    files["fanout.csv"] = _csv(_fanout_rows(tax, flat), ["level", "before", "after"])
    _write_files(Path(args.out), files)
    print(f"removed={len(tax.nodes) - len(flat.nodes)} depth={flat.depth} out={args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    tax, ds, _ = _load_training(cfg)
    est = _inf_estimator(cfg, tax).restructure(ds.X, ds.y)
    _write_files(Path(args.out), {"sweep.csv": _csv(_sweep_rows(est), SWEEP_COLUMNS)})
    print(f"best_psi={est.psi_!r} removed={len(est.plan_)} out={args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    pp = make_planted(args.seed, args.n_train, args.n_test, noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_files(out, {
        "hierarchy.txt": pp.taxonomy.to_text(),
        "consistent_hierarchy.txt": pp.consistent_taxonomy.to_text(),
        "planted.txt": format_meta({"corrupted": pp.corrupted, "seed": args.seed,
                                    "noise": args.noise}),
    })
    write_svmlight(pp.train, out / "train.svm")
    write_svmlight(pp.test, out / "test.svm")
    print(f"corrupted={pp.corrupted} out={out}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_training_flags(p, methods, default_method=None, train_required=True):
    p.add_argument("--hierarchy", required=True, help="edge list 'parent child' per line")
    p.add_argument("--train", required=train_required, help="svmlight training file (.gz ok)")
    p.add_argument("--method", choices=methods, default=default_method,
                   required=default_method is None)
    p.add_argument("--c-grid", type=_floats, default=DEFAULT_C_GRID, metavar="C1,C2,...")
    p.add_argument("--c-selection", choices=("global", "node"), default="global",
                   help="one C for all nodes by top-down macro-F1, or per node by binary F1")
    p.add_argument("--psi-grid", type=_floats, default=DEFAULT_PSI_GRID, metavar="P1,P2,...")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=0.9, help="training fraction of the split")
    p.add_argument("--jobs", type=int, default=None, help="parallel node fits")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hierflat", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model bundle")
    _add_training_flags(p, METHODS)
    p.add_argument("--psi", type=float, default=None, help="fixed psi (INF methods); default sweeps")
    p.add_argument("--codeword-bits", type=int, default=None, help=f"ECOC only, default {DEFAULT_BITS}")
    p.add_argument("--tfidf", action="store_true", help="apply ln(N/df) tf-idf with l2 rows")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict with a bundle")
    p.add_argument("--model", required=True, help="bundle directory")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="predictions file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--test", required=True, help="svmlight file holding the true labels")
    p.add_argument("--hierarchy", required=True, help="original hierarchy")
    p.add_argument("--eval-hierarchy", default=None, help="hierarchy for hF1 and TE")
    p.add_argument("--path-hierarchy", default=None,
                   help="hierarchy the decision paths were produced in (e.g. a bundle's taxonomy.txt)")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("flatten", help="report which nodes a method removes")
    _add_training_flags(p, INF_METHODS + LEVEL_METHODS, train_required=False)
    p.add_argument("--psi", type=float, default=None)
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("sweep", help="validation macro-F1 over the psi grid")
    _add_training_flags(p, INF_METHODS, default_method="GlobalINF")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a planted-inconsistency problem")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=40, help="training examples per leaf")
    p.add_argument("--n-test", type=int, default=40, help="test examples per leaf")
    p.add_argument("--noise", type=float, default=0.6)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"hierflat: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"hierflat: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, TaxonomyError, BundleError, OSError, ValueError) as e:
        print(f"hierflat: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
