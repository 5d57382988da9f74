"""Command-line interface: train, predict, eval, crossval, inspect, bench.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .classify import (
    ClassifierKind,
    Model,
    choose_kind,
    cross_validate,
    evaluate,
    inspect_codes,
)
from .dataset import LabeledDataset, SplitSpec, load_dataset, normalize_columns, read_samples, split
from .dictionary import LabelLayout, build_layout
from .errors import CrossLabelError
from .learning import Hyperparameters, train

DEFAULT_LAMBDA_GRID = (2e-1, 2.0, 2e1, 2e2, 2e3)
BENCH_QUERIES = 100


class Reporter:
    """Writes named tables as aligned text, CSV or JSON lines."""

    def __init__(self, fmt: str = "text", stream=None):
        self.fmt = fmt
        self.out = stream or sys.stdout
        self._cols: list[str] = []
        self._name = ""
        self._precision = None

    def _cell(self, v) -> str:
        if isinstance(v, float):
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            if self._precision is not None:
                return f"{v:.{self._precision}f}"
            return f"{v:.6g}"
        return str(v)

    def header(self, command: str, **fields) -> None:
        if self.fmt == "json-lines":
            self._write(json.dumps({"table": "run", "command": command, **fields}))
        else:
            self._write("# " + " ".join([command] + [f"{k}={v}" for k, v in fields.items()]))

    def start(self, name: str, columns, precision: int | None = None, title: bool = True) -> None:
        """Begin a table; ``precision`` fixes the decimals of float cells.

        ``title=False`` leaves out the ``# name`` line in CSV output so the
        result is a plain CSV file.
        """
        self._name, self._cols, self._precision = name, list(columns), precision
        if self.fmt == "csv":
            if title:
                self._write(f"# {name}")
            self._write(",".join(self._cols))
        elif self.fmt == "text":
            self._write(f"[{name}]")
            self._write(" ".join(f"{c:>14}" for c in self._cols))

    def row(self, *values) -> None:
        if self.fmt == "json-lines":
            rec = {"table": self._name}
            for k, v in zip(self._cols, values):
                rec[k] = v if not isinstance(v, float) or math.isfinite(v) else str(v)
            self._write(json.dumps(rec))
        elif self.fmt == "csv":
            self._write(",".join(self._cell(v) for v in values))
        else:
            self._write(" ".join(f"{self._cell(v):>14}" for v in values))

    def table(self, name, columns, rows, precision: int | None = None) -> None:
        self.start(name, columns, precision)
        for r in rows:
            self.row(*r)

    def _write(self, line: str) -> None:
        self.out.write(line + "\n")
        self.out.flush()


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crosslabel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("text", "csv", "json-lines"), default="text")
    common.add_argument("--normalize", action="store_true",
                        help="scale every sample to unit l2 norm before use")

    learn = argparse.ArgumentParser(add_help=False)
    learn.add_argument("--atoms-per-class", type=_positive_int,
                       help="label-particular atoms per class (default: smallest class size - 1)")
    learn.add_argument("--shared", type=_nonneg_int, default=0)
    learn.add_argument("--beta", type=_floats, default=[2e-3])
    learn.add_argument("--lambda", dest="lam", type=_floats, default=None)
    learn.add_argument("--gamma", type=_floats, default=[1.0])
    learn.add_argument("--max-iters", type=_positive_int, default=30)
    learn.add_argument("--rel-tol", type=float, default=1e-4)
    learn.add_argument("--mode", choices=("seq", "batch"), default="seq")
    learn.add_argument("--fast", action="store_true",
                       help="restrict label-particular atom updates to their own class when lambda is large")
    learn.add_argument("--init", choices=("kmeans", "random"), default="kmeans")
    learn.add_argument("--folds", type=int, default=5)
    learn.add_argument("--jobs", type=_positive_int, default=1)

    p = sub.add_parser("train", parents=[common, learn], help="learn a dictionary and write a model file")
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", choices=("gcc", "lcc", "auto"), default="gcc")
    p.add_argument("--out", default="model.xldm")

    p = sub.add_parser("predict", parents=[common], help="classify samples with a model")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--classifier", choices=("gcc", "lcc"))
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common, learn], help="accuracy and confusion matrix")
    p.add_argument("--model")
    p.add_argument("--test")
    p.add_argument("--data")
    p.add_argument("--classifier", choices=("gcc", "lcc", "auto"))
    p.add_argument("--repeats", type=_positive_int, default=1)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--split-count", type=_positive_int)
    g.add_argument("--split-fraction", type=float)
    p.add_argument("--out")

    p = sub.add_parser("crossval", parents=[common, learn], help="grid search by k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("inspect", parents=[common], help="block-structure profiles of the codes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("bench", parents=[common, learn], help="training and per-query timings")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--model", help="benchmark this model instead of training one")
    p.add_argument("--queries", type=_positive_int, default=BENCH_QUERIES)
    p.add_argument("--out")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _load(path, args, n_classes=None) -> LabeledDataset:
    ds = load_dataset(path, n_classes=n_classes)
    return normalize_columns(ds) if args.normalize else ds


def _layout_for(args, data: LabeledDataset) -> LabelLayout:
    per_class = args.atoms_per_class
    if per_class is None:
        per_class = max(int(data.class_sizes.min()) - 1, 1)
    return build_layout(data.n_classes, per_class, args.shared)


def _hyper(args, beta=None, lam=None, gamma=None, seed=None) -> Hyperparameters:
    return Hyperparameters(
        beta=args.beta[0] if beta is None else beta,
        lam=(args.lam[0] if args.lam else 2e2) if lam is None else lam,
        gamma=args.gamma[0] if gamma is None else gamma,
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        code_update_mode="sequential" if args.mode == "seq" else "batch",
        fast_particular_update=args.fast,
        seed=args.seed if seed is None else seed,
        init=args.init,
    )


def _reporter(args):
    stream = open(args.out, "w", encoding="utf-8") if getattr(args, "out", None) else None
    return Reporter(args.format, stream)


def _train_model(args, data: LabeledDataset, hp: Hyperparameters, kind: str, callback=None):
    layout = _layout_for(args, data)
    state = train(data, layout, hp, callback=callback, jobs=args.jobs)
    if kind == "auto":
        acc = cross_validate(data, lambda d: _layout_for(args, d), hp, args.folds)
        chosen = choose_kind(acc)
    else:
        chosen = ClassifierKind.parse(kind)
    return Model.from_training(state, hp, chosen), state


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("iteration", "reconstruction", "ridge", "suppression", "group", "total", "wall_ms")


def cmd_train(args) -> int:
    data = _load(args.data, args)
    hp = _hyper(args)
    rep = Reporter(args.format)
    rep.header("train", seed=hp.seed, beta=hp.beta, lam=hp.lam, gamma=hp.gamma,
               mode=hp.code_update_mode)
    rep.start("log", LOG_COLUMNS)
    model, state = _train_model(
        args, data, hp, args.classifier,
        callback=lambda rec: rep.row(*(rec[k] for k in LOG_COLUMNS)),
    )
    model.save(args.out)
    lay = model.dictionary.layout
    rep.table("model", ("path", "atoms", "shared", "classes", "classifier", "iterations", "converged"),
              [(args.out, lay.n_atoms, lay.shared_count, lay.n_classes,
                model.classifier.name.lower(), state.iterations_run, state.converged)])
    return 0


def cmd_predict(args) -> int:
    model = Model.load(args.model)
    Y, labels, _ = read_samples(args.test, allow_unlabeled=True)
    if args.normalize:
        norms = np.linalg.norm(Y, axis=0)
        if np.any(norms == 0):
            raise CrossLabelError(f"sample {int(np.flatnonzero(norms == 0)[0])} has zero norm")
        Y = Y / norms
    scores = model.scores(Y, args.classifier)
    pred = model.predict(Y, args.classifier)
    C = model.n_classes
    rep = _reporter(args)
    if args.format != "csv":
        rep.header("predict", seed=args.seed, classifier=(args.classifier or model.classifier.name.lower()))
    rep.start("predictions", ["sample_index", "true_label", "predicted_label"]
              + [f"score_{c}" for c in range(1, C + 1)], title=False)
    for j in range(Y.shape[1]):
        true = int(labels[j]) if labels[j] > 0 else ""
        rep.row(j, true, int(pred[j]), *(float(s) for s in scores[:, j]))
    return 0


def _report_evaluation(rep, ev, C):
    rep.table("accuracy", ("accuracy", "correct", "total"),
              [(ev.accuracy, int(np.trace(ev.confusion)), int(ev.confusion.sum()))], precision=4)
    rep.table("per_class", ("class", "accuracy", "samples"),
              [(c + 1, float(ev.per_class[c]), int(ev.confusion[c].sum())) for c in range(C)],
              precision=4)
    rep.table("confusion", ["true"] + [f"pred_{c}" for c in range(1, C + 1)],
              [(c + 1, *map(int, ev.confusion[c])) for c in range(C)])


def cmd_eval(args) -> int:
    rep = _reporter(args)
    if args.model:
        if not args.test:
            raise _Usage("eval with --model needs --test")
        model = Model.load(args.model)
        test = _load(args.test, args, n_classes=model.n_classes)
        kind = args.classifier if args.classifier != "auto" else None
        ev = evaluate(model, test, kind)
        rep.header("eval", seed=args.seed, classifier=(kind or model.classifier.name.lower()))
        _report_evaluation(rep, ev, model.n_classes)
        return 0

    if not args.data:
        raise _Usage("eval needs --model/--test or --data with a split")
    data = _load(args.data, args)
    if args.split_count is not None:
        mode, value = "per-class-count", args.split_count
    elif args.split_fraction is not None:
        mode, value = "fraction", args.split_fraction
    else:
        raise _Usage("eval with --data needs --split-count or --split-fraction")
    kind = args.classifier or "gcc"
    seeds = [args.seed + r for r in range(args.repeats)]

    def run(seed):
        tr, te = split(data, SplitSpec(mode, value, seed))
        model, _ = _train_model(args, tr, _hyper(args, seed=seed), kind)
        return model, evaluate(model, te)

    if args.jobs > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    rep.header("eval", seed=args.seed, repeats=args.repeats, classifier=kind)
    rep.table("runs", ("seed", "classifier", "accuracy"),
              [(s, m.classifier.name.lower(), ev.accuracy) for s, (m, ev) in zip(seeds, results)],
              precision=4)
    accs = np.array([ev.accuracy for _, ev in results])
    rep.table("summary", ("repeats", "mean", "std", "mean_pm_std"),
              [(len(accs), float(accs.mean()), float(accs.std()),
                f"{accs.mean():.4f} ± {accs.std():.4f}")], precision=4)
    if len(results) == 1:
        _report_evaluation(rep, results[0][1], data.n_classes)
    return 0


def cmd_crossval(args) -> int:
    data = _load(args.data, args)
    lams = args.lam if args.lam else list(DEFAULT_LAMBDA_GRID)
    grid = list(itertools.product(args.beta, lams, args.gamma))
    rep = _reporter(args)
    rep.header("crossval", seed=args.seed, folds=args.folds, points=len(grid))
    rep.start("grid", ("beta", "lambda", "gamma", "gcc_accuracy", "lcc_accuracy"))
    best = None
    for beta, lam, gamma in grid:
        hp = _hyper(args, beta=beta, lam=lam, gamma=gamma)
        acc = cross_validate(data, lambda d: _layout_for(args, d), hp, args.folds)
        g, l = float(acc[ClassifierKind.GCC].mean()), float(acc[ClassifierKind.LCC].mean())
        rep.row(beta, lam, gamma, g, l)
        kind = choose_kind(acc)
        score = max(g, l)
        # strict improvement keeps the earliest grid point on ties
        if best is None or score > best[0]:
            best = (score, (beta, lam, gamma), kind)
    score, (beta, lam, gamma), kind = best
    rep.table("selected", ("beta", "lambda", "gamma", "classifier", "accuracy"),
              [(beta, lam, gamma, kind.name.lower(), score)])
    return 0


def cmd_inspect(args) -> int:
    model = Model.load(args.model)
    data = _load(args.data, args, n_classes=model.n_classes)
    report = inspect_codes(model.dictionary, model.beta, data)
    rep = _reporter(args)
    if args.format != "csv":
        rep.header("inspect", seed=args.seed)
    K = model.dictionary.layout.n_atoms
    rep.table("profiles", ["class", "ratio"] + [f"atom_{k}" for k in range(K)],
              [(c + 1, float(report.ratios[c]), *map(float, report.profiles[c]))
               for c in range(model.n_classes)])
    return 0


def cmd_bench(args) -> int:
    data = _load(args.data, args)
    rep = _reporter(args)
    rep.header("bench", seed=args.seed)
    if args.model:
        model = Model.load(args.model)
    else:
        hp = _hyper(args)
        t0 = time.perf_counter()
        model, state = _train_model(args, data, hp, "gcc")
        seconds = time.perf_counter() - t0
        rep.table("train", ("seconds", "iterations", "log_rows"),
                  [(seconds, state.iterations_run, len(state.log))])
    queries = _load(args.test, args, n_classes=model.n_classes).features if args.test else data.features
    idx = np.arange(args.queries) % queries.shape[1]
    model.warm()
    rows = []
    for kind in (ClassifierKind.GCC, ClassifierKind.LCC):
        model.classify(queries[:, 0], kind)
        t0 = time.perf_counter()
        for j in idx:
            model.classify(queries[:, j], kind)
        rows.append((kind.name.lower(), len(idx), (time.perf_counter() - t0) * 1e3 / len(idx)))
    rep.table("query", ("classifier", "queries", "mean_ms"), rows)
    return 0


class _Usage(Exception):
    pass


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "inspect": cmd_inspect,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"crosslabel {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        sys.stderr.close()
        return 0
    except (CrossLabelError, OSError, ValueError) as exc:
        print(f"crosslabel {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
