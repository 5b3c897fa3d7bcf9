"""Command-line entry point wiring the pipeline stages together.

Every subcommand emits machine-readable JSON (single records to stdout,
per-epoch histories as JSON lines). Options may come from a key = value
config file; explicit flags win. Exit codes: 1 usage, 2 config/contract,
3 data format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import load_dataset, save_dataset, save_manifest
from .errors import (ConfigError, ContractError, FormatError, NumericError,
                     ProtopawsError)
from .history import TrainHistory
from .knn import KnnConfig, evaluate_knn
from .nn import (LarsState, init_head, load_head, make_warmup_cosine,
                 save_head)
from .paws import PawsConfig, PrototypeSet, sharpen, train_paws
from .selection import (SELECTION_METHODS, SelectionReport, class_coverage,
                        coverage_bench, select_prototypes)
from .synth import MixtureSpec, gen_mixture
from .vmfsne import VmfSneConfig, pretrain_vmfsne

_thread_limiter = None


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _read_config(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config not found: {path}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill in flags the user did not pass from the config file, if any."""
    config = _read_config(args.config) if getattr(args, "config", None) else {}
    for key, raw in config.items():
        if not hasattr(args, key):
            raise ConfigError(f"unknown config key: {key}")
        if getattr(args, key) is None:
            setattr(args, key, raw)
    return args


def _opt(args, key, cast, default):
    value = getattr(args, key)
    if value is None:
        return default
    try:
        if cast is bool and isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def _apply_threads(args) -> None:
    global _thread_limiter
    threads = getattr(args, "threads", None)
    if threads is None:
        threads = os.environ.get("PROTOPAWS_THREADS")
    if not threads:
        return
    try:
        n = int(threads)
    except ValueError as exc:
        raise ConfigError(f"bad thread count: {threads!r}") from exc
    try:
        from threadpoolctl import threadpool_limits
        _thread_limiter = threadpool_limits(limits=n)
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(n)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _load_labelled(path: str):
    ds = load_dataset(path)
    if ds.labels is None:
        raise ContractError(f"{path} has no labels")
    return ds


def _cmd_gen_synthetic(args) -> int:
    per_class = [int(x) for x in str(args.per_class).split(",")]
    if len(per_class) == 1:
        per_class = per_class * _opt(args, "classes", int, 10)
    spec = MixtureSpec(
        n_classes=_opt(args, "classes", int, 10),
        points_per_class=tuple(per_class),
        dim=_opt(args, "dim", int, 64),
        class_kappa=_opt(args, "class_kappa", float, 2000.0),
        view_kappa=_opt(args, "view_kappa", float, 500.0),
        n_global=_opt(args, "globals", int, 4),
        n_local=_opt(args, "locals", int, 6),
        seed=int(args.seed),
    )
    ds = gen_mixture(spec)
    save_dataset(ds, args.out)
    save_manifest(args.out, [f"class_{c}" for c in range(spec.n_classes)], "gen-synthetic")
    _emit({"out": str(args.out), "n_items": ds.n_items, "dim": ds.dim,
           "n_global": ds.n_global, "n_local": ds.n_local, "n_classes": ds.n_classes})
    return 0


def _cmd_pretrain_vmfsne(args) -> int:
    ds = load_dataset(args.data)
    cfg = VmfSneConfig(
        perplexity=_opt(args, "perplexity", float, 30.0),
        tau=_opt(args, "tau", float, 0.1),
        batch_size=_opt(args, "batch_size", int, 512),
        epochs=_opt(args, "epochs", int, 20),
    )
    rng = np.random.default_rng(int(args.seed))
    head = init_head(ds.dim, _opt(args, "hidden_dim", int, 384),
                     _opt(args, "out_dim", int, 512), rng)
    state = LarsState.init(head, _opt(args, "momentum", float, 0.9),
                           _opt(args, "weight_decay", float, 1e-6),
                           _opt(args, "trust_coef", float, 0.001))
    pool_rows = ds.n_items * ds.n_global
    sched = make_warmup_cosine(cfg.epochs * (pool_rows // cfg.batch_size),
                               _opt(args, "start_lr", float, 0.3),
                               _opt(args, "max_lr", float, 6.4),
                               _opt(args, "final_lr", float, 0.064),
                               _opt(args, "warmup_frac", float, 0.1))
    eval_fn = None
    if args.eval:
        eval_ds = _load_labelled(args.eval)
        if ds.labels is None:
            raise ContractError("--eval requires the training data to be labelled too")
        knn_cfg = KnnConfig(_opt(args, "knn_k", int, 200), _opt(args, "knn_tau", float, 0.1))
        eval_fn = lambda h: evaluate_knn(ds, eval_ds, knn_cfg, head=h)  # noqa: E731
    head, history = pretrain_vmfsne(ds, head, cfg, state, sched, rng, eval_fn)
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_head(head, out_dir / "vmfsne.head")
    history.to_jsonl(out_dir / "vmfsne_history.jsonl")
    _emit({"head": str(out_dir / "vmfsne.head"),
           "history": str(out_dir / "vmfsne_history.jsonl"),
           "final": history.records[-1]})
    return 0


def _cmd_train_paws(args) -> int:
    ds = _load_labelled(args.data)
    proto_indices = np.loadtxt(args.prototypes, dtype=np.int64, ndmin=1)
    cfg = PawsConfig(
        tau=_opt(args, "tau", float, 0.1),
        sharpen_T=_opt(args, "sharpen_t", float, 0.25),
        loss_mode=_opt(args, "loss_mode", str, "pseudolabel"),
        me_max=_opt(args, "me_max", bool, True),
        label_smoothing=_opt(args, "label_smoothing", float, 0.1),
        per_class=_opt(args, "per_class", int, 0),
        classes_per_batch=_opt(args, "classes_per_batch", int, 0),
        labelled_batch_size=_opt(args, "labelled_batch_size", int, 320),
        unlabelled_batch_size=_opt(args, "unlabelled_batch_size", int, 512),
        epochs=_opt(args, "epochs", int, 50),
        n_local=_opt(args, "n_local", int, 6),
    )
    protos = PrototypeSet.from_dataset(ds, proto_indices, cfg.label_smoothing)
    rng = np.random.default_rng(int(args.seed))
    if args.init_head:
        head = load_head(args.init_head)
        if head.in_dim != ds.dim:
            raise ContractError(f"checkpoint expects dim {head.in_dim}, data has {ds.dim}")
    else:
        head = init_head(ds.dim, _opt(args, "hidden_dim", int, 384),
                         _opt(args, "out_dim", int, 512), rng)
    state = LarsState.init(head, _opt(args, "momentum", float, 0.9),
                           _opt(args, "weight_decay", float, 1e-6),
                           _opt(args, "trust_coef", float, 0.001))
    steps_per_epoch = -(-ds.n_items // cfg.unlabelled_batch_size)
    sched = make_warmup_cosine(cfg.epochs * steps_per_epoch,
                               _opt(args, "start_lr", float, 0.3),
                               _opt(args, "max_lr", float, 6.4),
                               _opt(args, "final_lr", float, 0.064),
                               _opt(args, "warmup_frac", float, 0.1))
    val_ds = _load_labelled(args.eval) if args.eval else None
    head, history = train_paws(ds, protos, head, cfg, state, sched, rng, val_ds)
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_head(head, out_dir / "paws.head")
    history.to_jsonl(out_dir / "paws_history.jsonl")
    _emit({"head": str(out_dir / "paws.head"),
           "history": str(out_dir / "paws_history.jsonl"),
           "final": history.records[-1]})
    return 0


def _cmd_select_prototypes(args) -> int:
    ds = load_dataset(args.data)
    method = _opt(args, "method", str, "simple_kmeans").replace("-", "_")
    if method not in SELECTION_METHODS:
        raise ConfigError(f"method must be one of {SELECTION_METHODS}")
    budget = _opt(args, "budget", int, None)
    if budget is None:
        raise ConfigError("--budget is required")
    rng = np.random.default_rng(int(args.seed))
    indices = select_prototypes(ds, method, budget, rng)
    covered = class_coverage(indices, ds.labels) if ds.labels is not None else 0
    report = SelectionReport(method, budget, int(args.seed),
                             [int(i) for i in indices], covered)
    if args.out:
        Path(args.out).write_text("\n".join(str(i) for i in indices) + "\n")
    print(report.to_json())
    return 0


def _cmd_eval_knn(args) -> int:
    train_ds = _load_labelled(args.train)
    eval_ds = _load_labelled(args.eval)
    cfg = KnnConfig(_opt(args, "k", int, 200), _opt(args, "tau", float, 0.1))
    head = load_head(args.head) if args.head else None
    acc = evaluate_knn(train_ds, eval_ds, cfg, head=head)
    _emit({"accuracy": acc, "k": cfg.k, "tau": cfg.tau,
           "representation": "head" if head is not None else "canonical"})
    return 0


def _cmd_coverage_bench(args) -> int:
    ds = _load_labelled(args.data)
    budget = _opt(args, "budget", int, ds.n_classes)
    n_seeds = _opt(args, "seeds", int, 20)
    methods = tuple(_opt(args, "methods", str, "simple_kmeans,usl_lite,random").split(","))
    base = int(args.seed)
    reports = coverage_bench(ds, budget, range(base, base + n_seeds), methods)
    lines = [r.to_json() for r in reports]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    means = {m: float(np.mean([r.classes_covered for r in reports if r.method == m]))
             for m in methods}
    _emit({"budget": budget, "mean_coverage": means, "seeds": n_seeds})
    return 0


def _cmd_sharpen_curve(args) -> int:
    T = _opt(args, "T", float, 0.25)
    n_classes = _opt(args, "classes", int, 2)
    if n_classes < 2:
        raise ConfigError("--classes must be >= 2")

    def curve_point(p_first: float) -> float:
        rest = (1.0 - p_first) / (n_classes - 1)
        vec = np.full(n_classes, rest)
        vec[0] = p_first
        return float(sharpen(vec, T)[0])

    if args.p is not None:
        print(repr(curve_point(float(args.p))))
        return 0
    steps = _opt(args, "steps", int, 101)
    lines = [json.dumps({"p": float(p), "sharpened": curve_point(float(p))},
                        sort_keys=True)
             for p in np.linspace(0.0, 1.0, steps)]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="protopaws", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None, help="key = value config file; flags win")
        p.add_argument("--threads", default=None,
                       help="cap worker threads (or set PROTOPAWS_THREADS)")
        return p

    p = add("gen-synthetic", _cmd_gen_synthetic, help="generate a labelled vMF mixture dataset")
    p.add_argument("--classes", default=None)
    p.add_argument("--per-class", dest="per_class", default="200",
                   help="count, or comma list for imbalance")
    p.add_argument("--dim", default=None)
    p.add_argument("--class-kappa", dest="class_kappa", default=None)
    p.add_argument("--view-kappa", dest="view_kappa", default=None)
    p.add_argument("--globals", default=None)
    p.add_argument("--locals", default=None)
    p.add_argument("--seed", required=True)
    p.add_argument("--out", required=True)

    p = add("pretrain-vmfsne", _cmd_pretrain_vmfsne,
            help="pretrain a projection head by neighbour embedding")
    p.add_argument("--data", required=True)
    p.add_argument("--eval", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    for key in ("perplexity", "tau", "batch-size", "epochs", "hidden-dim", "out-dim",
                "start-lr", "max-lr", "final-lr", "warmup-frac", "momentum",
                "weight-decay", "trust-coef", "knn-k", "knn-tau"):
        p.add_argument(f"--{key}", dest=key.replace("-", "_"), default=None)
    p.add_argument("--seed", required=True)

    p = add("train-paws", _cmd_train_paws, help="prototype-based semi-supervised training")
    p.add_argument("--data", required=True)
    p.add_argument("--eval", default=None)
    p.add_argument("--prototypes", required=True, help="newline-delimited item indices")
    p.add_argument("--init-head", dest="init_head", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    for key in ("tau", "sharpen-t", "loss-mode", "me-max", "label-smoothing",
                "per-class", "classes-per-batch", "labelled-batch-size",
                "unlabelled-batch-size", "epochs", "n-local", "hidden-dim",
                "out-dim", "start-lr", "max-lr", "final-lr", "warmup-frac",
                "momentum", "weight-decay", "trust-coef"):
        p.add_argument(f"--{key}", dest=key.replace("-", "_"), default=None)
    p.add_argument("--seed", required=True)

    p = add("select-prototypes", _cmd_select_prototypes,
            help="unsupervised selection of items to label")
    p.add_argument("--data", required=True)
    p.add_argument("--method", default=None, help="|".join(SELECTION_METHODS))
    p.add_argument("--budget", default=None)
    p.add_argument("--out", default=None, help="newline-delimited index list")
    p.add_argument("--seed", required=True)

    p = add("eval-knn", _cmd_eval_knn, help="weighted kNN accuracy of a representation")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--head", default=None, help="projection head checkpoint")
    p.add_argument("--k", default=None)
    p.add_argument("--tau", default=None)

    p = add("coverage-bench", _cmd_coverage_bench,
            help="class coverage of selection methods over many seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--budget", default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--methods", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", required=True)

    p = add("sharpen-curve", _cmd_sharpen_curve,
            help="sharpened probability of the first class, others equal")
    p.add_argument("--T", default=None)
    p.add_argument("--classes", default=None)
    p.add_argument("--p", default=None)
    p.add_argument("--steps", default=None)
    p.add_argument("--out", default=None)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args = _merge_config(args)
    _apply_threads(args)
    return args.fn(args)


def main(argv=None) -> int:
    try:
        return run(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ProtopawsError as exc:
        kind = type(exc).__name__
        print(f"{kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
