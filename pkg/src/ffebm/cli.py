"""Command-line entry point: ``ffebm {train,gradcheck,gdu,split-bench,eval}``.

Exit codes: 0 success, 1 configuration/data/usage error, 2 numerical
divergence.  Errors are reported on stderr as ``error: <kind>: <message>``.
"""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ENGINE_ALIASES, ExperimentConfig
from .data import DatasetSpec, load_dataset
from .diagnostics import cosine_report, default_tracked_entries, emit_report, gdu_traces
from .engines import EngineSettings, compute_gradients, finite_difference_gradients
from .errors import ConfigError, DimensionError, DivergenceError, FFEBMError
from .model import Model, build_model, load_checkpoint
from .train import SPLIT_COLUMNS, evaluate, split_bench, summarize_splits, train

SUBCOMMANDS = ("train", "gradcheck", "gdu", "split-bench", "eval")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: usage: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {text}")
    return v


def _beta(text):
    v = float(text)
    if not np.isfinite(v) or v <= 0:
        raise argparse.ArgumentTypeError(f"beta must be a positive finite number, got {text}")
    return v


def build_parser():
    p = _Parser(prog="ffebm", description="Train and analyse feedforward-tied energy-based models.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name, help_text in (
            ("train", "train a model; writes metrics.jsonl and checkpoints"),
            ("gradcheck", "compare a gradient engine with finite differences"),
            ("gdu", "truncated EP / ID gradient traces"),
            ("split-bench", "train the same layers under several block partitions"),
            ("eval", "top-1 / top-5 accuracy of a checkpoint")):
        s = sub.add_parser(name, help=help_text, description=help_text)
        s.add_argument("--config", required=True, metavar="PATH", help="experiment JSON file")
        s.add_argument("--seed", type=_seed, help="seed for initialization and data order")
        s.add_argument("--engine", choices=["ep", "ep-explicit", "id"], help="gradient engine")
        s.add_argument("--beta", type=_beta, help="nudging strength")
        s.add_argument("--t-free", type=_positive_int, metavar="N", help="free-phase iterations")
        s.add_argument("--t-nudge", type=_positive_int, metavar="N", help="nudged-phase iterations")
        s.add_argument("--threads", type=_positive_int, metavar="N",
                       help="BLAS thread cap (default: $FFEBM_THREADS)")
        s.add_argument("--out", metavar="PATH", help="output file or directory")
        s.add_argument("--format", choices=["csv", "json"], help="report format")
        if name == "eval":
            s.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint file")
    return p


def apply_overrides(cfg, args):
    """Fold command-line overrides into the experiment config."""
    model = cfg.model
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.beta is not None:
        changes["beta"] = args.beta
    if args.t_free is not None:
        changes["T_free"] = args.t_free
    if args.t_nudge is not None:
        changes["T_nudge"] = args.t_nudge
    if changes:
        cfg.model = replace(model, **changes)
    tr = {}
    if args.seed is not None:
        tr["seed"] = args.seed
        cfg.probe = replace(cfg.probe, seed=args.seed)
    if args.engine is not None:
        tr["engine"] = ENGINE_ALIASES[args.engine]
    if tr:
        cfg.train = replace(cfg.train, **tr)
    return cfg


def fit_inputs(ds, input_shape):
    """Reshape dataset images to the model input shape when sizes agree."""
    shape = tuple(input_shape)
    if ds.images.shape[1:] == shape:
        return ds
    if int(np.prod(ds.images.shape[1:])) != int(np.prod(shape)):
        raise DimensionError(f"dataset samples {ds.images.shape[1:]} do not fit model input {shape}")
    ds.images = ds.images.reshape((len(ds),) + shape)
    return ds


def _datasets(cfg):
    tr = cfg.data_train or DatasetSpec("mnist_idx", split="train")
    va = cfg.data_val or replace(tr, split="val", augmentation=type(tr.augmentation)(), limit=None)
    return (fit_inputs(load_dataset(tr), cfg.model.input_shape),
            fit_inputs(load_dataset(va), cfg.model.input_shape), tr.augmentation)


def probe_batch(cfg):
    rng = np.random.default_rng(cfg.probe.seed)
    m = cfg.model
    x = rng.normal(0.0, cfg.probe.input_scale, size=(cfg.probe.batch,) + tuple(m.input_shape))
    y = rng.integers(0, m.num_classes, size=cfg.probe.batch)
    return x.astype(m.np_dtype), y


def _emit(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_train(cfg, args):
    train_ds, val_ds, aug = _datasets(cfg)
    _, model = build_model(cfg.model)
    out = args.out or os.path.join("runs", "train")
    res = train(model, train_ds, val_ds, cfg.train, out, aug)
    summary = {"out": out, "epochs": len(res.metrics), "checkpoints": res.checkpoints,
               "final": res.metrics[-1] if res.metrics else None}
    print(json.dumps(summary))
    if res.diverged is not None:
        raise res.diverged
    return 0


def cmd_gradcheck(cfg, args):
    _, model = build_model(cfg.model)
    x, y = probe_batch(cfg)
    settings = EngineSettings.from_model(model, engine=cfg.train.engine)
    grads, _, _ = compute_gradients(model, x, y, settings)
    fd = finite_difference_gradients(model, x, y, eps=cfg.probe.fd_eps, T=settings.T_free)
    report = cosine_report(grads, fd)
    fmt = args.format or "json"
    if args.out:
        emit_report(report, args.out, fmt)
    else:
        buf = _report_text(report, fmt)
        sys.stdout.write(buf)
    return 0


def _report_text(report, fmt):
    if fmt == "json":
        return json.dumps({k: report[k] for k in sorted(report)}, indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param_path", "cosine", "rel_l2"])
    for k in sorted(report):
        w.writerow([k, repr(report[k]["cosine"]), repr(report[k]["rel_l2"])])
    return buf.getvalue()


def cmd_gdu(cfg, args):
    _, model = build_model(cfg.model)
    x, y = probe_batch(cfg)
    T = args.t_nudge or cfg.probe.T
    tracked = default_tracked_entries(model, cfg.probe.entries_per_tensor, cfg.probe.seed)
    trace = gdu_traces(model, x, y, cfg.model.beta, T, tracked)
    out = args.out or "gdu_trace." + (args.format or "csv")
    emit_report(trace, out, args.format or "csv")
    print(json.dumps({"out": out, "series": len(trace.series),
                      "fraction_within_5pct": trace.fraction_matching(0.05)}))
    return 0


def cmd_split_bench(cfg, args):
    if not cfg.splits:
        raise ConfigError("config has no 'splits' section")
    train_ds, val_ds, _ = _datasets(cfg)
    engines = [ENGINE_ALIASES[args.engine]] if args.engine else cfg.split_engines
    seeds = [args.seed] if args.seed is not None else cfg.split_seeds
    rows = split_bench(cfg.model, cfg.splits, train_ds, val_ds, cfg.train, seeds, engines)
    fmt = args.format or "csv"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, SPLIT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    else:
        text = json.dumps({"rows": rows, "summary": summarize_splits(rows)}, indent=1) + "\n"
    _emit(text, args.out)
    return 0


def cmd_eval(cfg, args):
    _, val_ds, _ = _datasets(cfg)
    store = load_checkpoint(args.checkpoint)
    model = Model(cfg.model, store)
    top1, top5 = evaluate(model, val_ds, cfg.train.eval_batch)
    text = json.dumps({"checkpoint": args.checkpoint, "top1": top1, "top5": top5}) + "\n"
    _emit(text, args.out)
    return 0


COMMANDS = {"train": cmd_train, "gradcheck": cmd_gradcheck, "gdu": cmd_gdu,
            "split-bench": cmd_split_bench, "eval": cmd_eval}


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FFEBM_THREADS")
    if env:
        try:
            return _positive_int(env)
        except (ValueError, argparse.ArgumentTypeError):
            raise FFEBMError(f"FFEBM_THREADS must be a positive integer, got {env!r}") from None
    return None


def run(argv=None):
    """Parse ``argv`` and execute; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = apply_overrides(ExperimentConfig.load(args.config), args)
        n = _threads(args)
        if n is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=n):
                return COMMANDS[args.command](cfg, args)
        return COMMANDS[args.command](cfg, args)
    except DivergenceError as e:
        print(f"error: divergence: {e}", file=sys.stderr)
        return 2
    except FFEBMError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
