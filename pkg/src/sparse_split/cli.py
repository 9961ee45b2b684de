"""Command-line entry point: ``sparse-split <command> ...``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .core import TrainConfig, evaluate, weight_histogram
from .data import _FILES, DATA_ENV, load_mnist
from .errors import ConfigError, DataError, SparseSplitError, TransportError
from .experiments import (
    SWEEP_COLUMNS,
    TABLE_COLUMNS,
    execute_run,
    parse_run_config,
    records_to_csv,
    reproduce_table,
    sweep,
)
from .pipeline.runner import LOOPBACK, TCP, ChannelModel, compare_policies, run_edge
from .pipeline.transport import run_remote
from .split_ee import (
    ExitPolicy,
    SplitPlan,
    attach_exit,
    evaluate_pipeline,
    head_features,
    split_model,
    train_exit,
)
from .topology import enumerate_degree_pairs

log = logging.getLogger("sparse_split")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRANSPORT = 0, 2, 3, 4

MNIST_MIRRORS = (
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args, train: bool = True):
    train_set = load_mnist(args.data_dir, "train") if train else None
    return train_set, load_mnist(args.data_dir, "test")


def _train_overrides(args, cfg: TrainConfig) -> TrainConfig:
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    sizes = args.layers
    if len(sizes) < 2 or any(n < 1 for n in sizes):
        raise ConfigError(f"--layers needs at least two positive widths, got {sizes}")
    print("junction,k,d_out,d_in,density")
    for j in range(1, len(sizes)):
        pairs = enumerate_degree_pairs(sizes[j - 1], sizes[j])
        g = len(pairs)
        for k, (d_out, d_in) in enumerate(pairs, 1):
            print(f"{j},{k},{d_out},{d_in},{k}/{g}")
    return EXIT_OK


def _fetch_urls(dest: Path) -> None:
    last = None
    for base in MNIST_MIRRORS:
        try:
            for pair in _FILES.values():
                for name in pair:
                    with urllib.request.urlopen(base + name + ".gz", timeout=30) as resp:
                        (dest / (name + ".gz")).write_bytes(resp.read())
            return
        except OSError as exc:
            last = exc
            log.warning("mirror %s failed: %s", base, exc)
    raise DataError(f"no MNIST mirror reachable ({last})")


def _fetch_npm(dest: Path) -> None:
    npm = shutil.which("npm")
    if npm is None:
        raise DataError("npm not found on PATH")
    with tempfile.TemporaryDirectory() as tmp:
        proc = subprocess.run([npm, "pack", "mnist-data"], cwd=tmp, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DataError(f"npm pack failed: {proc.stderr.strip()}")
        tarball = next(Path(tmp).glob("*.tgz"))
        with tarfile.open(tarball) as tar:
            tar.extractall(tmp, filter="data")
        found = 0
        for pair in _FILES.values():
            for name in pair:
                for candidate in Path(tmp).rglob(name + "*"):
                    shutil.copy(candidate, dest / candidate.name)
                    found += 1
                    break
        if found != 4:
            raise DataError("npm package did not contain the four MNIST IDX files")


def cmd_fetch(args) -> int:
    dest = Path(args.data_dir or args.out_dir or "data/mnist")
    dest.mkdir(parents=True, exist_ok=True)
    if args.source in ("auto", "url"):
        try:
            _fetch_urls(dest)
        except DataError:
            if args.source == "url":
                raise
            _fetch_npm(dest)
    else:
        _fetch_npm(dest)
    n = len(load_mnist(dest, "train")) + len(load_mnist(dest, "test"))
    print(f"MNIST ready in {dest} ({n} images)")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train needs --config")
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_run_config(text)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    train_set, test_set = _load_data(args)
    result = execute_run(cfg, train_set, test_set, args.out_dir)
    print(json.dumps(result.summary, sort_keys=True))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    out = _out_dir(args, f"runs/table-{args.which}")
    train_set = test_set = None
    if not args.no_train:
        train_set, test_set = _load_data(args)
    train_cfg = _train_overrides(args, TrainConfig())
    records = reproduce_table(args.which, train_set, test_set, out, train_cfg,
                              seed=args.seed or 0, do_train=not args.no_train)
    text = records_to_csv(records, TABLE_COLUMNS)
    (out / f"table_{args.which}.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_histogram(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    out = _out_dir(args, str(Path(args.checkpoint).parent))
    side = {}
    for j in range(1, model.n_junctions + 1):
        hist = weight_histogram(model, j, args.bin_width, (args.low, args.high))
        (out / f"hist_junction{j}.csv").write_text(hist.to_csv())
        side[f"junction{j}"] = {"edges": sum(hist.counts), "clamped_low": hist.clamped_low,
                                "clamped_high": hist.clamped_high}
        print(f"junction {j}: {sum(hist.counts)} weights, {len(hist.counts)} bins, "
              f"clamped {hist.clamped_low}/{hist.clamped_high}")
    (out / "hist_clamped.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_split_run(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    plan = SplitPlan.for_config(model.config, args.split if args.split is not None
                                else (ckpt.plan.split_junction if ckpt.plan else None))
    policy = ExitPolicy(args.tau)
    out = _out_dir(args, str(Path(args.checkpoint).parent / f"split-tau{args.tau:g}"))
    train_needed = ckpt.branch is None or (ckpt.plan is not None and ckpt.plan != plan)
    train_set, test_set = _load_data(args, train=train_needed)
    if args.limit:
        test_set = test_set.subset(args.limit)
    head, tail = split_model(model, plan.split_junction)
    branch = ckpt.branch
    if train_needed:
        seed = args.seed or 0
        branch = attach_exit(head, args.branch_hidden, seed + 1, model.output_width)
        cfg = _train_overrides(args, TrainConfig(seed=seed))
        train_exit(head, branch, train_set, cfg)
        log.info("exit branch accuracy %.4f", evaluate(branch.net, head_features(head, test_set)))
        save_checkpoint(out / "model_with_exit.spmlp", model, plan, policy, branch)
    mode = TCP if args.remote else LOOPBACK
    channel = ChannelModel(args.bandwidth, args.rtt, mode)
    remote = args.remote if args.remote else tail
    metrics, traffic = run_edge(head, branch, policy, test_set, channel, remote)
    report = compare_policies(model, plan, branch, policy, test_set, channel, sc_ee_metrics=metrics)
    (out / "policy_report.csv").write_text(report.to_csv())
    (out / "traffic_log.csv").write_text(traffic.to_csv())
    summary = {"split_junction": plan.split_junction, "split_width": plan.split_width, "tau": args.tau,
               "mode": mode, **metrics.as_dict()}
    reference = evaluate_pipeline(head, branch, tail, policy, test_set)
    summary["matches_reference"] = reference == metrics
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _out_dir(args, "runs/sweep")
    train_set, test_set = _load_data(args)
    seeds = args.seeds or [args.seed or 0]
    train_cfg = _train_overrides(args, TrainConfig())
    records = sweep(args.budget_list, train_set, test_set, out, seeds, train_cfg, args.sparse_width)
    text = records_to_csv(records, SWEEP_COLUMNS)
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_serve_tail(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    s = args.split if args.split is not None else (ckpt.plan.split_junction if ckpt.plan else None)
    _, tail = split_model(ckpt.model, s)
    return run_remote(tail, args.listen)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--data-dir", default=None, help=f"MNIST directory (falls back to ${DATA_ENV})")
    common.add_argument("--out-dir", default=None)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sparse-split", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="list valid (d_out, d_in) pairs per junction")
    p.add_argument("--layers", type=_int_list, required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("fetch", parents=[common], help="download MNIST IDX files")
    p.add_argument("--source", choices=("auto", "url", "npm"), default="auto")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("train", parents=[common], help="train one configuration")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reproduce-tables", parents=[common], help="rebuild the head or tail table")
    p.add_argument("--which", choices=("head", "tail"), required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-train", action="store_true", help="parameter columns only")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("histogram", parents=[common], help="per-junction weight histograms")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bin-width", type=float, default=0.07)
    p.add_argument("--low", type=float, default=-0.70)
    p.add_argument("--high", type=float, default=0.70)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("split-run", parents=[common], help="gated split inference and policy comparison")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--split", type=int, default=None, help="junctions kept on the edge")
    p.add_argument("--remote", default=None, help="host:port of a serve-tail process")
    p.add_argument("--branch-hidden", type=_int_list, default=[])
    p.add_argument("--epochs", type=int, default=None, help="exit-branch epochs when one must be trained")
    p.add_argument("--bandwidth", type=float, default=1e6, help="bytes per second")
    p.add_argument("--rtt", type=float, default=0.01, help="seconds")
    p.add_argument("--limit", type=int, default=None, help="use only the first N test images")
    p.set_defaults(func=cmd_split_run)

    p = sub.add_parser("sweep", parents=[common], help="accuracy versus parameter budget")
    p.add_argument("--budget-list", type=_int_list, required=True)
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--sparse-width", type=int, default=40)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve-tail", parents=[common], help="serve the tail of a checkpoint over TCP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--listen", default="127.0.0.1:5577")
    p.add_argument("--split", type=int, default=None)
    p.set_defaults(func=cmd_serve_tail)
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SparseSplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
