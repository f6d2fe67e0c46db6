"""Command-line interface for corpus generation, training, and evaluation.

Subcommands: gen-corpus, train, eval, sweep, report. Every command accepts
``--config FILE`` pointing at a key=value file whose entries provide
defaults for that command's flags; explicit command-line flags win. All
randomness flows from the single ``--seed``.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .corpus import build_corpus, load_corpus, mean_annotation_dice, save_corpus
from .metrics import METRIC_NAMES, read_metric_csv, write_metric_csv
from .models import (
    SegBackboneConfig,
    UncertaintyNetConfig,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    run_annotation_count_sweep,
    train_majority_vote,
    train_uncertainty_guided,
    write_routing_log,
)


def _read_config_file(path):
    """key = value lines; '#' starts a comment; keys use flag spelling."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_defaults(parser, argv):
    """Pre-scan for --config and turn its entries into parser defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    values = _read_config_file(known.config)
    valid = {a.dest: a for a in parser._actions}
    for key, raw in values.items():
        if key not in valid:
            raise SystemExit(f"{known.config}: unknown config key {key!r}")
        action = valid[key]
        if isinstance(action, argparse._StoreTrueAction):
            parsed = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            parsed = action.type(raw)
        else:
            parsed = raw
        parser.set_defaults(**{key: parsed})


def _add_common(parser):
    parser.add_argument("--config", help="key=value defaults file")
    parser.add_argument("--seed", type=int, default=0,
                        help="single source of randomness")


def _size(text):
    if "x" in text:
        h, _, w = text.partition("x")
        return int(h), int(w)
    return int(text), int(text)


def cmd_gen_corpus(argv):
    parser = argparse.ArgumentParser(prog="multirater gen-corpus")
    _add_common(parser)
    parser.add_argument("--n", type=int, default=250, help="total sample count")
    parser.add_argument("--size", type=_size, default=(32, 32),
                        help="HxW or a single side length")
    parser.add_argument("--sources", type=int, default=5,
                        help="annotation sources (noise kinds, in order)")
    parser.add_argument("--target-dice", type=float, default=0.7,
                        help="calibrated mean annotation Dice vs clean truth")
    parser.add_argument("--tol", type=float, default=0.02)
    parser.add_argument("--test-fraction", type=float, default=0.2)
    parser.add_argument("--out", required=True, help="corpus directory")
    _apply_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    h, w = args.size
    corpus = build_corpus(args.n, h, w, args.sources, args.target_dice,
                          args.tol, args.seed, test_fraction=args.test_fraction)
    save_corpus(corpus, args.out)
    achieved = mean_annotation_dice(corpus)
    print(f"wrote {args.n} samples to {args.out} "
          f"(train {len(corpus.train_ids)} / test {len(corpus.test_ids)}), "
          f"mean annotation dice {achieved:.4f}")


def _train_config_from(args):
    return TrainConfig(
        epochs=args.epochs, lr0=args.lr0, lr_decay=args.lr_decay,
        tau_a=args.tau_a, tau_b=args.tau_b, lam=args.lam,
        warmup_fraction=args.warmup, seed=args.seed,
        alpha_max=args.alpha_max,
        routing_enabled=not args.no_routing,
    )


def _add_train_flags(parser):
    parser.add_argument("--epochs", type=int, default=24)
    parser.add_argument("--lr0", type=float, default=1e-3)
    parser.add_argument("--lr-decay", type=float, default=0.96)
    parser.add_argument("--tau-a", type=float, default=0.2)
    parser.add_argument("--tau-b", type=float, default=0.2)
    parser.add_argument("--lam", type=float, default=1.0,
                        help="weight of the reliability-weighted Dice term")
    parser.add_argument("--warmup", type=float, default=0.2,
                        help="fraction of epochs with routing disabled")
    parser.add_argument("--alpha-max", type=float, default=1.0,
                        help="ceiling of the consistency-loss schedule")
    parser.add_argument("--no-routing", action="store_true",
                        help="disable quality routing (ablation)")


def cmd_train(argv):
    parser = argparse.ArgumentParser(prog="multirater train")
    _add_common(parser)
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--method", choices=("uma", "mv-baseline"),
                        default="uma")
    parser.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(parser)
    _apply_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    corpus = load_corpus(args.corpus)
    cfg = _train_config_from(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        if args.method == "uma":
            seg, unc, record = train_uncertainty_guided(corpus, cfg)
        else:
            seg, record = train_majority_vote(corpus, cfg)
            unc = None
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            _save_states(out, exc.last_good, corpus, cfg, args.method)
            print(f"training diverged ({exc}); last good checkpoint kept at {out}",
                  file=sys.stderr)
        raise SystemExit(2)
    save_checkpoint(out, seg, unc, cfg.seed,
                    extra={"method": args.method, "corpus": str(args.corpus)})
    record_path = out.with_suffix(out.suffix + ".record.json")
    record_path.write_text(json.dumps(record.to_json_dict(), indent=2))
    if record.routing_log:
        write_routing_log(out.with_suffix(out.suffix + ".routing.csv"),
                          record.routing_log)
    print(f"{args.method}: trained {cfg.epochs} epochs, "
          f"test dice {record.final.dice:.4f}; checkpoint at {out}")


def _save_states(out, states, corpus, cfg, method):
    from .models import SegmentationNet, UncertaintyNet

    seg_state, unc_state = states
    seg = SegmentationNet(SegBackboneConfig(), seed=0)
    seg.load_state(seg_state)
    unc = None
    if unc_state is not None:
        unc = UncertaintyNet(UncertaintyNetConfig(
            num_sources=corpus.num_sources), seed=0)
        unc.load_state(unc_state)
    save_checkpoint(out, seg, unc, cfg.seed,
                    extra={"method": method, "diverged": True})


def cmd_eval(argv):
    parser = argparse.ArgumentParser(prog="multirater eval")
    _add_common(parser)
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--split", choices=("test", "train"), default="test")
    parser.add_argument("--out", required=True, help="metric CSV path")
    _apply_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    ck = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    rows, aggregate = evaluate(ck.seg_net, corpus.split(args.split))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(args.out, rows, aggregate)
    print(f"evaluated {len(rows)} samples; "
          f"dice {aggregate.dice:.4f}, jaccard {aggregate.jaccard:.4f}; "
          f"wrote {args.out}")


def cmd_sweep(argv):
    parser = argparse.ArgumentParser(prog="multirater sweep")
    _add_common(parser)
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--counts", default="2,3,4,5",
                        help="comma-separated source counts")
    parser.add_argument("--out", required=True, help="trend table CSV")
    _add_train_flags(parser)
    _apply_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    corpus = load_corpus(args.corpus)
    counts = [int(c) for c in args.counts.split(",") if c]
    rows = run_annotation_count_sweep(corpus, counts, _train_config_from(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["count", "bitmask"] + list(METRIC_NAMES))
        for row in rows:
            writer.writerow([row["count"], row["bitmask"]]
                            + [repr(row[m]) for m in METRIC_NAMES])
    for row in rows:
        print(f"sources={row['count']} ({row['bitmask']}): "
              f"dice {row['dice']:.4f}")
    print(f"wrote {args.out}")


def cmd_report(argv):
    parser = argparse.ArgumentParser(prog="multirater report")
    _add_common(parser)
    parser.add_argument("--runs", required=True,
                        help="directory scanned recursively for metric CSVs "
                             "named <method>*.csv")
    parser.add_argument("--out", required=True)
    _apply_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    by_method = {}
    for path in sorted(Path(args.runs).rglob("*.csv")):
        if path.name.endswith(".routing.csv"):
            continue
        try:
            _, aggregate = read_metric_csv(path)
        except (ValueError, StopIteration):
            continue
        method = path.stem.split("_seed")[0]
        by_method.setdefault(method, []).append(aggregate)
    if not by_method:
        raise SystemExit(f"no metric CSVs found under {args.runs}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "metric", "mean", "std", "n_runs"])
        for method in sorted(by_method):
            aggs = by_method[method]
            for metric in METRIC_NAMES:
                vals = np.array([getattr(a, metric) for a in aggs])
                writer.writerow([method, metric, repr(float(vals.mean())),
                                 repr(float(vals.std())), len(vals)])
    print(f"aggregated {sum(len(v) for v in by_method.values())} runs "
          f"over {len(by_method)} methods into {args.out}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        names = ", ".join(COMMANDS)
        print(f"usage: multirater {{{names}}} [options]\n"
              f"Run 'multirater <command> --help' for command options.")
        return 0
    command = argv[0]
    if command not in COMMANDS:
        print(f"unknown command {command!r}; expected one of: "
              f"{', '.join(COMMANDS)}", file=sys.stderr)
        return 2
    COMMANDS[command](argv[1:])
    return 0


if __name__ == "__main__":
    sys.exit(main())
