"""Command-line entry point: ``eegics <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error,
3 training/selection failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from .cam import CamError, export_cams
from .config import ConfigError, load_config
from .data import DatasetError, SynthParams, read_dataset, restrict_channels, synth_generate, write_dataset
from .model import SpecError, build_student, build_teacher
from .nn import (ModelFormatError, ShapeError, TrainingError, gradient_check, load_model,
                 random_check_case, save_model, train)
from .pipeline import DEFAULT_SWEEP, PipelineError, run_loso, run_n_sweep
from .selection import Selection, SelectionError, select_channels

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

log = logging.getLogger("eegics")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _int_list(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def cmd_synth(args):
    params = SynthParams(n_subjects=args.subjects, per_subject=args.per_subject,
                         channels=args.channels, timepoints=args.timepoints,
                         planted=args.planted, amplitude=args.amp, noise=args.noise,
                         jitter=args.jitter, sampling_rate=args.rate, seed=args.seed)
    ds = synth_generate(params)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.n_channels}x{ds.n_timepoints}) to {args.out}; "
          f"planted channels {list(ds.planted)}")


def cmd_train_teacher(args):
    cfg, _ = load_config(args.config)
    ds = read_dataset(args.data)
    spec = build_teacher(ds.n_channels, ds.n_timepoints, cfg.arch)
    res = train(spec, ds, cfg)
    save_model(res.model, args.out)
    print(json.dumps({"model": args.out, "loss_history": res.loss_history,
                      "checksum": res.model.checksum()}, indent=2))


def cmd_select(args):
    ds = read_dataset(args.data)
    model = load_model(args.model)
    sel = select_channels(model, ds, tau=args.tau, n=args.n, tau_floor=args.tau_floor)
    sel.save(args.out)
    print(f"selected {sel.selected} ({', '.join(sel.channel_names)}) from "
          f"{sel.n_voters} high-confidence samples")


def cmd_train_student(args):
    cfg, _ = load_config(args.config)
    ds = read_dataset(args.data)
    sel = Selection.load(args.channels)
    sub = restrict_channels(ds, sel.selected)
    spec = build_student(build_teacher(ds.n_channels, ds.n_timepoints, cfg.arch),
                         len(sel.selected))
    res = train(spec, sub, cfg)
    save_model(res.model, args.out)
    print(json.dumps({"model": args.out, "channels": sel.selected,
                      "loss_history": res.loss_history, "checksum": res.model.checksum()},
                     indent=2))


def cmd_cam(args):
    ds = read_dataset(args.data)
    model = load_model(args.model)
    paths = export_cams(model, ds, args.indices, args.out_dir, normalize=not args.raw)
    print(f"wrote {len(paths)} heatmaps to {args.out_dir}")


def cmd_loso(args):
    cfg, _ = load_config(args.config)
    if args.n is not None:
        cfg = cfg.replace(n_channels=args.n)
    ds = read_dataset(args.data)
    report, _ = run_loso(ds, cfg, jobs=args.jobs)
    report.save(args.report)
    s = report.summary
    print(f"teacher {s['teacher']['mean']:.4f} ({s['teacher']['std']:.4f})  "
          f"student {s['student']['mean']:.4f} ({s['student']['std']:.4f})  "
          f"folds {s['n_succeeded']}/{s['n_folds']}")


def cmd_sweep(args):
    cfg, _ = load_config(args.config)
    ds = read_dataset(args.data)
    report, _ = run_n_sweep(ds, cfg, args.n, jobs=args.jobs)
    report.save(args.report)
    for row in report.summary["table"]:
        print(f"N={row['n']:>3}  mean {row['mean']:.4f}  std {row['std']:.4f}")


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for trial in range(args.trials):
        spec, x, y = random_check_case(rng)
        rep = gradient_check(spec, x, y, seed=int(rng.integers(2**31)))
        worst = max(worst, rep.max_rel_error)
        if args.verbose:
            for e in rep.entries:
                print(f"trial {trial:3d} {e.name:32s} {str(e.shape):14s} "
                      f"max rel err {e.max_rel_error:.2e} kinks {e.kink_entries}")
    ok = worst < args.tolerance
    print(f"{args.trials} trials, worst relative error {worst:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_TRAIN


def build_parser():
    p = _Parser(prog="eegics", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=8)
    s.add_argument("--per-subject", type=int, default=200)
    s.add_argument("--planted", type=int, default=10)
    s.add_argument("--amp", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--channels", type=int, default=30)
    s.add_argument("--timepoints", type=int, default=384)
    s.add_argument("--jitter", type=float, default=0.2)
    s.add_argument("--rate", type=int, default=128)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-teacher", help="train an all-channel model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("select", help="vote for the top-N channels with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tau", type=float, default=0.90)
    s.add_argument("--tau-floor", type=float)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("train-student", help="train on the channels of a selection file")
    s.add_argument("--data", required=True)
    s.add_argument("--channels", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_student)

    s = sub.add_parser("cam", help="export heatmaps as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--indices", type=_int_list, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--raw", action="store_true", help="skip min-max normalization")
    s.set_defaults(func=cmd_cam)

    s = sub.add_parser("loso", help="leave-one-subject-out teacher/student run")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--report", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_loso)

    s = sub.add_parser("sweep", help="mean student accuracy for several N")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--n", type=_int_list, default=list(DEFAULT_SWEEP))
    s.add_argument("--report", required=True)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of backprop")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (DatasetError, ModelFormatError, ShapeError, CamError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, SelectionError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (ConfigError, SpecError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
