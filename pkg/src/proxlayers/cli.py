"""``proxlayers`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  Output
files are written only after every seed has finished; if writing fails,
the files written so far are removed.
"""

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConvergenceError
from .experiments import TABLES, config_from_mapping, run_experiment

__all__ = ["format_value", "main", "render_csv", "write_outputs"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def format_value(v):
    """Integers verbatim, floats with 17 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def render_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def _render(result):
    files = {}
    for name, header in TABLES[result.experiment].items():
        files[name] = render_csv(header, result.table(name))
    try:
        files["summary.json"] = json.dumps(result.summary(), indent=2, sort_keys=True, allow_nan=False) + "\n"
    except ValueError as exc:
        raise FloatingPointError(f"summary contains a non-finite value: {exc}") from None
    return files


def write_outputs(out_dir, files):
    """Write ``{name: text}`` into ``out_dir``; all or nothing."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for name, text in files.items():
            tmp = out / (name + ".partial")
            written.append(tmp)
            tmp.write_text(text, encoding="utf-8")
        for name in files:
            os.replace(out / (name + ".partial"), out / name)
            written.append(out / name)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return [out / name for name in files]


def _common(p, config_file=False):
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default 1 2 3 4 5)")
    p.add_argument("--jobs", type=int, default=1, help="run seeds in this many processes")
    if config_file:
        p.add_argument("--config", required=True, help="JSON config file")


def build_parser():
    parser = _Parser(prog="proxlayers", description="Proximal-layer experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("twomoon", help="kernel-warped two-moon embedding")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--landmarks", type=int, default=100)
    p.add_argument("--lam", type=float, default=1e-4, help="warping prox weight")
    _common(p)

    p = sub.add_parser("dropout-sim", help="dropout prox layer vs dropout-regularized risk")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--c-coef", dest="c_coef", type=float, default=0.2, help="ridge weight c = c_coef * lambda^2 * mu")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.08)
    _common(p)

    p = sub.add_parser("proxcca-train", help="two-view classifier with the prox-CCA layer")
    _common(p, config_file=True)

    p = sub.add_parser("proxlstm-train", help="vanilla vs proximal LSTM on noisy majority sequences")
    _common(p, config_file=True)

    p = sub.add_parser("gcca-check", help="generalized CCA closed form vs alternating minimization")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--trials", type=int, default=4, help="problems per seed")
    _common(p)
    return parser


_FLAGS = {
    "twomoon": ("n", "noise", "landmarks", "lam"),
    "dropout-sim": ("lam", "mu", "c_coef", "n", "noise"),
    "gcca-check": ("views", "trials"),
}


def _load_config(args):
    if args.command in _FLAGS:
        mapping = {k: getattr(args, k) for k in _FLAGS[args.command]}
    else:
        try:
            mapping = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if args.seeds is not None:
        if isinstance(mapping, dict) and "seeds" in mapping:
            raise ConfigError("seeds given both in the config file and on the command line")
        mapping = {**mapping, "seeds": args.seeds} if isinstance(mapping, dict) else mapping
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {args.jobs}")
    return config_from_mapping(args.command, mapping)


def _report(result):
    for run in result.runs:
        shown = ", ".join(f"{k}={v:.6g}" for k, v in run.metrics.items())
        print(f"seed {run.seed}: {shown} ({run.seconds:.1f} s)")
    if result.experiment == "dropout-sim":
        for run in result.runs:
            print(f"Pearson r (seed {run.seed}) = {run.metrics['pearson_r']:.6f}")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(args.command, cfg, jobs=args.jobs)
        files = _render(result)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, ConvergenceError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    paths = write_outputs(args.out, files)
    _report(result)
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
