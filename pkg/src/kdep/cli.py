"""Command-line front end.

Usage::

    kdep <subcommand> [--config FILE] [--run-root DIR] [--<key> VALUE ...]

Subcommands run one pipeline stage each, in this order: gen-data,
train-teacher, extract, fit-align, distill, probe, report. ``stats`` prints
the Std Ratio diagnostic, ``verify-theorem`` runs the Monte-Carlo check and
``all`` chains the whole pipeline. Outputs go to ``<run-root>/<config-hash>/``;
``KDEP_RUN_ROOT`` sets the default run root.

Exit status: 0 on success, 1 on invalid input or config, 2 on numeric failure.
"""

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import pipeline
from .container import atomic_write_bytes
from .errors import KdepError, NumericError
from .evaluate import Theorem1Config, verify_theorem1

log = logging.getLogger("kdep")


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)  # --train.lr must not match --train.lr0
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _key_help():
    return "config keys (file or --key VALUE):\n" + "\n".join(
        f"  {k:<36} {spec.help} [default: {cfgmod.format_value(spec.default)}]" for k, spec in cfgmod.KEYS.items())


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--run-root", help="output root (default: $KDEP_RUN_ROOT or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("config overrides")
    for key, spec in cfgmod.KEYS.items():
        keys.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None, help=spec.help)

    parser = _Parser(prog="kdep", description="Feature distillation as pre-training at desk scale.",
                     epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("gen-data", "generate the pretraining corpus and downstream tasks"),
        ("train-teacher", "train the supervised teacher"),
        ("extract", "extract teacher features and logits on the distillation subset"),
        ("fit-align", "fit align.kind and transform.kind on the teacher features"),
        ("distill", "pretrain students for every method and seed"),
        ("probe", "linear-probe every student on the downstream tasks"),
        ("stats", "print Std Ratio before and after alignment/transform"),
        ("verify-theorem", "Monte-Carlo check of E[(T-S)^2] = sigma^2 + sigma_s^2"),
        ("report", "aggregate probes into report CSVs"),
        ("all", "run every stage in order"),
    ]:
        sub.add_parser(name, parents=[common], help=text, description=text, epilog=_key_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def resolve_config(args):
    file_values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = cfgmod.parse_config_text(fh.read(), args.config)
        except OSError as exc:
            raise cfgmod.ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {k: getattr(args, k) for k in cfgmod.KEYS if getattr(args, k, None) is not None}
    return cfgmod.resolve(file_values, overrides)


def _stats(run):
    c = run.cfg
    r = pipeline.std_ratios(run)
    text = (f"align.kind={c['align.kind']}\ntransform.kind={c['transform.kind']}\n"
            f"std_ratio_teacher={r['teacher']!r}\nstd_ratio_aligned={r['aligned']!r}\n"
            f"std_ratio_transformed={r['transformed']!r}\n")
    atomic_write_bytes(run.path("stats.txt"), text.encode())
    sys.stdout.write(text)


def _theorem(run):
    c = run.cfg
    table = verify_theorem1(Theorem1Config(tuple(c["theorem.sigmas"]), c["theorem.sigma_s"],
                                           c["theorem.samples"], c["theorem.seed"]))
    csv_text = table.to_csv()
    atomic_write_bytes(run.path("theorem1.csv"), csv_text.encode())
    sys.stdout.write(csv_text)
    if not table.passed:
        raise NumericError("Monte-Carlo estimates disagree with sigma^2 + sigma_s^2")


def _report(run):
    _, means = pipeline.report(run)
    with open(run.path("report_mean.csv")) as fh:
        sys.stdout.write(fh.read())
    return means


STAGES = {
    "gen-data": pipeline.gen_data,
    "train-teacher": pipeline.train_teacher,
    "extract": pipeline.extract,
    "fit-align": pipeline.fit_align,
    "distill": pipeline.distill_all,
    "probe": pipeline.probe_all,
    "stats": _stats,
    "verify-theorem": _theorem,
    "report": _report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        directory = pipeline.run_dir_for(cfg, args.run_root)
        run = pipeline.Run(cfg, directory)
        log.info("run directory %s", directory)
        if args.command == "all":
            for name in ("gen-data", "train-teacher", "extract", "fit-align", "distill", "probe", "report"):
                STAGES[name](run)
        else:
            STAGES[args.command](run)
    except NumericError as exc:
        print(f"kdep: numeric failure: {exc}", file=sys.stderr)
        return 2
    except KdepError as exc:
        print(f"kdep: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
