"""Command line: ``gdpd run <config>``, ``gdpd report <dir>``, ``gdpd plot <dir>``.

Exit codes: 0 success, 2 invalid config, 1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import OUTPUT_ROOT_ENV, ConfigError, load_config

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _resolve_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute() and not p.exists():
        p = Path(root) / p
    return p


def _plot(out: Path) -> list[Path]:
    from .harness import load_output
    from .metrics import read_report_csv
    from .plots import emit_plots

    cfg, _ = load_output(out)
    rows = read_report_csv(out / "report.csv") if (out / "report.csv").exists() else []
    return emit_plots(rows, out / "plots", cfg.mode)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gdpd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="train and evaluate every cell of a config")
    p_run.add_argument("config")
    p_run.add_argument("--no-plots", action="store_true")
    p_rep = sub.add_parser("report", help="rebuild reports from finished cells")
    p_rep.add_argument("output_dir")
    p_plot = sub.add_parser("plot", help="emit figures from a report")
    p_plot.add_argument("output_dir")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import harness

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            runner = harness.Runner(cfg)
            reports = runner.run()
            print(harness.format_summary(reports))
            print(f"results in {runner.out}")
            if not args.no_plots:
                for p in _plot(runner.out):
                    print(f"wrote {p}")
        elif args.command == "report":
            out = _resolve_dir(args.output_dir)
            print(harness.format_summary(harness.report(out)))
        else:
            for p in _plot(_resolve_dir(args.output_dir)):
                print(f"wrote {p}")
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - any runtime failure maps to exit 1
        logging.getLogger("gdpd").debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
