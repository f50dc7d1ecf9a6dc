"""figviz <kind> --bundle DIR --out FILE [--series ...]"""

from __future__ import annotations

import argparse
import sys

from .bundle import BundleError, load_bundle
from .plots import plot_adjacency_heatmap, plot_curves, plot_logit_heatmap, plot_pareto


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figviz",
                                     description="render figures from exported run bundles")
    sub = parser.add_subparsers(dest="kind", required=True)

    def common(p):
        p.add_argument("--bundle", required=True, help="bundle directory")
        p.add_argument("--out", required=True, help="output image path")
        p.add_argument("--runs", default=None, help="comma-separated run labels")

    curves = sub.add_parser("curves", help="metric training curves")
    common(curves)
    curves.add_argument("--series", default="train_acc",
                        help="comma-separated metric columns")

    pareto = sub.add_parser("pareto", help="diversity-accuracy frontier")
    common(pareto)
    pareto.add_argument("--x", default="train_acc")
    pareto.add_argument("--y", default="diversity")

    logit = sub.add_parser("logit_heatmap", help="normalized logit rows with feasibility frames")
    common(logit)
    logit.add_argument("--snapshot", default="logits_final")

    adj = sub.add_parser("adjacency_heatmap", help="edge scores with true-edge frames")
    common(adj)
    adj.add_argument("--panel", choices=("scores", "frequency"), default="scores")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    runs = [r for r in args.runs.split(",") if r] if args.runs else None
    try:
        bundle = load_bundle(args.bundle)
        if args.kind == "curves":
            result = plot_curves(bundle, [m for m in args.series.split(",") if m],
                                 args.out, runs=runs)
        elif args.kind == "pareto":
            result = plot_pareto(bundle, args.out, runs=runs,
                                 x_metric=args.x, y_metric=args.y)
        elif args.kind == "logit_heatmap":
            result = plot_logit_heatmap(bundle, args.snapshot, args.out,
                                        run=runs[0] if runs else None)
        else:
            result = plot_adjacency_heatmap(bundle, args.out,
                                            run=runs[0] if runs else None, panel=args.panel)
    except (BundleError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
