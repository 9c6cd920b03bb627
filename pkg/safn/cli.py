"""
SAFN CLI - train, evaluate and interpret the sparse-attention fusion network.

Usage:
    safn [--config FILE] [--set KEY=VALUE ...] <command> [options]

Commands:
    gen-data    Generate a synthetic dataset (data.csv + manifest.json)
    cv          k-fold cross-validation of the full model
    train       Train a single fold and save its checkpoint
    ablate      Cross-validate the ablation grid
    attribute   Gradient x Input attribution from checkpoints
    stats       PD vs HC group statistics
    report      Assemble report.md from an output directory

Exit codes:
    0 success, 1 usage error, 2 data error, 3 numeric failure, 130 interrupted

Environment:
    SAFN_OUTPUT_DIR  Default output directory (default: safn-output)
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from safn import ablations, training
from safn.checkpoint import load_checkpoint, save_checkpoint
from safn.config import DEFAULT_OUTPUT, OUTPUT_ENV, RunConfig, resolve_config, write_resolved_config
from safn.core import DataError, Modality, NumericError, SafnError, ShapeError, UsageError
from safn.data import RawTable, DatasetSchema, load_csv, load_manifest, to_batch, write_dataset
from safn.interpret import (
    accumulate_attributions,
    gate_contributions,
    grad_x_input,
    pooling_attention,
    top_k_features,
    write_attribution_csv,
    write_gate_csv,
)
from safn.logging_context import install_structured_logging, log_context
from safn.metrics import METRIC_COLUMNS, format_mean_sd, write_confusion_csv, write_curve_csv, write_metrics_csv
from safn.model import predict
from safn.stats import run_group_analysis, write_stats_csv
from safn.synthetic import generate_synthetic
from safn.utils.fingerprint import file_digest, run_fingerprint

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)-7s [%(safn_run_id)s fold=%(safn_fold)s ablation=%(safn_ablation)s] %(name)s: %(message)s"

METRICS_FILE = "metrics.csv"
ROC_FILE = "roc_curve_mean.csv"
PR_FILE = "pr_curve_mean.csv"
CONFUSION_FILE = "confusion_matrix_mean.csv"
GATE_FILE = "gate_report.csv"
ABLATION_FILE = "ablation_results.csv"
ATTRIBUTION_FILE = "attribution.csv"
TOP_FEATURES_FILE = "top_features.csv"
STATS_FILE = "group_stats.csv"
REPORT_FILE = "report.md"


class Colors:
    RESET = "\033[0m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    RED = "\033[31m"
    GREEN = "\033[32m"
    YELLOW = "\033[33m"
    CYAN = "\033[36m"

    @classmethod
    def disable(cls):
        for attr in ["RESET", "BOLD", "DIM", "RED", "GREEN", "YELLOW", "CYAN"]:
            setattr(cls, attr, "")


if not sys.stdout.isatty() or os.environ.get("NO_COLOR"):
    Colors.disable()


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(level: str, fmt: str | None = None) -> logging.Handler:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(fmt or LOG_FORMAT))
    install_structured_logging(handler)
    root = logging.getLogger("safn")
    for existing in list(root.handlers):
        if getattr(existing, "_safn_cli", False):
            root.removeHandler(existing)
    setattr(handler, "_safn_cli", True)
    root.addHandler(handler)
    root.setLevel(level.upper())
    return handler


# ============================================================================
# HELPERS
# ============================================================================

def load_dataset(config: RunConfig, synthetic: bool = False) -> tuple[RawTable, DatasetSchema]:
    if synthetic:
        dataset = generate_synthetic(config.synthetic)
        return dataset.table, dataset.schema
    csv_path, manifest_path = config.data.resolve()
    schema = load_manifest(manifest_path)
    table = load_csv(csv_path, schema)
    logger.info("Loaded %d rows from %s (sha256 %s)", len(table.frame), csv_path, file_digest(str(csv_path))[:12])
    return table, schema


def _output_dir(config: RunConfig) -> Path:
    out = config.output_path
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_aggregate(title: str, aggregate: Any) -> None:
    print(f"\n{Colors.BOLD}{title}{Colors.RESET}")
    print("-" * 40)
    for name in METRIC_COLUMNS:
        print(f"  {name:<18} {format_mean_sd(aggregate, name)}")


def _write_fold_logs(out: Path, fold_result: training.FoldResult, prefix: str) -> None:
    fold_result.epoch_log.to_csv(out / f"{prefix}_epochs.csv", index=False, float_format="%.10g")
    fold_result.step_log.to_csv(out / f"{prefix}_steps.csv", index=False, float_format="%.10g")
    if fold_result.checkpoint is not None:
        save_checkpoint(out / f"{prefix}.ckpt.json", fold_result.checkpoint)


def _cv_gate_report(result: training.CvResult):
    reports = [f.report for f in result.folds if f.report.gate_means]
    if not reports:
        return None
    modalities = tuple(reports[0].gate_means)
    rows = [np.array([r.gate_means[m] for m in modalities]) for r in reports]
    sizes = [f.val_probs.size for f in result.folds if f.report.gate_means]
    return gate_contributions(rows, modalities, weights=sizes)


def _markdown_table(frame: pd.DataFrame, digits: int = 3) -> str:
    def cell(value: Any) -> str:
        if isinstance(value, (float, np.floating)):
            return f"{value:.{digits}f}"
        return str(value)

    lines = [
        "| " + " | ".join(str(c) for c in frame.columns) + " |",
        "|" + "|".join("---" for _ in frame.columns) + "|",
    ]
    for row in frame.itertuples(index=False):
        lines.append("| " + " | ".join(cell(v) for v in row) + " |")
    return "\n".join(lines)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gen_data(config: RunConfig, args) -> int:
    """Write a synthetic CSV + manifest pair."""
    dest = Path(args.dest or config.data.data_dir or config.output_path / "data")
    dataset = generate_synthetic(config.synthetic)
    csv_path, manifest_path = write_dataset(dest, dataset.table, dataset.schema)
    write_resolved_config(config, dest)
    n_features = len(dataset.schema.feature_columns)
    print(f"{Colors.GREEN}✓{Colors.RESET} Wrote {len(dataset.table)} rows x {n_features} features to {csv_path}")
    print(f"  Manifest:     {manifest_path}")
    for modality, columns in dataset.informative.items():
        if columns:
            print(f"  Informative {modality.value:<12} {', '.join(columns[:8])}{' ...' if len(columns) > 8 else ''}")
    return 0


def cmd_cv(config: RunConfig, args) -> int:
    """Full k-fold run: metrics, mean curves, averaged confusion matrix, gate report, logs, checkpoints."""
    table, schema = load_dataset(config, args.synthetic)
    out = _output_dir(config)
    write_resolved_config(config, out)
    result = training.run_cv(
        table, schema, config.model, config.loss, config.optim, config.cv,
        baseline_config=config.mlp,
    )
    write_metrics_csv(out / METRICS_FILE, result.aggregate)
    write_curve_csv(out / ROC_FILE, result.aggregate.roc_curve)
    write_curve_csv(out / PR_FILE, result.aggregate.pr_curve)
    write_confusion_csv(out / CONFUSION_FILE, result.aggregate.confusion)
    gate_report = _cv_gate_report(result)
    if gate_report is not None:
        write_gate_csv(out / GATE_FILE, gate_report)
    for i, fold_result in enumerate(result.folds):
        _write_fold_logs(out, fold_result, f"fold{i}")
    if result.dropped_columns:
        print(f"{Colors.DIM}Dropped {len(result.dropped_columns)} high-missingness columns{Colors.RESET}")
    _print_aggregate(f"Cross-validation ({config.cv.k} folds)", result.aggregate)
    if gate_report is not None:
        print(f"\n{Colors.BOLD}Gate contributions{Colors.RESET}")
        for m, raw, share in zip(gate_report.modalities, gate_report.raw, gate_report.shares):
            print(f"  {m.value:<14} {raw:.4f}  ({share * 100:.1f}%)")
    print(f"\n{Colors.GREEN}✓{Colors.RESET} Outputs in {out}")
    return 0


def cmd_train(config: RunConfig, args) -> int:
    """Train one fold of the CV plan and save its checkpoint and logs."""
    table, schema = load_dataset(config, args.synthetic)
    out = _output_dir(config)
    write_resolved_config(config, out)
    spec = None if args.ablation is None else ablations.registry.require(args.ablation)
    result = training.run_single_fold(
        table, schema, config.model, config.loss, config.optim, config.cv, args.fold, spec,
        baseline_config=config.mlp,
    )
    prefix = f"fold{args.fold}"
    _write_fold_logs(out, result, prefix)
    row = {"fold": args.fold, "best_epoch": result.best_epoch, **result.report.metric_row()}
    pd.DataFrame([row]).to_csv(out / f"{prefix}_metrics.csv", index=False, float_format="%.10g")
    print(f"\n{Colors.BOLD}Fold {args.fold}{Colors.RESET} (best epoch {result.best_epoch})")
    for name in METRIC_COLUMNS:
        print(f"  {name:<18} {row[name]:.4f}")
    if result.checkpoint is not None:
        print(f"\n{Colors.GREEN}✓{Colors.RESET} Checkpoint: {out / f'{prefix}.ckpt.json'}")
    return 0


def cmd_ablate(config: RunConfig, args) -> int:
    """Cross-validate each ablation on the same folds; failed rows are reported, not fatal."""
    names = args.names or config.ablations
    specs = ablations.registry.select(names)
    if args.include_logreg:
        specs.append(ablations.LOGREG_BASELINE)
    table, schema = load_dataset(config, args.synthetic)
    out = _output_dir(config)
    write_resolved_config(config, out)
    outcomes = ablations.run_ablation_grid(
        table, schema, specs, config.model, config.loss, config.optim, config.cv,
        baseline_config=config.mlp,
    )
    ablations.write_ablation_csv(out / ABLATION_FILE, outcomes)

    print(f"\n{Colors.BOLD}{'Model':<42} {'ROC-AUC':<14} {'Bal. Acc':<14} {'F1':<14}{Colors.RESET}")
    print("-" * 86)
    failed = 0
    for outcome in outcomes:
        if outcome.result.ok and outcome.result.value is not None:
            agg = outcome.result.value.aggregate
            print(
                f"{outcome.spec.name:<42} {format_mean_sd(agg, 'roc_auc'):<14} "
                f"{format_mean_sd(agg, 'balanced_accuracy'):<14} {format_mean_sd(agg, 'f1'):<14}"
            )
        else:
            failed += 1
            print(f"{outcome.spec.name:<42} {Colors.RED}failed:{Colors.RESET} {outcome.result.error}")
    print(f"\n{Colors.GREEN}✓{Colors.RESET} Wrote {out / ABLATION_FILE}")
    return 3 if failed == len(outcomes) else 0


def cmd_attribute(config: RunConfig, args) -> int:
    """Accumulate Gradient x Input over each checkpoint's validation rows (or all rows)."""
    table, schema = load_dataset(config, args.synthetic)
    out = _output_dir(config)
    write_resolved_config(config, out)
    reports = []
    gate_rows: list[np.ndarray] = []
    gate_modalities: tuple[Modality, ...] | None = None
    pooling: dict[Modality, list[pd.Series]] = {}
    for path in args.checkpoint:
        ckpt = load_checkpoint(path)
        if ckpt.preprocessor is None or ckpt.schema is None:
            raise DataError(f"Checkpoint {path} carries no fitted preprocessor")
        fold = args.fold if args.fold is not None else ckpt.metadata.get("fold")
        if fold is None or args.all_rows:
            rows = table
        else:
            _, rows, _ = training.fold_tables(table, schema, config.cv, int(fold))
        batch = to_batch(rows, ckpt.preprocessor, ckpt.schema)
        with log_context(fold=None if fold is None else int(fold)):
            reports.append(grad_x_input(ckpt.params, batch, config.attribution.target, config.attribution.chunk_size))
            for m, series in pooling_attention(ckpt.params, batch, config.attribution.chunk_size).items():
                pooling.setdefault(m, []).append(series)
            if ckpt.wiring.gates:
                _, alphas = predict(ckpt.params, batch, config.attribution.chunk_size)
                gate_rows.append(alphas)
                gate_modalities = ckpt.wiring.modalities

    report = accumulate_attributions(reports)
    write_attribution_csv(out / ATTRIBUTION_FILE, report)
    top = top_k_features(report, min(config.attribution.top_k, len(report.features)))
    pd.DataFrame(
        [(rank, m.value, name, pct) for rank, (m, name, pct) in enumerate(top, start=1)],
        columns=["rank", "modality", "feature", "percent"],
    ).to_csv(out / TOP_FEATURES_FILE, index=False, float_format="%.6g")
    for m, parts in pooling.items():
        pd.concat(parts, axis=1).mean(axis=1).rename("mean_weight").to_csv(
            out / f"pooling_attention_{m.value}.csv", index_label="feature", float_format="%.10g"
        )
    if gate_rows and gate_modalities is not None:
        write_gate_csv(out / GATE_FILE, gate_contributions(gate_rows, gate_modalities))

    print(f"\n{Colors.BOLD}Top {len(top)} features ({report.n_samples} samples){Colors.RESET}")
    for rank, (m, name, pct) in enumerate(top, start=1):
        print(f"  {rank:>3}. {name:<28} {Colors.DIM}{m.value:<12}{Colors.RESET} {pct:6.2f}%")
    return 0


def cmd_stats(config: RunConfig, args) -> int:
    """Nonparametric PD vs HC comparison of every feature column, FDR-adjusted."""
    table, schema = load_dataset(config, args.synthetic)
    out = _output_dir(config)
    write_resolved_config(config, out)
    results = run_group_analysis(table, schema, q=config.stats.q, first_visit_only=config.stats.first_visit_only)
    write_stats_csv(out / STATS_FILE, results)
    shown = results[: args.top]
    print(f"\n{Colors.BOLD}{'Variable':<16} {'Test':<16} {'p (FDR)':<10} {'Effect':<9} {'Magnitude':<10}{Colors.RESET}")
    print("-" * 64)
    for r in shown:
        mark = f"{Colors.GREEN}*{Colors.RESET}" if r.significant else " "
        print(f"{r.variable:<16} {r.test:<16} {r.p_adjusted:<10.3g} {r.effect_size:<9.3f} {r.effect_magnitude:<10}{mark}")
    n_sig = sum(r.significant for r in results)
    print(f"\n{n_sig} of {len(results)} variables significant at q={config.stats.q:g}")
    return 0


def cmd_report(config: RunConfig, args) -> int:
    """Collect the CSVs present in the output directory into report.md."""
    src = Path(args.directory) if args.directory else config.output_path
    if not src.is_dir():
        raise DataError(f"Output directory {src} does not exist")
    sections: list[str] = ["# SAFN run report", ""]

    metrics_path = src / METRICS_FILE
    if metrics_path.exists():
        frame = pd.read_csv(metrics_path)
        mean_row = frame[frame["fold"].astype(str) == "mean"]
        if not mean_row.empty:
            summary = pd.DataFrame({
                "metric": list(METRIC_COLUMNS),
                "mean ± sd": [f"{mean_row.iloc[0][n]:.2f} ± {mean_row.iloc[0][f'{n}_sd']:.2f}" for n in METRIC_COLUMNS],
            })
            sections += ["## Cross-validated performance", "", _markdown_table(summary), ""]
        folds = frame[frame["fold"].astype(str) != "mean"][["fold", *METRIC_COLUMNS]]
        sections += ["### Per fold", "", _markdown_table(folds), ""]

    ablation_path = src / ABLATION_FILE
    if ablation_path.exists():
        frame = pd.read_csv(ablation_path, keep_default_na=False, na_values=[""])
        table_rows = pd.DataFrame({"model": frame["model"]})
        for name in METRIC_COLUMNS:
            table_rows[name] = [
                "failed" if status != "ok" else f"{m:.2f} ± {s:.2f}"
                for m, s, status in zip(frame[name], frame[f"{name}_sd"], frame["status"])
            ]
        sections += ["## Ablations", "", _markdown_table(table_rows), ""]

    gate_path = src / GATE_FILE
    if gate_path.exists():
        sections += ["## Modality gates", "", _markdown_table(pd.read_csv(gate_path)), ""]

    top_path = src / TOP_FEATURES_FILE
    if top_path.exists():
        sections += ["## Most influential features", "", _markdown_table(pd.read_csv(top_path), digits=2), ""]

    stats_path = src / STATS_FILE
    if stats_path.exists():
        frame = pd.read_csv(stats_path, keep_default_na=False)
        significant = frame[frame["significant"].astype(str) == "True"]
        shown = significant if not significant.empty else frame.head(args.top)
        sections += [
            "## Group differences",
            "",
            f"{len(significant)} of {len(frame)} variables significant after FDR correction.",
            "",
            _markdown_table(shown[["variable", "hc", "pd", "test", "p_fdr", "effect_size", "magnitude"]]),
            "",
        ]

    if len(sections) == 2:
        raise DataError(f"No SAFN outputs found in {src}")
    report_path = src / REPORT_FILE
    report_path.write_text("\n".join(sections), encoding="utf-8")
    print("\n".join(sections))
    print(f"\n{Colors.GREEN}✓{Colors.RESET} Wrote {report_path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "cv": cmd_cv,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "attribute": cmd_attribute,
    "stats": cmd_stats,
    "report": cmd_report,
}


# ============================================================================
# MAIN
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="safn",
        description="SAFN CLI - sparse-attention fusion network for multimodal tabular classification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  safn gen-data --dest data/                       Synthetic 703-subject dataset
  safn --set data.data_dir=data/ cv                5-fold cross-validation
  safn --config run.json --jobs 5 cv               Folds in parallel
  safn --set data.data_dir=data/ ablate            Full ablation grid
  safn attribute --checkpoint out/fold0.ckpt.json  Gradient x Input
  safn --set data.data_dir=data/ stats             Group statistics
  safn report                                      Assemble report.md
        """,
    )
    default_output = os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)
    parser.add_argument("--config", "-c", help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set optim.epochs=10 (repeatable)")
    parser.add_argument("--seed", type=int, help="Master seed (overrides every section's seed)")
    parser.add_argument("--output", "-o", help=f"Output directory (default: {default_output}, env: {OUTPUT_ENV})")
    parser.add_argument("--jobs", "-j", type=int, help="Folds trained concurrently (default: from config)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--log-format", help="logging format string; may use %%(safn_run_id)s, %%(safn_fold)s, %%(safn_ablation)s")
    parser.add_argument("--no-color", action="store_true", help="Disable colored output")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--synthetic", action="store_true",
                           help="Generate the configured synthetic dataset in memory instead of reading data.*")

    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", help="Generate a synthetic dataset")
    gen.add_argument("--dest", help="Directory for data.csv and manifest.json (default: data.data_dir or OUTPUT/data)")

    subparsers.add_parser("cv", parents=[data_opts], help="Cross-validate the full model")

    train = subparsers.add_parser("train", parents=[data_opts], help="Train one fold")
    train.add_argument("--fold", type=int, default=0, help="Fold index (default: 0)")
    train.add_argument("--ablation", help="Registered ablation name (default: full model)")

    ablate = subparsers.add_parser("ablate", parents=[data_opts], help="Run the ablation grid")
    ablate.add_argument("names", nargs="*", help="Ablation names (default: config 'ablations' or all registered)")
    ablate.add_argument("--include-logreg", action="store_true", help="Add the logistic-regression comparator")

    attribute = subparsers.add_parser("attribute", parents=[data_opts], help="Gradient x Input attribution")
    attribute.add_argument("--checkpoint", nargs="+", required=True, help="Checkpoint file(s); attributions accumulate")
    attribute.add_argument("--fold", type=int, help="Validation fold to attribute (default: checkpoint's fold)")
    attribute.add_argument("--all-rows", action="store_true", help="Attribute every row instead of a validation fold")

    stats = subparsers.add_parser("stats", parents=[data_opts], help="PD vs HC group statistics")
    stats.add_argument("--top", type=int, default=20, help="Rows to print (default: 20)")

    report = subparsers.add_parser("report", help="Assemble report.md")
    report.add_argument("directory", nargs="?", help="Output directory to summarise (default: --output)")
    report.add_argument("--top", type=int, default=10, help="Stats rows when none are significant (default: 10)")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Parse, dispatch and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        if args.no_color:
            Colors.disable()
        configure_logging(args.log_level, args.log_format)
        config = resolve_config(args.config, args.overrides, seed=args.seed, output_dir=args.output, jobs=args.jobs)
        run_id = run_fingerprint(args.command, config.to_dict())
        with log_context(run_id=run_id):
            logger.info("safn %s (run %s) -> %s", args.command, run_id, config.output_dir)
            return COMMANDS[args.command](config, args)
    except UsageError as e:
        print(f"{Colors.RED}Usage error:{Colors.RESET} {e}", file=sys.stderr)
        return 1
    except (DataError, ShapeError) as e:
        print(f"{Colors.RED}Data error:{Colors.RESET} {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"{Colors.RED}Numeric failure:{Colors.RESET} {e}", file=sys.stderr)
        return 3
    except SafnError as e:
        print(f"{Colors.RED}Error:{Colors.RESET} {e}", file=sys.stderr)
        return 1


def main():
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        print("\nInterrupted.")
        sys.exit(130)


if __name__ == "__main__":
    main()
