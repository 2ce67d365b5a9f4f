"""Delimited output files.

`metrics.csv` keeps one fixed schema across subcommands: a row label followed
by acc, auroc, fpr95, oscr, h_score, detector_acc, reported x100 with two
decimals, '.' decimal separator, comma delimiter, empty cell where a metric
is undefined. `diagnostics.jsonl` holds one JSON object per batch (or per
epoch / grid cell, depending on the subcommand) with sorted keys, so equal
runs produce byte-identical files.
"""

import dataclasses
import json

from .metrics import MetricsReport

METRICS_HEADER = "corruption,acc,auroc,fpr95,oscr,h_score,detector_acc"


def _cell(value):
    return "" if value is None else f"{value * 100.0:.2f}"


def metrics_rows(labeled_reports):
    """CSV text for (label, MetricsReport) pairs."""
    lines = [METRICS_HEADER]
    for label, report in labeled_reports:
        cells = [_cell(getattr(report, name)) for name in MetricsReport.FIELDS]
        lines.append(",".join([label] + cells))
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, labeled_reports):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_rows(labeled_reports))


def write_diagnostics_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            if dataclasses.is_dataclass(record):
                record = dataclasses.asdict(record)
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def adapt_report_rows(report):
    rows = [(kind, rep) for kind, rep in report.per_corruption.items()]
    rows.append(("mean", report.mean))
    return rows


def ablation_rows(rows_by_label):
    return [(label, rep.mean) for label, rep in rows_by_label.items()]


def sweep_rows(cells):
    labeled = []
    for cell in cells:
        if "tau" in cell:
            label = f"tau={cell['tau']:g}"
        else:
            label = f"gamma1={cell['gamma1']:g}|gamma2={cell['gamma2']:g}"
        labeled.append((label, cell["report"]))
    return labeled


def audit_rows(table):
    """Long-form audit rows: one per (detector, corruption) plus means."""
    labeled = []
    for detector, by_kind in table.items():
        for kind, acc in by_kind.items():
            labeled.append((f"{detector}/{kind}", MetricsReport(detector_acc=acc)))
    return labeled


def write_audit_csv(path, table):
    """Wide audit table: detectors x corruption kinds, accuracies x100."""
    kinds = [k for k in next(iter(table.values())) if k != "mean"] + ["mean"]
    lines = ["detector," + ",".join(kinds)]
    for detector, by_kind in table.items():
        lines.append(detector + "," + ",".join(f"{by_kind[k] * 100.0:.2f}" for k in kinds))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
