"""Command-line interface.

Subcommands: pretrain, adapt, ablate, sweep, audit-detectors. Each reads one
YAML config, takes an optional --seed override and writes metrics.csv,
diagnostics.jsonl, model.ckpt and PNG figures into --out. Experiment
subcommands accept --ckpt to reuse a pretrained model; without it they
pretrain deterministically from the config first.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from . import config as config_mod
from . import harness, plots, reports
from .mathcore import ConfigError, ContractError, DegenerateInputError, DomainError, NumericError
from .metrics import MetricsReport, record_to_table
from .model import TinyModel, pretrain
from .stream import clean_training_set


def _add_common(sub, ckpt=True):
    sub.add_argument("--config", required=True, help="YAML experiment config")
    sub.add_argument("--seed", type=int, default=None, help="override the stream seed")
    sub.add_argument("--out", required=True, help="output directory")
    if ckpt:
        sub.add_argument("--ckpt", default=None, help="pretrained model checkpoint to reuse")


def build_parser():
    parser = argparse.ArgumentParser(prog="ostta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("pretrain", help="train the clean-source model"), ckpt=False)
    p_adapt = sub.add_parser("adapt", help="run one adaptation episode per corruption")
    _add_common(p_adapt)
    p_adapt.add_argument("--continual", action="store_true",
                         help="do not reset the model between corruption kinds")
    _add_common(sub.add_parser("ablate", help="loss-term ablation rows"))
    _add_common(sub.add_parser("sweep", help="gamma grid or tau sweep"))
    _add_common(sub.add_parser("audit-detectors", help="detector accuracy audit"))
    return parser


def _pretrained(cfg, out_dir):
    model = TinyModel.create(
        d_in=cfg.stream.d_in, n_classes=cfg.stream.K, seed=cfg.stream.seed
    )
    dataset = clean_training_set(cfg.stream, cfg.pretrain.n_per_class)
    log = pretrain(model, dataset, epochs=cfg.pretrain.epochs, lr=cfg.pretrain.lr)
    model.save(out_dir / "model.ckpt")
    return model, log


def _base_model(args, cfg, out_dir):
    if args.ckpt:
        model = TinyModel.load(args.ckpt)
        model.save(out_dir / "model.ckpt")
        return model
    model, _ = _pretrained(cfg, out_dir)
    return model


def cmd_pretrain(args, cfg, out_dir):
    model, log = _pretrained(cfg, out_dir)
    final = log[-1] if log else {"accuracy": None}
    report = MetricsReport(acc=final["accuracy"])
    reports.write_metrics_csv(out_dir / "metrics.csv", [("clean", report)])
    reports.write_diagnostics_jsonl(out_dir / "diagnostics.jsonl", log)
    if log:
        plots.save_training_curve(log, out_dir / "training_curve.png")
    return 0


def cmd_adapt(args, cfg, out_dir):
    model = _base_model(args, cfg, out_dir)
    report = harness.run_episode(cfg.stream, cfg.adapt, model, continual=args.continual)
    reports.write_metrics_csv(out_dir / "metrics.csv", reports.adapt_report_rows(report))
    reports.write_diagnostics_jsonl(out_dir / "diagnostics.jsonl", report.batches)
    records_dir = out_dir / "records"
    records_dir.mkdir(exist_ok=True)
    for kind, record in report.records.items():
        (records_dir / f"{kind}.csv").write_text(record_to_table(record), encoding="utf-8")
    plots.save_norm_trajectories(report, out_dir / "feature_norms.png")
    plots.save_logit_curves(report, out_dir / "sorted_logits.png")
    return 0


def cmd_ablate(args, cfg, out_dir):
    model = _base_model(args, cfg, out_dir)
    rows = harness.run_ablation(cfg.stream, cfg.adapt, model)
    reports.write_metrics_csv(out_dir / "metrics.csv", reports.ablation_rows(rows))
    diag = []
    for label, rep in rows.items():
        for batch in rep.batches:
            entry = dataclasses.asdict(batch)
            entry["mask"] = label
            diag.append(entry)
    reports.write_diagnostics_jsonl(out_dir / "diagnostics.jsonl", diag)
    plots.save_ablation_bars(rows, out_dir / "ablation.png")
    return 0


def cmd_sweep(args, cfg, out_dir):
    model = _base_model(args, cfg, out_dir)
    sw = cfg.sweep
    if sw.gamma1_list is None and sw.gamma2_list is None and sw.tau_list is None:
        raise ConfigError("sweep needs a `sweep:` section with gamma lists or tau_list")
    cells = harness.run_sweep(
        cfg.stream, cfg.adapt, model,
        gamma1_list=sw.gamma1_list, gamma2_list=sw.gamma2_list, tau_list=sw.tau_list,
    )
    reports.write_metrics_csv(out_dir / "metrics.csv", reports.sweep_rows(cells))
    diag = []
    for cell in cells:
        entry = {k: v for k, v in cell.items() if k != "report"}
        entry.update({k: v for k, v in cell["report"].as_dict().items()})
        diag.append(entry)
    reports.write_diagnostics_jsonl(out_dir / "diagnostics.jsonl", diag)
    if cells and "tau" in cells[0]:
        plots.save_tau_curves(cells, out_dir / "tau_tradeoff.png")
    else:
        plots.save_gamma_heatmap(cells, out_dir / "gamma_heatmap.png")
    return 0


def cmd_audit(args, cfg, out_dir):
    model = _base_model(args, cfg, out_dir)
    table = harness.run_detector_audit(
        cfg.stream, model, n_batches=cfg.adapt.batches_per_corruption
    )
    reports.write_metrics_csv(out_dir / "metrics.csv", reports.audit_rows(table))
    reports.write_audit_csv(out_dir / "detector_audit.csv", table)
    diag = [
        {"detector": detector, "corruption": kind, "accuracy": acc}
        for detector, by_kind in table.items()
        for kind, acc in by_kind.items()
    ]
    reports.write_diagnostics_jsonl(out_dir / "diagnostics.jsonl", diag)
    plots.save_detector_bars(table, out_dir / "detector_audit.png")
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "audit-detectors": cmd_audit,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args, cfg, out_dir)
    except (ConfigError, ContractError, DomainError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
