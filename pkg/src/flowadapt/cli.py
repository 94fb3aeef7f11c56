"""Command-line entry point tying the pipeline together.

Subcommands: gen-data, train-source, train-flow, train-joint, adapt-eval,
bench, ablation, project, print-config. Logging goes to stderr as JSON
lines; metrics files (and the aggregate table on stdout) are the only other
outputs. Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

import argparse
import hashlib
import json
import os
import sys

from . import bench as bench_mod
from .adapt import predict_with_adaptation, shift_score, take_snapshot
from .checkpoint import (checkpoint_hash, load_backbone, load_flow,
                         save_backbone, save_flow)
from .config import (config_hash, dump_config, load_config_file, resolve_config)
from .data import (CorruptionSpec, apply_corruption, generate_source, load_csv,
                   natural_shift, save_csv, target_filename)
from .errors import ConfigError, FlowAdaptError
from .flow import FlowModel
from .train import save_loss_history, train_flow, train_joint, train_source


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        sys.exit(1)


def _log(event, **fields):
    record = {"level": "info", "event": event}
    for key, value in fields.items():
        if isinstance(value, float) and value != value:  # NaN -> null
            value = None
        record[key] = value
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_files(*paths):
    missing = [p for p in paths if p and not os.path.exists(p)]
    if missing:
        raise FlowAdaptError(f"missing input file(s): {', '.join(missing)}")


def _resolve(args):
    file_values = load_config_file(args.config) if args.config else None
    cfg = resolve_config(file_values, args.set or [])
    if getattr(args, "print_config", False):
        print(dump_config(cfg))
        sys.exit(0)
    _log("config", config_hash=config_hash(cfg))
    return cfg


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--print-config", action="store_true",
                   help="print the fully resolved config and exit")


def _build_backbone(cfg):
    d, b = cfg["data"], cfg["backbone"]
    from .backbone import Backbone

    return Backbone(input_dim=d["input_dim"], num_classes=d["num_classes"],
                    widths=tuple(b["widths"]), split_stage=b["split_stage"],
                    bn_momentum=b["bn_momentum"], bn_eps=b["bn_eps"],
                    seed=b["seed"])


def _load_dataset(cfg, path):
    _require_files(path)
    ds = load_csv(path)
    d = cfg["data"]
    if ds.inputs.shape[1] != d["input_dim"]:
        raise FlowAdaptError(f"{path}: expected {d['input_dim']} features, "
                             f"found {ds.inputs.shape[1]}")
    _log("dataset", path=path, rows=len(ds), sha256=_file_hash(path))
    return ds


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _resolve(args)
    d = cfg["data"]
    os.makedirs(args.out_dir, exist_ok=True)
    train = generate_source(d["num_classes"], d["input_dim"], d["n_train"],
                            d["seed"], d["mean_distance"], split="train")
    test = generate_source(d["num_classes"], d["input_dim"], d["n_test"],
                           d["seed"], d["mean_distance"], split="test")
    written = {"source_train.csv": train, "source_test.csv": test,
               f"natural_shift_{d['seed']}.csv": natural_shift(train, d["seed"])}
    for kind in cfg["bench"]["corruptions"]:
        for sev in cfg["bench"]["severities"]:
            name = target_filename("target", kind, sev, d["seed"])
            written[name] = apply_corruption(test, CorruptionSpec(kind, sev))
    for name, ds in written.items():
        path = os.path.join(args.out_dir, name)
        save_csv(ds, path)
        _log("wrote", path=path, rows=len(ds))
    return 0


def cmd_train_source(args):
    cfg = _resolve(args)
    ds = _load_dataset(cfg, args.data)
    backbone = _build_backbone(cfg)
    t = cfg["train_source"]
    tc = bench_mod._source_cfg(cfg, t["seed"])
    _log("train-source", seed=t["seed"], epochs=t["epochs"])
    _, history = train_source(backbone, ds, tc)
    digest = save_backbone(backbone, args.out)
    save_loss_history(args.out + ".loss.csv",
                      [(e, "source", v) for e, v in enumerate(history)])
    _log("wrote", path=args.out, checkpoint_hash=digest)
    return 0


def cmd_train_flow(args):
    cfg = _resolve(args)
    _require_files(args.backbone)
    backbone = load_backbone(args.backbone)
    _log("checkpoint", path=args.backbone, checkpoint_hash=checkpoint_hash(args.backbone))
    ds = _load_dataset(cfg, args.data)
    f, t = cfg["flow"], cfg["train_flow"]
    flow = FlowModel(feature_dim=backbone.feature_dim, num_layers=f["num_layers"],
                     hidden=f["hidden"], scale_clamp=f["scale_clamp"],
                     mask_type=f["mask_type"], seed=f["seed"])
    tc = bench_mod._flow_cfg(cfg, t["seed"])
    _log("train-flow", seed=t["seed"], epochs=t["epochs"])
    _, history = train_flow(flow, backbone, ds, tc)
    digest = save_flow(flow, args.out)
    save_loss_history(args.out + ".loss.csv",
                      [(e, "flow", v) for e, v in enumerate(history)])
    _log("wrote", path=args.out, checkpoint_hash=digest)
    if args.out_backbone:
        digest = save_backbone(backbone, args.out_backbone)
        _log("wrote", path=args.out_backbone, checkpoint_hash=digest)
    return 0


def cmd_train_joint(args):
    cfg = _resolve(args)
    ds = _load_dataset(cfg, args.data)
    backbone = _build_backbone(cfg)
    f, t = cfg["flow"], cfg["train_joint"]
    flow = FlowModel(feature_dim=backbone.feature_dim, num_layers=f["num_layers"],
                     hidden=f["hidden"], scale_clamp=f["scale_clamp"],
                     mask_type=f["mask_type"], seed=f["seed"])
    tc = bench_mod._joint_cfg(cfg, t["seed"], t["beta"])
    _log("train-joint", seed=t["seed"], beta=t["beta"], epochs=t["epochs"])
    _, _, history = train_joint(backbone, flow, ds, tc)
    d1 = save_backbone(backbone, args.out_backbone)
    d2 = save_flow(flow, args.out_flow)
    save_loss_history(args.out_backbone + ".loss.csv",
                      [(e, split, h[split]) for e, h in enumerate(history)
                       for split in ("cls", "uns", "joint")])
    _log("wrote", path=args.out_backbone, checkpoint_hash=d1)
    _log("wrote", path=args.out_flow, checkpoint_hash=d2)
    return 0


def cmd_adapt_eval(args):
    cfg = _resolve(args)
    _require_files(args.backbone, args.flow)
    backbone = load_backbone(args.backbone)
    flow = load_flow(args.flow)
    _log("checkpoint", path=args.backbone, checkpoint_hash=checkpoint_hash(args.backbone))
    _log("checkpoint", path=args.flow, checkpoint_hash=checkpoint_hash(args.flow))
    target = _load_dataset(cfg, args.target)
    acfg = bench_mod.adapt_config(cfg)
    snapshot = take_snapshot(backbone, acfg)
    baseline = backbone.predict(target.inputs)
    baseline_acc = float((baseline == target.labels).mean())
    score = shift_score(flow, backbone, target.inputs)
    preds, records = predict_with_adaptation(backbone, flow, target.inputs, acfg,
                                             snapshot)
    for record in records:
        _log("adapt-batch", **record)
    adapted_acc = float((preds == target.labels).mean())
    metrics = {"baseline_accuracy": baseline_acc, "adapted_accuracy": adapted_acc,
               "iterations": acfg.iterations, "shift_score": score,
               "failed_batches": sum(r["failed"] for r in records)}
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_bench(args):
    cfg = _resolve(args)
    _require_files(args.backbone, args.flow)
    jobs = args.jobs if args.jobs is not None else cfg["bench"]["jobs"]
    if jobs is None:
        jobs = os.cpu_count() or 1
    backbone = load_backbone(args.backbone)
    flow = load_flow(args.flow)
    meta = {"config_hash": config_hash(cfg),
            "backbone_hash": checkpoint_hash(args.backbone),
            "flow_hash": checkpoint_hash(args.flow)}
    _log("bench", jobs=jobs, **meta)
    report = bench_mod.run_benchmark(backbone, flow, cfg, metadata=meta, jobs=jobs,
                                     checkpoint_paths=(args.backbone, args.flow))
    os.makedirs(args.out_dir, exist_ok=True)
    long_path = os.path.join(args.out_dir, "report.csv")
    report.to_csv(long_path)
    wide = report.wide_rows()
    if wide:
        cols = list(wide[0].keys())
        bench_mod._write_csv(os.path.join(args.out_dir, "report_wide.csv"), cols,
                             [[r[c] for c in cols] for r in wide])
    text = report.aggregate_text()
    with open(os.path.join(args.out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    _log("wrote", path=long_path, rows=len(report.rows))
    if args.curve:
        max_iters = max([k for k in cfg["bench"]["iterations"] if k > 0] or [1])
        rows = bench_mod.iteration_curve(backbone, flow, cfg, args.curve,
                                         cfg["bench"]["severities"], max_iters)
        curve_path = os.path.join(args.out_dir, f"curve_{args.curve}.csv")
        bench_mod.save_iteration_curve(rows, curve_path)
        _log("wrote", path=curve_path, rows=len(rows))
    print(text, end="")
    return 0


def cmd_ablation(args):
    cfg = _resolve(args)
    rows = bench_mod.ablation_joint_vs_separate(cfg)
    bench_mod.save_ablation(rows, args.out)
    _log("wrote", path=args.out, rows=len(rows))
    for entry in bench_mod.ablation_summary(rows):
        print(json.dumps(entry, sort_keys=True))
    return 0


def cmd_project(args):
    cfg = _resolve(args)
    _require_files(args.backbone)
    backbone = load_backbone(args.backbone)
    tagged = []
    for item in args.data:
        tag, _, path = item.partition("=")
        if not path:
            raise FlowAdaptError(f"--data needs TAG=PATH, got {item!r}")
        tagged.append((tag, _load_dataset(cfg, path)))
    flow = snapshot = acfg = None
    if args.mode == "post":
        if not args.flow:
            raise FlowAdaptError("post-adapt projection needs --flow")
        _require_files(args.flow)
        flow = load_flow(args.flow)
        acfg = bench_mod.adapt_config(cfg)
        snapshot = take_snapshot(backbone, acfg)
    rows, _ = bench_mod.project_features(backbone, tagged, mode=args.mode,
                                         flow=flow, adapt_cfg=acfg,
                                         snapshot=snapshot)
    bench_mod.save_projection(rows, args.out)
    _log("wrote", path=args.out, rows=len(rows))
    return 0


def cmd_print_config(args):
    args.print_config = True
    _resolve(args)
    return 0


def build_parser():
    parser = _Parser(prog="flowadapt",
                     description="Flow-based domain-shift detection and "
                                 "test-time adaptation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="emit source/target CSV datasets")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="supervised classifier training")
    _add_common(p)
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--out", required=True, help="backbone checkpoint path")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("train-flow", help="fit the flow on frozen features")
    _add_common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="flow checkpoint path")
    p.add_argument("--out-backbone",
                   help="also save the backbone with refreshed BN statistics")
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("train-joint", help="joint classifier+flow training")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-backbone", required=True)
    p.add_argument("--out-flow", required=True)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("adapt-eval", help="adapt to one target CSV and score")
    _add_common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--target", required=True)
    p.set_defaults(func=cmd_adapt_eval)

    p = sub.add_parser("bench", help="full corruption-grid benchmark")
    _add_common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, help="worker processes (default: cores)")
    p.add_argument("--curve", metavar="KIND",
                   help="also emit a per-iteration accuracy curve CSV for one "
                        "corruption kind")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablation", help="joint-vs-separate training comparison")
    _add_common(p)
    p.add_argument("--out", required=True, help="ablation CSV path")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("project", help="2-D PCA feature projection CSV")
    _add_common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--flow")
    p.add_argument("--data", action="append", required=True, metavar="TAG=PATH")
    p.add_argument("--mode", choices=("pre", "post"), default="pre")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("print-config", help="print the fully resolved config")
    _add_common(p)
    p.set_defaults(func=cmd_print_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except FlowAdaptError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
