"""Benchmark harness: corruption grids, iteration sweeps, ablations, projections.

A grid cell is (corruption kind, severity, seed). Each cell adapts once to
its maximum iteration count and records eval-mode predictions and shift
scores at every requested checkpoint along that single trajectory, so
"accuracy at k iterations" for all k comes from one pass. Reports are
deterministic per (models, config, seed set); cells are independent, which
makes the grid trivially parallel.
"""

import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import AdaptConfig, _adapt_loop, take_snapshot
from .backbone import Backbone
from .data import CorruptionSpec, apply_corruption, generate_source
from .errors import ShapeError
from .flow import FlowModel
from .train import TrainConfig, train_flow, train_joint, train_source

REPORT_COLUMNS = ("method", "corruption", "severity", "iterations", "seed",
                  "accuracy", "shift_pre", "shift_post")


@dataclass
class BenchReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    def iteration_counts(self):
        return sorted({r["iterations"] for r in self.rows})

    def wide_rows(self):
        """One row per (method, corruption, severity, seed) with a `best` column."""
        cells = {}
        for r in self.rows:
            key = (r["method"], r["corruption"], r["severity"], r["seed"])
            cells.setdefault(key, {})[r["iterations"]] = r["accuracy"]
        out = []
        for (method, kind, sev, seed), accs in sorted(cells.items()):
            row = {"method": method, "corruption": kind, "severity": sev, "seed": seed}
            row.update({f"it{k}": accs[k] for k in sorted(accs)})
            row["best"] = max(accs.values())
            out.append(row)
        return out

    def aggregates(self):
        """Mean and sample std over seeds for each iteration count and `best`."""
        groups = {}
        for row in self.wide_rows():
            key = (row["method"], row["corruption"], row["severity"])
            groups.setdefault(key, []).append(row)
        out = []
        for (method, kind, sev), rows in sorted(groups.items()):
            entry = {"method": method, "corruption": kind, "severity": sev,
                     "seeds": len(rows)}
            for col in [c for c in rows[0] if c.startswith("it")] + ["best"]:
                vals = np.array([r[col] for r in rows])
                entry[f"{col}_mean"] = float(vals.mean())
                entry[f"{col}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out.append(entry)
        return out

    def to_csv(self, path):
        _write_csv(path, REPORT_COLUMNS, [[r[c] for c in REPORT_COLUMNS]
                                          for r in self.rows])

    def aggregate_text(self):
        aggs = self.aggregates()
        if not aggs:
            return "(empty report)\n"
        it_cols = sorted({c[: -len("_mean")] for a in aggs for c in a
                          if c.endswith("_mean")},
                         key=lambda c: (c == "best", int(c[2:]) if c != "best" else 0))
        header = ["method", "corruption", "sev"] + [f"{c} (mean+-std)" for c in it_cols]
        lines = [header]
        for a in aggs:
            lines.append([a["method"], a["corruption"], str(a["severity"])]
                         + [f"{a[c + '_mean']:.4f}+-{a[c + '_std']:.4f}" for c in it_cols])
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                         for row in lines) + "\n"


def _write_csv(path, header, rows):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def evaluate_cell(backbone, flow, snapshot, target, adapt_cfg, iteration_set):
    """Accuracy and mean shift score at every checkpoint of one target set."""
    iters = sorted(set(iteration_set))
    if not iters:
        raise ValueError("iteration set must be nonempty")
    cfg = replace(adapt_cfg, iterations=max(iters))
    record_at = sorted(set(iters) | {0})
    correct = dict.fromkeys(record_at, 0)
    scores = dict.fromkeys(record_at, 0.0)
    n, batches, failures = len(target), 0, 0
    for start in range(0, n, cfg.batch_size):
        bx = target.inputs[start : start + cfg.batch_size]
        by = target.labels[start : start + cfg.batch_size]
        records, _, failed = _adapt_loop(backbone, flow, bx, cfg, snapshot,
                                         record_at=record_at)
        failures += bool(failed)
        batches += 1
        for k, (preds, score) in records.items():
            correct[k] += int((preds == by).sum())
            scores[k] += score
    return {
        "accuracy": {k: correct[k] / n for k in iters},
        "shift": {k: scores[k] / batches for k in record_at},
        "failed_batches": failures,
    }


def _bench_test_set(data_cfg, bench_seed):
    return generate_source(data_cfg["num_classes"], data_cfg["input_dim"],
                           data_cfg["n_test"], data_cfg["seed"],
                           mean_distance=data_cfg["mean_distance"],
                           split=f"bench-{bench_seed}")


def _grid_cells(cfg):
    bench = cfg["bench"]
    return [(seed, kind, sev) for seed in bench["seeds"]
            for kind in bench["corruptions"] for sev in bench["severities"]]


def _cell_rows(backbone, flow, snapshot, cfg, seed, kind, severity, method):
    clean = _bench_test_set(cfg["data"], seed)
    target = apply_corruption(clean, CorruptionSpec(kind, severity))
    cell = evaluate_cell(backbone, flow, snapshot, target,
                         adapt_config(cfg), cfg["bench"]["iterations"])
    pre = cell["shift"][0]
    return [{"method": method, "corruption": kind, "severity": severity,
             "iterations": k, "seed": seed, "accuracy": cell["accuracy"][k],
             "shift_pre": pre, "shift_post": cell["shift"][k]}
            for k in sorted(cell["accuracy"])]


def adapt_config(cfg):
    a = cfg["adapt"]
    return AdaptConfig(iterations=a["iterations"], lr=a["lr"],
                       batch_size=a["batch_size"],
                       reset_per_batch=a["reset_per_batch"],
                       adapt_scope=a["adapt_scope"],
                       bn_mode_during_adapt=a["bn_mode_during_adapt"])


def run_benchmark(backbone, flow, cfg, method="flow_tta", metadata=None, jobs=1,
                  checkpoint_paths=None):
    """Full grid: every (corruption, severity, seed) cell at every iteration count.

    With ``jobs > 1`` the cells are evaluated by a process pool; workers
    reload the models from ``checkpoint_paths``. Row order and contents are
    identical either way.
    """
    if flow.feature_dim != backbone.feature_dim:
        raise ShapeError("bench: flow/extractor feature dim mismatch",
                         (flow.feature_dim,), (backbone.feature_dim,))
    snapshot = take_snapshot(backbone, adapt_config(cfg))
    cells = _grid_cells(cfg)
    rows = []
    if jobs > 1 and checkpoint_paths is not None and len(cells) > 1:
        rows = _run_cells_parallel(checkpoint_paths, cfg, cells, method, jobs)
    else:
        for seed, kind, sev in cells:
            rows.extend(_cell_rows(backbone, flow, snapshot, cfg, seed, kind, sev,
                                   method))
        snapshot.restore(backbone)  # leave the caller's model in its source state
    return BenchReport(rows, metadata or {})


def _run_cells_parallel(checkpoint_paths, cfg, cells, method, jobs):
    from concurrent.futures import ProcessPoolExecutor

    backbone_path, flow_path = checkpoint_paths
    args = [(backbone_path, flow_path, cfg, seed, kind, sev, method)
            for seed, kind, sev in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_cell_worker, args))
    rows = []
    for cell_rows in results:
        rows.extend(cell_rows)
    return rows


_WORKER_CACHE = {}


def _cell_worker(args):
    backbone_path, flow_path, cfg, seed, kind, sev, method = args
    key = (backbone_path, flow_path)
    if key not in _WORKER_CACHE:
        from .checkpoint import load_backbone, load_flow

        backbone = load_backbone(backbone_path)
        flow = load_flow(flow_path)
        _WORKER_CACHE[key] = (backbone, flow,
                              take_snapshot(backbone, adapt_config(cfg)))
    backbone, flow, snapshot = _WORKER_CACHE[key]
    return _cell_rows(backbone, flow, snapshot, cfg, seed, kind, sev, method)


def iteration_curve(backbone, flow, cfg, kind, severities, max_iters):
    """Accuracy after every iteration 0..max_iters, averaged over batches+seeds."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    snapshot = take_snapshot(backbone, adapt_config(cfg))
    base = replace(adapt_config(cfg), iterations=max_iters)
    counts = list(range(max_iters + 1))
    rows = []
    for sev in severities:
        totals = np.zeros(max_iters + 1)
        n_total = 0
        for seed in cfg["bench"]["seeds"]:
            clean = _bench_test_set(cfg["data"], seed)
            target = apply_corruption(clean, CorruptionSpec(kind, sev))
            for start in range(0, len(target), base.batch_size):
                bx = target.inputs[start : start + base.batch_size]
                by = target.labels[start : start + base.batch_size]
                records, _, _ = _adapt_loop(backbone, flow, bx, base, snapshot,
                                            record_at=counts)
                for k in counts:
                    totals[k] += int((records[k][0] == by).sum())
            n_total += len(target)
        rows.extend({"severity": sev, "iteration": k, "accuracy": totals[k] / n_total}
                    for k in counts)
    snapshot.restore(backbone)
    return rows


def save_iteration_curve(rows, path):
    _write_csv(path, ("severity", "iteration", "accuracy"),
               [[r["severity"], r["iteration"], r["accuracy"]] for r in rows])


def ablation_joint_vs_separate(cfg):
    """Separate vs joint training, scored post-adaptation on gaussian sev 5.

    Each seed is an end-to-end run: fresh data, fresh models, training in the
    requested mode, then the best accuracy over the benchmark iteration sweep.
    """
    betas = cfg["bench"]["ablation_betas"]
    sweep = [k for k in cfg["bench"]["iterations"] if k > 0] or [1]
    rows = []
    for seed in cfg["bench"]["seeds"]:
        d = cfg["data"]
        train_ds = generate_source(d["num_classes"], d["input_dim"], d["n_train"],
                                   seed, d["mean_distance"], split="train")
        test_ds = generate_source(d["num_classes"], d["input_dim"], d["n_test"],
                                  seed, d["mean_distance"], split="test")
        target = apply_corruption(test_ds, CorruptionSpec("gaussian_noise", 5))

        def best_accuracy(backbone, flow):
            snapshot = take_snapshot(backbone, adapt_config(cfg))
            cell = evaluate_cell(backbone, flow, snapshot, target,
                                 adapt_config(cfg), sweep)
            return max(cell["accuracy"].values())

        backbone = _make_backbone(cfg, d, seed)
        flow = _make_flow(cfg, backbone, seed)
        train_source(backbone, train_ds, _source_cfg(cfg, seed))
        train_flow(flow, backbone, train_ds, _flow_cfg(cfg, seed))
        rows.append({"mode": "separate", "beta": None, "seed": seed,
                     "accuracy": best_accuracy(backbone, flow)})

        for beta in betas:
            backbone = _make_backbone(cfg, d, seed)
            flow = _make_flow(cfg, backbone, seed)
            train_joint(backbone, flow, train_ds, _joint_cfg(cfg, seed, beta))
            rows.append({"mode": f"joint_beta_{beta:g}", "beta": beta, "seed": seed,
                         "accuracy": best_accuracy(backbone, flow)})
    return rows


def ablation_summary(rows):
    modes = []
    for row in rows:
        if row["mode"] not in modes:
            modes.append(row["mode"])
    out = []
    for mode in modes:
        vals = np.array([r["accuracy"] for r in rows if r["mode"] == mode])
        out.append({"mode": mode, "mean": float(vals.mean()),
                    "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                    "seeds": len(vals)})
    return out


def save_ablation(rows, path):
    _write_csv(path, ("mode", "beta", "seed", "accuracy"),
               [[r["mode"], "" if r["beta"] is None else r["beta"], r["seed"],
                 r["accuracy"]] for r in rows])


def _make_backbone(cfg, d, seed):
    b = cfg["backbone"]
    return Backbone(input_dim=d["input_dim"], num_classes=d["num_classes"],
                    widths=tuple(b["widths"]), split_stage=b["split_stage"],
                    bn_momentum=b["bn_momentum"], bn_eps=b["bn_eps"], seed=seed)


def _make_flow(cfg, backbone, seed):
    f = cfg["flow"]
    return FlowModel(feature_dim=backbone.feature_dim, num_layers=f["num_layers"],
                     hidden=f["hidden"], scale_clamp=f["scale_clamp"],
                     mask_type=f["mask_type"], seed=seed)


def _source_cfg(cfg, seed):
    t = cfg["train_source"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr0=t["lr0"],
                       schedule=t["schedule"], milestones=tuple(t["milestones"]),
                       factor=t["factor"], momentum=t["momentum"], seed=seed)


def _flow_cfg(cfg, seed):
    t = cfg["train_flow"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr0=t["lr0"],
                       schedule="cosine", milestones=(), momentum=0.0, seed=seed,
                       bn_stats_update=t["bn_stats_update"])


def _joint_cfg(cfg, seed, beta):
    t = cfg["train_joint"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr0=t["lr0"],
                       schedule=t["schedule"], milestones=tuple(t["milestones"]),
                       factor=t["factor"], momentum=t["momentum"], seed=seed,
                       beta=beta, flow_lr0=t["flow_lr0"])


# -- 2-D feature projection --------------------------------------------------


def project_features(backbone, tagged_datasets, mode="pre", flow=None,
                     adapt_cfg=None, snapshot=None, stage=None):
    """PCA-to-2D of extractor features pooled over the given datasets.

    ``mode='post'`` adapts on each batch before extracting, so the emitted
    coordinates show the effect of test-time adaptation. Returns (rows,
    components); rows carry (x, y, label, predicted, tag).
    """
    stage = 3 if stage is None else stage
    feats_list, labels, preds, tags = [], [], [], []
    for tag, ds in tagged_datasets:
        if mode == "post":
            if flow is None or adapt_cfg is None or snapshot is None:
                raise ValueError("post-adapt projection needs flow, adapt_cfg, snapshot")
            for start in range(0, len(ds), adapt_cfg.batch_size):
                bx = ds.inputs[start : start + adapt_cfg.batch_size]
                _adapt_loop(backbone, flow, bx, adapt_cfg, snapshot)
                feats_list.append(backbone.extract_features(bx, upto=stage).data)
                preds.append(backbone.predict(bx))
            snapshot.restore(backbone)
            labels.append(ds.labels)
            tags.extend([tag] * len(ds))
        else:
            backbone.set_mode("eval")
            feats_list.append(backbone.extract_features(ds.inputs, upto=stage).data)
            preds.append(backbone.predict(ds.inputs))
            labels.append(ds.labels)
            tags.extend([tag] * len(ds))
    feats = np.concatenate(feats_list, axis=0)
    if feats.shape[0] < 2:
        raise ShapeError("project_features: need at least 2 samples", feats.shape)
    labels = np.concatenate(labels)
    preds = np.concatenate(preds)
    centered = feats - feats.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if not np.any(svals > 1e-12):
        raise ValueError("project_features: features have zero variance")
    components = vt[:2]
    coords = centered @ components.T
    rows = [(float(coords[i, 0]), float(coords[i, 1]), int(labels[i]),
             int(preds[i]), tags[i]) for i in range(coords.shape[0])]
    return rows, components


def save_projection(rows, path):
    _write_csv(path, ("x", "y", "label", "predicted", "tag"), rows)
