"""Test-time adaptation: per-batch SGD on the frozen flow's NLL.

For each unlabeled test batch the adaptable extractor prefix is reset to a
pristine source snapshot, then a few SGD steps pull the batch's features back
toward the density the flow learned on source data; classification uses the
adapted weights. The flow, the head, and every stage past the adaptation
scope stay bitwise untouched, so with per-batch reset the output for a batch
is a pure function of (snapshot, flow, batch, config) and batch order never
matters.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError
from .train import SGD


@dataclass
class AdaptConfig:
    iterations: int = 10
    lr: float = 0.001
    batch_size: int = 128
    reset_per_batch: bool = True
    adapt_scope: int | None = None       # stages 1..scope step; None = split stage
    bn_mode_during_adapt: str = "train"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.bn_mode_during_adapt not in ("train", "eval"):
            raise ValueError(f"bad bn mode {self.bn_mode_during_adapt!r}")

    def scope_for(self, backbone):
        scope = self.adapt_scope if self.adapt_scope is not None else backbone.split_stage
        if not 1 <= scope <= backbone.split_stage:
            raise ValueError(f"adapt_scope must be in 1..split_stage, got {scope}")
        return scope


class Snapshot:
    """Deep copy of the adaptable prefix: parameters plus BN running stats."""

    def __init__(self, backbone, scope):
        self.scope = scope
        self.params = [p.data.copy() for p in backbone.stage_parameters(scope)]
        self.stats = [(s.bn.running_mean.copy(), s.bn.running_var.copy())
                      for s in backbone.stages[:scope]]

    def restore(self, backbone):
        for p, saved in zip(backbone.stage_parameters(self.scope), self.params):
            p.data = saved.copy()
        for stage, (mean, var) in zip(backbone.stages[: self.scope], self.stats):
            stage.bn.running_mean = mean.copy()
            stage.bn.running_var = var.copy()


def take_snapshot(backbone, cfg=None):
    scope = cfg.scope_for(backbone) if cfg is not None else backbone.split_stage
    return Snapshot(backbone, scope)


def shift_score(flow, backbone, inputs):
    """Mean NLL of the batch's split-stage features, eval-mode BN.

    Higher means farther from the source feature distribution.
    """
    previous = [s.bn.mode for s in backbone.stages]
    backbone.set_mode("eval")
    try:
        feats = backbone.extract_features(np.asarray(inputs, dtype=np.float64))
        return flow.nll_loss(feats.detach()).item()
    finally:
        for stage, mode in zip(backbone.stages, previous):
            stage.bn.mode = mode


def _safe_score(flow, backbone, inputs):
    """shift_score, but NaN instead of raising when the model itself is broken."""
    try:
        return shift_score(flow, backbone, inputs)
    except NonFiniteError:
        return float("nan")


def _adapt_loop(backbone, flow, inputs, cfg, snapshot, record_at=()):
    """Reset, run the SGD steps, optionally record eval-mode checkpoints.

    Returns (records-by-step-count, nll trace, failed); each record is a
    (predictions, shift score) pair taken in eval mode after that many steps.
    ``trace[i]`` is the batch NLL after ``i`` steps; a non-finite loss
    restores the snapshot, marks the batch failed, and fills the remaining
    recording points with unadapted outputs.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    record_at = sorted(set(record_at))
    if cfg.reset_per_batch:
        snapshot.restore(backbone)
    scope = cfg.scope_for(backbone)
    opt = SGD(backbone.stage_parameters(scope), cfg.lr, momentum=0.0)
    records, trace = {}, []

    def eval_record():
        backbone.set_mode("eval")
        out = (backbone.predict(inputs), shift_score(flow, backbone, inputs))
        backbone.set_mode(cfg.bn_mode_during_adapt)
        return out

    backbone.set_mode(cfg.bn_mode_during_adapt)
    failed = False
    try:
        for done in range(cfg.iterations + 1):
            if done in record_at:
                records[done] = eval_record()
            feats = backbone.extract_features(inputs)
            loss = flow.nll_loss(feats)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError("adapt", f"step {done}")
            trace.append(value)
            if done < cfg.iterations:
                opt.zero_grad()
                loss.backward()
                opt.step()
    except NonFiniteError:
        failed = True
        snapshot.restore(backbone)
        backbone.set_mode("eval")
        fallback = (backbone.predict(inputs), _safe_score(flow, backbone, inputs))
        records = {point: fallback for point in record_at}
    backbone.set_mode("eval")
    return records, trace, failed


def adapt_batch(backbone, flow, inputs, cfg, snapshot):
    """Adapt the extractor prefix to one batch.

    Returns ``(backbone, trace, failed)`` where ``trace[i]`` is the NLL after
    ``i`` SGD steps. The flow and the head are never touched; on failure the
    snapshot is restored and the batch is flagged rather than aborting.
    """
    _, trace, failed = _adapt_loop(backbone, flow, inputs, cfg, snapshot)
    return backbone, trace, failed


def predict_with_adaptation(backbone, flow, inputs, cfg, snapshot):
    """Reset -> adapt -> classify for every batch of a test stream.

    Returns (predictions, per-batch records); each record carries the
    eval-mode shift score before and after adaptation plus the failure flag,
    ready for JSON-lines logging.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    predictions = np.empty(inputs.shape[0], dtype=np.int64)
    records = []
    for bidx, start in enumerate(range(0, inputs.shape[0], cfg.batch_size)):
        batch = inputs[start : start + cfg.batch_size]
        if cfg.reset_per_batch:
            snapshot.restore(backbone)
        before = _safe_score(flow, backbone, batch)
        recorded, _, failed = _adapt_loop(backbone, flow, batch, cfg, snapshot,
                                          record_at=(cfg.iterations,))
        preds, after = recorded[cfg.iterations]
        predictions[start : start + batch.shape[0]] = preds
        records.append({"batch_index": bidx, "nll_before": before,
                        "nll_after": after, "iterations": cfg.iterations,
                        "failed": failed})
    if cfg.reset_per_batch:
        snapshot.restore(backbone)
    return predictions, records
