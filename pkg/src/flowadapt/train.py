"""Source-phase training loops: classifier, density model, and joint mode.

All three loops are bit-deterministic per (seed, config): shuffling comes
from derived RNG streams, parameters update in a fixed order, and no global
state is touched. A non-finite loss aborts immediately with its location
rather than being skipped.
"""

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, NonFiniteError, ShapeError, TrainingDiverged
from .seeding import derive_rng
from .tensor import backward


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr0: float = 0.1
    schedule: str = "step"              # "step" or "cosine"
    milestones: tuple = (25, 40)
    factor: float = 0.1                 # multiplier applied at each milestone
    momentum: float = 0.9
    seed: int = 0
    beta: float = 0.0                   # joint mode: extractor-side density weight
    flow_lr0: float = 0.01              # joint mode: flow group initial lr
    bn_stats_update: bool = True        # flow phase: let extractor BN stats move

    def __post_init__(self):
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be positive, got {self.batch_size}")
        if self.lr0 <= 0:
            problems.append(f"lr0 must be positive, got {self.lr0}")
        if self.schedule not in ("step", "cosine"):
            problems.append(f"schedule must be 'step' or 'cosine', got {self.schedule!r}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs for m in ms):
            problems.append("milestones must be strictly increasing and < epochs")
        if self.momentum < 0:
            problems.append(f"momentum must be >= 0, got {self.momentum}")
        if self.beta < 0:
            problems.append(f"beta must be >= 0, got {self.beta}")
        if problems:
            raise ConfigError(problems)
        self.milestones = ms


def step_lr(lr0, milestones, factor, epoch):
    """lr0 * factor^(number of milestones passed after `epoch` completed epochs)."""
    passed = sum(1 for m in milestones if epoch >= m)
    return lr0 * factor ** passed


def cosine_lr(lr0, total_epochs, epoch):
    """Cosine annealing: lr0 at epoch 0 down to 0 at epoch == total_epochs."""
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


def schedule_lr(cfg, epoch):
    if cfg.schedule == "cosine":
        return cosine_lr(cfg.lr0, cfg.epochs, epoch)
    return step_lr(cfg.lr0, cfg.milestones, cfg.factor, epoch)


class SGD:
    """Plain SGD with optional classical momentum (v = mu*v + g; p -= lr*v)."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros(p.shape) for p in self.params] if momentum else None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else 0.0
            if self._velocity is not None:
                self._velocity[i] = self.momentum * self._velocity[i] + g
                g = self._velocity[i]
            p.data = p.data - self.lr * g


def _batches(n, batch_size, rng):
    """Shuffled batch index arrays; the final short batch is kept."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_source(backbone, ds, cfg):
    """Supervised training of the full backbone on cross-entropy.

    SGD with momentum, per-epoch LR schedule, batch norm in train mode.
    Returns the per-epoch mean loss history; the backbone ends in eval mode.
    """
    if len(ds) == 0:
        raise ShapeError("train_source: empty dataset", ds.inputs.shape)
    if ds.labels.min() < 0 or ds.labels.max() >= backbone.num_classes:
        raise ValueError("labels outside [0, num_classes)")
    opt = SGD(backbone.parameters(), cfg.lr0, cfg.momentum)
    shuffle_rng = derive_rng(cfg.seed, "source-shuffle")
    backbone.set_mode("train")
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = schedule_lr(cfg, epoch)
        total, count = 0.0, 0
        for bidx, idx in enumerate(_batches(len(ds), cfg.batch_size, shuffle_rng)):
            opt.zero_grad()
            try:
                logits, _ = backbone.forward_full(ds.inputs[idx])
                loss = nn.cross_entropy(logits, ds.labels[idx])
            except NonFiniteError as exc:
                raise TrainingDiverged("source", epoch, bidx) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged("source", epoch, bidx)
            backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
    backbone.set_mode("eval")
    return backbone, history


def train_flow(flow, backbone, ds, cfg):
    """Fit the flow to frozen-extractor features by negative log-likelihood.

    Extractor weights receive no gradient; with ``bn_stats_update`` the
    extractor's BN running statistics still track the batches (its one
    non-frozen part), otherwise features come from eval-mode BN. Plain SGD,
    cosine-annealed LR.
    """
    if len(ds) == 0:
        raise ShapeError("train_flow: empty dataset", ds.inputs.shape)
    if flow.feature_dim != backbone.feature_dim:
        raise ShapeError("train_flow: flow/extractor feature dim mismatch",
                         (flow.feature_dim,), (backbone.feature_dim,))
    opt = SGD(flow.parameters(), cfg.lr0, momentum=0.0)
    shuffle_rng = derive_rng(cfg.seed, "flow-shuffle")
    backbone.set_mode("train" if cfg.bn_stats_update else "eval")
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr0, cfg.epochs, epoch)
        total, count = 0.0, 0
        for bidx, idx in enumerate(_batches(len(ds), cfg.batch_size, shuffle_rng)):
            opt.zero_grad()
            try:
                feats = backbone.extract_features(ds.inputs[idx]).detach()
                loss = flow.nll_loss(feats)
            except NonFiniteError as exc:
                raise TrainingDiverged("flow", epoch, bidx) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged("flow", epoch, bidx)
            backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
    backbone.set_mode("eval")
    return flow, history


def train_joint(backbone, flow, ds, cfg):
    """Train classifier and flow simultaneously.

    The extractor minimizes cross-entropy plus ``beta`` times the flow NLL of
    its tapped features; the head sees only the classification loss; the flow
    itself always fits the (evolving, detached) features at full weight, so
    ``beta == 0`` reproduces plain source training bit-for-bit while the flow
    still learns. Backbone group: momentum SGD on the configured schedule.
    Flow group: plain SGD, cosine LR from ``flow_lr0``.
    """
    if len(ds) == 0:
        raise ShapeError("train_joint: empty dataset", ds.inputs.shape)
    if flow.feature_dim != backbone.feature_dim:
        raise ShapeError("train_joint: flow/extractor feature dim mismatch",
                         (flow.feature_dim,), (backbone.feature_dim,))
    backbone_opt = SGD(backbone.parameters(), cfg.lr0, cfg.momentum)
    flow_opt = SGD(flow.parameters(), cfg.flow_lr0, momentum=0.0)
    shuffle_rng = derive_rng(cfg.seed, "source-shuffle")
    backbone.set_mode("train")
    history = []
    for epoch in range(cfg.epochs):
        backbone_opt.lr = schedule_lr(cfg, epoch)
        flow_opt.lr = cosine_lr(cfg.flow_lr0, cfg.epochs, epoch)
        sums = np.zeros(3)
        count = 0
        for bidx, idx in enumerate(_batches(len(ds), cfg.batch_size, shuffle_rng)):
            backbone_opt.zero_grad()
            flow_opt.zero_grad()
            try:
                logits, feats = backbone.forward_full(ds.inputs[idx])
                cls_loss = nn.cross_entropy(logits, ds.labels[idx])
                main = (cls_loss if cfg.beta == 0.0
                        else cls_loss + flow.nll_loss(feats) * cfg.beta)
                backward(main)
                flow_opt.zero_grad()  # the extractor-side branch scaled these by beta
                uns_loss = flow.nll_loss(feats.detach())
            except NonFiniteError as exc:
                raise TrainingDiverged("joint", epoch, bidx) from exc
            backward(uns_loss)
            cls_v, uns_v = cls_loss.item(), uns_loss.item()
            if not (np.isfinite(cls_v) and np.isfinite(uns_v)):
                raise TrainingDiverged("joint", epoch, bidx)
            backbone_opt.step()
            flow_opt.step()
            sums += np.array([cls_v, uns_v, cls_v + cfg.beta * uns_v]) * len(idx)
            count += len(idx)
        history.append({"cls": sums[0] / count, "uns": sums[1] / count,
                        "joint": sums[2] / count})
    backbone.set_mode("eval")
    return backbone, flow, history


def save_loss_history(path, rows):
    """Write (epoch, split, loss) rows as CSV, atomically."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("epoch,split,loss\n")
            for epoch, split, loss in rows:
                fh.write(f"{epoch},{split},{loss:.17g}\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
