"""Classifier backbone: staged MLP feature extractor plus linear head.

The extractor is three stages of Linear -> BatchNorm -> tanh. A designated
split stage marks where intermediate features are tapped for the density
model and how deep test-time adaptation is allowed to reach; everything past
the split (later stages and the head) stays frozen during adaptation.
"""

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeError
from .seeding import derive_rng


class Stage:
    """One extractor stage: Linear -> BatchNorm -> tanh.

    The linear layer carries no bias; the following BatchNorm would cancel
    any shift, leaving a parameter with identically zero gradient.
    """

    def __init__(self, in_dim, out_dim, rng, bn_momentum=0.1, bn_eps=1e-5):
        self.linear = nn.Linear(in_dim, out_dim, rng, bias=False)
        self.bn = nn.BatchNorm(out_dim, momentum=bn_momentum, eps=bn_eps)

    def __call__(self, x):
        return T.tanh(self.bn(self.linear(x)))

    def named_parameters(self, prefix=""):
        out = self.linear.named_parameters(f"{prefix}linear.")
        out.update(self.bn.named_parameters(f"{prefix}bn."))
        return out

    def named_stats(self, prefix=""):
        return self.bn.named_stats(f"{prefix}bn.")


class Backbone:
    """Feature extractor with a split point, plus a classification head."""

    def __init__(self, input_dim, num_classes, widths=(32, 16, 16), split_stage=2,
                 bn_momentum=0.1, bn_eps=1e-5, seed=0):
        if len(widths) != 3:
            raise ShapeError("backbone: need exactly 3 stage widths", (len(widths),))
        if split_stage not in (1, 2, 3):
            raise ValueError(f"split_stage must be 1, 2 or 3, got {split_stage}")
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.split_stage = split_stage
        self.seed = seed
        rng = derive_rng(seed, "backbone-init")
        dims = [input_dim, *widths]
        self.stages = [Stage(dims[i], dims[i + 1], rng, bn_momentum, bn_eps)
                       for i in range(3)]
        self.head = nn.Linear(widths[-1], num_classes, rng)

    # -- modes -----------------------------------------------------------

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        for stage in self.stages:
            stage.bn.mode = mode

    @property
    def feature_dim(self):
        """Width of the features tapped at the split stage."""
        return self.widths[self.split_stage - 1]

    # -- forward passes ----------------------------------------------------

    def extract_features(self, x, upto=None):
        """Features after stages 1..upto (default: the split stage)."""
        upto = self.split_stage if upto is None else upto
        if upto not in (1, 2, 3):
            raise ValueError(f"stage index must be 1, 2 or 3, got {upto}")
        h = x if isinstance(x, T.Tensor) else T.constant(x)
        for stage in self.stages[:upto]:
            h = stage(h)
        return h

    def forward_full(self, x):
        """(logits, split-stage features) from a single pass through all stages."""
        h = x if isinstance(x, T.Tensor) else T.constant(x)
        tapped = None
        for i, stage in enumerate(self.stages, start=1):
            h = stage(h)
            if i == self.split_stage:
                tapped = h
        return self.head(h), tapped

    def classify(self, features):
        """Softmax class probabilities from full-depth features."""
        return nn.softmax(self.head(features))

    def predict(self, x):
        """Class index per sample; argmax ties break toward the lowest index."""
        logits, _ = self.forward_full(x)
        return np.argmax(logits.data, axis=1)

    # -- parameter access --------------------------------------------------

    def named_parameters(self, prefix=""):
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            out.update(stage.named_parameters(f"{prefix}stage{i}."))
        out.update(self.head.named_parameters(f"{prefix}head."))
        return out

    def named_stats(self, prefix=""):
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            out.update(stage.named_stats(f"{prefix}stage{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def stage_parameters(self, upto):
        """Trainable parameters of stages 1..upto only."""
        out = []
        for stage in self.stages[:upto]:
            out.extend(stage.named_parameters().values())
        return out

    def config(self):
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "split_stage": self.split_stage,
            "bn_momentum": self.stages[0].bn.momentum,
            "bn_eps": self.stages[0].bn.eps,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(input_dim=cfg["input_dim"], num_classes=cfg["num_classes"],
                   widths=tuple(cfg["widths"]), split_stage=cfg["split_stage"],
                   bn_momentum=cfg["bn_momentum"], bn_eps=cfg["bn_eps"],
                   seed=cfg["seed"])
