"""Small neural-net building blocks on top of the tensor engine.

Linear layers, batch normalization with running statistics, and the stable
softmax / cross-entropy composites used by the classifier head.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError


def uniform_init(rng, fan_in, shape):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, the package default."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map x @ w + b; bias omitted where a following BatchNorm cancels it."""

    def __init__(self, in_dim, out_dim, rng=None, zero_init=False, bias=True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = uniform_init(rng, in_dim, (in_dim, out_dim))
        self.w = T.parameter(w)
        self.b = None
        if bias:
            b = np.zeros(out_dim) if zero_init else uniform_init(rng, in_dim, (out_dim,))
            self.b = T.parameter(b)

    def __call__(self, x):
        out = T.matmul(x, self.w)
        return out if self.b is None else out + self.b

    def named_parameters(self, prefix=""):
        out = {f"{prefix}w": self.w}
        if self.b is not None:
            out[f"{prefix}b"] = self.b
        return out


class BatchNorm:
    """Per-feature batch normalization with running statistics.

    Train mode normalizes by the batch mean and biased batch variance and
    nudges the running statistics by ``momentum``; eval mode normalizes by
    the running statistics only, so its output is independent of batch
    composition. ``gamma`` and ``beta`` are trainable; the running stats are
    plain arrays updated outside the autodiff graph.
    """

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.mode = "train"

    def __call__(self, x):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError("batchnorm", x.shape, (self.dim,))
        if self.mode == "train":
            if x.shape[0] < 2:
                raise ShapeError("batchnorm: need batch >= 2 in train mode", x.shape)
            mu = x.mean(axis=0)
            centered = x - mu
            var = (centered * centered).mean(axis=0)
            self.running_mean = ((1.0 - self.momentum) * self.running_mean
                                 + self.momentum * mu.data)
            self.running_var = ((1.0 - self.momentum) * self.running_var
                                + self.momentum * var.data)
            inv_std = T.exp((var + float(self.eps)).log() * -0.5)
            return self.gamma * (centered * inv_std) + self.beta
        mu = T.constant(self.running_mean)
        inv = T.constant(1.0 / np.sqrt(self.running_var + self.eps))
        return self.gamma * ((x - mu) * inv) + self.beta

    def named_parameters(self, prefix=""):
        return {f"{prefix}gamma": self.gamma, f"{prefix}beta": self.beta}

    def named_stats(self, prefix=""):
        return {f"{prefix}running_mean": self.running_mean,
                f"{prefix}running_var": self.running_var}

    def load_stats(self, mean, var):
        self.running_mean = np.array(mean, dtype=np.float64)
        self.running_var = np.array(var, dtype=np.float64)


def log_softmax(logits):
    """Rowwise log-softmax, shifted by the (constant) row max for stability."""
    shift = T.constant(logits.data.max(axis=1, keepdims=True))
    centered = logits - shift
    lse = T.log(T.exp(centered).sum(axis=1, keepdims=True))
    return centered - lse


def softmax(logits):
    return T.exp(log_softmax(logits))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer class labels under the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = (log_softmax(logits) * T.constant(onehot)).sum(axis=1)
    return picked.mean() * -1.0
