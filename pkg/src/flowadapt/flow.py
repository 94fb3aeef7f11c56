"""Normalizing flow over feature vectors: affine couplings with exact likelihood.

Each coupling layer splits coordinates with a binary mask. Masked coordinates
pass through unchanged and condition an elementwise affine transform of the
rest, so the Jacobian is triangular and its log-determinant is just the sum
of the scale outputs over transformed coordinates. Stacking couplings with
alternating masks and an isotropic Gaussian base distribution gives exact,
differentiable log-densities for any finite input.
"""

import numpy as np

from . import nn
from . import tensor as T
from .errors import NonFiniteError, ShapeError
from .seeding import derive_rng

LOG_TWO_PI = float(np.log(2.0 * np.pi))


def make_mask(dim, kind, flipped=False):
    """Binary conditioning mask: 1 = pass-through coordinate, 0 = transformed.

    ``checkerboard`` sets even indices, ``channelwise`` the first half. Either
    variant is flipped on alternating layers so every coordinate gets
    transformed somewhere in the stack.
    """
    if dim < 2:
        raise ShapeError("mask: need dim >= 2", (dim,))
    mask = np.zeros(dim)
    if kind == "checkerboard":
        mask[0::2] = 1.0
    elif kind == "channelwise":
        mask[: (dim + 1) // 2] = 1.0
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    return 1.0 - mask if flipped else mask


class ResBlock:
    """Linear -> tanh -> Linear with an additive skip."""

    def __init__(self, dim, hidden, rng):
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, dim, rng)

    def __call__(self, x):
        return x + self.fc2(T.tanh(self.fc1(x)))

    def named_parameters(self, prefix=""):
        out = self.fc1.named_parameters(f"{prefix}fc1.")
        out.update(self.fc2.named_parameters(f"{prefix}fc2."))
        return out


class Conditioner:
    """Two resblocks plus an output head.

    With ``head_init='zero'`` the head starts all-zero, so a fresh coupling
    layer is exactly the identity map.
    """

    def __init__(self, dim, hidden, rng, head_init="zero"):
        self.blocks = [ResBlock(dim, hidden, rng), ResBlock(dim, hidden, rng)]
        self.head = nn.Linear(dim, dim, rng, zero_init=(head_init == "zero"))

    def __call__(self, x):
        h = x
        for block in self.blocks:
            h = block(h)
        return self.head(h)

    def named_parameters(self, prefix=""):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}blocks.{i}."))
        out.update(self.head.named_parameters(f"{prefix}head."))
        return out


class CouplingLayer:
    """One affine coupling: z = m*x + (1-m)*(x*exp(s(m*x)) + t(m*x)).

    The raw scale output is squashed to ``scale_clamp * tanh(raw)`` so
    exp(s) stays in a safe range during training.
    """

    def __init__(self, mask, hidden, rng, scale_clamp=2.0, head_init="zero"):
        mask = np.asarray(mask, dtype=np.float64)
        ones = mask.sum()
        if mask.ndim != 1 or not np.all((mask == 0) | (mask == 1)):
            raise ShapeError("coupling: mask must be a binary vector", mask.shape)
        if ones == 0 or ones == mask.size:
            raise ShapeError("coupling: mask must mix 0s and 1s", mask.shape)
        self.mask = mask
        self.dim = mask.size
        self.scale_clamp = float(scale_clamp)
        self.scale_net = Conditioner(self.dim, hidden, rng, head_init)
        self.translate_net = Conditioner(self.dim, hidden, rng, head_init)

    def _conditioners(self, passthrough):
        s = T.tanh(self.scale_net(passthrough)) * self.scale_clamp
        t = self.translate_net(passthrough)
        return s, t

    def forward(self, x):
        """(z, per-sample logdet); both stay in the autodiff graph."""
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError("coupling forward", x.shape, (self.dim,))
        self._check_input(x, "coupling forward")
        m = T.constant(self.mask)
        inv = T.constant(1.0 - self.mask)
        s, t = self._conditioners(x * m)
        z = x * m + (x * T.exp(s) + t) * inv
        logdet = (s * inv).sum(axis=1)
        self._check_finite(z, logdet)
        return z, logdet

    def inverse(self, z):
        """Exact algebraic inverse: x = m*z + (1-m)*((z - t(m*z)) * exp(-s(m*z)))."""
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeError("coupling inverse", z.shape, (self.dim,))
        self._check_input(z, "coupling inverse")
        m = T.constant(self.mask)
        inv = T.constant(1.0 - self.mask)
        s, t = self._conditioners(z * m)
        x = z * m + ((z - t) * T.exp(s * -1.0)) * inv
        if not np.all(np.isfinite(x.data)):
            bad = int(np.where(~np.isfinite(x.data).all(axis=1))[0][0])
            raise NonFiniteError("coupling inverse", f"batch index {bad}")
        return x

    @staticmethod
    def _check_input(x, op):
        finite = np.isfinite(x.data).all(axis=1)
        if not finite.all():
            bad = int(np.where(~finite)[0][0])
            raise NonFiniteError(op, f"batch index {bad}")

    @staticmethod
    def _check_finite(z, logdet):
        finite = np.isfinite(z.data).all(axis=1) & np.isfinite(logdet.data)
        if not finite.all():
            bad = int(np.where(~finite)[0][0])
            raise NonFiniteError("coupling forward", f"batch index {bad}")

    def named_parameters(self, prefix=""):
        out = self.scale_net.named_parameters(f"{prefix}scale_net.")
        out.update(self.translate_net.named_parameters(f"{prefix}translate_net."))
        return out


class FlowModel:
    """Stack of coupling layers with an isotropic standard Gaussian base."""

    def __init__(self, feature_dim, num_layers=3, hidden=64, scale_clamp=2.0,
                 mask_type="checkerboard", seed=0, head_init="zero"):
        if num_layers < 1:
            raise ValueError("need at least one coupling layer")
        self.feature_dim = feature_dim
        self.num_layers = num_layers
        self.hidden = hidden
        self.scale_clamp = float(scale_clamp)
        self.mask_type = mask_type
        self.seed = seed
        rng = derive_rng(seed, "flow-init")
        self.layers = [
            CouplingLayer(make_mask(feature_dim, mask_type, flipped=bool(i % 2)),
                          hidden, rng, scale_clamp, head_init)
            for i in range(num_layers)
        ]

    def forward(self, x):
        """Map data to latent space: (z, total per-sample logdet)."""
        h = x if isinstance(x, T.Tensor) else T.constant(x)
        total = None
        for layer in self.layers:
            h, logdet = layer.forward(h)
            total = logdet if total is None else total + logdet
        return h, total

    def invert(self, z):
        h = z if isinstance(z, T.Tensor) else T.constant(z)
        for layer in reversed(self.layers):
            h = layer.inverse(h)
        return h

    def log_prob(self, x):
        """Per-sample log density via the change of variables through the stack."""
        z, logdet = self.forward(x)
        sq = (z * z).sum(axis=1)
        base = (sq + self.feature_dim * LOG_TWO_PI) * -0.5
        return base + logdet

    def nll_loss(self, x):
        """Mean negative log density over the batch; the training objective."""
        n = x.shape[0]
        if n == 0:
            raise ShapeError("nll_loss: empty batch", x.shape)
        return self.log_prob(x).mean() * -1.0

    def sample(self, n, seed):
        """n draws: latent Gaussian samples pulled back through the inverse."""
        if n < 1:
            raise ValueError("need n >= 1 samples")
        rng = derive_rng(seed, "flow-sample")
        z = rng.standard_normal((n, self.feature_dim))
        return self.invert(T.constant(z)).data

    def named_parameters(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}layers.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def config(self):
        return {
            "feature_dim": self.feature_dim,
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "scale_clamp": self.scale_clamp,
            "mask_type": self.mask_type,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(feature_dim=cfg["feature_dim"], num_layers=cfg["num_layers"],
                   hidden=cfg["hidden"], scale_clamp=cfg["scale_clamp"],
                   mask_type=cfg["mask_type"], seed=cfg["seed"])
