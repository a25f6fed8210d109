"""Gaussian and binary restricted Boltzmann machines and DBN stacks.

The Gaussian RBM uses the energy

    E(v, h) = sum_i (v_i - b_i)^2 / (2 s_i) - sum_j c_j h_j - sum_ij W_ij v_i h_j

with ``s = visible_var``.  The cross term is *not* divided by the standard
deviation, so the visible conditional mean is ``b + s * (W h)``.

All conditionals accept a single vector or a batch (units on the last axis).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from dln.errors import DimensionError, NumericalError

VAR_FLOOR = 1e-6
INIT_WEIGHT_STD = 0.01


@dataclass(frozen=True)
class GrbmParams:
    """Gaussian-visible, Bernoulli-hidden RBM.

    Attributes:
        weights: (n_visible, n_hidden)
        visible_bias: (n_visible,)
        hidden_bias: (n_hidden,)
        visible_var: (n_visible,), strictly positive
    """

    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    visible_var: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.visible_bias, dtype=float)
        c = np.asarray(self.hidden_bias, dtype=float)
        var = np.asarray(self.visible_var, dtype=float)
        if w.ndim != 2 or b.shape != (w.shape[0],) or c.shape != (w.shape[1],):
            raise DimensionError(
                f"inconsistent GRBM shapes: W{w.shape}, b{b.shape}, c{c.shape}")
        if var.shape != b.shape:
            raise DimensionError(f"visible_var shape {var.shape} != {b.shape}")
        if np.any(var <= 0):
            raise ValueError("visible variances must be strictly positive")
        for name, arr in (("weights", w), ("visible_bias", b),
                          ("hidden_bias", c), ("visible_var", var)):
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite GRBM {name}")
            object.__setattr__(self, name, arr)

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class RbmParams:
    """Bernoulli-Bernoulli RBM with energy -v'Wh - b'v - c'h."""

    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.visible_bias, dtype=float)
        c = np.asarray(self.hidden_bias, dtype=float)
        if w.ndim != 2 or b.shape != (w.shape[0],) or c.shape != (w.shape[1],):
            raise DimensionError(
                f"inconsistent RBM shapes: W{w.shape}, b{b.shape}, c{c.shape}")
        for name, arr in (("weights", w), ("visible_bias", b), ("hidden_bias", c)):
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite RBM {name}")
            object.__setattr__(self, name, arr)

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class DbnStack:
    """A GRBM at the bottom with zero or more binary RBMs stacked above it."""

    bottom: GrbmParams
    upper: tuple = field(default_factory=tuple)

    def __post_init__(self):
        upper = tuple(self.upper)
        below = self.bottom.n_hidden
        for k, layer in enumerate(upper):
            if layer.n_visible != below:
                raise DimensionError(
                    f"layer {k + 1} expects {layer.n_visible} inputs, "
                    f"layer below has {below} units")
            below = layer.n_hidden
        object.__setattr__(self, "upper", upper)

    @property
    def n_visible(self) -> int:
        return self.bottom.n_visible

    @property
    def layer_sizes(self) -> list[int]:
        return [self.bottom.n_visible, self.bottom.n_hidden] + [r.n_hidden for r in self.upper]


@dataclass
class CdStats:
    """Diagnostics from one contrastive-divergence update."""

    grad_norm: float
    recon_error: float
    grads: dict = field(repr=False, default_factory=dict)


def _check_last(x: np.ndarray, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (n,):
        raise DimensionError(f"{what} has trailing dimension {x.shape[-1:]}, expected {n}")
    return x


def _bernoulli(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(probs.shape) < probs).astype(float)


# --------------------------------------------------------------------------
# Gaussian RBM


def init_grbm(n_visible: int, n_hidden: int, rng: np.random.Generator,
              data: Optional[np.ndarray] = None,
              variance: Optional[float] = None) -> GrbmParams:
    """Weights ~ N(0, 0.01^2), visible bias = data mean (or 0).

    Visible variance is ``variance`` if given, else the per-unit data
    variance (floored), else 1.
    """
    w = rng.normal(0.0, INIT_WEIGHT_STD, size=(n_visible, n_hidden))
    if data is not None:
        data = _check_last(np.atleast_2d(data), n_visible, "data")
        b = data.mean(axis=0)
        var = np.maximum(data.var(axis=0), VAR_FLOOR) if variance is None else None
    else:
        b = np.zeros(n_visible)
        var = None
    if var is None:
        var = np.full(n_visible, 1.0 if variance is None else float(variance))
    return GrbmParams(w, b, np.zeros(n_hidden), var)


def grbm_hidden_conditional(p: GrbmParams, v) -> np.ndarray:
    """p(h_j = 1 | v) = logistic(sum_i W_ij v_i + c_j)."""
    v = _check_last(v, p.n_visible, "v")
    return expit(v @ p.weights + p.hidden_bias)


def grbm_visible_conditional(p: GrbmParams, h) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the Gaussian p(v | h)."""
    h = _check_last(h, p.n_hidden, "h")
    mean = p.visible_bias + p.visible_var * (h @ p.weights.T)
    return mean, np.broadcast_to(p.visible_var, mean.shape).copy()


def grbm_sample_visible(p: GrbmParams, h, rng: np.random.Generator) -> np.ndarray:
    mean, var = grbm_visible_conditional(p, h)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def grbm_energy(p: GrbmParams, v, h) -> np.ndarray:
    v = _check_last(v, p.n_visible, "v")
    h = _check_last(h, p.n_hidden, "h")
    quad = np.sum((v - p.visible_bias) ** 2 / (2.0 * p.visible_var), axis=-1)
    return quad - h @ p.hidden_bias - np.sum((v @ p.weights) * h, axis=-1)


def grbm_free_energy(p: GrbmParams, v) -> np.ndarray:
    """F(v) = -log sum_h exp(-E(v, h))."""
    v = _check_last(v, p.n_visible, "v")
    quad = np.sum((v - p.visible_bias) ** 2 / (2.0 * p.visible_var), axis=-1)
    return quad - np.sum(np.logaddexp(0.0, v @ p.weights + p.hidden_bias), axis=-1)


def grbm_cd_gradient(p: GrbmParams, batch, steps: int, rng: np.random.Generator,
                     learn_variance: bool = False) -> tuple[dict, CdStats]:
    """CD-k estimate of the log-likelihood gradient (ascent direction).

    The variance gradient is taken with respect to ``log visible_var``.
    """
    if steps < 1:
        raise ValueError("CD needs at least one Gibbs step")
    v0 = _check_last(np.atleast_2d(batch), p.n_visible, "batch")
    n = v0.shape[0]
    ph0 = grbm_hidden_conditional(p, v0)
    h = _bernoulli(ph0, rng)
    for k in range(steps):
        vk = grbm_sample_visible(p, h, rng)
        phk = grbm_hidden_conditional(p, vk)
        if k < steps - 1:
            h = _bernoulli(phk, rng)
    grads = {
        "weights": (v0.T @ ph0 - vk.T @ phk) / n,
        "visible_bias": np.mean(v0 - vk, axis=0) / p.visible_var,
        "hidden_bias": np.mean(ph0 - phk, axis=0),
    }
    if learn_variance:
        d0 = (v0 - p.visible_bias) ** 2
        dk = (vk - p.visible_bias) ** 2
        grads["log_var"] = np.mean(d0 - dk, axis=0) / (2.0 * p.visible_var)
    norm = float(np.sqrt(sum(np.sum(g ** 2) for g in grads.values())))
    if not np.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericalError(f"non-finite CD gradient in {bad}")
    recon = float(np.mean((v0 - grbm_visible_conditional(p, _bernoulli(ph0, rng))[0]) ** 2))
    return grads, CdStats(norm, recon, grads)


def grbm_cd_update(p: GrbmParams, batch, steps: int = 1, rate: float = 0.01,
                   rng: Optional[np.random.Generator] = None,
                   learn_variance: bool = False) -> tuple[GrbmParams, CdStats]:
    """One CD-k parameter update on ``batch``; returns new params and diagnostics."""
    if rate < 0:
        raise ValueError("learning rate must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    grads, stats = grbm_cd_gradient(p, batch, steps, rng, learn_variance)
    if rate == 0:
        return p, stats
    var = p.visible_var
    if learn_variance:
        var = np.maximum(var * np.exp(rate * grads["log_var"]), VAR_FLOOR)
    new = GrbmParams(p.weights + rate * grads["weights"],
                     p.visible_bias + rate * grads["visible_bias"],
                     p.hidden_bias + rate * grads["hidden_bias"],
                     var)
    return new, stats


def train_grbm(p: GrbmParams, data, epochs: int, rng: np.random.Generator,
               batch_size: int = 64, rate: float = 0.01, steps: int = 1,
               learn_variance: bool = False) -> tuple[GrbmParams, list[float]]:
    """Mini-batch CD training; returns params and per-epoch mean reconstruction error."""
    data = _check_last(np.atleast_2d(data), p.n_visible, "data")
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        errs = []
        for start in range(0, len(data), batch_size):
            p, stats = grbm_cd_update(p, data[order[start:start + batch_size]],
                                      steps, rate, rng, learn_variance)
            errs.append(stats.recon_error)
        history.append(float(np.mean(errs)))
    return p, history


# --------------------------------------------------------------------------
# binary RBM


def init_rbm(n_visible: int, n_hidden: int, rng: np.random.Generator,
             data: Optional[np.ndarray] = None) -> RbmParams:
    w = rng.normal(0.0, INIT_WEIGHT_STD, size=(n_visible, n_hidden))
    b = np.zeros(n_visible)
    if data is not None:
        mean = np.clip(np.mean(np.atleast_2d(data), axis=0), 1e-3, 1 - 1e-3)
        b = np.log(mean / (1 - mean))
    return RbmParams(w, b, np.zeros(n_hidden))


def rbm_hidden_conditional(p: RbmParams, v) -> np.ndarray:
    v = _check_last(v, p.n_visible, "v")
    return expit(v @ p.weights + p.hidden_bias)


def rbm_visible_conditional(p: RbmParams, h) -> np.ndarray:
    h = _check_last(h, p.n_hidden, "h")
    return expit(h @ p.weights.T + p.visible_bias)


def rbm_conditionals(p: RbmParams, v=None, h=None):
    """Convenience wrapper returning whichever conditionals were asked for."""
    out = []
    if v is not None:
        out.append(rbm_hidden_conditional(p, v))
    if h is not None:
        out.append(rbm_visible_conditional(p, h))
    return out[0] if len(out) == 1 else tuple(out)


def rbm_energy(p: RbmParams, v, h) -> np.ndarray:
    v = _check_last(v, p.n_visible, "v")
    h = _check_last(h, p.n_hidden, "h")
    return -np.sum((v @ p.weights) * h, axis=-1) - v @ p.visible_bias - h @ p.hidden_bias


def rbm_free_energy(p: RbmParams, v) -> np.ndarray:
    v = _check_last(v, p.n_visible, "v")
    return -(v @ p.visible_bias) - np.sum(np.logaddexp(0.0, v @ p.weights + p.hidden_bias), axis=-1)


def rbm_cd_gradient(p: RbmParams, batch, steps: int,
                    rng: np.random.Generator) -> tuple[dict, CdStats]:
    if steps < 1:
        raise ValueError("CD needs at least one Gibbs step")
    v0 = _check_last(np.atleast_2d(batch), p.n_visible, "batch")
    n = v0.shape[0]
    ph0 = rbm_hidden_conditional(p, v0)
    h = _bernoulli(ph0, rng)
    for k in range(steps):
        vk = _bernoulli(rbm_visible_conditional(p, h), rng)
        phk = rbm_hidden_conditional(p, vk)
        if k < steps - 1:
            h = _bernoulli(phk, rng)
    grads = {
        "weights": (v0.T @ ph0 - vk.T @ phk) / n,
        "visible_bias": np.mean(v0 - vk, axis=0),
        "hidden_bias": np.mean(ph0 - phk, axis=0),
    }
    norm = float(np.sqrt(sum(np.sum(g ** 2) for g in grads.values())))
    if not np.isfinite(norm):
        raise NumericalError("non-finite CD gradient in binary RBM")
    recon = float(np.mean((v0 - rbm_visible_conditional(p, ph0)) ** 2))
    return grads, CdStats(norm, recon, grads)


def rbm_cd_update(p: RbmParams, batch, steps: int = 1, rate: float = 0.01,
                  rng: Optional[np.random.Generator] = None) -> tuple[RbmParams, CdStats]:
    if rate < 0:
        raise ValueError("learning rate must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    grads, stats = rbm_cd_gradient(p, batch, steps, rng)
    if rate == 0:
        return p, stats
    return RbmParams(p.weights + rate * grads["weights"],
                     p.visible_bias + rate * grads["visible_bias"],
                     p.hidden_bias + rate * grads["hidden_bias"]), stats


def train_rbm(p: RbmParams, data, epochs: int, rng: np.random.Generator,
              batch_size: int = 64, rate: float = 0.01,
              steps: int = 1) -> tuple[RbmParams, list[float]]:
    data = _check_last(np.atleast_2d(data), p.n_visible, "data")
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        errs = []
        for start in range(0, len(data), batch_size):
            p, stats = rbm_cd_update(p, data[order[start:start + batch_size]], steps, rate, rng)
            errs.append(stats.recon_error)
        history.append(float(np.mean(errs)))
    return p, history


# --------------------------------------------------------------------------
# DBN


def dbn_up_pass(stack: DbnStack, v, sample: bool = False,
                rng: Optional[np.random.Generator] = None) -> list[np.ndarray]:
    """Activations of every hidden layer, bottom first.

    Mean-field by default; with ``sample=True`` each layer is a Bernoulli draw
    and the next layer is driven by the binary states.
    """
    if sample and rng is None:
        raise ValueError("sampled up-pass needs an rng")
    act = grbm_hidden_conditional(stack.bottom, v)
    layers = []
    for k in range(len(stack.upper) + 1):
        if k > 0:
            act = rbm_hidden_conditional(stack.upper[k - 1], act)
        if sample:
            act = _bernoulli(act, rng)
        layers.append(act)
    return layers


def dbn_topdown_sample(stack: DbnStack, gibbs_iters: int, rng: np.random.Generator,
                       num_samples: int = 1, return_mean: bool = True) -> np.ndarray:
    """Ancestral sample: Gibbs in the top RBM, then a directed down-pass.

    With no upper layers the GRBM itself is the top pair.  Returns the visible
    conditional mean (or a Gaussian draw when ``return_mean`` is false), shape
    ``(num_samples, n_visible)``.
    """
    if gibbs_iters < 1:
        raise ValueError("gibbs_iters must be >= 1")
    g = stack.bottom
    if not stack.upper:
        v = np.tile(g.visible_bias, (num_samples, 1))
        for _ in range(gibbs_iters):
            h = _bernoulli(grbm_hidden_conditional(g, v), rng)
            v = grbm_sample_visible(g, h, rng)
    else:
        top = stack.upper[-1]
        x = _bernoulli(np.full((num_samples, top.n_visible), 0.5), rng)
        for _ in range(gibbs_iters):
            y = _bernoulli(rbm_hidden_conditional(top, x), rng)
            x = _bernoulli(rbm_visible_conditional(top, y), rng)
        for layer in reversed(stack.upper[:-1]):
            x = _bernoulli(rbm_visible_conditional(layer, x), rng)
        h = x
    mean, var = grbm_visible_conditional(g, h)
    if return_mean:
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def greedy_pretrain(data, hidden_sizes: list[int], epochs: int, rng: np.random.Generator,
                    batch_size: int = 64, rate: float = 0.01, steps: int = 1,
                    bottom: Optional[GrbmParams] = None) -> DbnStack:
    """Layer-wise CD training: a GRBM on ``data``, then RBMs on mean activations."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if bottom is None:
        bottom = init_grbm(data.shape[1], hidden_sizes[0], rng, data=data)
        bottom, _ = train_grbm(bottom, data, epochs, rng, batch_size, rate, steps)
    acts = grbm_hidden_conditional(bottom, data)
    upper = []
    for n_hid in hidden_sizes[1:]:
        layer = init_rbm(acts.shape[1], n_hid, rng, data=acts)
        layer, _ = train_rbm(layer, acts, epochs, rng, batch_size, rate, steps)
        upper.append(layer)
        acts = rbm_hidden_conditional(layer, acts)
    return DbnStack(bottom, tuple(upper))


def with_bottom(stack: DbnStack, bottom: GrbmParams) -> DbnStack:
    return replace(stack, bottom=bottom)
