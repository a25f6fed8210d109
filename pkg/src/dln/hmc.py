"""Hamiltonian Monte Carlo over differentiable energies.

States may carry leading batch axes: an energy evaluated on ``x`` of shape
``(..., dim)`` returns shape ``(...)``, and every batch entry is an
independent chain with its own Metropolis decision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.01
    leapfrog_steps: int = 20
    epochs_per_call: int = 10
    mass: float = 2.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.leapfrog_steps < 1 or self.epochs_per_call < 1:
            raise ValueError("leapfrog_steps and epochs_per_call must be >= 1")
        if not self.mass > 0:
            raise ValueError("mass must be > 0")


@dataclass
class EnergyTarget:
    """Energy, its gradient, and optionally a fused ``value_and_grad``."""

    energy: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    dim: int
    value_and_grad: Optional[Callable[[np.ndarray], tuple]] = None

    def both(self, x):
        if self.value_and_grad is not None:
            return self.value_and_grad(x)
        return self.energy(x), self.gradient(x)


@dataclass
class HmcResult:
    state: np.ndarray
    acceptance_rate: float
    accepted: np.ndarray        # per-chain accept counts
    energy_trace: np.ndarray    # potential energy after each epoch, (epochs, ...)


def leapfrog(target: EnergyTarget, state, momentum, cfg: HmcConfig):
    """Integrate ``cfg.leapfrog_steps`` half-kick/drift/half-kick steps."""
    x, p, _ = _trajectory(target, np.array(state, dtype=float),
                          np.array(momentum, dtype=float), cfg, h0=None)
    return x, p


def _kinetic(p, mass):
    return 0.5 * np.sum(p * p, axis=-1) / mass


def _trajectory(target, x, p, cfg, h0):
    """Leapfrog with divergence tracking.

    Returns the end point and a boolean mask of chains that stayed finite and
    within the divergence threshold (all True when ``h0`` is None).
    """
    eps, mass = cfg.step_size, cfg.mass
    ok = np.ones(x.shape[:-1], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        p = p - 0.5 * eps * target.gradient(x)
        for step in range(cfg.leapfrog_steps):
            x = x + eps * p / mass
            if h0 is None:
                g = target.gradient(x)
            else:
                u, g = target.both(x)
            if step < cfg.leapfrog_steps - 1:
                p = p - eps * g
            else:
                p = p - 0.5 * eps * g
            if h0 is not None:
                h = u + _kinetic(p, mass)
                ok &= np.isfinite(h) & (np.abs(h - h0) <= DIVERGENCE_THRESHOLD)
                if not ok.any():
                    break
    return x, p, ok


def hmc_transitions(target: EnergyTarget, init, cfg: HmcConfig,
                    momenta: np.ndarray, uniforms: np.ndarray) -> HmcResult:
    """HMC driven by pre-drawn randomness.

    ``momenta`` holds standard normals of shape ``(epochs, *batch, dim)`` and
    ``uniforms`` holds U(0,1) draws of shape ``(epochs, *batch)``.
    """
    x = np.array(init, dtype=float)
    batch = x.shape[:-1]
    epochs = cfg.epochs_per_call
    if momenta.shape != (epochs,) + x.shape or uniforms.shape != (epochs,) + batch:
        raise ValueError("randomness does not match state shape and epoch count")
    u = target.energy(x)
    accepted = np.zeros(batch, dtype=int)
    trace = np.empty((epochs,) + batch)
    sd = np.sqrt(cfg.mass)
    for e in range(epochs):
        p0 = sd * momenta[e]
        h0 = u + _kinetic(p0, cfg.mass)
        x1, p1, ok = _trajectory(target, x, p0, cfg, h0)
        with np.errstate(over="ignore", invalid="ignore"):
            u1 = target.energy(x1)
            h1 = u1 + _kinetic(p1, cfg.mass)
            log_ratio = np.where(ok, h0 - h1, -np.inf)
        accept = ok & np.isfinite(h1) & (np.log(uniforms[e]) < log_ratio)
        x = np.where(accept[..., None], x1, x)
        u = np.where(accept, u1, u)
        accepted += accept
        trace[e] = u
    rate = float(np.mean(accepted) / epochs) if accepted.size else 0.0
    return HmcResult(x, rate, accepted, trace)


def hmc_sample(target: EnergyTarget, init, cfg: HmcConfig,
               rng: Optional[np.random.Generator] = None, seed: Optional[int] = None) -> HmcResult:
    """Run ``cfg.epochs_per_call`` Metropolis-corrected trajectories."""
    if rng is None:
        rng = np.random.default_rng(seed)
    x = np.asarray(init, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("HMC needs a finite initial state")
    e = cfg.epochs_per_call
    momenta = rng.standard_normal((e,) + x.shape)
    uniforms = rng.random((e,) + x.shape[:-1])
    return hmc_transitions(target, x, cfg, momenta, uniforms)


def grad_check(target: EnergyTarget, state, eps: float = 1e-5) -> float:
    """Max relative error between ``target.gradient`` and central differences.

    Errors are scaled by ``max(|fd_k|, |g_k|, 1e-6 * max(1, max|g|))`` so that
    near-zero components do not dominate.
    """
    x = np.asarray(state, dtype=float)
    g = np.asarray(target.gradient(x), dtype=float)
    fd = np.empty_like(x)
    for k in range(x.size):
        step = np.zeros(x.size)
        step[k] = eps
        step = step.reshape(x.shape)
        fd.flat[k] = (np.sum(target.energy(x + step)) - np.sum(target.energy(x - step))) / (2 * eps)
    scale = 1e-6 * max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), scale)
    return float(np.max(np.abs(fd - g) / denom)) if g.size else 0.0
