"""Blocked Gibbs inference of albedo, normals, lights and prior hiddens.

One sweep updates, in order: prior hidden units given (a, N); albedo given
(N, L, h, V); lights given (a, N, V); normals given (a, L, g, V) by HMC.
Every random draw comes from a stream keyed by (seed, sweep, conditional,
unit), so a result depends only on the seed and never on evaluation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import orthogonal_procrustes

from dln import streams
from dln.energy_models import (DbnStack, GrbmParams, dbn_up_pass, grbm_energy,
                               grbm_hidden_conditional, rbm_hidden_conditional,
                               rbm_visible_conditional)
from dln.errors import DimensionError, NumericalError
from dln.hmc import EnergyTarget, HmcConfig, HmcResult, hmc_transitions
from dln.lambertian import (ImageStack, LightingPrior, NoiseModel, SceneLatents,
                            svd_photometric_stereo)

log = logging.getLogger(__name__)

LIGHT_JITTER = 1e-10
DEFAULT_ETA = 100.0


@dataclass
class DlnModel:
    """Priors and observation model.

    The normal prior is a GRBM over ``vec(N)`` laid out pixel-major: visible
    unit ``3*i + m`` is component ``m`` of the normal at pixel ``i``.
    """

    albedo_prior: DbnStack
    normal_prior: DbnStack
    lighting: LightingPrior
    noise: NoiseModel
    height: int
    width: int
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        n_v = self.height * self.width
        if self.albedo_prior.n_visible != n_v:
            raise DimensionError(
                f"albedo prior has {self.albedo_prior.n_visible} visibles, image has {n_v} pixels")
        if self.normal_prior.n_visible != 3 * n_v:
            raise DimensionError(
                f"normal prior has {self.normal_prior.n_visible} visibles, expected {3 * n_v}")
        if self.noise.var.shape[0] != n_v:
            raise DimensionError("noise variance does not match the number of pixels")
        if not np.isfinite(self.eta) or self.eta < 0:
            raise ValueError("eta must be finite and >= 0")

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def albedo_grbm(self) -> GrbmParams:
        return self.albedo_prior.bottom

    @property
    def normal_grbm(self) -> GrbmParams:
        return self.normal_prior.bottom

    def albedo_top_down(self, h) -> np.ndarray:
        """phi^h = b + sigma_a^2 (W h)."""
        p = self.albedo_grbm
        return p.visible_bias + p.visible_var * (p.weights @ h)

    def normal_top_down(self, g) -> np.ndarray:
        """phi^g = d + sigma_n^2 (U g), as an (N_v, 3) array."""
        p = self.normal_grbm
        return (p.visible_bias + p.visible_var * (p.weights @ g)).reshape(-1, 3)

    def normal_precision_diag(self) -> np.ndarray:
        """Diagonals of D_i = diag(1 / sigma_n^2), shape (N_v, 3)."""
        return 1.0 / self.normal_grbm.visible_var.reshape(-1, 3)


@dataclass
class PosteriorState:
    latents: SceneLatents
    h: np.ndarray
    g: np.ndarray
    iteration: int = 0
    h_upper: list = field(default_factory=list)
    g_upper: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=lambda: {"acceptance": [], "energy": []})

    def copy(self) -> "PosteriorState":
        lat = SceneLatents(self.latents.albedo.copy(), self.latents.normals.copy(),
                           self.latents.lights.copy())
        return PosteriorState(lat, self.h.copy(), self.g.copy(), self.iteration,
                              [x.copy() for x in self.h_upper], [x.copy() for x in self.g_upper],
                              {k: list(v) for k, v in self.diagnostics.items()})


def flat_model(height: int, width: int, n_hidden_albedo: int = 8, n_hidden_normal: int = 8,
               albedo_mean: float = 0.5, albedo_var: float = 1.0, normal_var: float = 1.0,
               noise_var: float = 1e-2, light_mean=(0.0, 0.0, 1.0), light_precision=None,
               eta: float = DEFAULT_ETA) -> DlnModel:
    """Model with zero prior weights: N(b, var) albedo, N((0,0,1), var) normals."""
    n_v = height * width
    albedo = GrbmParams(np.zeros((n_v, n_hidden_albedo)), np.full(n_v, float(albedo_mean)),
                        np.zeros(n_hidden_albedo), np.full(n_v, float(albedo_var)))
    normal = GrbmParams(np.zeros((3 * n_v, n_hidden_normal)), np.tile([0.0, 0.0, 1.0], n_v),
                        np.zeros(n_hidden_normal), np.full(3 * n_v, float(normal_var)))
    precision = np.eye(3) if light_precision is None else light_precision
    return DlnModel(DbnStack(albedo), DbnStack(normal), LightingPrior(light_mean, precision),
                    NoiseModel(np.full(n_v, float(noise_var))), height, width, eta)


def _pixels(model: DlnModel, images) -> np.ndarray:
    V = images.pixels if isinstance(images, ImageStack) else np.asarray(images, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] != model.n_pixels:
        raise DimensionError(f"images have {V.shape[0]} pixels, model expects {model.n_pixels}")
    return V


def dln_energy(model: DlnModel, images, latents: SceneLatents, h, g) -> float:
    """Joint energy of (V, a, N, L, h, g) under the GRBM priors.

    The normal GRBM term includes the latent-independent constant
    sum d^2 / (2 sigma_n^2) relative to the expanded form with -d n / sigma^2.
    """
    V = _pixels(model, images)
    a, N, L = latents.albedo, latents.normals, latents.lights
    resid = V - a[:, None] * (N @ L)
    e = 0.5 * np.sum(resid ** 2 / model.noise.var[:, None])
    dl = L - model.lighting.mean[:, None]
    e += 0.5 * np.sum(dl * (model.lighting.precision @ dl))
    e += 0.5 * model.eta * np.sum((np.sum(N * N, axis=1) - 1.0) ** 2)
    e += grbm_energy(model.albedo_grbm, a, h)
    e += grbm_energy(model.normal_grbm, N.reshape(-1), g)
    return float(e)


# --------------------------------------------------------------------------
# conditionals


def sample_hidden(model: DlnModel, state: PosteriorState, seed: int, sweep: int = 0):
    """Conditional 1: h ~ p(h | a), g ~ p(g | vec N); upper DBN layers by up-pass + top Gibbs.

    Returns ``(h, g, h_upper, g_upper)``.
    """
    out = []
    for k, (stack, vis) in enumerate(((model.albedo_prior, state.latents.albedo),
                                      (model.normal_prior, state.latents.normals.reshape(-1)))):
        rng = streams.keyed_rng(seed, sweep, streams.COND_HIDDEN, k)
        probs = grbm_hidden_conditional(stack.bottom, vis)
        bottom = (rng.random(probs.shape) < probs).astype(float)
        upper = []
        if stack.upper:
            below = bottom
            for layer in stack.upper[:-1]:
                act = rbm_hidden_conditional(layer, below)
                below = (rng.random(act.shape) < act).astype(float)
                upper.append(below)
            top = stack.upper[-1]
            act = rbm_hidden_conditional(top, below)
            y = (rng.random(act.shape) < act).astype(float)
            if len(stack.upper) > 1:
                pv = rbm_visible_conditional(top, y)
                upper[-1] = (rng.random(pv.shape) < pv).astype(float)
                act = rbm_hidden_conditional(top, upper[-1])
                y = (rng.random(act.shape) < act).astype(float)
            upper.append(y)
        out.append((bottom, upper))
    (h, hu), (g, gu) = out
    return h, g, hu, gu


def albedo_conditional(model: DlnModel, state: PosteriorState, images) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of p(a_i | N, L, h, V) for every pixel."""
    V = _pixels(model, images)
    lat = state.latents
    s = lat.normals @ lat.lights
    var_a = model.albedo_grbm.visible_var
    var_v = model.noise.var
    phi = model.albedo_top_down(state.h)
    denom = var_a * np.sum(s * s, axis=1) + var_v
    mean = (var_a * np.sum(s * V, axis=1) + phi * var_v) / denom
    return mean, var_a * var_v / denom


def sample_albedo(model: DlnModel, state: PosteriorState, images, seed: int, sweep: int = 0,
                  pixel_keys: Optional[Sequence[int]] = None) -> np.ndarray:
    """Conditional 2: independent Gaussian draw per pixel."""
    mean, var = albedo_conditional(model, state, images)
    keys = np.arange(model.n_pixels) if pixel_keys is None else pixel_keys
    z = streams.keyed_normals((seed, sweep, streams.COND_ALBEDO), keys)
    return mean + np.sqrt(var) * z


def light_conditional(model: DlnModel, state: PosteriorState, images):
    """Cholesky factor of the posterior light precision and the P posterior means.

    Returns ``(chol, means)`` with ``chol @ chol.T = Lambda~`` and means of shape (3, P).
    """
    V = _pixels(model, images)
    lat = state.latents
    m = lat.albedo[:, None] * lat.normals
    w = m / model.noise.var[:, None]
    prec = model.lighting.precision + m.T @ w
    prec = 0.5 * (prec + prec.T)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        log.warning("light posterior precision not positive definite; adding %g jitter",
                    LIGHT_JITTER)
        try:
            chol = np.linalg.cholesky(prec + LIGHT_JITTER * np.eye(3))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("light posterior precision is not positive definite") from exc
    rhs = (model.lighting.precision @ model.lighting.mean)[:, None] + w.T @ V
    means = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return chol, means


def sample_lights(model: DlnModel, state: PosteriorState, images, seed: int, sweep: int = 0,
                  image_keys: Optional[Sequence[int]] = None) -> np.ndarray:
    """Conditional 3: one Gaussian draw per image, shared precision."""
    V = _pixels(model, images)
    if V.shape[1] == 0:
        return np.zeros((3, 0))
    chol, means = light_conditional(model, state, V)
    keys = np.arange(V.shape[1]) if image_keys is None else image_keys
    z = streams.keyed_normals((seed, sweep, streams.COND_LIGHTS), keys, (3,))
    return means + np.linalg.solve(chol.T, z.T)


def normal_coefficients(model: DlnModel, state: PosteriorState, images):
    """Per-pixel quadratic coefficients of the normal energy.

    Returns ``(Q, r)`` with Q_i = A_i + D_i, shapes (N_v, 3, 3) and (N_v, 3), so that
    E(n_i) = 1/2 n'Q_i n - r_i'n + eta/2 (n'n - 1)^2.
    """
    V = _pixels(model, images)
    lat = state.latents
    L = lat.lights
    scale = lat.albedo / model.noise.var
    A = (lat.albedo * scale)[:, None, None] * (L @ L.T)[None]
    D = model.normal_precision_diag()
    Q = A + D[:, :, None] * np.eye(3)[None]
    r = scale[:, None] * (V @ L.T) + D * model.normal_top_down(state.g)
    return Q, r


def _quartic_target(Q, r, eta) -> EnergyTarget:
    def value_and_grad(n):
        qn = np.matmul(Q, n[..., None])[..., 0]
        sq = np.einsum("...i,...i->...", n, n)
        e = np.einsum("...i,...i->...", n, 0.5 * qn - r) + 0.5 * eta * (sq - 1.0) ** 2
        return e, qn - r + (2.0 * eta) * (sq - 1.0)[..., None] * n

    return EnergyTarget(lambda n: value_and_grad(n)[0], lambda n: value_and_grad(n)[1], 3,
                        value_and_grad)


def normal_energy(model: DlnModel, state: PosteriorState, images, i: int) -> EnergyTarget:
    """Energy (and gradient) of the conditional for the normal at pixel ``i``."""
    Q, r = normal_coefficients(model, state, images)
    return _quartic_target(Q[i], r[i], model.eta)


def normal_field_energy(model: DlnModel, state: PosteriorState, images) -> EnergyTarget:
    """Batched version over all pixels: states of shape (N_v, 3)."""
    Q, r = normal_coefficients(model, state, images)
    return _quartic_target(Q, r, model.eta)


def sample_normals(model: DlnModel, state: PosteriorState, images, cfg: HmcConfig, seed: int,
                   sweep: int = 0, pixel_keys: Optional[Sequence[int]] = None,
                   backend: str = "compiled"):
    """Conditional 4 by HMC, every pixel an independent chain.

    ``backend="numpy"`` runs the generic vectorised sampler from ``dln.hmc``;
    the default compiled kernel performs the same arithmetic pixel by pixel.
    Returns ``(normals, HmcResult)``.
    """
    Q, r = normal_coefficients(model, state, images)
    keys = np.arange(model.n_pixels) if pixel_keys is None else pixel_keys
    epochs = cfg.epochs_per_call
    mom, uni = streams.keyed_blocks((seed, sweep, streams.COND_NORMALS), keys, (epochs, 3), epochs)
    if backend == "numpy":
        res = hmc_transitions(_quartic_target(Q, r, model.eta), state.latents.normals, cfg,
                              np.moveaxis(mom, 0, 1), np.moveaxis(uni, 0, 1))
    elif backend == "compiled":
        from dln._kernels import quartic_hmc
        x, acc, trace = quartic_hmc(Q, r, float(model.eta), state.latents.normals, mom, uni,
                                    float(cfg.step_size), int(cfg.leapfrog_steps), float(cfg.mass))
        rate = float(np.mean(acc) / epochs) if acc.size else 0.0
        res = HmcResult(x, rate, acc, trace)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return res.state, res


# --------------------------------------------------------------------------
# initialisation and the sweep loop


def initial_state(model: DlnModel, images, init: str = "bias") -> PosteriorState:
    """Start from the prior visible biases, or from SVD photometric stereo.

    The SVD factors are rotated (orthogonal Procrustes) towards the prior mean
    of a_i n_i so that the arbitrary SVD frame roughly matches the priors.
    With several images, chains started from the biases can settle in a poor
    local mode; "svd" avoids that when at least 3 images are available.
    """
    V = _pixels(model, images)
    P = V.shape[1]
    b = model.albedo_grbm.visible_bias.copy()
    d = model.normal_grbm.visible_bias.reshape(-1, 3).copy()
    lights = np.tile(model.lighting.mean[:, None], (1, P))
    if init == "svd":
        if P >= 3:
            M, L = svd_photometric_stereo(V)
            R, _ = orthogonal_procrustes(M, b[:, None] * d)
            M, L = M @ R, R.T @ L
            a = np.linalg.norm(M, axis=1)
            ok = a > 1e-12
            N = d.copy()
            N[ok] = M[ok] / a[ok, None]
            b, d, lights = a, N, L
        else:
            log.warning("svd initialisation needs >= 3 images (got %d); using biases", P)
    elif init != "bias":
        raise ValueError(f"unknown init {init!r}")
    stack_h = [np.zeros(r.n_hidden) for r in model.albedo_prior.upper]
    stack_g = [np.zeros(r.n_hidden) for r in model.normal_prior.upper]
    return PosteriorState(SceneLatents(b, d, lights),
                          np.zeros(model.albedo_grbm.n_hidden),
                          np.zeros(model.normal_grbm.n_hidden), 0, stack_h, stack_g)


def gibbs_sweep(model: DlnModel, state: PosteriorState, images, cfg: HmcConfig, seed: int,
                sweep: int, order: Sequence[int] = (1, 2, 3, 4)) -> tuple[PosteriorState, float]:
    """One pass over the four conditionals; returns new state and HMC acceptance."""
    V = _pixels(model, images)
    st = state
    acceptance = float("nan")
    for cond in order:
        if cond == 1:
            h, g, hu, gu = sample_hidden(model, st, seed, sweep)
            st = replace(st, h=h, g=g, h_upper=hu, g_upper=gu)
        elif cond == 2:
            a = sample_albedo(model, st, V, seed, sweep)
            st = replace(st, latents=replace(st.latents, albedo=a))
        elif cond == 3:
            L = sample_lights(model, st, V, seed, sweep)
            st = replace(st, latents=replace(st.latents, lights=L))
        elif cond == 4:
            N, res = sample_normals(model, st, V, cfg, seed, sweep)
            acceptance = res.acceptance_rate
            st = replace(st, latents=replace(st.latents, normals=N))
        else:
            raise ValueError(f"unknown conditional {cond}")
    return st, acceptance


def reconstruction_error(images, latents: SceneLatents) -> float:
    """||V - diag(a) N L||_F / ||V||_F."""
    V = images.pixels if isinstance(images, ImageStack) else np.asarray(images, dtype=float)
    denom = np.linalg.norm(V)
    if denom == 0:
        return 0.0
    resid = V - latents.albedo[:, None] * (latents.normals @ latents.lights)
    return float(np.linalg.norm(resid) / denom)


def infer(model: DlnModel, images, iters: int = 50, cfg: Optional[HmcConfig] = None,
          seed: int = 0, init: str = "bias", order: Sequence[int] = (1, 2, 3, 4),
          init_state: Optional[PosteriorState] = None, keep_trace: bool = False,
          average_last: int = 0,
          callback: Optional[Callable[[int, PosteriorState], None]] = None) -> PosteriorState:
    """Alternating Gibbs sampling of p(a, N, L, h, g | V).

    Returns the final state; with ``average_last > 0`` the returned latents are
    averages of (a, N, L) over that many final sweeps.  ``keep_trace`` stores
    a copy of every sweep's latents under ``diagnostics["trace"]``.
    """
    cfg = HmcConfig() if cfg is None else cfg
    V = _pixels(model, images)
    st = initial_state(model, V, init) if init_state is None else init_state.copy()
    if st.latents.lights.shape[1] != V.shape[1]:
        raise DimensionError("initial state has a different number of lights than images")
    st.diagnostics.setdefault("acceptance", [])
    st.diagnostics.setdefault("energy", [])
    trace, sums = [], None
    start = st.iteration
    for k in range(iters):
        sweep = start + k
        st, acc = gibbs_sweep(model, st, V, cfg, seed, sweep, order)
        st.iteration = sweep + 1
        lat = st.latents
        if not (np.all(np.isfinite(lat.albedo)) and np.all(np.isfinite(lat.normals))
                and np.all(np.isfinite(lat.lights))):
            raise NumericalError(f"non-finite posterior state at sweep {sweep}")
        st.diagnostics["acceptance"].append(acc)
        st.diagnostics["energy"].append(dln_energy(model, V, lat, st.h, st.g))
        if keep_trace:
            trace.append(SceneLatents(lat.albedo.copy(), lat.normals.copy(), lat.lights.copy()))
        if average_last and k >= iters - average_last:
            vals = (lat.albedo, lat.normals, lat.lights)
            sums = vals if sums is None else tuple(s + v for s, v in zip(sums, vals))
        if callback is not None:
            callback(sweep, st)
    if keep_trace:
        st.diagnostics["trace"] = trace
    if sums is not None:
        n = min(average_last, iters)
        st = replace(st, latents=SceneLatents(*(s / n for s in sums)))
    return st
