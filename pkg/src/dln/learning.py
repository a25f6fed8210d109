"""Approximate EM training.

E-step: Gibbs/HMC posterior samples per subject.  M-step: contrastive
divergence on the albedo and normal priors using the sampled latents as data,
then closed-form maximum-likelihood updates of the pixel noise and the
Gaussian light prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from dln import streams
from dln.energy_models import (VAR_FLOOR, DbnStack, GrbmParams, grbm_cd_update,
                               grbm_hidden_conditional, init_grbm, rbm_cd_update,
                               rbm_hidden_conditional, train_grbm)
from dln.errors import DataError, DimensionError, NumericalError
from dln.hmc import HmcConfig
from dln.lambertian import ImageStack, LightingPrior, NoiseModel
from dln.posterior import DlnModel, PosteriorState, infer, reconstruction_error

log = logging.getLogger(__name__)

LIGHT_COV_JITTER = 1e-8
MIN_LIGHT_SAMPLES = 4


@dataclass(frozen=True)
class TrainConfig:
    em_iters: int = 30
    e_step_sweeps: int = 50
    cd_steps: int = 1
    cd_epochs: int = 1
    albedo_rate: float = 0.01
    normal_rate: float = 0.01
    batch_size: int = 64
    hmc: HmcConfig = field(default_factory=HmcConfig)
    eta: float = 100.0
    translation_augment: int = 2
    augment_copies: int = 4
    learn_variance: bool = False
    n_hidden_albedo: int = 32
    n_hidden_normal: int = 32
    init_noise_var: float = 1.0
    init: str = "bias"
    warm_start: bool = True
    tol: Optional[float] = 1e-3
    patience: int = 3
    unbiased_light_cov: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.em_iters < 0 or self.e_step_sweeps < 1 or self.cd_steps < 1 or self.cd_epochs < 0:
            raise ValueError("iteration counts must be positive")
        if min(self.albedo_rate, self.normal_rate) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.translation_augment < 0 or self.augment_copies < 0:
            raise ValueError("batch_size / augmentation settings out of range")


@dataclass
class Subject:
    """All images of one object: shared albedo and normals, one light per image."""

    subject_id: str
    images: ImageStack


@dataclass
class TrainRecord:
    iteration: int
    recon_error: float
    acceptance: float
    noise_var_mean: float
    albedo_grad: float
    normal_grad: float

    def line(self) -> str:
        return (f"iter={self.iteration} recon_error={self.recon_error:.6g} "
                f"acceptance={self.acceptance:.4f} noise_var_mean={self.noise_var_mean:.6g} "
                f"albedo_cd_grad={self.albedo_grad:.6g} normal_cd_grad={self.normal_grad:.6g}")


def _check_subjects(subjects: Sequence[Subject], n_pixels: Optional[int] = None) -> int:
    if not subjects:
        raise DataError("no training subjects")
    n = subjects[0].images.n_pixels if n_pixels is None else n_pixels
    for s in subjects:
        if s.images.n_pixels != n:
            raise DimensionError(
                f"subject {s.subject_id!r} has {s.images.n_pixels} pixels, expected {n}")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise DataError("subject ids must be unique")
    return n


def pretrain_albedo_prior(corpus, n_hidden: int, epochs: int = 10, rate: float = 0.01,
                          batch_size: int = 64, steps: int = 1, seed: int = 0) -> GrbmParams:
    """CD-train a GRBM on raw images used as albedo proxies.

    ``corpus`` is (K, N_v).  Visible bias starts at the data mean and the
    variance is fixed at the per-pixel data variance.
    """
    corpus = np.atleast_2d(np.asarray(corpus, dtype=float))
    if corpus.shape[0] == 0:
        raise DataError("empty pretraining corpus")
    rng = np.random.default_rng(seed)
    p = init_grbm(corpus.shape[1], n_hidden, rng, data=corpus)
    if epochs > 0:
        p, _ = train_grbm(p, corpus, epochs, rng, batch_size, rate, steps)
    return p


def transfer_albedo_prior(model: DlnModel, grbm: GrbmParams) -> DlnModel:
    if grbm.n_visible != model.n_pixels:
        raise DimensionError(
            f"pretrained GRBM has {grbm.n_visible} visibles, model has {model.n_pixels} pixels")
    return replace(model, albedo_prior=DbnStack(grbm))


def init_model(height: int, width: int, cfg: TrainConfig,
               subjects: Sequence[Subject] = (),
               albedo_prior: Optional[GrbmParams] = None) -> DlnModel:
    """Initial model: weights ~ N(0, 0.01^2), all variances 1.

    Albedo visible bias is the mean training image; normal visible bias is the
    viewer-facing normal (0, 0, 1) at every pixel.
    """
    rng = np.random.default_rng([cfg.seed, 0xD1])
    n_v = height * width
    if albedo_prior is None:
        albedo_prior = init_grbm(n_v, cfg.n_hidden_albedo, rng, variance=1.0)
        if subjects:
            mean = np.mean(np.concatenate([s.images.pixels for s in subjects], axis=1), axis=1)
            albedo_prior = replace(albedo_prior, visible_bias=mean)
    normal = init_grbm(3 * n_v, cfg.n_hidden_normal, rng, variance=1.0)
    normal = replace(normal, visible_bias=np.tile([0.0, 0.0, 1.0], n_v))
    return DlnModel(DbnStack(albedo_prior), DbnStack(normal),
                    LightingPrior([0.0, 0.0, 1.0], np.eye(3)),
                    NoiseModel(np.full(n_v, cfg.init_noise_var)), height, width, cfg.eta)


def subject_seed(seed: int, em_iter: int, subject_id: str) -> int:
    ss = np.random.SeedSequence([seed, em_iter, streams.string_key(subject_id)])
    return int(ss.generate_state(1)[0])


def e_step(model: DlnModel, subjects: Sequence[Subject], cfg: TrainConfig, seed: int,
           em_iter: int = 0,
           init_states: Optional[dict] = None) -> dict[str, PosteriorState]:
    """Posterior sample per subject, keyed by subject id (order-independent)."""
    _check_subjects(subjects, model.n_pixels)
    out = {}
    for s in subjects:
        warm = None if init_states is None else init_states.get(s.subject_id)
        out[s.subject_id] = infer(model, s.images, iters=cfg.e_step_sweeps, cfg=cfg.hmc,
                                  seed=subject_seed(seed, em_iter, s.subject_id),
                                  init=cfg.init, init_state=warm)
    return out


def translate_normals(normals: np.ndarray, height: int, width: int, dy: int, dx: int) -> np.ndarray:
    """Shift an (N_v, 3) normal map by whole pixels, replicating edges."""
    img = normals.reshape(height, width, 3)
    k = max(abs(dy), abs(dx))
    if k == 0:
        return normals.copy()
    padded = np.pad(img, ((k, k), (k, k), (0, 0)), mode="edge")
    out = padded[k - dy:k - dy + height, k - dx:k - dx + width]
    return out.reshape(-1, 3)


def _cd_epochs(stack: DbnStack, data: np.ndarray, cfg: TrainConfig, rate: float,
               rng: np.random.Generator) -> tuple[DbnStack, float]:
    """CD passes over ``data`` for the bottom GRBM, then each upper RBM."""
    bottom = stack.bottom
    grad = 0.0
    for _ in range(cfg.cd_epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            bottom, stats = grbm_cd_update(bottom, data[order[start:start + cfg.batch_size]],
                                           cfg.cd_steps, rate, rng, cfg.learn_variance)
            grad = stats.grad_norm
    upper = list(stack.upper)
    acts = grbm_hidden_conditional(bottom, data)
    for k, layer in enumerate(upper):
        for _ in range(cfg.cd_epochs):
            layer, _ = rbm_cd_update(layer, acts, cfg.cd_steps, rate, rng)
        upper[k] = layer
        acts = rbm_hidden_conditional(layer, acts)
    return DbnStack(bottom, tuple(upper)), grad


def ml_noise_and_lights(model: DlnModel, subjects: Sequence[Subject],
                        states: dict[str, PosteriorState],
                        unbiased: bool = False) -> tuple[NoiseModel, LightingPrior]:
    """Closed-form ML estimates of pixel noise variance and the light prior."""
    sq = np.zeros(model.n_pixels)
    count = 0
    lights = []
    for s in subjects:
        lat = states[s.subject_id].latents
        resid = s.images.pixels - lat.albedo[:, None] * (lat.normals @ lat.lights)
        sq += np.sum(resid ** 2, axis=1)
        count += resid.shape[1]
        lights.append(lat.lights)
    noise = model.noise
    if count > 0:
        noise = NoiseModel(np.maximum(sq / count, VAR_FLOOR))
    L = np.concatenate(lights, axis=1)
    lighting = model.lighting
    if L.shape[1] >= 1:
        mean = L.mean(axis=1)
        precision = lighting.precision
        if L.shape[1] >= MIN_LIGHT_SAMPLES:
            cov = np.cov(L, bias=not unbiased) + LIGHT_COV_JITTER * np.eye(3)
            precision = np.linalg.inv(cov)
            precision = 0.5 * (precision + precision.T)
        else:
            log.info("only %d light samples; keeping previous light precision", L.shape[1])
        lighting = LightingPrior(mean, precision)
    return noise, lighting


def m_step(model: DlnModel, subjects: Sequence[Subject], states: dict[str, PosteriorState],
           cfg: TrainConfig, rng: np.random.Generator) -> tuple[DlnModel, dict]:
    """CD on both priors using the sampled latents, then ML noise / light prior."""
    if not states:
        raise DataError("m_step needs at least one posterior sample")
    albedos = np.stack([states[s.subject_id].latents.albedo for s in subjects])
    normals = []
    for s in subjects:
        n = states[s.subject_id].latents.normals
        normals.append(n.reshape(-1))
        k = cfg.translation_augment
        for _ in range(cfg.augment_copies if k > 0 else 0):
            dy, dx = rng.integers(-k, k + 1, size=2)
            normals.append(translate_normals(n, model.height, model.width, dy, dx).reshape(-1))
    normals = np.stack(normals)
    albedo_prior, ga = _cd_epochs(model.albedo_prior, albedos, cfg, cfg.albedo_rate, rng)
    normal_prior, gn = _cd_epochs(model.normal_prior, normals, cfg, cfg.normal_rate, rng)
    noise, lighting = ml_noise_and_lights(model, subjects, states, cfg.unbiased_light_cov)
    new = replace(model, albedo_prior=albedo_prior, normal_prior=normal_prior,
                  noise=noise, lighting=lighting)
    return new, {"albedo_grad": ga, "normal_grad": gn}


def _finite_model(m: DlnModel) -> bool:
    arrays = [m.noise.var, m.lighting.mean, m.lighting.precision]
    for stack in (m.albedo_prior, m.normal_prior):
        b = stack.bottom
        arrays += [b.weights, b.visible_bias, b.hidden_bias, b.visible_var]
        for r in stack.upper:
            arrays += [r.weights, r.visible_bias, r.hidden_bias]
    return all(np.all(np.isfinite(a)) for a in arrays)


def train(subjects: Sequence[Subject], cfg: TrainConfig, model: Optional[DlnModel] = None,
          albedo_prior: Optional[GrbmParams] = None,
          on_iteration: Optional[Callable[[int, DlnModel, TrainRecord], None]] = None,
          ) -> tuple[DlnModel, list[TrainRecord]]:
    """Alternate E- and M-steps for ``cfg.em_iters`` iterations.

    Stops early once the relative improvement of the mean reconstruction
    error stays below ``cfg.tol`` for ``cfg.patience`` consecutive iterations.
    """
    n_v = _check_subjects(subjects)
    first = subjects[0].images
    if model is None:
        model = init_model(first.height, first.width, cfg, subjects, albedo_prior)
    elif albedo_prior is not None:
        model = transfer_albedo_prior(model, albedo_prior)
    if model.n_pixels != n_v:
        raise DimensionError("model and subjects disagree on image size")
    rng = np.random.default_rng([cfg.seed, 0x3E])
    history: list[TrainRecord] = []
    states = None
    stalled = 0
    for it in range(cfg.em_iters):
        states = e_step(model, subjects, cfg, cfg.seed, it,
                        init_states=states if cfg.warm_start else None)
        model, diag = m_step(model, subjects, states, cfg, rng)
        if not _finite_model(model):
            raise NumericalError(f"non-finite parameters after EM iteration {it}")
        recon = float(np.mean([reconstruction_error(s.images, states[s.subject_id].latents)
                               for s in subjects]))
        acc = float(np.nanmean([np.nanmean(states[s.subject_id].diagnostics["acceptance"])
                                for s in subjects]))
        rec = TrainRecord(it, recon, acc, float(np.mean(model.noise.var)),
                          diag["albedo_grad"], diag["normal_grad"])
        history.append(rec)
        log.info(rec.line())
        if on_iteration is not None:
            on_iteration(it, model, rec)
        if cfg.tol is not None and len(history) > 1:
            prev = history[-2].recon_error
            rel = (prev - recon) / prev if prev > 0 else 0.0
            stalled = stalled + 1 if rel < cfg.tol else 0
            if stalled >= cfg.patience:
                log.info("converged after %d EM iterations", it + 1)
                break
    return model, history
