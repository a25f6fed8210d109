"""Brute-force reference computations shared by the test modules."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp, ndtr

from dln.energy_models import DbnStack, GrbmParams
from dln.lambertian import LightingPrior, NoiseModel
from dln.posterior import DlnModel


def binary_states(n: int) -> np.ndarray:
    return np.array(list(itertools.product([0.0, 1.0], repeat=n)))


def tiny_model(seed: int = 0, noise_var: float = 0.5, albedo_var: float = 0.25,
               normal_var: float = 0.25, weight_scale: float = 0.6) -> DlnModel:
    """Two-pixel model with two hidden units per prior and eta = 0."""
    rng = np.random.default_rng(seed)
    n_v, n_h = 2, 2
    albedo = GrbmParams(weight_scale * rng.standard_normal((n_v, n_h)), np.full(n_v, 0.6),
                        0.3 * rng.standard_normal(n_h), np.full(n_v, albedo_var))
    normal = GrbmParams(weight_scale * rng.standard_normal((3 * n_v, n_h)),
                        np.tile([0.0, 0.0, 1.0], n_v), 0.3 * rng.standard_normal(n_h),
                        np.full(3 * n_v, normal_var))
    lighting = LightingPrior([0.0, 0.0, 1.0], 4.0 * np.eye(3))
    return DlnModel(DbnStack(albedo), DbnStack(normal), lighting,
                    NoiseModel(np.full(n_v, noise_var)), 1, n_v, eta=0.0)


class TinyPosterior:
    """Quadrature posterior of the eta = 0 two-pixel model for one image.

    Normals are integrated analytically (Gaussian given everything else),
    lights live on a 3-D midpoint grid and each albedo on a 1-D grid.
    """

    def __init__(self, model: DlnModel, v, light_edges, albedo_edges):
        self.model = model
        self.v = np.asarray(v, dtype=float).reshape(-1)
        self.light_edges = [np.asarray(e) for e in light_edges]
        self.albedo_edges = np.asarray(albedo_edges)
        lc = [0.5 * (e[1:] + e[:-1]) for e in self.light_edges]
        self.light_centres = lc
        self.albedo_centres = 0.5 * (self.albedo_edges[1:] + self.albedo_edges[:-1])
        grid = np.stack(np.meshgrid(*lc, indexing="ij"), axis=-1).reshape(-1, 3)
        self.lights = grid
        self._compute()

    def _pixel_terms(self, a, ell, h, g, i):
        """log weight of a_i (after integrating n_i) and the n_i posterior moments."""
        m = self.model
        pa, pn = m.albedo_grbm, m.normal_grbm
        sv = m.noise.var[i]
        sn = pn.visible_var[3 * i]
        phi_a = pa.visible_bias[i] + pa.visible_var[i] * (pa.weights[i] @ h)
        lw = -(a - phi_a) ** 2 / (2 * pa.visible_var[i])          # (A,)
        lin = pn.visible_bias[3 * i:3 * i + 3] / sn + pn.weights[3 * i:3 * i + 3] @ g
        k = a[None, :] ** 2 / sv                                    # (1, A)
        l2 = np.sum(ell * ell, axis=1)[:, None]                     # (G, 1)
        r = (a[None, :, None] * self.v[i] / sv) * ell[:, None, :] + lin   # (G, A, 3)
        # Q = I/sn + k l l'  (Sherman-Morrison)
        rr = np.sum(r * r, axis=-1)
        lr = np.einsum("gj,gaj->ga", ell, r)
        denom = 1.0 + sn * k * l2
        quad = sn * rr - sn * sn * k * lr ** 2 / denom
        logdet = 3 * np.log(1.0 / sn) + np.log(denom)
        lw = lw[None, :] + 0.5 * quad - 0.5 * logdet - self.v[i] ** 2 / (2 * sv)
        return lw, r, k, l2, lr, denom, sn

    def _compute(self):
        m = self.model
        pa, pn = m.albedo_grbm, m.normal_grbm
        H = binary_states(pa.n_hidden)
        Gs = binary_states(pn.n_hidden)
        ell = self.lights
        lp = m.lighting
        lprior = -0.5 * np.einsum("gi,ij,gj->g", ell - lp.mean, lp.precision, ell - lp.mean)
        a = self.albedo_centres
        self.hg = [(h, g) for h in H for g in Gs]
        logw_cfg = []
        pix_marg = []
        self._cache = []
        for h, g in self.hg:
            base = pa.hidden_bias @ h + pn.hidden_bias @ g
            # constant parts of the GRBM energies that depend on h, g
            base += (pa.visible_bias @ (pa.weights @ h) + 0.5 * np.sum(
                pa.visible_var * (pa.weights @ h) ** 2))
            per_pix = []
            total = lprior + base
            for i in range(m.n_pixels):
                lw = self._pixel_terms(a, ell, h, g, i)[0]
                lse = logsumexp(lw, axis=1)
                total = total + lse
                per_pix.append(lw - lse[:, None])
            logw_cfg.append(total)
            pix_marg.append(per_pix)
        logw = np.stack(logw_cfg)                        # (HG, G)
        self.logZ = logsumexp(logw)
        self.w = np.exp(logw - self.logZ)                # joint over (h, g, light cell)
        self.pix_cond = pix_marg                         # log p(a_i | h, g, l)

    # marginals -------------------------------------------------------------

    def hg_marginal(self) -> np.ndarray:
        return self.w.sum(axis=1)

    def light_marginal(self, k: int) -> np.ndarray:
        shape = tuple(len(c) for c in self.light_centres)
        w = self.w.sum(axis=0).reshape(shape)
        axes = tuple(j for j in range(3) if j != k)
        return w.sum(axis=axes)

    def albedo_marginal(self, i: int) -> np.ndarray:
        out = np.zeros(len(self.albedo_centres))
        for c in range(len(self.hg)):
            out += self.w[c] @ np.exp(self.pix_cond[c][i])
        return out

    def normal_marginal(self, i: int, comp: int, edges) -> np.ndarray:
        """Binned marginal of component ``comp`` of n_i (Gaussian mixture CDFs)."""
        a = self.albedo_centres
        ell = self.lights
        out = np.zeros(len(edges) - 1)
        for c, (h, g) in enumerate(self.hg):
            _, r, k, l2, lr, denom, sn = self._pixel_terms(a, ell, h, g, i)
            # mean = Q^-1 r, var_comp = (Q^-1)_cc
            mean = sn * r - (sn * sn * k * lr / denom)[..., None] * ell[:, None, :]
            var = sn - sn * sn * k * ell[:, None, comp] ** 2 / denom
            wts = self.w[c][:, None] * np.exp(self.pix_cond[c][i])
            mu, sd = mean[..., comp], np.sqrt(var)
            cdf = ndtr((np.asarray(edges)[:, None, None] - mu) / sd)
            out += np.sum(wts * (cdf[1:] - cdf[:-1]), axis=(1, 2))
        return out


def tv(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.sum(np.abs(p / p.sum() - q / q.sum())))


def coarse(probs, factor: int) -> np.ndarray:
    probs = np.asarray(probs)
    return probs.reshape(-1, factor).sum(axis=1)
