"""Compiled inner loop for per-pixel HMC on the quartic normal energy.

Mirrors ``hmc.hmc_transitions`` applied to ``posterior._quartic_target``
(same integrator, same divergence rule, same randomness layout); the
test-suite checks the two agree to rounding.
"""

import numpy as np
from numba import njit

from dln.hmc import DIVERGENCE_THRESHOLD


@njit(cache=True)
def _energy_grad(Q, r, eta, n, grad):
    qn0 = Q[0, 0] * n[0] + Q[0, 1] * n[1] + Q[0, 2] * n[2]
    qn1 = Q[1, 0] * n[0] + Q[1, 1] * n[1] + Q[1, 2] * n[2]
    qn2 = Q[2, 0] * n[0] + Q[2, 1] * n[1] + Q[2, 2] * n[2]
    sq = n[0] * n[0] + n[1] * n[1] + n[2] * n[2]
    c = sq - 1.0
    e = (n[0] * (0.5 * qn0 - r[0]) + n[1] * (0.5 * qn1 - r[1])
         + n[2] * (0.5 * qn2 - r[2])) + 0.5 * eta * c * c
    k = 2.0 * eta * c
    grad[0] = qn0 - r[0] + k * n[0]
    grad[1] = qn1 - r[1] + k * n[1]
    grad[2] = qn2 - r[2] + k * n[2]
    return e


@njit(cache=True)
def quartic_hmc(Q, r, eta, x0, momenta, uniforms, step, n_steps, mass):
    """HMC for independent 3-D chains.

    Q (B,3,3), r (B,3), x0 (B,3), momenta (B,E,3) standard normals,
    uniforms (B,E).  Returns (states, accept_counts, energy_trace (E,B)).
    """
    B = x0.shape[0]
    E = uniforms.shape[1]
    out = x0.copy()
    accepted = np.zeros(B, dtype=np.int64)
    trace = np.empty((E, B))
    sd = np.sqrt(mass)
    g = np.empty(3)
    x = np.empty(3)
    p = np.empty(3)
    for b in range(B):
        u = _energy_grad(Q[b], r[b], eta, out[b], g)
        for e in range(E):
            for m in range(3):
                x[m] = out[b, m]
                p[m] = sd * momenta[b, e, m]
            h0 = u + 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / mass
            _energy_grad(Q[b], r[b], eta, x, g)
            for m in range(3):
                p[m] = p[m] - 0.5 * step * g[m]
            ok = True
            u1 = u
            for s in range(n_steps):
                for m in range(3):
                    x[m] = x[m] + step * p[m] / mass
                u1 = _energy_grad(Q[b], r[b], eta, x, g)
                f = step if s < n_steps - 1 else 0.5 * step
                for m in range(3):
                    p[m] = p[m] - f * g[m]
                h = u1 + 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / mass
                if not (np.isfinite(h) and abs(h - h0) <= DIVERGENCE_THRESHOLD):
                    ok = False
                    break
            if ok:
                h1 = u1 + 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / mass
                if np.isfinite(h1) and np.log(uniforms[b, e]) < h0 - h1:
                    for m in range(3):
                        out[b, m] = x[m]
                    u = u1
                    accepted[b] += 1
            trace[e, b] = u
    return out, accepted, trace
