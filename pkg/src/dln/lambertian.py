"""Lambertian image formation, synthetic scenes and SVD photometric stereo.

Shapes used throughout: albedo ``(N_v,)``, normals ``(N_v, 3)``, lights
``(3, P)``, images ``(N_v, P)`` with pixels in row-major image order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from dln.errors import DimensionError, NumericalError


@dataclass
class SceneLatents:
    albedo: np.ndarray
    normals: np.ndarray
    lights: np.ndarray

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=float)
        self.normals = np.asarray(self.normals, dtype=float)
        self.lights = np.asarray(self.lights, dtype=float).reshape(3, -1)
        n_v = self.albedo.shape[0]
        if self.albedo.ndim != 1 or self.normals.shape != (n_v, 3):
            raise DimensionError(
                f"albedo {self.albedo.shape} and normals {self.normals.shape} disagree")

    @property
    def n_pixels(self) -> int:
        return self.albedo.shape[0]

    @property
    def n_images(self) -> int:
        return self.lights.shape[1]

    def scaled_normals(self) -> np.ndarray:
        """Rows a_i * n_i: the matrix whose column span holds every render."""
        return self.albedo[:, None] * self.normals


@dataclass
class ImageStack:
    """P images of one object, one column per image."""

    pixels: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim == 1:
            px = px[:, None]
        if px.ndim != 2 or px.shape[0] != self.height * self.width:
            raise DimensionError(
                f"pixel matrix {px.shape} does not match {self.height}x{self.width}")
        if not np.all(np.isfinite(px)):
            raise NumericalError("image stack contains non-finite pixels")
        self.pixels = px

    @property
    def n_pixels(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_images(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def select(self, columns) -> "ImageStack":
        return ImageStack(self.pixels[:, list(columns)], self.height, self.width)

    def image(self, p: int) -> np.ndarray:
        return self.pixels[:, p].reshape(self.height, self.width)


@dataclass
class LightingPrior:
    """Gaussian prior on a light vector, parameterised by mean and *precision*."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.precision = np.asarray(self.precision, dtype=float).reshape(3, 3)
        if not np.allclose(self.precision, self.precision.T, rtol=1e-10, atol=1e-12):
            raise ValueError("light precision must be symmetric")
        self.precision = 0.5 * (self.precision + self.precision.T)
        if np.linalg.eigvalsh(self.precision)[0] <= 0:
            raise ValueError("light precision must be positive definite")

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw ``count`` lights, returned as a (3, count) matrix."""
        chol = np.linalg.cholesky(self.precision)
        z = rng.standard_normal((3, count))
        return self.mean[:, None] + np.linalg.solve(chol.T, z)


@dataclass
class NoiseModel:
    """Per-pixel observation variance."""

    var: np.ndarray

    def __post_init__(self):
        self.var = np.asarray(self.var, dtype=float).reshape(-1)
        if np.any(self.var <= 0) or not np.all(np.isfinite(self.var)):
            raise ValueError("observation variances must be finite and > 0")


def shading(normals, lights) -> np.ndarray:
    """s[i, p] = n_i . l_p (no clamping)."""
    normals = np.asarray(normals, dtype=float)
    lights = np.asarray(lights, dtype=float)
    if normals.ndim != 2 or normals.shape[1] != 3 or lights.shape[0] != 3:
        raise DimensionError(f"normals {normals.shape} / lights {lights.shape}")
    return normals @ lights


def render_mean(scene: SceneLatents, clamp_nonneg: bool = False) -> np.ndarray:
    """Noise-free images a_i * (n_i . l_p); ``clamp_nonneg`` is for display only."""
    img = scene.albedo[:, None] * shading(scene.normals, scene.lights)
    if clamp_nonneg:
        img = np.maximum(img, 0.0)
    return img


def render_stochastic(scene: SceneLatents, noise: NoiseModel, rng: np.random.Generator,
                      height: int, width: int) -> ImageStack:
    mean = render_mean(scene)
    if noise.var.shape[0] not in (1, mean.shape[0]):
        raise DimensionError("noise model does not match the number of pixels")
    sd = np.sqrt(np.broadcast_to(noise.var, (mean.shape[0],)))[:, None]
    return ImageStack(mean + sd * rng.standard_normal(mean.shape), height, width)


def random_lights(rng: np.random.Generator, count: int, max_angle: float = 90.0) -> np.ndarray:
    """Unit light directions with z > 0, at most ``max_angle`` degrees off the view axis."""
    cos_min = np.cos(np.radians(max_angle))
    out = np.empty((3, count))
    filled = 0
    while filled < count:
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        d[2] = abs(d[2])
        if d[2] > max(cos_min, 1e-9):
            out[:, filled] = d
            filled += 1
    return out


def _pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates in [-1, 1]; y grows upwards."""
    x = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    y = 1.0 - (np.arange(height) + 0.5) / height * 2.0
    return np.meshgrid(x, y)


def _albedo_pattern(pattern, height, width, rng) -> np.ndarray:
    if isinstance(pattern, np.ndarray):
        a = np.asarray(pattern, dtype=float).reshape(-1)
        if a.shape[0] != height * width:
            raise DimensionError("albedo pattern does not match geometry")
        return a
    xx, yy = _pixel_grid(height, width)
    if pattern == "constant":
        a = np.full((height, width), 0.8)
    elif pattern == "gradient":
        a = 0.3 + 0.6 * (xx + 1.0) / 2.0
    elif pattern == "checker":
        cell = max(1, min(height, width) // 4)
        ii, jj = np.indices((height, width))
        a = np.where(((ii // cell) + (jj // cell)) % 2 == 0, 0.9, 0.4)
    elif pattern == "random":
        a = 0.3 + 0.6 * rng.random((height, width))
    else:
        raise ValueError(f"unknown albedo pattern {pattern!r}")
    return a.reshape(-1)


def sphere_normals(height: int, width: int, radius: float = 1.0):
    """Normals of a sphere filling a disk of ``radius`` (fraction of half-size).

    Returns (normals, inside-mask); background pixels get (0, 0, 1).
    """
    xx, yy = _pixel_grid(height, width)
    x, y = xx / radius, yy / radius
    r2 = x ** 2 + y ** 2
    inside = r2 < 1.0
    n = np.zeros((height, width, 3))
    n[..., 2] = 1.0
    n[inside, 0] = x[inside]
    n[inside, 1] = y[inside]
    n[inside, 2] = np.sqrt(1.0 - r2[inside])
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n.reshape(-1, 3), inside.reshape(-1)


def make_synthetic_scene(kind: str, height: int, width: int,
                         albedo_pattern: Union[str, np.ndarray] = "constant",
                         num_lights: int = 5, seed: int = 0,
                         noise_std: float = 0.0, max_light_angle: float = 90.0,
                         radius: float = 1.0, smoothness: float = 3.0,
                         ) -> tuple[SceneLatents, ImageStack]:
    """Generate a Lambertian test scene.

    ``kind`` is ``"sphere"``, ``"random_smooth"`` (normals of a smoothed random
    height field) or ``"flat"``.  Sphere background has albedo 0.
    """
    if num_lights < 1:
        raise ValueError("need at least one light")
    if height < 1 or width < 1:
        raise ValueError(f"invalid geometry {height}x{width}")
    rng = np.random.default_rng(seed)
    albedo = _albedo_pattern(albedo_pattern, height, width, rng)
    if kind == "sphere":
        normals, inside = sphere_normals(height, width, radius)
        albedo = np.where(inside, albedo, 0.0)
    elif kind == "flat":
        normals = np.tile([0.0, 0.0, 1.0], (height * width, 1))
    elif kind == "random_smooth":
        z = gaussian_filter(rng.standard_normal((height, width)), smoothness, mode="nearest")
        z *= 0.5 * max(height, width) / max(np.ptp(z), 1e-12)
        gy, gx = np.gradient(z)
        # image rows grow downwards, surface y grows upwards
        n = np.stack([-gx, gy, np.ones_like(z)], axis=-1)
        normals = (n / np.linalg.norm(n, axis=-1, keepdims=True)).reshape(-1, 3)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    lights = random_lights(rng, num_lights, max_light_angle)
    scene = SceneLatents(albedo, normals, lights)
    pixels = render_mean(scene)
    if noise_std > 0:
        pixels = pixels + noise_std * rng.standard_normal(pixels.shape)
    return scene, ImageStack(pixels, height, width)


def svd_photometric_stereo(images, rank: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``rank`` factorisation V ~ M L by truncated SVD.

    Returns ``M = U_r S_r`` (N_v x r) and ``L = V_r^T`` (r x P).  The factors are
    only defined up to an invertible r x r transform.
    """
    V = images.pixels if isinstance(images, ImageStack) else np.asarray(images, dtype=float)
    if V.ndim != 2:
        raise DimensionError("expected an N_v x P image matrix")
    if V.shape[1] < rank:
        raise DimensionError(
            f"rank-{rank} photometric stereo needs at least {rank} images, got {V.shape[1]}")
    u, s, vt = np.linalg.svd(V, full_matrices=False)
    return u[:, :rank] * s[:rank], vt[:rank]


def singular_ratio(V, k: int = 3) -> float:
    """sigma_{k+1} / sigma_1 of an image matrix (0 when it has <= k columns)."""
    s = np.linalg.svd(np.asarray(V, dtype=float), compute_uv=False)
    if s.size <= k or s[0] == 0:
        return 0.0
    return float(s[k] / s[0])
