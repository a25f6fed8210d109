"""Synthetic multi-subject datasets for training and recognition experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from dln.lambertian import (ImageStack, SceneLatents, random_lights, render_mean,
                            sphere_normals)
from dln.learning import Subject


@dataclass
class SyntheticSubject:
    subject: Subject
    truth: SceneLatents
    mode: int


def bimodal_templates(height: int, width: int) -> np.ndarray:
    """Two albedo templates: bright-left/dark-right and the mirror image."""
    cols = np.arange(width)
    left = np.where(cols < width // 2, 0.9, 0.45)
    t0 = np.tile(left, (height, 1)).reshape(-1)
    t1 = np.tile(left[::-1], (height, 1)).reshape(-1)
    return np.stack([t0, t1])


def bimodal_subjects(n_subjects: int, height: int, width: int, n_images: int, seed: int,
                     noise_std: float = 0.01, max_light_angle: float = 60.0,
                     jitter: float = 0.05, prefix: str = "s") -> list[SyntheticSubject]:
    """Subjects sharing a sphere shape whose albedo comes from one of two modes."""
    rng = np.random.default_rng(seed)
    templates = bimodal_templates(height, width)
    normals, inside = sphere_normals(height, width)
    out = []
    for k in range(n_subjects):
        mode = int(rng.integers(2))
        wiggle = gaussian_filter(rng.standard_normal((height, width)), 1.0).reshape(-1)
        albedo = np.where(inside, templates[mode] + jitter * wiggle, 0.0)
        lights = random_lights(rng, n_images, max_light_angle)
        truth = SceneLatents(albedo, normals.copy(), lights)
        pixels = render_mean(truth) + noise_std * rng.standard_normal((height * width, n_images))
        out.append(SyntheticSubject(Subject(f"{prefix}{k:03d}", ImageStack(pixels, height, width)),
                                    truth, mode))
    return out


def distinct_subjects(n_subjects: int, height: int, width: int, n_images: int, seed: int,
                      noise_std: float = 0.0, max_light_angle: float = 60.0,
                      prefix: str = "id") -> list[SyntheticSubject]:
    """Subjects with a shared sphere shape and individual smooth random albedo."""
    rng = np.random.default_rng(seed)
    normals, inside = sphere_normals(height, width)
    out = []
    for k in range(n_subjects):
        field = gaussian_filter(rng.standard_normal((height, width)), 1.5).reshape(-1)
        field = (field - field.mean()) / (field.std() + 1e-12)
        albedo = np.where(inside, np.clip(0.6 + 0.2 * field, 0.1, 1.0), 0.0)
        lights = random_lights(rng, n_images, max_light_angle)
        truth = SceneLatents(albedo, normals.copy(), lights)
        pixels = render_mean(truth)
        if noise_std > 0:
            pixels = pixels + noise_std * rng.standard_normal(pixels.shape)
        out.append(SyntheticSubject(Subject(f"{prefix}{k:03d}", ImageStack(pixels, height, width)),
                                    truth, 0))
    return out
