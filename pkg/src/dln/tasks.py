"""Recognition, relighting and evaluation utilities built on inferred latents."""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from dln import streams
from dln.errors import DataError, DimensionError
from dln.hmc import HmcConfig
from dln.lambertian import ImageStack, SceneLatents, render_mean
from dln.posterior import DlnModel, infer

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
METHODS = ("dln", "nn", "correlation", "svd")


@dataclass
class AlignResult:
    transform: np.ndarray
    residual: float
    rank_deficient: bool = False


def align_linear(M_hat, M) -> AlignResult:
    """Least-squares 3x3 map R minimising ||M_hat R - M||_F.

    ``residual`` is the relative error ||M_hat R - M||_F / ||M||_F.  Rank-deficient
    ``M_hat`` falls back to the minimum-norm (pseudo-inverse) solution and is flagged.
    """
    M_hat = np.asarray(M_hat, dtype=float)
    M = np.asarray(M, dtype=float)
    if M_hat.shape[0] != M.shape[0]:
        raise DimensionError(f"cannot align {M_hat.shape} with {M.shape}")
    R, _, rank, _ = np.linalg.lstsq(M_hat, M, rcond=None)
    deficient = rank < min(M_hat.shape)
    if deficient:
        log.warning("align_linear: M_hat has rank %d; using pseudo-inverse solution", rank)
    denom = np.linalg.norm(M)
    residual = np.linalg.norm(M_hat @ R - M) / denom if denom > 0 else float(np.linalg.norm(M_hat @ R))
    return AlignResult(R, float(residual), bool(deficient))


def scaled_normals(albedo, normals) -> np.ndarray:
    """M with rows m_i = a_i n_i."""
    return np.asarray(albedo, dtype=float)[:, None] * np.asarray(normals, dtype=float)


def build_subspace(albedo, normals=None) -> np.ndarray:
    """Orthonormal basis of the column span of M (rows a_i n_i).

    Pass ``(albedo, normals)`` or a ready-made M as the single argument.
    Columns for singular values below ``RANK_TOL * s_max`` are dropped.
    """
    M = np.asarray(albedo, dtype=float) if normals is None else scaled_normals(albedo, normals)
    if M.ndim != 2:
        raise DimensionError("M must be a matrix")
    u, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0 or not np.isfinite(s[0]):
        raise ValueError("cannot build a subspace from an all-zero M")
    keep = s > RANK_TOL * s[0]
    if keep.sum() < M.shape[1]:
        log.info("subspace is rank %d (< %d)", keep.sum(), M.shape[1])
    return u[:, keep]


@dataclass
class SubspaceGallery:
    labels: list
    bases: list

    def __post_init__(self):
        if len(self.labels) != len(self.bases):
            raise DimensionError("one basis per label required")

    def add(self, label, basis: np.ndarray):
        self.labels.append(label)
        self.bases.append(basis)


def _argmin_label(labels, scores, what):
    scores = np.asarray(scores)
    k = int(np.argmin(scores))
    ties = np.flatnonzero(scores == scores[k])
    if ties.size > 1:
        log.info("%s: tie between %s; choosing %r", what, [labels[t] for t in ties], labels[k])
    return labels[k]


def subspace_distance(basis: np.ndarray, v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.linalg.norm(v - basis @ (basis.T @ v)))


def nearest_subspace_classify(gallery: SubspaceGallery, v) -> tuple:
    """Label of the subspace with smallest Euclidean residual, plus all residuals."""
    if not gallery.bases:
        raise DataError("empty gallery")
    v = np.asarray(v, dtype=float).reshape(-1)
    if gallery.bases[0].shape[0] != v.shape[0]:
        raise DimensionError("test image and gallery have different sizes")
    dist = np.array([subspace_distance(Q, v) for Q in gallery.bases])
    return _argmin_label(gallery.labels, dist, "nearest subspace"), dist


# --------------------------------------------------------------------------
# baselines; ``train`` maps label -> (N_v, k) matrix of that subject's images


def _train_items(train: Mapping) -> list[tuple]:
    if not train:
        raise DataError("empty training set")
    items = []
    for label, imgs in train.items():
        imgs = imgs.pixels if isinstance(imgs, ImageStack) else np.asarray(imgs, dtype=float)
        if imgs.ndim == 1:
            imgs = imgs[:, None]
        if imgs.shape[1] == 0:
            raise DataError(f"subject {label!r} has no training images")
        items.append((label, imgs))
    return items


def baseline_nn(train: Mapping, v) -> object:
    v = np.asarray(v, dtype=float).reshape(-1)
    labels, scores = [], []
    for label, imgs in _train_items(train):
        labels.append(label)
        scores.append(np.min(np.linalg.norm(imgs - v[:, None], axis=0)))
    return _argmin_label(labels, scores, "nearest neighbour")


def baseline_normalized_correlation(train: Mapping, v) -> object:
    v = np.asarray(v, dtype=float).reshape(-1)
    nv = np.linalg.norm(v)
    labels, scores = [], []
    for label, imgs in _train_items(train):
        norms = np.linalg.norm(imgs, axis=0)
        cos = (v @ imgs) / np.where(norms * nv > 0, norms * nv, 1.0)
        labels.append(label)
        scores.append(-np.max(cos))
    return _argmin_label(labels, scores, "normalized correlation")


def svd_gallery(train: Mapping, rank: int = 3) -> SubspaceGallery:
    """Per subject, the span of the top min(k, rank) left singular vectors."""
    gal = SubspaceGallery([], [])
    for label, imgs in _train_items(train):
        u, s, _ = np.linalg.svd(imgs, full_matrices=False)
        k = min(rank, int(np.sum(s > RANK_TOL * max(s[0], 1e-300))))
        gal.add(label, u[:, :max(k, 1)])
    return gal


def baseline_svd_subspace(train: Mapping, v, rank: int = 3) -> object:
    return nearest_subspace_classify(svd_gallery(train, rank), v)[0]


# --------------------------------------------------------------------------
# relighting


def relight(model: DlnModel, albedo, normals, num_images: int, seed: int,
            clamp: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Render ``num_images`` views under lights drawn from the model's light prior.

    Returns ``(images (N_v, K), lights (3, K))``.
    """
    rng = np.random.default_rng(seed)
    lights = model.lighting.sample(rng, num_images)
    scene = SceneLatents(albedo, normals, lights)
    return render_mean(scene, clamp_nonneg=clamp), lights


# --------------------------------------------------------------------------
# one-shot protocol


@dataclass
class TestImage:
    __test__ = False   # not a pytest class

    label: object
    subset: str
    pixels: np.ndarray


@dataclass
class RecognitionReport:
    """Per-(subset, method) error rates plus confusion counts per method."""

    n_train: int
    labels: list
    rows: list = field(default_factory=list)
    confusion: dict = field(default_factory=dict)

    def error(self, method: str, subset: Optional[str] = None) -> float:
        for row in self.rows:
            if row["method"] == method and row["subset"] == (subset or "all"):
                return row["error"]
        raise KeyError((method, subset))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subset", "method", "n_train", "n_test", "error"])
        for row in self.rows:
            w.writerow([row["subset"], row["method"], self.n_train, row["n_test"],
                        f"{row['error']:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        methods = list(dict.fromkeys(r["method"] for r in self.rows))
        subsets = list(dict.fromkeys(r["subset"] for r in self.rows))
        lines = [f"recognition with {self.n_train} training image(s) per subject, "
                 f"{len(self.labels)} subjects",
                 "subset".ljust(10) + "".join(m.rjust(13) for m in methods)]
        for sub in subsets:
            cells = []
            for m in methods:
                cells.append(f"{100 * self.error(m, sub):12.1f}%")
            lines.append(str(sub).ljust(10) + "".join(cells))
        return "\n".join(lines)


def dln_gallery(model: DlnModel, gallery: Mapping, iters: int = 50,
                cfg: Optional[HmcConfig] = None, seed: int = 0, init: str = "bias",
                average_last: int = 0) -> SubspaceGallery:
    """Infer (a, N) jointly from each subject's image(s) and span M = diag(a) N."""
    gal = SubspaceGallery([], [])
    for label, stack in gallery.items():
        if not isinstance(stack, ImageStack):
            raise DataError("DLN gallery entries must be ImageStacks")
        key = streams.string_key(str(label))
        sub_seed = int(np.random.SeedSequence([seed, key]).generate_state(1)[0])
        st = infer(model, stack, iters=iters, cfg=cfg, seed=sub_seed, init=init,
                   average_last=average_last)
        gal.add(label, build_subspace(st.latents.albedo, st.latents.normals))
    return gal


def one_shot_protocol(model: Optional[DlnModel], gallery: Mapping, tests: Iterable[TestImage],
                      methods: Sequence[str] = METHODS, iters: int = 50,
                      cfg: Optional[HmcConfig] = None, seed: int = 0,
                      init: str = "bias", average_last: int = 0) -> RecognitionReport:
    """Classify every test image with each method; report errors per subset.

    ``gallery`` maps label -> ImageStack of that subject's training image(s).
    """
    tests = list(tests)
    if not gallery:
        raise DataError("empty gallery")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    labels = list(gallery)
    index = {lab: k for k, lab in enumerate(labels)}
    train = {lab: st.pixels for lab, st in gallery.items()}
    n_train = min(st.n_images for st in gallery.values())
    classifiers = {}
    if "dln" in methods:
        if model is None:
            raise ValueError("the dln method needs a model")
        gal = dln_gallery(model, gallery, iters, cfg, seed, init, average_last)
        classifiers["dln"] = lambda v: nearest_subspace_classify(gal, v)[0]
    if "nn" in methods:
        classifiers["nn"] = lambda v: baseline_nn(train, v)
    if "correlation" in methods:
        classifiers["correlation"] = lambda v: baseline_normalized_correlation(train, v)
    if "svd" in methods:
        sgal = svd_gallery(train)
        classifiers["svd"] = lambda v: nearest_subspace_classify(sgal, v)[0]
    report = RecognitionReport(n_train, labels)
    for method in methods:
        conf = np.zeros((len(labels), len(labels)), dtype=int)
        wrong = defaultdict(int)
        total = defaultdict(int)
        for t in tests:
            if t.label not in index:
                raise DataError(f"test label {t.label!r} not in gallery")
            pred = classifiers[method](t.pixels)
            conf[index[t.label], index[pred]] += 1
            for sub in (t.subset, "all"):
                total[sub] += 1
                wrong[sub] += int(pred != t.label)
        report.confusion[method] = conf
        subsets = sorted(k for k in total if k != "all") + ["all"]
        for sub in subsets:
            report.rows.append({"subset": sub, "method": method, "n_test": total[sub],
                                "error": wrong[sub] / total[sub]})
    return report
