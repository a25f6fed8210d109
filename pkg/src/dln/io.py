"""File formats: the tensor container, PGM/PPM images and dataset manifests.

Container layout::

    DLNC 1
    meta <key> <json value>
    tensor <name> f8 <shape> <offset> <nbytes>
    end
    <payload: raw little-endian float64 blocks>

``shape`` is ``x``-separated (``-`` for a scalar); offsets are relative to the
first payload byte.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from dln.energy_models import DbnStack, GrbmParams, RbmParams
from dln.errors import DataError, DimensionError
from dln.lambertian import ImageStack, LightingPrior, NoiseModel, SceneLatents
from dln.posterior import DlnModel

log = logging.getLogger(__name__)

MAGIC = "DLNC"
FORMAT_VERSION = 1
IMAGE_SUFFIXES = (".pgm", ".pnm", ".ppm", ".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")


# --------------------------------------------------------------------------
# container


def save_container(path, tensors: dict, meta: Optional[dict] = None) -> None:
    lines = [f"{MAGIC} {FORMAT_VERSION}"]
    for key, value in (meta or {}).items():
        if not re.fullmatch(r"[\w.\-]+", key):
            raise ValueError(f"invalid metadata key {key!r}")
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if not re.fullmatch(r"[\w.\-]+", name):
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr, dtype="<f8")
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "-"
        blob = arr.tobytes(order="C")
        lines.append(f"tensor {name} f8 {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_container(path) -> tuple[dict, dict]:
    """Read a container; returns ``(tensors, meta)``."""
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if end < 0:
        raise DataError(f"{path}: missing container header terminator")
    header = data[:end].decode("utf-8").split("\n")
    payload = data[end + len(b"\nend\n"):]
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise DataError(f"{path}: not a model container")
    if int(first[1]) != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported container version {first[1]}")
    meta, tensors, total = {}, {}, 0
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = json.loads(value)
        elif kind == "tensor":
            name, dtype, shape, offset, nbytes = rest.split()
            if dtype != "f8":
                raise DataError(f"{path}: unsupported element type {dtype}")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split("x"))
            offset, nbytes = int(offset), int(nbytes)
            if nbytes != 8 * int(np.prod(dims, dtype=np.int64)) or offset + nbytes > len(payload):
                raise DataError(f"{path}: tensor {name} size disagrees with payload")
            tensors[name] = np.frombuffer(payload, "<f8", count=nbytes // 8,
                                          offset=offset).reshape(dims).astype(float)
            total += nbytes
        else:
            raise DataError(f"{path}: unknown header record {kind!r}")
    if total != len(payload):
        raise DataError(f"{path}: payload has {len(payload)} bytes, header declares {total}")
    return tensors, meta


def _stack_tensors(prefix: str, stack: DbnStack) -> dict:
    b = stack.bottom
    out = {f"{prefix}.bottom.weights": b.weights, f"{prefix}.bottom.visible_bias": b.visible_bias,
           f"{prefix}.bottom.hidden_bias": b.hidden_bias, f"{prefix}.bottom.visible_var": b.visible_var}
    for k, r in enumerate(stack.upper):
        out[f"{prefix}.upper{k}.weights"] = r.weights
        out[f"{prefix}.upper{k}.visible_bias"] = r.visible_bias
        out[f"{prefix}.upper{k}.hidden_bias"] = r.hidden_bias
    return out


def _stack_from(prefix: str, t: dict, n_upper: int) -> DbnStack:
    bottom = GrbmParams(t[f"{prefix}.bottom.weights"], t[f"{prefix}.bottom.visible_bias"],
                        t[f"{prefix}.bottom.hidden_bias"], t[f"{prefix}.bottom.visible_var"])
    upper = [RbmParams(t[f"{prefix}.upper{k}.weights"], t[f"{prefix}.upper{k}.visible_bias"],
                       t[f"{prefix}.upper{k}.hidden_bias"]) for k in range(n_upper)]
    return DbnStack(bottom, tuple(upper))


def save_model(path, model: DlnModel, config: Optional[dict] = None,
               seed: Optional[int] = None) -> None:
    tensors = {}
    tensors.update(_stack_tensors("albedo", model.albedo_prior))
    tensors.update(_stack_tensors("normal", model.normal_prior))
    tensors["lighting.mean"] = model.lighting.mean
    tensors["lighting.precision"] = model.lighting.precision
    tensors["noise.var"] = model.noise.var
    tensors["eta"] = np.float64(model.eta)
    meta = {"kind": "dln-model", "height": model.height, "width": model.width,
            "albedo_upper": len(model.albedo_prior.upper),
            "normal_upper": len(model.normal_prior.upper),
            "config": config or {}, "seed": seed}
    save_container(path, tensors, meta)


def load_model(path) -> tuple[DlnModel, dict]:
    t, meta = load_container(path)
    if meta.get("kind") != "dln-model":
        raise DataError(f"{path}: container does not hold a model")
    try:
        model = DlnModel(_stack_from("albedo", t, meta["albedo_upper"]),
                         _stack_from("normal", t, meta["normal_upper"]),
                         LightingPrior(t["lighting.mean"], t["lighting.precision"]),
                         NoiseModel(t["noise.var"]), int(meta["height"]), int(meta["width"]),
                         float(t["eta"]))
    except KeyError as exc:
        raise DataError(f"{path}: missing tensor {exc}") from exc
    return model, meta


def save_latents(path, latents: SceneLatents, height: int, width: int,
                 extra: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    tensors = {"albedo": latents.albedo, "normals": latents.normals, "lights": latents.lights}
    tensors.update(extra or {})
    save_container(path, tensors, {"kind": "latents", "height": height, "width": width,
                                   **(meta or {})})


def load_latents(path) -> tuple[SceneLatents, dict, dict]:
    """Returns ``(latents, meta, all_tensors)``."""
    t, meta = load_container(path)
    if meta.get("kind") != "latents":
        raise DataError(f"{path}: container does not hold latents")
    return SceneLatents(t["albedo"], t["normals"], t["lights"]), meta, t


# --------------------------------------------------------------------------
# images


def read_image(path, resolution: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Grayscale float image in [0, 1].

    Colour inputs are converted with Rec. 601 luma weights (with a warning);
    ``resolution=(h, w)`` area-averages to that size.
    """
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if im.mode in ("RGB", "RGBA", "P", "CMYK"):
        warnings.warn(f"{path}: colour image converted to grayscale", stacklevel=2)
        rgb = np.asarray(im.convert("RGB"), dtype=float) / 255.0
        arr = rgb @ np.array([0.299, 0.587, 0.114])
    elif im.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=float) / 65535.0
    elif im.mode in ("L", "1"):
        arr = np.asarray(im.convert("L"), dtype=float) / 255.0
    elif im.mode == "F":
        arr = np.asarray(im, dtype=float)
    else:
        raise DataError(f"{path}: unsupported image mode {im.mode}")
    if resolution is not None and arr.shape != tuple(resolution):
        h, w = resolution
        arr = np.asarray(Image.fromarray(arr.astype(np.float32), mode="F")
                         .resize((w, h), Image.Resampling.BOX), dtype=float)
    return arr


def to_uint8(arr) -> np.ndarray:
    return np.round(np.clip(np.asarray(arr, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image) -> None:
    """Binary (P5) 8-bit PGM of a [0, 1] image; values outside are clipped."""
    Image.fromarray(to_uint8(image), mode="L").save(path, format="PPM")


def write_ppm(path, rgb) -> None:
    """Binary (P6) 8-bit PPM of an (h, w, 3) [0, 1] image."""
    Image.fromarray(to_uint8(rgb), mode="RGB").save(path, format="PPM")


def normals_to_rgb(normals, height: int, width: int) -> np.ndarray:
    """Display mapping (n + 1) / 2 per channel."""
    return ((np.asarray(normals) + 1.0) / 2.0).reshape(height, width, 3)


# --------------------------------------------------------------------------
# datasets

_YALE = re.compile(r"A([+-]\d+)E([+-]\d+)")
YALE_SUBSET_LIMITS = (12.0, 25.0, 50.0, 77.0)


def yale_light(name: str) -> Optional[np.ndarray]:
    """Light direction encoded in a Yale-style filename (azimuth/elevation), if any."""
    m = _YALE.search(name)
    if not m:
        return None
    az, el = np.radians(float(m.group(1))), np.radians(float(m.group(2)))
    return np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])


def light_subset(direction) -> str:
    """Illumination subset 1-5 by angle between the light and the viewing axis."""
    d = np.asarray(direction, dtype=float)
    angle = np.degrees(np.arccos(np.clip(d[2] / np.linalg.norm(d), -1.0, 1.0)))
    for k, limit in enumerate(YALE_SUBSET_LIMITS, start=1):
        if angle <= limit + 1e-9:
            return str(k)
    return "5"


@dataclass
class DatasetManifest:
    root: Path
    subjects: dict                       # subject id -> list of image paths
    resolution: Optional[tuple[int, int]] = None
    lights: dict = field(default_factory=dict)   # image path -> light vector

    def subset_of(self, path: Path) -> str:
        d = self.lights.get(Path(path))
        if d is None:
            d = yale_light(Path(path).name)
        return "all" if d is None else light_subset(d)

    def load_subject(self, subject: str, paths=None) -> ImageStack:
        paths = self.subjects[subject] if paths is None else paths
        if not paths:
            raise DataError(f"subject {subject!r} has no images")
        imgs = [read_image(p, self.resolution) for p in paths]
        shape = imgs[0].shape
        for p, im in zip(paths, imgs):
            if im.shape != shape:
                raise DimensionError(f"{p}: resolution {im.shape} differs from {shape}")
        return ImageStack(np.stack([im.reshape(-1) for im in imgs], axis=1), *shape)


def _parse_resolution(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m:
        raise DataError(f"bad resolution {text!r}; expected HxW")
    return int(m.group(1)), int(m.group(2))


def _read_lights_csv(path: Path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "filename":
                continue
            if len(row) != 4:
                raise DataError(f"{path}: expected filename,lx,ly,lz")
            out[path.parent / row[0]] = np.array([float(x) for x in row[1:]])
    return out


def load_manifest(root, resolution: Optional[tuple[int, int]] = None) -> DatasetManifest:
    """Scan ``root``: one subdirectory per subject, images inside.

    An optional ``manifest.txt`` (key=value lines) may set ``resolution=HxW``
    and list ``subject=<dir>`` entries; ``lights.csv`` in a subject directory
    gives per-image light directions.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    listed = []
    mf = root / "manifest.txt"
    if mf.exists():
        for line in mf.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "resolution" and resolution is None:
                resolution = _parse_resolution(value)
            elif key == "subject":
                listed.append(value)
    dirs = [root / s for s in listed] if listed else sorted(p for p in root.iterdir() if p.is_dir())
    subjects, lights = {}, {}
    for d in dirs:
        if not d.is_dir():
            raise DataError(f"subject directory {d} missing")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            continue
        if d.name in subjects:
            raise DataError(f"duplicate subject id {d.name}")
        subjects[d.name] = files
        if (d / "lights.csv").exists():
            lights.update(_read_lights_csv(d / "lights.csv"))
    if not subjects:
        raise DataError(f"no subject images found under {root}")
    return DatasetManifest(root, subjects, resolution, lights)


def write_lights_csv(path, names, lights) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "lx", "ly", "lz"])
        for name, col in zip(names, np.asarray(lights).T):
            w.writerow([name] + [repr(float(x)) for x in col])
