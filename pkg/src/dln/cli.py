"""Command-line front end: ``dln synth|train|infer|relight|recognize``.

Option values resolve as: command-line flag, then ``--config`` file
(``key=value`` lines, keys as flag names without dashes), then defaults.
The effective configuration is written to ``effective_config.txt`` in each
output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from dln import io as dio
from dln.errors import DataError, DimensionError, NumericalError
from dln.hmc import HmcConfig
from dln.lambertian import ImageStack, make_synthetic_scene
from dln.learning import Subject, TrainConfig, pretrain_albedo_prior, train
from dln.posterior import infer, reconstruction_error
from dln.tasks import METHODS, TestImage, one_shot_protocol, relight

log = logging.getLogger("dln")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if str(text).lower() in ("none", "") else float(text)


def _size(text) -> tuple[int, int]:
    t = str(text).lower()
    h, _, w = t.partition("x")
    h, w = int(h), int(w or h)
    if h < 1 or w < 1:
        raise ValueError(f"invalid size {text!r}")
    return h, w


# (dest, type, default, help); every command also gets seed/threads/config/verbose
HMC_OPTS = [
    ("step_size", float, 0.01, "HMC leapfrog step size"),
    ("leapfrog_steps", int, 20, "leapfrog steps per trajectory"),
    ("hmc_epochs", int, 10, "HMC trajectories per Gibbs sweep"),
    ("mass", float, 2.0, "HMC momentum variance"),
]

COMMAND_OPTS = {
    "synth": [
        ("outdir", str, None, "output dataset directory (required)"),
        ("kind", str, "sphere", "sphere | flat | random_smooth"),
        ("size", _size, (24, 24), "image size N or HxW"),
        ("subjects", int, 1, "number of subjects"),
        ("lights", int, 5, "images per subject"),
        ("noise", float, 0.0, "pixel noise standard deviation"),
        ("albedo", str, "random", "albedo pattern: constant | gradient | checker | random"),
        ("max_light_angle", float, 45.0, "largest light angle from the view axis, degrees"),
    ],
    "train": [
        ("manifest", str, None, "training dataset directory (required)"),
        ("out", str, None, "output model container path (required)"),
        ("resolution", _size, None, "resize images to HxW (default: manifest/native)"),
        ("em_iters", int, 30, "EM iterations"),
        ("e_step_sweeps", int, 50, "Gibbs sweeps per E-step"),
        ("cd_steps", int, 1, "Gibbs steps for contrastive divergence"),
        ("cd_epochs", int, 1, "CD passes over the inferred latents per M-step"),
        ("albedo_rate", float, 0.01, "albedo prior learning rate"),
        ("normal_rate", float, 0.01, "normal prior learning rate"),
        ("batch_size", int, 64, "CD minibatch size"),
        ("hidden_albedo", int, 32, "albedo prior hidden units"),
        ("hidden_normal", int, 32, "normal prior hidden units"),
        ("eta", float, 100.0, "unit-norm penalty weight"),
        ("translate", int, 2, "max normal-map translation for augmentation (pixels)"),
        ("augment_copies", int, 4, "translated copies per normal map"),
        ("learn_variance", _bool, False, "learn GRBM visible variances"),
        ("init_noise_var", float, 1.0, "initial pixel noise variance"),
        ("init", str, "bias", "E-step initialisation: bias | svd"),
        ("warm_start", _bool, True, "continue E-step chains across EM iterations"),
        ("tol", _opt_float, 1e-3, "relative improvement for early stopping (none disables)"),
        ("patience", int, 3, "stalled iterations before stopping"),
        ("unbiased_light_cov", _bool, False, "use the n-1 light covariance"),
        ("pretrain_corpus", str, None, "image directory for albedo prior pretraining"),
        ("pretrain_epochs", int, 10, "pretraining CD epochs"),
    ] + HMC_OPTS,
    "infer": [
        ("model", str, None, "model container (required)"),
        ("outdir", str, None, "output directory (required)"),
        ("iters", int, 50, "Gibbs sweeps"),
        ("init", str, "bias", "initialisation: bias | svd"),
        ("average_last", int, 0, "average latents over the last K sweeps"),
        ("snapshot_every", int, 0, "write albedo/normal images every K sweeps (0: off)"),
        ("resize", _bool, False, "area-resize inputs to the model resolution"),
    ] + HMC_OPTS,
    "relight": [
        ("model", str, None, "model container (required)"),
        ("latents", str, None, "latents container from infer (required)"),
        ("outdir", str, None, "output directory (required)"),
        ("count", int, 5, "number of relit images"),
        ("clamp", _bool, False, "clamp negative shading to zero"),
    ],
    "recognize": [
        ("gallery", str, None, "gallery dataset directory (required)"),
        ("test", str, None, "test dataset directory (required)"),
        ("out", str, None, "output CSV report path (required)"),
        ("model", str, None, "model container (required for the dln method)"),
        ("methods", str, "all", "comma list of dln,nn,correlation,svd or 'all'"),
        ("n_train", int, 0, "gallery images per subject (0: all)"),
        ("iters", int, 50, "Gibbs sweeps per gallery subject"),
        ("init", str, "bias", "initialisation: bias | svd"),
        ("average_last", int, 0, "average latents over the last K sweeps"),
    ] + HMC_OPTS,
}
COMMON_OPTS = [
    ("seed", int, 0, "random seed"),
    ("threads", int, os.cpu_count() or 1, "BLAS threads"),
]
REQUIRED = {"synth": ("outdir",), "train": ("manifest", "out"), "infer": ("model", "outdir"),
            "relight": ("model", "latents", "outdir"), "recognize": ("gallery", "test", "out")}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dln", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMAND_OPTS.items():
        sp = sub.add_parser(name)
        if name == "infer":
            sp.add_argument("images", nargs="+", help="one or more images of the same object")
        for dest, typ, default, help_ in opts + COMMON_OPTS:
            flag = "--" + dest.replace("_", "-")
            if typ is _bool:
                sp.add_argument(flag, dest=dest, type=_bool, nargs="?", const=True,
                                default=None, help=f"{help_} (default {default})")
            else:
                sp.add_argument(flag, dest=dest, type=typ, default=None,
                                help=f"{help_} (default {default})")
        sp.add_argument("--config", default=None, help="key=value configuration file")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags > config file > defaults into a plain dict."""
    opts = COMMAND_OPTS[command] + COMMON_OPTS
    types = {d: t for d, t, _, _ in opts}
    file_cfg = read_config_file(args.config) if args.config else {}
    unknown = set(file_cfg) - set(types)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = {}
    for dest, typ, default, _ in opts:
        value = getattr(args, dest)
        if value is None and dest in file_cfg:
            try:
                value = typ(file_cfg[dest])
            except ValueError as exc:
                raise UsageError(f"config key {dest}: {exc}") from exc
        cfg[dest] = default if value is None else value
    for dest in REQUIRED[command]:
        if cfg[dest] is None:
            raise UsageError(f"dln {command}: --{dest.replace('_', '-')} is required")
    if command == "infer":
        cfg["images"] = list(args.images)
    return cfg


def _fmt(value) -> str:
    if isinstance(value, tuple) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return f"{value[0]}x{value[1]}"
    return str(value)


def echo_config(outdir, cfg: dict) -> None:
    Path(outdir).mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={_fmt(v)}" for k, v in sorted(cfg.items())]
    (Path(outdir) / "effective_config.txt").write_text("\n".join(lines) + "\n")


def _hmc(cfg) -> HmcConfig:
    try:
        return HmcConfig(cfg["step_size"], cfg["leapfrog_steps"], cfg["hmc_epochs"], cfg["mass"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _subject_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["outdir"])
    h, w = cfg["size"]
    if cfg["subjects"] < 1 or cfg["lights"] < 1:
        raise UsageError("--subjects and --lights must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    manifest = [f"resolution={h}x{w}", f"# kind={cfg['kind']} seed={cfg['seed']}"]
    for k in range(cfg["subjects"]):
        sid = f"subject{k:03d}"
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        try:
            truth, stack = make_synthetic_scene(
                cfg["kind"], h, w, albedo_pattern=cfg["albedo"], num_lights=cfg["lights"],
                seed=_subject_seed(cfg["seed"], k), noise_std=cfg["noise"],
                max_light_angle=cfg["max_light_angle"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        names = [f"img_{j:03d}.pgm" for j in range(stack.n_images)]
        for j, name in enumerate(names):
            dio.write_pgm(sdir / name, stack.image(j))
        dio.write_lights_csv(sdir / "lights.csv", names, truth.lights)
        dio.save_latents(sdir / "truth.dlnc", truth, h, w, extra={"images": stack.pixels},
                         meta={"subject": sid})
        manifest.append(f"subject={sid}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    echo_config(out, cfg)
    print(f"wrote {cfg['subjects']} subject(s) x {cfg['lights']} image(s) to {out}")
    return EXIT_OK


def _load_corpus(root, resolution) -> np.ndarray:
    root = Path(root)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in dio.IMAGE_SUFFIXES) \
        if root.is_dir() else []
    if files:
        imgs = [dio.read_image(p, resolution).reshape(-1) for p in files]
    else:
        man = dio.load_manifest(root, resolution)
        imgs = [dio.read_image(p, resolution).reshape(-1)
                for paths in man.subjects.values() for p in paths]
    if len({im.size for im in imgs}) != 1:
        raise DimensionError(f"pretraining images under {root} differ in size")
    return np.stack(imgs)


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            em_iters=cfg["em_iters"], e_step_sweeps=cfg["e_step_sweeps"], cd_steps=cfg["cd_steps"],
            cd_epochs=cfg["cd_epochs"], albedo_rate=cfg["albedo_rate"],
            normal_rate=cfg["normal_rate"], batch_size=cfg["batch_size"], hmc=_hmc(cfg),
            eta=cfg["eta"], translation_augment=cfg["translate"],
            augment_copies=cfg["augment_copies"], learn_variance=cfg["learn_variance"],
            n_hidden_albedo=cfg["hidden_albedo"], n_hidden_normal=cfg["hidden_normal"],
            init_noise_var=cfg["init_noise_var"], init=cfg["init"], warm_start=cfg["warm_start"],
            tol=cfg["tol"], patience=cfg["patience"],
            unbiased_light_cov=cfg["unbiased_light_cov"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(cfg: dict) -> int:
    tcfg = _train_config(cfg)
    man = dio.load_manifest(cfg["manifest"], cfg["resolution"])
    subjects = []
    for sid in man.subjects:
        stack = man.load_subject(sid)
        if subjects and stack.shape != subjects[0].images.shape:
            raise DimensionError(f"subject {sid!r} has resolution {stack.shape}, "
                                 f"expected {subjects[0].images.shape}")
        subjects.append(Subject(sid, stack))
    h, w = subjects[0].images.shape
    prior = None
    if cfg["pretrain_corpus"]:
        corpus = _load_corpus(cfg["pretrain_corpus"], (h, w))
        prior = pretrain_albedo_prior(corpus, tcfg.n_hidden_albedo, cfg["pretrain_epochs"],
                                      tcfg.albedo_rate, tcfg.batch_size, tcfg.cd_steps,
                                      seed=cfg["seed"])
    out = Path(cfg["out"])
    outdir = out.parent
    outdir.mkdir(parents=True, exist_ok=True)
    log_lines = []

    def on_iter(it, model, rec):
        log_lines.append(rec.line())
        print(rec.line())

    model, _ = train(subjects, tcfg, albedo_prior=prior, on_iteration=on_iter)
    dio.save_model(out, model, config=_provenance(tcfg), seed=cfg["seed"])
    (outdir / "train_log.txt").write_text("".join(line + "\n" for line in log_lines))
    echo_config(outdir, cfg)
    print(f"saved model to {out}")
    return EXIT_OK


def _provenance(tcfg: TrainConfig) -> dict:
    d = dataclasses.asdict(tcfg)
    d["hmc"] = dataclasses.asdict(tcfg.hmc)
    return d


def _write_maps(outdir: Path, prefix: str, latents, h: int, w: int) -> None:
    dio.write_pgm(outdir / f"{prefix}albedo.pgm", latents.albedo.reshape(h, w))
    dio.write_ppm(outdir / f"{prefix}normals.ppm", dio.normals_to_rgb(latents.normals, h, w))


def cmd_infer(cfg: dict) -> int:
    hmc = _hmc(cfg)
    model, _ = dio.load_model(cfg["model"])
    h, w = model.height, model.width
    imgs = []
    for p in cfg["images"]:
        im = dio.read_image(p, (h, w) if cfg["resize"] else None)
        if im.shape != (h, w):
            raise DimensionError(f"{p}: resolution {im.shape[0]}x{im.shape[1]} does not match "
                                 f"the model ({h}x{w}); pass --resize to resample")
        imgs.append(im.reshape(-1))
    stack = ImageStack(np.stack(imgs, axis=1), h, w)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    callback: Optional[Callable] = None
    if cfg["snapshot_every"] > 0:
        every = cfg["snapshot_every"]

        def callback(sweep, st):
            if (sweep + 1) % every == 0:
                _write_maps(outdir, f"sweep{sweep + 1:04d}_", st.latents, h, w)

    st = infer(model, stack, iters=cfg["iters"], cfg=hmc, seed=cfg["seed"],
               init=cfg["init"], average_last=cfg["average_last"], callback=callback)
    _write_maps(outdir, "", st.latents, h, w)
    dio.write_lights_csv(outdir / "lights.csv", [Path(p).name for p in cfg["images"]],
                         st.latents.lights)
    dio.save_latents(outdir / "latents.dlnc", st.latents, h, w,
                     meta={"seed": cfg["seed"], "iters": cfg["iters"]})
    acc, energy = st.diagnostics["acceptance"], st.diagnostics["energy"]
    lines = ["sweep,acceptance,energy"]
    lines += [f"{k + 1},{a!r},{e!r}" for k, (a, e) in enumerate(zip(acc, energy))]
    (outdir / "diagnostics.csv").write_text("\n".join(lines) + "\n")
    recon = reconstruction_error(stack, st.latents)
    (outdir / "summary.txt").write_text(
        f"images={stack.n_images}\niters={cfg['iters']}\nreconstruction_error={recon!r}\n"
        f"mean_acceptance={float(np.mean(acc)) if acc else float('nan')!r}\n")
    echo_config(outdir, cfg)
    print(f"inference done: reconstruction error {recon:.4g}; outputs in {outdir}")
    return EXIT_OK


def cmd_relight(cfg: dict) -> int:
    model, _ = dio.load_model(cfg["model"])
    latents, meta, _ = dio.load_latents(cfg["latents"])
    if latents.albedo.shape[0] != model.n_pixels:
        raise DimensionError("latents and model have different image sizes")
    if cfg["count"] < 0:
        raise UsageError("--count must be >= 0")
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    if cfg["count"] > 0:
        imgs, lights = relight(model, latents.albedo, latents.normals, cfg["count"],
                               cfg["seed"], clamp=cfg["clamp"])
        names = [f"relit_{k:03d}.pgm" for k in range(cfg["count"])]
        for k, name in enumerate(names):
            dio.write_pgm(outdir / name, imgs[:, k].reshape(model.height, model.width))
        dio.write_lights_csv(outdir / "lights.csv", names, lights)
        dio.save_container(outdir / "relit.dlnc", {"images": imgs, "lights": lights},
                           {"kind": "relit", "height": model.height, "width": model.width})
    echo_config(outdir, cfg)
    print(f"wrote {cfg['count']} relit image(s) to {outdir}")
    return EXIT_OK


def cmd_recognize(cfg: dict) -> int:
    hmc = _hmc(cfg)
    methods = METHODS if cfg["methods"] == "all" else tuple(
        m.strip() for m in cfg["methods"].split(",") if m.strip())
    bad = set(methods) - set(METHODS)
    if bad or not methods:
        raise UsageError(f"unknown methods: {', '.join(sorted(bad)) or '(none)'}")
    model = None
    if "dln" in methods:
        if cfg["model"] is None:
            raise UsageError("the dln method needs --model")
        model, _ = dio.load_model(cfg["model"])
    res = (model.height, model.width) if model is not None else None
    gman = dio.load_manifest(cfg["gallery"], res)
    res = res or gman.resolution
    tman = dio.load_manifest(cfg["test"], res)
    gallery = {}
    for sid, paths in gman.subjects.items():
        if cfg["n_train"] > 0:
            paths = paths[:cfg["n_train"]]
        gallery[sid] = gman.load_subject(sid, paths)
    shape = next(iter(gallery.values())).shape
    if model is not None and shape != (model.height, model.width):
        raise DimensionError(f"gallery resolution {shape} differs from the model")
    tests = []
    for sid, paths in tman.subjects.items():
        for p in paths:
            im = dio.read_image(p, tman.resolution)
            if im.shape != shape:
                raise DimensionError(f"{p}: resolution {im.shape} differs from gallery {shape}")
            tests.append(TestImage(sid, tman.subset_of(p), im.reshape(-1)))
    report = one_shot_protocol(model, gallery, tests, methods, iters=cfg["iters"],
                               cfg=hmc, seed=cfg["seed"], init=cfg["init"],
                               average_last=cfg["average_last"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    echo_config(out.parent, cfg)
    print(report.summary())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
            "relight": cmd_relight, "recognize": cmd_recognize}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args)
        with threadpool_limits(limits=max(1, cfg["threads"])):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
