"""Command-line front end: synth, prepare, train, detect, eval, grid.

Every option can also come from ``--config FILE`` (a JSON object keyed by
option name); explicit flags win, and the merged configuration is written
to ``<out>/config.json`` so a run can be repeated with ``--config`` alone.

Exit codes: 0 success, 1 internal error, 2 input error, 3 training halted
or FAR target not reached.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .boosting import TrainConfig, TrainingHalted, train_cascade
from .classifiers import load_cascade, save_cascade
from .dataset import (
    LABELS, NUMBER, AnnotationFormat, DatasetConfig, discover, format_annotation, load_entries,
    load_manifest, load_patches, prepare, save_manifest, save_patches,
)
from .detector import (
    ScanConfig, check_ensemble, format_records, group_detections, read_number, reading_records, scan,
)
from .evaluation import (
    DEFAULT_OVERLAPS, ExperimentGrid, emit_reports, fmt_rate, measure, run_grid,
)
from .features import Aperture, parse_kind
from .imaging import load_image

log = logging.getLogger("charcascade")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_HALT = 0, 1, 2, 3
WORKERS_ENV = "CHARCASCADE_WORKERS"


class InputError(Exception):
    """Bad or missing user input (exit code 2)."""


class Halted(Exception):
    """Training stopped before reaching its target (exit code 3)."""


# -- defaults per command (keys are option dest names) -------------------------------

# training options; "feature_stride" is TrainConfig.stride (the feature lattice step)
_TRAIN_DEFAULTS = {("feature_stride" if k == "stride" else k): v for k, v in TrainConfig().to_dict().items()
                   if k not in ("feature_kind", "workers")}
_TRAIN_DEFAULTS["features"] = "cs"

DEFAULTS = {
    "synth": {"out": None, "seed": 0, "frames": 40, "background": 10, "width": 320, "height": 240},
    "prepare": {"images": None, "annotations": None, "annotation_format": None, "out": None,
                "label": NUMBER, "overlap": 0.75, "aperture": None, "seed": 0, "negatives": 20000,
                "stride": 2, "scale_step": 1.1, "min_scale": 1.0, "max_scale": None,
                "negative_exclusion": "all", "workers": 1},
    "train": {"data": None, "mine": None, "out": None, "label": None, "workers": 1, **_TRAIN_DEFAULTS},
    "detect": {"model": None, "ensemble": None, "images": None, "out": None, "stride": 2,
               "scale_step": 1.25, "min_scale": 1.0, "max_scale": None, "nms": 0.3,
               "digit_stride": 1, "group": True, "overlay": None, "workers": 1},
    "eval": {"model": None, "data": None, "out": None, "side": "test"},
    "grid": {"images": None, "annotation_format": None, "out": None, "features": "cs,lbp,haar",
             "overlaps": ",".join(str(v) for v in DEFAULT_OVERLAPS), "targets": NUMBER,
             "aperture": None, "negatives": 20000, "stride": 2, "scale_step": 1.1, "seed": 0,
             "workers": 1, "plots": True,
             **{k: v for k, v in _TRAIN_DEFAULTS.items() if k not in ("features", "seed")}},
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _words(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--far-target", type=float, dest="far_target", help="overall FAR budget")
    g.add_argument("--min-tpr", type=float, dest="min_tpr", help="per-stage TPR target")
    g.add_argument("--max-fpr", type=float, dest="max_fpr", help="per-stage FPR target")
    g.add_argument("--max-rounds", type=int, dest="max_rounds", help="weak classifiers per stage limit")
    g.add_argument("--max-stages", type=int, dest="max_stages")
    g.add_argument("--max-negatives", type=int, dest="max_negatives", help="negatives per stage")
    g.add_argument("--min-size", type=int, dest="min_size", help="smallest feature rect side")
    g.add_argument("--size-step", type=int, dest="size_step")
    g.add_argument("--feature-stride", type=int, dest="feature_stride",
                   help="position step of the feature lattice")
    g.add_argument("--haar-bins", type=int, dest="haar_bins")
    g.add_argument("--mining-stride", type=int, dest="mining_stride")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    root = argparse.ArgumentParser(prog="charcascade", description=__doc__.splitlines()[0])
    root.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    root.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = root.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=S)
        p.add_argument("--config", help="JSON file with option values (flags override it)")
        p.add_argument("--out", help="output directory (file for detect)")
        return p

    p = cmd("synth", "write a synthetic annotated dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, help="frames with a number plate")
    p.add_argument("--background", type=int, help="frames without targets")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)

    p = cmd("prepare", "extract training / test samples from annotated images")
    p.add_argument("--images", help="directory of images with <stem>.txt annotation sidecars")
    p.add_argument("--annotations", help="directory holding the sidecars (each image needs one)")
    p.add_argument("--annotation-format", dest="annotation_format", help="JSON column mapping file")
    p.add_argument("--label", choices=LABELS)
    p.add_argument("--overlap", type=float, help="IoU threshold for positives")
    p.add_argument("--aperture", help="detector window WxH")
    p.add_argument("--seed", type=int)
    p.add_argument("--negatives", type=int, help="negative windows over both sides")
    p.add_argument("--stride", type=int, help="scan lattice step")
    p.add_argument("--scale-step", type=float, dest="scale_step")
    p.add_argument("--min-scale", type=float, dest="min_scale")
    p.add_argument("--max-scale", type=float, dest="max_scale")
    p.add_argument("--negative-exclusion", choices=("all", "label"), dest="negative_exclusion")
    p.add_argument("--workers", type=int)

    p = cmd("train", "train a cascade from prepared samples")
    p.add_argument("--data", help="output directory of 'prepare'")
    p.add_argument("--mine", help="directory of negative-only images for bootstrapping")
    p.add_argument("--label", choices=LABELS, help="detector label (default: from the manifest)")
    p.add_argument("--features", help="cs | lbp | haar | haar:<template>")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    _add_train_flags(p)

    p = cmd("detect", "scan images with a cascade or read numbers with an ensemble")
    p.add_argument("--model", help="cascade model file")
    p.add_argument("--ensemble", help="directory of 11 models (number + digits) for number reading")
    p.add_argument("--images", help="image file or directory")
    p.add_argument("--stride", type=int)
    p.add_argument("--scale-step", type=float, dest="scale_step")
    p.add_argument("--min-scale", type=float, dest="min_scale")
    p.add_argument("--max-scale", type=float, dest="max_scale")
    p.add_argument("--nms", type=float, help="IoU for grouping detections")
    p.add_argument("--digit-stride", type=int, dest="digit_stride")
    p.add_argument("--no-group", action="store_false", dest="group", help="keep raw detections")
    p.add_argument("--overlay", help="directory for copies of the frames with detections drawn")
    p.add_argument("--workers", type=int)

    p = cmd("eval", "measure FAR / FRR of a cascade on prepared samples")
    p.add_argument("--model")
    p.add_argument("--data", help="output directory of 'prepare'")
    p.add_argument("--side", choices=("train", "test"))

    p = cmd("grid", "feature kind x overlap threshold experiment with reports")
    p.add_argument("--images")
    p.add_argument("--annotation-format", dest="annotation_format")
    p.add_argument("--features", help="comma-separated feature kinds")
    p.add_argument("--overlaps", help="comma-separated IoU thresholds")
    p.add_argument("--overlap", dest="overlaps", help="alias of --overlaps")
    p.add_argument("--targets", help="comma-separated detector labels")
    p.add_argument("--aperture")
    p.add_argument("--negatives", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--scale-step", type=float, dest="scale_step")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-plots", action="store_false", dest="plots")
    _add_train_flags(p)
    return root


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < $CHARCASCADE_WORKERS < explicit flags."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    path = getattr(args, "config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise InputError(f"config file {path} must hold a JSON object")
        if loaded.get("command", cmd) != cmd:
            raise InputError(f"config file {path} is for '{loaded['command']}', not '{cmd}'")
        unknown = set(loaded) - set(cfg) - {"command", "version"}
        if unknown:
            raise InputError(f"unknown keys in {path}: {', '.join(sorted(unknown))}")
        cfg.update({k: v for k, v in loaded.items() if k in cfg})
    env = os.environ.get(WORKERS_ENV)
    if env and "workers" in cfg:
        try:
            cfg["workers"] = int(env)
        except ValueError:
            raise InputError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    cfg.update(given)
    if "workers" in cfg and int(cfg["workers"]) < 1:
        raise InputError("--workers must be >= 1")
    return cfg


def write_snapshot(cmd: str, cfg: dict, out_dir: Path) -> None:
    snap = {"command": cmd, "version": __version__, **cfg}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(snap, indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise InputError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _annotation_format(path) -> AnnotationFormat | None:
    if not path:
        return None
    try:
        return AnnotationFormat.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise InputError(f"annotation format file not found: {path}") from None


def _entries(images: str, annotations: str | None, fmt: AnnotationFormat | None):
    pairs = discover(images, fmt)
    if annotations:
        from .dataset import load_annotation

        adir = Path(annotations)
        pairs = [(load_annotation(adir / (p.stem + ".txt"), fmt), p) for _, p in pairs]
    if not pairs:
        raise InputError(f"no images found in {images}")
    return load_entries(pairs)


def _train_config(cfg: dict, kind: str, seed: int, workers: int) -> TrainConfig:
    d = {("stride" if k == "feature_stride" else k): cfg[k] for k in _TRAIN_DEFAULTS
         if k in cfg and k != "features"}
    d.update(feature_kind=kind, seed=seed, workers=workers)
    return TrainConfig.from_dict(d)


# -- commands --------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    from PIL import Image

    from .synthetic import clutter_frame, plate_frame

    _need(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    ss = np.random.SeedSequence(cfg["seed"]).spawn(2)
    base = int(ss[0].generate_state(1)[0]) % (2 ** 31)
    for i in range(cfg["frames"]):
        img, ann = plate_frame(base + i, cfg["width"], cfg["height"], image_id=f"frame{i:04d}")
        Image.fromarray(img).save(out / f"{ann.image_id}.png")
        (out / f"{ann.image_id}.txt").write_text(format_annotation(ann), encoding="utf-8")
    bg = int(ss[1].generate_state(1)[0]) % (2 ** 31)
    for i in range(cfg["background"]):
        img = clutter_frame(bg + i, cfg["width"], cfg["height"])
        Image.fromarray(img).save(out / f"background{i:04d}.png")
    write_snapshot("synth", cfg, out)
    print(f"wrote {cfg['frames']} annotated and {cfg['background']} background frames to {out}")
    return EXIT_OK


def cmd_prepare(cfg: dict) -> int:
    _need(cfg, "images", "out")
    fmt = _annotation_format(cfg["annotation_format"])
    entries = _entries(cfg["images"], cfg["annotations"], fmt)
    dcfg = DatasetConfig(overlap_threshold=cfg["overlap"], seed=cfg["seed"],
                         aperture=cfg["aperture"] or ("54x18" if cfg["label"] == NUMBER else "12x24"),
                         scan_stride=cfg["stride"], scale_step=cfg["scale_step"],
                         min_scale=cfg["min_scale"], max_scale=cfg["max_scale"],
                         negative_exclusion=cfg["negative_exclusion"])
    data = prepare(entries, dcfg, cfg["label"], cfg["negatives"], cfg["workers"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(data["manifest"], out / "manifest.json")
    save_patches({"train": data["train"], "test": data["test"]}, out / "patches.npz")
    write_snapshot("prepare", cfg, out)
    for side in ("train", "test"):
        s = data[side]
        print(f"{side}: {len(s.positives)} positives, {len(s.negatives)} negatives "
              f"from {len(data['manifest']['images'][side])} images")
    return EXIT_OK


def _load_data(path) -> tuple[dict, dict]:
    d = Path(path)
    return load_manifest(d / "manifest.json"), load_patches(d / "patches.npz")


def cmd_train(cfg: dict) -> int:
    _need(cfg, "data", "out")
    manifest, sets = _load_data(cfg["data"])
    train = sets["train"]
    label = cfg["label"] or manifest["label"]
    try:
        parse_kind(cfg["features"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    tcfg = _train_config(cfg, cfg["features"], cfg["seed"], cfg["workers"])
    mining = None
    if cfg["mine"]:
        mining = [load_image(p) for _, p in discover(cfg["mine"])]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot("train", cfg, out)
    try:
        cascade, trace = train_cascade(train.positives, train.negatives, tcfg, label, mining)
    except TrainingHalted as exc:
        raise Halted(str(exc)) from None
    save_cascade(cascade, out / "model.json")
    (out / "trace.json").write_text(json.dumps(trace.to_dict(), indent=1, sort_keys=True) + "\n",
                                    encoding="utf-8")
    print(f"{len(cascade.stages)} stages, {cascade.feature_count} weak classifiers; "
          f"pool FAR {trace.achieved_far:.3g} ({trace.stop_reason})")
    if trace.stop_reason != "far_target":
        raise Halted(f"stopped with '{trace.stop_reason}' at pool FAR {trace.achieved_far:.3g} "
                     f"(target {tcfg.far_target:g}); model written anyway")
    return EXIT_OK


def _image_paths(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        return [a for _, a in discover(p)]
    if p.is_file():
        return [p]
    raise InputError(f"image path not found: {spec}")


def _load_ensemble(path) -> dict:
    d = Path(path)
    if not d.is_dir():
        raise InputError(f"ensemble directory not found: {path}")
    models = {}
    for f in sorted(d.glob("*.json")):
        c = load_cascade(f)
        if c.label in models:
            raise InputError(f"two models for label {c.label!r} in {path}")
        models[c.label] = c
    try:
        check_ensemble(models)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return models


def write_overlay(frame: np.ndarray, dets, path: Path) -> None:
    """Save ``frame`` as RGB with plates outlined in green and digits in red."""
    from PIL import Image, ImageDraw

    im = Image.fromarray(frame).convert("RGB")
    draw = ImageDraw.Draw(im)
    for d in dets:
        r = d.rect
        color = (0, 200, 0) if d.label == NUMBER else (220, 0, 0)
        draw.rectangle([r.x, r.y, r.x1 - 1, r.y1 - 1], outline=color)
        draw.text((r.x + 1, r.y + 1), d.label if d.label != NUMBER else "", fill=color)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


def cmd_detect(cfg: dict) -> int:
    _need(cfg, "images")
    if bool(cfg["model"]) == bool(cfg["ensemble"]):
        raise InputError("give exactly one of --model or --ensemble")
    scfg = ScanConfig(cfg["stride"], cfg["scale_step"], cfg["min_scale"], cfg["max_scale"], cfg["nms"],
                      cfg["workers"])
    lines = []
    if cfg["model"]:
        if not Path(cfg["model"]).is_file():
            raise InputError(f"model file not found: {cfg['model']}")
        cascade = load_cascade(cfg["model"])
        for p in _image_paths(cfg["images"]):
            frame = load_image(p)
            ap = cascade.aperture
            if frame.shape[0] < ap.height or frame.shape[1] < ap.width:
                print(f"warning: {p.name} ({frame.shape[1]}x{frame.shape[0]}) is smaller than the "
                      f"{ap} aperture", file=sys.stderr)
            dets = scan(frame, cascade, scfg)
            if cfg["group"]:
                dets = group_detections(dets, scfg.nms_iou)
            lines.append(format_records(p.stem, dets))
            if cfg["overlay"]:
                write_overlay(frame, dets, Path(cfg["overlay"]) / f"{p.stem}.png")
    else:
        ensemble = _load_ensemble(cfg["ensemble"])
        dcfg = ScanConfig(cfg["digit_stride"], cfg["scale_step"], 1.0, None, cfg["nms"], cfg["workers"])
        for p in _image_paths(cfg["images"]):
            frame = load_image(p)
            readings = read_number(frame, ensemble, scfg, dcfg)
            for rd in readings:
                r = rd.plate.rect
                print(f"{p.stem}\t{r.x}\t{r.y}\t{r.w}\t{r.h}\t{rd.text}")
            dets = reading_records(p.stem, readings)
            lines.append(format_records(p.stem, dets))
            if cfg["overlay"]:
                write_overlay(frame, dets, Path(cfg["overlay"]) / f"{p.stem}.png")
    text = "".join(lines)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8", newline="\n")
        write_snapshot("detect", cfg, out.with_name(out.name + ".d"))
    elif cfg["model"]:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    _need(cfg, "model", "data")
    if not Path(cfg["model"]).is_file():
        raise InputError(f"model file not found: {cfg['model']}")
    cascade = load_cascade(cfg["model"])
    manifest, sets = _load_data(cfg["data"])
    s = sets[cfg["side"]]
    m = measure(cascade, s.positives, s.negatives)
    mt = m.metrics
    print(f"FAR {fmt_rate(mt.far)} ({mt.false_accepts}/{mt.n_neg})  "
          f"FRR {fmt_rate(mt.frr)} ({mt.false_rejects}/{mt.n_pos})  "
          f"{mt.feature_count} features in {mt.stage_count} stages")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(mt.to_dict(), indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")
        (out / "decisions.tsv").write_text(m.log_lines(), encoding="utf-8")
        write_snapshot("eval", cfg, out)
    return EXIT_OK


def cmd_grid(cfg: dict) -> int:
    _need(cfg, "images", "out")
    try:
        grid = ExperimentGrid(_words(cfg["features"]), _floats(cfg["overlaps"]), _words(cfg["targets"]))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    entries = _entries(cfg["images"], None, _annotation_format(cfg["annotation_format"]))
    dcfg = DatasetConfig(aperture=cfg["aperture"] or "54x18", scan_stride=cfg["stride"],
                         scale_step=cfg["scale_step"])
    tcfg = _train_config(cfg, "cs", cfg["seed"], 1)
    out = Path(cfg["out"])
    write_snapshot("grid", cfg, out)
    results = run_grid(grid, entries, dcfg, tcfg, out, cfg["negatives"], cfg["seed"], cfg["workers"])
    emit_reports(results, out / "reports", plots=cfg["plots"])
    failed = [r for r in results if r.status == "failed"]
    print(f"{len(results)} cells ({len(failed)} failed); reports in {out / 'reports'}")
    for r in failed:
        print(f"failed: {r.target} {r.kind} {r.overlap}: {r.error}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "detect": cmd_detect,
            "eval": cmd_eval, "grid": cmd_grid}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if not args.verbose else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if "aperture" in cfg and cfg["aperture"]:
            Aperture.parse(cfg["aperture"])
        return COMMANDS[args.command](cfg)
    except Halted as exc:
        print(f"training halted: {exc}", file=sys.stderr)
        return EXIT_HALT
    except (InputError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
