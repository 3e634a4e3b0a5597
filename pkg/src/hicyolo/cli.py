"""``hicyolo`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Options may also come from ``--config FILE`` (``key = value`` lines keyed
by option name, dashes or underscores); explicit flags win over the file.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .anchors import GROUP_NAMES, HEAD_STRIDES, AnchorSet, best_possible_recall, kmeans_anchors
from .boxes import CONF_DEMO, CONF_EVAL, NMS_IOU, Box, Detection, format_detection, parse_detections
from .errors import ConfigError, DataError, HicError, NumericError, ShapeError
from .gradsuite import CASES, SEEDS, TOL, run_suite
from .inference import detect, draw_boxes, prepare
from .loss import LossWeights
from .metrics import evaluate
from .model import ModelConfig, build, count_parameters, describe, load_checkpoint
from .train import Trainer, TrainOptions, fit_anchors

log = logging.getLogger("hicyolo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CBAM_REFERENCE_PARAMS = 8_391_641
CHECKPOINT_NAME = "checkpoint.hicd"
CONFIG_NAME = "model.cfg"
CURVE_NAME = "loss_curve.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers


def _model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--model-config", help="model config file (key = value)")
    g.add_argument("--width", type=float, dest="width_multiple", help="width multiple")
    g.add_argument("--depth", type=float, dest="depth_multiple", help="depth multiple")
    g.add_argument("--num-classes", type=int)
    g.add_argument("--input-size", type=int)
    g.add_argument("--heads", type=int, choices=(3, 4))
    g.add_argument("--no-cbam", action="store_true", default=None)
    g.add_argument("--no-involution", action="store_true", default=None)


def _model_config(args, base=None):
    cfg = base or (ModelConfig.load(args.model_config) if getattr(args, "model_config", None) else ModelConfig())
    changes = {}
    for key in ("width_multiple", "depth_multiple", "num_classes", "input_size", "heads"):
        v = getattr(args, key, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "no_cbam", None):
        changes["use_cbam"] = False
    if getattr(args, "no_involution", None):
        changes["use_involution"] = False
    return cfg.replace(**changes) if changes else cfg


def _checkpoint_config(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    if not args.model_config:
        sibling = path.parent / CONFIG_NAME
        if not sibling.is_file():
            raise DataError(f"no --model-config given and no {CONFIG_NAME} next to {path}")
        args.model_config = str(sibling)
    return load_checkpoint(path, _model_config(args), seed=0)


def _require_dir(path):
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"dataset directory not found: {p}")
    return p


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def _to_original(det, meta):
    """Map a detection from letterboxed model-input pixels back to the source image."""
    scale, px, py = meta
    b = det.box
    box = Box((b.cx - px) / scale, (b.cy - py) / scale, b.w / scale, b.h / scale)
    return Detection(box, det.score, det.class_id, det.image_id)


def _gt_pixels(root):
    """Ground truth per image id in original image pixels."""
    images = {p.stem: p for p in D._image_files(root)}
    gts = {}
    for image_id, labels in D.iter_label_sets(root):
        w, h = D.image_size(images[image_id])
        lab = labels.copy()
        lab[:, [1, 3]] *= w
        lab[:, [2, 4]] *= h
        gts[image_id] = lab
    return gts


# ----------------------------------------------------------------- commands


def cmd_stats(args):
    root = _require_dir(args.dataset)
    sets = [labels for _, labels in D.iter_label_sets(root)]
    if not sets:
        raise DataError(f"{root}: dataset has no images")
    stats = D.compute_stats(sets)
    names = D.VISDRONE_CLASSES if args.visdrone_names else None
    text = stats.to_text(names)
    print(text, end="")
    if args.out:
        _write(args.out, text)
    if args.histogram:
        _write(args.histogram, "\n".join(" ".join(str(int(v)) for v in row) for row in stats.locations) + "\n")
    return EXIT_OK


def cmd_anchors(args):
    root = _require_dir(args.dataset)
    if args.k % 3 or not 3 <= args.k <= 12:
        raise UsageError(f"--k must be 3, 6, 9 or 12, got {args.k}")
    images = {p.stem: p for p in D._image_files(root)}
    wh = []
    for image_id, labels in D.iter_label_sets(root):
        w, h = D.image_size(images[image_id])
        scale = args.input_size / max(w, h)
        wh.append(labels[:, 3:5] * [w * scale, h * scale])
    wh = np.concatenate(wh) if wh else np.zeros((0, 2))
    if len(wh) == 0:
        raise DataError(f"{root}: no labels to cluster")
    heads = args.k // 3
    if args.k == 12:
        print(f"default anchors  BPR {best_possible_recall(wh, AnchorSet.default(4).flat()):.4f}")
    try:
        fitted = AnchorSet.from_anchors(kmeans_anchors(wh, args.k, seed=args.seed), heads)
    except ValueError as exc:
        raise DataError(f"{root}: {exc}") from None
    bpr = best_possible_recall(wh, fitted.flat())
    lines = [f"# k-means anchors for {root} at input {args.input_size}, BPR {bpr:.4f}"]
    for name, stride, row in zip(GROUP_NAMES[-heads:], HEAD_STRIDES[-heads:], fitted.to_rows()):
        lines.append(f"anchors_{name} = {row}")
    text = "\n".join(lines) + "\n"
    print(f"k-means anchors  BPR {bpr:.4f}")
    print(text, end="")
    if args.out:
        _write(args.out, text)
    return EXIT_OK


def cmd_train(args):
    root = _require_dir(args.dataset)
    images = D.load_dataset(root)
    val = D.load_dataset(_require_dir(args.val)) if args.val else None
    cfg = _model_config(args)
    weights = LossWeights(*args.loss_weights)
    options = TrainOptions(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        patience=args.patience,
        seed=args.seed,
        weights=weights,
        center_crop=args.center_crop,
        hsv=args.hsv,
        hsv_gains=tuple(args.hsv_gains),
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        if not args.model_config:
            args.model_config = str(Path(args.resume).parent / CONFIG_NAME)
        cfg = _model_config(args)
    elif not args.no_autoanchor:
        cfg, report = fit_anchors(cfg, images, seed=args.seed)
        print(report)
    model = build(cfg, seed=args.seed)
    trainer = Trainer(model, images, options, val)
    if args.resume:
        if not Path(args.resume).is_file():
            raise DataError(f"checkpoint not found: {args.resume}")
        trainer.resume(args.resume)
    cfg.save(out / CONFIG_NAME)
    earlier = []
    if args.resume:
        # keep the curve recorded before the checkpoint was written
        prev = Path(args.resume).parent / CURVE_NAME
        if prev.is_file():
            earlier = [l for l in prev.read_text().splitlines()[1:] if l and int(l.split()[0]) < trainer.epoch]

    def report(tr, rec):
        print(f"epoch {rec.epoch:>4}  loss {rec.train_loss:.6f}  val {rec.val_loss:.6f}", flush=True)
        lines = tr.curve_text().splitlines()
        _write(out / CURVE_NAME, "\n".join(lines[:1] + earlier + lines[1:]) + "\n")
        tr.save(out / CHECKPOINT_NAME)

    trainer.fit(report)
    if trainer.should_stop:
        print(f"early stop after {trainer.epoch} epochs (patience {options.patience})")
    print(f"checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args):
    root = _require_dir(args.dataset)
    gts = _gt_pixels(root)
    if args.detections:
        dets = parse_detections(Path(args.detections).read_text(encoding="utf-8").splitlines())
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --detections")
        model = _checkpoint_config(args)
        size = model.config.input_size
        dets = []
        for img in D.load_dataset(root):
            boxed, meta = prepare(img, size)
            found = detect(model, boxed.pixels[None], [img.id], args.conf, args.iou)[0]
            dets += [_to_original(d, meta) for d in found]
    report = evaluate(dets, gts)
    text = report.to_text(D.VISDRONE_CLASSES if args.visdrone_names else None)
    print(text, end="")
    if args.out:
        _write(args.out, text)
    if args.csv:
        _write(args.csv, report.to_csv())
    return EXIT_OK


def cmd_infer(args):
    model = _checkpoint_config(args)
    path = Path(args.image)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    img = D.LabeledImage(D.read_image(path), [], path.stem)
    boxed, meta = prepare(img, model.config.input_size)
    found = detect(model, boxed.pixels[None], [img.id], args.conf, args.iou)[0]
    dets = [_to_original(d, meta) for d in found]
    for d in dets:
        print(format_detection(d))
    if args.overlay:
        D.write_ppm(args.overlay, draw_boxes(img.pixels, dets))
    return EXIT_OK


def cmd_gradcheck(args):
    names = None if args.scope == "all" else args.scope.split(",")
    results = run_suite(names, seeds=range(args.seeds), tol=args.tol)
    for r in results:
        print(r.to_line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed at tol {args.tol:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_params(args):
    if args.cbam_reference:
        cfg = ModelConfig(num_classes=10, heads=3, use_cbam=True, use_involution=False)
        reference = CBAM_REFERENCE_PARAMS
    else:
        cfg = _model_config(args)
        reference = args.reference
    report = count_parameters(build(cfg))
    text = report.to_text(reference)
    print(text, end="")
    if args.out:
        _write(args.out, text)
    return EXIT_OK


def cmd_describe(args):
    print(describe(build(_model_config(args))), end="")
    return EXIT_OK


def cmd_synth(args):
    images = D.make_synthetic(args.n, args.size, args.num_classes, args.seed)
    D.save_dataset(args.out_dir, images, fmt=args.format)
    print(f"wrote {len(images)} images to {args.out_dir}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _floats(n):
    def parse(text):
        try:
            vals = [float(v) for v in text.replace(",", " ").split()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} numbers, got {text!r}")
        return vals

    return parse


def build_parser():
    parser = _Parser(prog="hicyolo", description="Small-object detector toolkit.", allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--config", help="options file; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = command("stats", cmd_stats, "dataset label statistics")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.add_argument("--histogram", help="write the 32x32 centre histogram here")
    p.add_argument("--visdrone-names", action="store_true")

    p = command("anchors", cmd_anchors, "k-means anchors and best possible recall")
    p.add_argument("dataset")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--input-size", type=int, default=640)
    p.add_argument("--out")

    p = command("train", cmd_train, "train a model")
    p.add_argument("dataset")
    p.add_argument("--val", help="validation dataset for early stopping")
    p.add_argument("--out-dir", default="runs/train")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--loss-weights", type=_floats(3), default=[0.5, 0.05, 0.25], help="obj box cls")
    p.add_argument("--center-crop", action="store_true")
    p.add_argument("--hsv", action="store_true")
    p.add_argument("--hsv-gains", type=_floats(3), default=list(D.HSV_GAINS))
    p.add_argument("--no-autoanchor", action="store_true")
    p.add_argument("--resume", help="checkpoint to continue from")
    _model_args(p)

    p = command("eval", cmd_eval, "evaluate detections or a checkpoint")
    p.add_argument("dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="detection lines to score instead of running a model")
    p.add_argument("--conf", type=float, default=CONF_EVAL)
    p.add_argument("--iou", type=float, default=NMS_IOU)
    p.add_argument("--out")
    p.add_argument("--csv", help="write metric,class,threshold,value lines here")
    p.add_argument("--visdrone-names", action="store_true")
    _model_args(p)

    p = command("infer", cmd_infer, "detect objects in one image")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--conf", type=float, default=CONF_DEMO)
    p.add_argument("--iou", type=float, default=NMS_IOU)
    p.add_argument("--overlay", help="write a PPM with box outlines")
    _model_args(p)

    p = command("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    p.add_argument("--scope", default="all", help="'all' or comma list of: " + ",".join(CASES))
    p.add_argument("--seeds", type=int, default=len(SEEDS))
    p.add_argument("--tol", type=float, default=TOL)

    p = command("params", cmd_params, "parameter counts per layer")
    p.add_argument("--cbam-reference", action="store_true", help="YOLOv5s+CBAM (nc=10) against its published total")
    p.add_argument("--reference", type=int)
    p.add_argument("--out")
    _model_args(p)

    p = command("describe", cmd_describe, "layer schedule")
    _model_args(p)

    p = command("synth", cmd_synth, "write a synthetic shapes dataset")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--format", choices=(".ppm", ".hict"), default=".ppm")
    return parser, sub


def _apply_config_file(parser, sub, argv):
    """Use a ``--config`` file's values as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    ns, _ = parser.parse_known_args(argv)
    subparser = sub.choices[ns.command]
    actions = {a.dest: a for a in subparser._actions}
    for a in subparser._actions:
        for opt in a.option_strings:
            actions.setdefault(opt.lstrip("-").replace("-", "_"), a)
    path = Path(known.config)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path} line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or action.dest in ("config", "help", "func"):
            raise UsageError(f"{path} line {lineno}: unknown option {key!r} for '{ns.command}'")
        if action.nargs == 0:
            values[action.dest] = value.lower() in ("1", "true", "yes", "on")
        else:
            try:
                values[action.dest] = action.type(value) if action.type else value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path} line {lineno}: {exc}") from None
    subparser.set_defaults(**values)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sub = build_parser()
    try:
        _apply_config_file(parser, sub, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, HicError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
