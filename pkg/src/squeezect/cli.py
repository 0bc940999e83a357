"""``squeezect`` command line: synth, train, hpo, eval, predict, cam, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or load failure,
3 non-finite numerics, 4 empty data split.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .architecture import REFERENCE_INPUT, ArchVariant, build, count_params
from .data import (LABELS, SPLITS, AugmentationSpec, ImageError, ManifestError, Normalizer, load_gray,
                   load_manifest, load_split, make_synthetic_dataset)
from .ops import ShapeError
from .training import (EXPERIMENTS, ConfigError, Hyperparams, NumericError, TrainConfig,
                       checkpoint_meta, configure_experiment, load_normalizer, train)
from .weights import ArchiveError, load_network, load_weights

log = logging.getLogger("squeezect")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_EMPTY = 0, 1, 2, 3, 4
# transfer archives carry a classifier for another label set
PRETRAINED_HEAD = ("conv10.",)


class UsageError(Exception):
    pass


class EmptyDataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

REQUIRED = {
    "synth": ("out",),
    "train": ("manifest", "out"),
    "hpo": ("manifest", "out"),
    "eval": ("checkpoint", "manifest", "out"),
    "predict": ("checkpoint", "images"),
    "cam": ("checkpoint", "images", "out"),
    "bench": ("checkpoint",),
}


def _image_size(text):
    v = int(text)
    if v < 32 or v % 32:
        raise argparse.ArgumentTypeError(f"image size must be a positive multiple of 32, got {v}")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _hyper_args(p):
    hp = Hyperparams()
    p.add_argument("--lr", type=float, default=hp.learning_rate, help="initial learning rate")
    p.add_argument("--momentum", type=float, default=hp.momentum)
    p.add_argument("--l2", type=float, default=hp.l2, help="L2 regularization factor")


def _train_args(p):
    p.add_argument("--manifest", type=Path)
    p.add_argument("--experiment", choices=EXPERIMENTS, default="exp4")
    p.add_argument("--weights", type=Path, help="weight archive for transfer experiments")
    p.add_argument("--epochs", type=_positive, default=20)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--image-size", type=_image_size, default=REFERENCE_INPUT[1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)


def make_parser():
    common = Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file; flags take precedence")
    common.add_argument("--threads", type=_positive, help="BLAS thread count")
    common.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = Parser(prog="squeezect", description="SqueezeNet-style CT classifier toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic CT-like dataset")
    p.add_argument("--n", type=_positive, default=50, help="images per class")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=_positive, default=256, help="side length of the written PNGs")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train", parents=[common], help="train one experiment")
    _train_args(p)
    _hyper_args(p)

    p = sub.add_parser("hpo", parents=[common], help="Bayesian search over lr, momentum and L2")
    _train_args(p)
    p.add_argument("--budget", type=_positive, default=30)
    p.add_argument("--resume", action="store_true", help="continue an interrupted history")

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", choices=SPLITS, default="test1")
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("predict", parents=[common], help="classify images")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("images", nargs="*", type=Path)

    p = sub.add_parser("cam", parents=[common], help="write class activation overlays")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--class", dest="class_name", choices=LABELS + ("0", "1"),
                   help="class to explain (default: the predicted class)")
    p.add_argument("--out", type=Path)
    p.add_argument("images", nargs="*", type=Path)

    p = sub.add_parser("bench", parents=[common], help="single-image inference timing")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--repetitions", type=_positive, default=5)
    p.add_argument("--sensitivity", type=float, help="sensitivity in percent for the efficiency ratio")
    return parser, sub


def read_config(path):
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _config_defaults(subparser, values, path):
    """Convert file values with the subcommand's own option types."""
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    out = {}
    for key, raw in values.items():
        a = actions.get(key)
        if a is None:
            raise UsageError(f"{path}: unknown key {key!r} for this command")
        if isinstance(a, argparse._StoreTrueAction):
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif a.nargs == "*":
            out[key] = [a.type(s) if a.type else s for s in shlex.split(raw)]
        else:
            try:
                out[key] = a.type(raw) if a.type else raw
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"{path}: {key}: {e}") from None
        if a.choices is not None:
            for v in (out[key] if isinstance(out[key], list) else [out[key]]):
                if v not in a.choices:
                    raise UsageError(f"{path}: {key}: {v!r} not in {list(a.choices)}")
    return out


def parse_args(argv):
    parser, sub = make_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        subparser = sub.choices[args.command]
        subparser.set_defaults(**_config_defaults(subparser, read_config(args.config), args.config))
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) in (None, [])]
    if missing:
        raise UsageError(f"squeezect {args.command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") if k != "images" else "IMAGE" for k in missing))
    return args


def echo(args):
    """The fully resolved command, re-runnable without the config file."""
    parts = ["squeezect", args.command]
    for k, v in sorted(vars(args).items()):
        if k in ("command", "config", "quiet", "images") or v is None or v is False:
            continue
        flag = "--" + ("class" if k == "class_name" else k.replace("_", "-"))
        parts += [flag] if v is True else [flag, str(v)]
    parts += [str(p) for p in getattr(args, "images", None) or []]
    return " ".join(shlex.quote(p) for p in parts)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _out_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")
    return path


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_checkpoint(path):
    _require_file(path, "checkpoint")
    net, _ = load_network(path)
    meta = checkpoint_meta(path)
    if "norm_mean" not in meta:
        raise ArchiveError(f"{path}: no normalization statistics (missing .meta sidecar?)")
    return net, meta, load_normalizer(meta)


def _split(entries, split, size):
    data = load_split(entries, split, size)
    if len(data) == 0:
        raise EmptyDataError(f"split {split!r} has no images")
    return data


def _training_inputs(args):
    variant, transfer = configure_experiment(args.experiment, args.weights)
    _require_file(args.manifest, "manifest")
    if transfer:
        _require_file(args.weights, "weight archive")
    entries = load_manifest(args.manifest)
    size = args.image_size
    train_set = _split(entries, "train", size)
    val_set = _split(entries, "validation", size)
    variant = ArchVariant(variant.name, variant.fire_variant, (3, size, size))
    return variant, transfer, train_set, val_set


def _fresh_net(args, variant, transfer):
    net = build(variant, seed=args.seed)
    if transfer:
        load_weights(net, args.weights, seed=args.seed, exclude=PRETRAINED_HEAD)
    return net


def _class_index(name):
    return int(name) if name.isdigit() else LABELS.index(name)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args):
    out = _out_dir(args.out)
    manifest = make_synthetic_dataset(out, args.n, args.seed, args.size)
    print(manifest)


def cmd_train(args):
    from .plotting import training_curves

    variant, transfer, train_set, val_set = _training_inputs(args)
    out = _out_dir(args.out)
    cfg = TrainConfig(Hyperparams(args.lr, args.momentum, args.l2), epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed, experiment=args.experiment,
                      augmentation=AugmentationSpec(seed=args.seed))
    net = _fresh_net(args, variant, transfer)
    log_path = out / "epochs.log"
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(epoch, rep):
            fh.write(f"{epoch},{rep.learning_rate[-1]!r},{rep.train_loss[-1]!r},"
                     f"{rep.train_accuracy[-1]!r},{rep.val_accuracy[-1]!r},{rep.seconds[-1]:.3f}\n")
            fh.flush()

        report = train(net, train_set, val_set, cfg, out_dir=out, on_epoch=on_epoch)
    training_curves(report, out / "training_curves.png")
    print(f"checkpoint={report.checkpoint}")
    print(f"best_epoch={report.best_epoch}")
    print(f"val_accuracy={report.best_val_accuracy:.4f}")
    print(f"epoch_log={log_path}")


def cmd_hpo(args):
    from .hpo import SearchSpace, run_hpo
    from .plotting import hpo_progress

    variant, transfer, train_set, val_set = _training_inputs(args)
    out = _out_dir(args.out)
    history_path = out / "history.csv"
    normalizer = Normalizer.fit(train_set.images)

    def objective(hp):
        cfg = TrainConfig(hp, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                          experiment=args.experiment, augmentation=AugmentationSpec(seed=args.seed))
        net = _fresh_net(args, variant, transfer)
        rep = train(net, train_set, val_set, cfg, normalizer=normalizer, restore_best=False)
        return rep.val_accuracy[-1]

    best, history = run_hpo(objective, SearchSpace(), budget=args.budget, seed=args.seed,
                            history_path=history_path, resume=args.resume)
    hpo_progress(history, out / "hpo_progress.png")
    failed = sum(r.status != "ok" for r in history)
    print(f"trials={len(history)}")
    print(f"failed={failed}")
    if best is None:
        raise NumericError("no trial finished with a finite objective")
    print(f"best_trial={best.trial}")
    print(f"learning_rate={best.point.learning_rate!r}")
    print(f"momentum={best.point.momentum!r}")
    print(f"l2={best.point.l2!r}")
    print(f"val_accuracy={best.objective:.4f}")
    print(f"history={history_path}")


def cmd_eval(args):
    from .evaluation import evaluate, write_predictions
    from .plotting import confusion_figure

    _require_file(args.manifest, "manifest")
    net, _, normalizer = _load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    entries = load_manifest(args.manifest)
    data = _split(entries, args.split, net.input_shape[1])
    report, records = evaluate(net, data, normalizer, args.batch_size)
    csv_path = out / f"predictions_{args.split}.csv"
    write_predictions(records, csv_path)
    confusion_figure(report, out / f"confusion_{args.split}.png")
    for line in report.lines():
        print(line)
    print(f"predictions={csv_path}")


def _load_images(paths, size):
    for p in paths:
        _require_file(p, "image")
    return [(p, load_gray(p, size)) for p in paths]


def cmd_predict(args):
    from .ops import softmax

    net, _, normalizer = _load_checkpoint(args.checkpoint)
    images = _load_images(args.images, net.input_shape[1])
    for path, gray in images:
        probs = softmax(net.logits(normalizer.apply(gray)[None]).astype(np.float64))[0]
        print(f"{path},{LABELS[int(probs.argmax())]},{probs[LABELS.index('covid')]:.6f}")


def cmd_cam(args):
    from .evaluation import cam
    from .plotting import save_cam_overlay

    net, _, normalizer = _load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    images = _load_images(args.images, net.input_shape[1])
    for path, gray in images:
        x = normalizer.apply(gray)[None]
        k = _class_index(args.class_name) if args.class_name else int(net.logits(x).argmax())
        heat = cam(net, x, k)
        target = out / f"{path.stem}_cam_{LABELS[k]}.png"
        save_cam_overlay(heat.upsampled, gray, target)
        print(f"{path},{LABELS[k]},{target}")


def cmd_bench(args):
    from .evaluation import bench_inference, efficiency

    net, meta, normalizer = _load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(0)
    image = normalizer.apply(rng.random(net.input_shape[1:], dtype=np.float32))[None]
    res = bench_inference(net, image, args.repetitions)
    params_m = count_params(net) / 1e6
    sens = args.sensitivity
    if sens is None and meta.get("val_sensitivity", "NA") != "NA":
        sens = 100.0 * float(meta["val_sensitivity"])
    print(f"repetitions={args.repetitions}")
    print(f"threads={res.threads}")
    print(f"mean_seconds={res.mean:.4f}")
    print(f"min_seconds={res.min:.4f}")
    print(f"max_seconds={res.max:.4f}")
    print(f"params={res.params}")
    print(f"params_millions={params_m:.4f}")
    print(f"sensitivity_percent={'NA' if sens is None else f'{sens:.2f}'}")
    print(f"efficiency={'NA' if sens is None else f'{efficiency(sens, params_m):.2f}'}")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "hpo": cmd_hpo, "eval": cmd_eval,
    "predict": cmd_predict, "cam": cmd_cam, "bench": cmd_bench,
}


def _thread_limit(args):
    threads = 1 if args.deterministic else args.threads
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    print(f"# {echo(args)}", file=sys.stderr)
    try:
        with _thread_limit(args):
            COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyDataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except (OSError, ManifestError, ImageError, ArchiveError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
