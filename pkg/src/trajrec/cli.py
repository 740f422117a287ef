"""Command-line entry point: generate -> prepare -> train -> recover ->
evaluate -> fuse.

Every subcommand accepts ``--config FILE``, a JSON object whose keys mirror
the long flag names (``"batch-size"`` or ``"batch_size"``); flags given on
the command line override it.  Exit status is 0 on success, 1 on a usage
error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("trajrec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --- input helpers ----------------------------------------------------------------------

def _sample_ids(count, ids_path):
    if ids_path is None:
        return [str(k) for k in range(count)]
    from .dataio import read_ink

    ids = [s.id for s in read_ink(ids_path)]
    if len(ids) != count:
        raise ValueError(f"{ids_path} holds {len(ids)} records but the dataset has {count}")
    return ids


def _is_dataset(path) -> bool:
    from .training import DATASET_MAGIC

    with open(path, "rb") as fh:
        return fh.read(4) == DATASET_MAGIC


def _labelled_images(path, side, ids_path=None):
    """``(ids, labels, images)`` from a prepared dataset or an ink file of
    pixel-space trajectories (such as recovery output)."""
    from .dataio import read_ink
    from .ink import Trajectory, rasterize
    from .training import read_dataset

    if _is_dataset(path):
        ds = read_dataset(path)
        return _sample_ids(len(ds), ids_path), list(ds.labels), ds.images
    samples = read_ink(path)
    images = np.stack([rasterize(Trajectory(s.strokes), side) for s in samples]) if samples else np.zeros((0, side, side), np.uint8)
    return [s.id for s in samples], [s.label for s in samples], images


def _model_overrides(args) -> dict:
    out = {}
    if args.side is not None:
        out["image_side"] = args.side
    if args.conv_depths is not None:
        out["conv_depths"] = tuple(args.conv_depths)
    if args.lstm_size is not None:
        out["lstm_size"] = args.lstm_size
    if args.mixtures is not None:
        out["mixtures"] = args.mixtures
    if args.attention_dim is not None:
        out["attention_dim"] = args.attention_dim
    if args.no_attention:
        out["use_attention"] = False
    if args.literal_attention:
        out["literal_attention"] = True
    return out


# --- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args):
    from .dataio import SynthesisConfig, generate_synthetic, write_ink

    cfg = SynthesisConfig(args.categories, args.samples, tuple(args.strokes), args.jitter, args.seed)
    samples = generate_synthetic(cfg)
    write_ink(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)


def cmd_prepare(args):
    from .training import prepare_dataset

    ds = prepare_dataset(args.input, args.side, args.dp_epsilon, args.out)
    log.info("wrote %d samples (side %d, longest %d) to %s", len(ds), ds.side, ds.longest, args.out)


def cmd_train(args):
    from .model import preset_config
    from .training import TrainConfig, read_dataset, save_checkpoint, train

    ds = read_dataset(args.data)
    heldout = read_dataset(args.heldout) if args.heldout else None
    overrides = _model_overrides(args)
    overrides.setdefault("image_side", ds.side)
    model_cfg = preset_config(args.preset, **overrides)
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, lr=args.lr, seed=args.seed,
                      model=model_cfg, patience=args.patience, clip_norm=args.clip_norm,
                      max_steps=args.max_steps)
    result = train(ds, cfg, heldout=heldout, log_path=args.log)
    save_checkpoint(result.model, args.out)
    log.info("saved checkpoint (epoch %d, step %d) to %s", result.best_epoch, result.model.step, args.out)


def cmd_recover(args):
    from .recovery import RecoveryConfig, decode, export_recovered
    from .training import load_checkpoint, read_dataset

    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    ids = _sample_ids(len(ds), args.ids)
    cfg = RecoveryConfig(args.t_max, args.mode, args.temperature, args.seed)
    trajs, flags = [], []
    for k, image in enumerate(ds.images):
        result = decode(image, model, cfg)
        trajs.append(result.trajectory)
        flags.append(result.truncated)
        log.info("recovered %s: %d strokes, %d points%s", ids[k], len(result.trajectory.strokes),
                 result.trajectory.n_points, " (truncated)" if result.truncated else "")
    export_recovered(trajs, ids, ds.labels, args.out, flags)


def cmd_eval(args):
    from .dataio import read_ink
    from .evaluation import evaluate_recovery
    from .ink import Trajectory
    from .training import read_dataset

    ds = read_dataset(args.gold)
    recovered = read_ink(args.recovered)
    if len(recovered) != len(ds):
        raise ValueError(f"{len(recovered)} recovered records for {len(ds)} gold samples")
    golds = [ds.trajectory(k) for k in range(len(ds))]
    metrics = evaluate_recovery(golds, [Trajectory(s.strokes) for s in recovered], ds.images)
    text = json.dumps(metrics, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_export_svg(args):
    from .dataio import read_ink
    from .evaluation import export_svg
    from .ink import Trajectory
    from .training import read_dataset

    ds = read_dataset(args.gold)
    recovered = read_ink(args.recovered) if args.recovered else None
    if recovered is not None and len(recovered) != len(ds):
        raise ValueError(f"{len(recovered)} recovered records for {len(ds)} gold samples")
    ids = [s.id for s in recovered] if recovered is not None else _sample_ids(len(ds), args.ids)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(len(ds)):
        rec = Trajectory(recovered[k].strokes) if recovered is not None else None
        export_svg(ds.trajectory(k), rec, out / f"{ids[k]}.svg", ds.side)
    log.info("wrote %d SVG files to %s", len(ds), out)


def cmd_export_attention(args):
    from .evaluation import export_attention
    from .recovery import RecoveryConfig, decode
    from .training import load_checkpoint, read_dataset

    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise ValueError(f"index {args.index} out of range for {len(ds)} samples")
    result = decode(ds.images[args.index], model, RecoveryConfig(args.t_max, args.mode, args.temperature, args.seed))
    partials = [result.partial(t, ds.side) for t in range(1, len(result.points) + 1)]
    written = export_attention(result.attention_maps, partials, args.out_dir, ds.side, ds.trajectory(args.index))
    log.info("wrote %d files to %s", len(written), args.out_dir)


def cmd_train_classifier(args):
    from .evaluation import save_classifier, train_offline_classifier

    _, labels, images = _labelled_images(args.data, args.side)
    heldout = None
    if args.heldout:
        _, h_labels, h_images = _labelled_images(args.heldout, images.shape[-1])
        heldout = (h_images, h_labels)
    clf = train_offline_classifier((images, labels), epochs=args.epochs, lr=args.lr, seed=args.seed,
                                   conv_depths=tuple(args.conv_depths), fc_size=args.fc_size,
                                   dropout=args.dropout, batch_size=args.batch_size, heldout=heldout,
                                   target_accuracy=args.target_accuracy, eval_every=args.eval_every,
                                   max_steps=args.max_steps)
    save_classifier(clf, args.out)
    log.info("saved classifier after %d steps to %s", clf.step, args.out)


def cmd_classify(args):
    from .evaluation import classify, load_classifier, write_scores

    clf = load_classifier(args.classifier)
    ids, _, images = _labelled_images(args.data, clf.config.image_side, args.ids)
    write_scores(classify(images, clf, ids), args.out)
    log.info("scored %d images to %s", len(ids), args.out)


def cmd_fuse(args):
    from .evaluation import fuse_scores, read_scores

    fused, preds = fuse_scores(read_scores(args.off), read_scores(args.on), args.gamma)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for sid, row in fused.items():
            fh.write(json.dumps({"id": sid, "scores": row, "prediction": preds[sid]}, ensure_ascii=False) + "\n")
    log.info("fused %d samples at gamma %g to %s", len(fused), args.gamma, args.out)


def cmd_sweep(args):
    from .evaluation import format_sweep_csv, gamma_grid, gamma_sweep, read_scores

    ids, labels, _ = _labelled_images(args.gold, 16, args.ids)
    rows = gamma_sweep(read_scores(args.off), read_scores(args.on), dict(zip(ids, labels)),
                       gamma_grid(args.start, args.stop, args.step))
    text = format_sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# --- parser -----------------------------------------------------------------------------

# flag dest -> whether the path is read (True) or written (False)
PATH_FLAGS = {
    "input": True, "data": True, "heldout": True, "checkpoint": True, "classifier": True,
    "gold": True, "recovered": True, "off": True, "on": True, "ids": True,
    "out": False, "log": False, "out_dir": False,
}


def _add_model_flags(p):
    p.add_argument("--preset", choices=["paper", "micro"], default="paper")
    p.add_argument("--side", type=int)
    p.add_argument("--conv-depths", type=int, nargs=4, metavar="D")
    p.add_argument("--lstm-size", type=int)
    p.add_argument("--mixtures", type=int)
    p.add_argument("--attention-dim", type=int)
    p.add_argument("--no-attention", action="store_true", help="mean-pool features instead of attending")
    p.add_argument("--literal-attention", action="store_true", help="single-unit attention score path")


def _add_recovery_flags(p):
    p.add_argument("--t-max", type=int)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajrec", description="Trajectory recovery from offline handwriting images.")
    parser.add_argument("--verbose", action="store_true", help="debug-level progress on stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of flag values; command-line flags take precedence")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "Generate a synthetic multi-stroke glyph ink file.")
    p.add_argument("--out", required=True)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--samples", type=int, default=32, help="samples per category")
    p.add_argument("--strokes", type=int, nargs=2, default=[3, 6], metavar=("MIN", "MAX"))
    p.add_argument("--jitter", type=float, default=0.0, help="per-point Gaussian jitter std")
    p.add_argument("--seed", type=int, default=0)

    p = command("prepare", cmd_prepare, "Rescale, simplify, encode and rasterize an ink file.")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--dp-epsilon", type=float, default=2.0)

    p = command("train", cmd_train, "Train the recovery network with teacher forcing.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--heldout")
    p.add_argument("--log", help="per-epoch JSON-lines loss log")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--max-steps", type=int)
    _add_model_flags(p)

    p = command("recover", cmd_recover, "Decode trajectories for every image of a dataset.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="ink file of recovered trajectories")
    p.add_argument("--ids", help="ink file whose record ids name the dataset samples")
    _add_recovery_flags(p)

    p = command("eval", cmd_eval, "DTW, raster IoU and stroke-count accuracy of recoveries.")
    p.add_argument("--gold", required=True, help="prepared dataset")
    p.add_argument("--recovered", required=True, help="recovered ink file")
    p.add_argument("--out")

    p = command("export-svg", cmd_export_svg, "Overlay ground truth (black) and recovery (red) as SVG.")
    p.add_argument("--gold", required=True)
    p.add_argument("--recovered")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ids")

    p = command("export-attention", cmd_export_attention, "Attention maps and partial recoveries per step.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    _add_recovery_flags(p)

    p = command("train-classifier", cmd_train_classifier, "Train the image classifier.")
    p.add_argument("--data", required=True, help="prepared dataset or ink file of pixel-space trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--heldout")
    p.add_argument("--side", type=int, default=64, help="raster side for ink input")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conv-depths", type=int, nargs=4, default=[100, 200, 300, 400], metavar="D")
    p.add_argument("--fc-size", type=int, default=500)
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--target-accuracy", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--max-steps", type=int)

    p = command("classify", cmd_classify, "Write per-image class probabilities as a score file.")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True, help="prepared dataset or ink file of pixel-space trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--ids")

    p = command("fuse", cmd_fuse, "Fuse offline and online score files.")
    p.add_argument("--off", required=True)
    p.add_argument("--on", required=True)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--out", required=True)

    p = command("sweep", cmd_sweep, "Fused accuracy over a grid of gamma values (CSV).")
    p.add_argument("--off", required=True)
    p.add_argument("--on", required=True)
    p.add_argument("--gold", required=True, help="labelled dataset or ink file")
    p.add_argument("--ids")
    p.add_argument("--start", type=float, default=0.4)
    p.add_argument("--stop", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out")
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def _config_path(argv):
    for k, arg in enumerate(argv):
        if arg == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _command_name(argv):
    for arg in argv:
        if not arg.startswith("-"):
            return arg
    return None


def parse_args(argv, parser=None):
    """Parse ``argv``; values from ``--config`` fill in flags not given."""
    parser = parser or build_parser()
    config = _config_path(argv)
    command = _command_name(argv)
    if config is not None and command is not None:
        try:
            values = json.loads(Path(config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {config}: {exc}") from None
        if not isinstance(values, dict):
            raise UsageError(f"config file {config} must hold a JSON object")
        sub = _subparser(parser, command)
        known = {a.dest for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            dest = "input" if key == "in" else key.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                raise UsageError(f"unknown key {key!r} in config file {config}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        # required flags may come from the file
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def check_paths(args):
    """Inputs must exist and outputs must have an existing parent directory."""
    for dest, is_input in PATH_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        path = Path(value)
        if is_input and not path.is_file():
            raise FileNotFoundError(f"--{dest.replace('_', '-')}: no such file {value}")
        if not is_input:
            parent = path.parent
            if not parent.is_dir():
                raise FileNotFoundError(f"--{dest.replace('_', '-')}: directory {parent} does not exist")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        check_paths(args)
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - any failure is a runtime error
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
