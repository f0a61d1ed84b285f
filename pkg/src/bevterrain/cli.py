"""Command-line entry point: ``bevterrain <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.  Settings resolve as
flags > config file (``--config``, else ``DATA/dataset.cfg``) > defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset, formats, metrics, model, synth
from .features import FeatureGrid
from .grid import BevGrid
from .pseudo_label import VOID, PseudoLabelGrid, PseudoLabelParams

log = logging.getLogger("bevterrain")

EXIT_USAGE = 1
EXIT_DATA = 2

DEFAULTS = {
    "window": 4,
    "alpha0": 0.5,
    "densify_radius": 1.0,
    "densify_lambda": 1.0,
    "z_ceiling": 2.5,
    "epochs": 30,
    "lr": 0.05,
    "hidden": 32,
    "levels": "1,2,4",
    "seed": 0,
    "batch_cells": 256,
    "labels_from": "pseudo",
    "noise_sigma": 0.0,
    "label_noise": 0.0,
    "dropout": 0.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_levels(text: str) -> list[int]:
    try:
        levels = [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"levels must be comma-separated integers, got {text!r}") from None
    if not levels or levels[0] != 1 or any(f < 1 for f in levels):
        raise UsageError(f"levels must start with 1 and be positive, got {text!r}")
    return levels


class Settings:
    """Flag values layered over a config file over :data:`DEFAULTS`."""

    def __init__(self, args: argparse.Namespace, config: dict[str, str]):
        self.args = args
        self.config = config

    def get(self, key: str, cast=str):
        value = getattr(self.args, key, None)
        if value is None:
            value = self.config.get(key, DEFAULTS.get(key))
        if value is None:
            raise UsageError(f"missing required setting {key!r}")
        try:
            return cast(value)
        except ValueError:
            raise UsageError(f"bad value for {key}: {value!r}") from None


def _load_config(args) -> dict[str, str]:
    path = getattr(args, "config", None)
    if path is None and getattr(args, "data", None):
        candidate = Path(args.data) / dataset.CONFIG_NAME
        path = candidate if candidate.exists() else None
    return dataset.read_config(path) if path else {}


def _pseudo_params(s: Settings) -> PseudoLabelParams:
    return PseudoLabelParams(
        alpha0=s.get("alpha0", float),
        z_ceiling=s.get("z_ceiling", float),
        window=s.get("window", int),
        densify_radius=s.get("densify_radius", float),
        densify_lambda=s.get("densify_lambda", float),
    )


def _dataset(args, config) -> dataset.SensorDataset:
    return dataset.load_dataset(args.data, config)


def _frame(ds: dataset.SensorDataset, root, index: int) -> dataset.Frame:
    try:
        return ds.frame(index)
    except KeyError as exc:
        raise formats.FormatError(root, str(exc.args[0])) from None


def cmd_synth(args, s: Settings) -> None:
    frames = s.get("frames", int)
    if frames < 1:
        raise UsageError("--frames must be at least 1")
    ds, _ = synth.make_dataset(
        seed=s.get("seed", int),
        frames=frames,
        noise_sigma=s.get("noise_sigma", float),
        label_noise=s.get("label_noise", float),
        dropout=s.get("dropout", float),
    )
    dataset.write_dataset(ds, args.out)
    log.info("wrote %d frames to %s", len(ds), args.out)


def cmd_pseudo_label(args, s: Settings) -> None:
    ds = _dataset(args, s.config)
    index = s.get("frame", int)
    _frame(ds, args.data, index)
    grid = dataset.frame_pseudo_labels(ds, index, _pseudo_params(s))
    formats.write_grid(args.out, grid)
    labeled = int((grid.label != VOID).sum())
    log.info("frame %d: %d observed cells, %d labeled after densification", index, int(grid.observed.sum()), labeled)


def _labels_for(ds, frame, source: str, params: PseudoLabelParams) -> PseudoLabelGrid:
    if source == "pseudo":
        return dataset.frame_pseudo_labels(ds, frame.index, params)
    if frame.truth is None:
        raise formats.FormatError(f"labels/{dataset.frame_name(frame.index)}.bevg", "truth label grid not found")
    return PseudoLabelGrid.from_labels(ds.spec, frame.truth, ds.num_classes)


def cmd_train(args, s: Settings) -> None:
    ds = _dataset(args, s.config)
    if not len(ds):
        raise formats.FormatError(args.data, "dataset has no usable frames")
    levels = parse_levels(s.get("levels"))
    source = s.get("labels_from")
    if source not in ("pseudo", "truth"):
        raise UsageError(f"--labels-from must be pseudo or truth, got {source!r}")
    params = _pseudo_params(s)
    data = [(dataset.frame_features(ds, f, levels), _labels_for(ds, f, source, params)) for f in ds.frames]
    seed = s.get("seed", int)
    p0 = model.init(data[0][0].channels, ds.num_classes, s.get("hidden", int), seed)
    trained, trace = model.train(
        p0, data, epochs=s.get("epochs", int), lr=s.get("lr", float), batch_cells=s.get("batch_cells", int), seed=seed
    )
    formats.write_model(args.out, trained)
    for epoch, loss in enumerate(trace):
        log.info("epoch %d loss %.6f", epoch, loss)


def _levels_for_model(params: model.ModelParams, num_classes: int, override) -> list[int]:
    if override is not None:
        return parse_levels(override)
    per_level = 6 + num_classes + 1
    if params.input_dim % per_level:
        raise formats.FormatError("model", f"input size {params.input_dim} is not a multiple of {per_level}")
    return [2**i for i in range(params.input_dim // per_level)]


def prediction_grid(features: FeatureGrid, params: model.ModelParams) -> BevGrid:
    label, conf, probs = model.predict_grid(params, features)
    return BevGrid(features.spec, np.concatenate([label[None].astype(np.float64), conf[None], probs.values]))


def cmd_predict(args, s: Settings) -> None:
    ds = _dataset(args, s.config)
    params = formats.read_model(args.model)
    if params.num_classes != ds.num_classes:
        raise formats.FormatError(args.model, f"model has {params.num_classes} classes, dataset {ds.num_classes}")
    levels = _levels_for_model(params, ds.num_classes, getattr(args, "levels", None))
    frame = _frame(ds, args.data, s.get("frame", int))
    feats = dataset.frame_features(ds, frame, levels)
    if feats.channels != params.input_dim:
        raise formats.FormatError(args.model, f"model expects {params.input_dim} features, got {feats.channels}")
    grid = prediction_grid(feats, params)
    formats.write_grid(args.out, grid, formats.GridKind.PREDICTION)
    if args.render:
        formats.render_ppm(args.render, grid.values[0], "label", ds.num_classes)


def cmd_eval(args, s: Settings) -> None:
    kind, pred_grid = formats.read_grid_raw(args.pred)
    _, pred = formats.read_label_map(args.pred)
    _, truth = formats.read_label_map(args.truth)
    if pred.shape != truth.shape:
        raise formats.FormatError(args.pred, f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    known = truth != VOID
    labels = np.concatenate([truth[known], pred[pred != VOID]]).astype(np.int64)
    K = int(labels.max(initial=-1)) + 1
    if kind == formats.GridKind.PREDICTION:
        K = max(K, pred_grid.channels - 2)
    if (pred[known] == VOID).any():
        raise formats.FormatError(args.pred, "prediction is void on cells that have ground truth")
    m = metrics.metrics(metrics.confusion(pred, truth, max(K, 1)))
    extra = {}
    if kind == formats.GridKind.PREDICTION and known.any():
        conf = pred_grid.values[1][known]
        extra["ece"] = metrics.ece(conf, pred[known] == truth[known])
    report = metrics.format_report(m, extra)
    formats.atomic_write(args.report, report.encode())
    records = [*m.records(), *extra.items()]
    sys.stdout.write("".join(f"{name}\t{value:.10g}\n" for name, value in records))


def cmd_render(args, s: Settings) -> None:
    kind, grid = formats.read_grid_raw(args.grid)
    channel = args.channel
    if kind == formats.GridKind.PSEUDO_LABEL:
        pl = formats.read_grid(args.grid)
        planes = {"label": pl.label, "uncertainty": pl.uncertainty}
        K = pl.num_classes
    elif kind == formats.GridKind.PREDICTION:
        planes = {"label": formats.read_label_map(args.grid)[1], "confidence": grid.values[1]}
        K = grid.channels - 2
    elif kind == formats.GridKind.LABELS:
        planes = {"label": formats.read_label_map(args.grid)[1]}
        K = None
    else:
        raise formats.FormatError(args.grid, f"grid kind {kind.name} cannot be rendered")
    if channel not in planes:
        raise UsageError(f"grid of kind {kind.name} has no {channel} channel (available: {', '.join(planes)})")
    mode = "label" if channel == "label" else "gray"
    formats.render_ppm(args.out, planes[channel], mode, K)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevterrain", description="BEV terrain classification from LiDAR and camera semantics.")
    parser.add_argument("--config", help="key=value settings file (default: DATA/dataset.cfg)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic off-road dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--label-noise", dest="label_noise", type=float)
    p.add_argument("--dropout", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pseudo-label", help="generate the pseudo-label grid of one frame")
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--densify-radius", dest="densify_radius", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train", help="train the fusion classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--labels-from", dest="labels_from", choices=("pseudo", "truth"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--levels")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict a dense label grid for one frame")
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render")
    p.add_argument("--levels", help="pyramid factors (default: 1,2,4,... inferred from the model)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="compare a predicted grid with a truth grid")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a grid channel as a PPM image")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=("label", "uncertainty", "confidence"), default="label")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        settings = Settings(args, _load_config(args))
        args.func(args, settings)
    except UsageError as exc:
        print(f"bevterrain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (formats.FormatError, OSError, ValueError, KeyError) as exc:
        print(f"bevterrain: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
