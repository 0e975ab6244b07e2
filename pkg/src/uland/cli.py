"""Command-line entry point: ``uland {gen,train,calibrate,predict,eval,ablate}``.

Every command takes ``--config FILE`` plus dotted ``--section.key=value``
overrides. Exit status: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import torch

from .config import RunConfig, load_config, save_config
from .exceptions import ConfigError, ULandError

logger = logging.getLogger("uland")

WEIGHTS_FILE = "weights.ulwt"
LOSS_FILE = "loss.csv"
STATS_FILE = "calibration.json"
PREDICTIONS_FILE = "predictions.csv"
REPORT_FILE = "report.csv"
EFFECTIVE_CONFIG_FILE = "effective_config.json"

COMMANDS = ("gen", "train", "calibrate", "predict", "eval", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uland", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, help_text in (
        ("gen", "generate a synthetic corpus"),
        ("train", "train the Bayesian U-Net on labelled key frames"),
        ("calibrate", "fit uncertainty statistics on the calibration split"),
        ("predict", "measure one video or a whole split"),
        ("eval", "evaluate the configured mode against both baselines"),
        ("ablate", "evaluate both baselines and all four gating modes"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--threads", type=int, help="torch intra-op threads")
        if name == "gen":
            p.add_argument("--out", help="corpus directory (default: config 'corpus')")
        else:
            p.add_argument("--corpus", help="corpus directory (default: config 'corpus')")
            p.add_argument("--out", help="output directory (default: config 'output_dir')")
        if name == "predict":
            p.add_argument("--video", help="video id; default: every video of --split")
            p.add_argument("--split", choices=("train", "calib", "test"))
            p.add_argument("--mode", help="cqc | cqc+al | cqc+ep | cqc+al+ep")
    return parser


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def split_overrides(extra: Sequence[str]) -> dict[str, Any]:
    """``--gating.xi=2`` style arguments as a {dotted_key: value} dict."""
    overrides = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise UsageError(f"unrecognized argument: {arg}")
        key, value = arg[2:].split("=", 1)
        if not key:
            raise UsageError(f"unrecognized argument: {arg}")
        overrides[key] = _parse_value(value)
    return overrides


def resolve_config(args, overrides: dict[str, Any]) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    if args.command == "gen":
        if args.out:
            overrides = {**overrides, "corpus": args.out}
    else:
        if args.corpus:
            overrides = {**overrides, "corpus": args.corpus}
        if args.out:
            overrides = {**overrides, "output_dir": args.out}
    if args.threads is not None:
        overrides = {**overrides, "threads": args.threads}
    if args.command == "predict":
        if args.mode:
            overrides = {**overrides, "mode": args.mode}
        if args.split:
            overrides = {**overrides, "split": args.split}
    try:
        return load_config(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ULandError(f"{what} not found: {path}")
    return path


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / EFFECTIVE_CONFIG_FILE)
    return out


def _load_model(cfg: RunConfig):
    from .bunet import build_model, load_weights

    weights = _require(Path(cfg.output_dir) / WEIGHTS_FILE, "weights file")
    return load_weights(build_model(cfg.arch, cfg.seeds.model), weights)


def _load_stats(cfg: RunConfig):
    from .gating import CalibrationStats

    return CalibrationStats.load(_require(Path(cfg.output_dir) / STATS_FILE, "calibration stats"))


def cmd_gen(cfg: RunConfig, args) -> None:
    from .corpus import generate_corpus, write_corpus

    corpus = generate_corpus(cfg.generator, cfg.n_videos, cfg.seeds.corpus)
    write_corpus(corpus, cfg.corpus)
    save_config(cfg, Path(cfg.corpus) / EFFECTIVE_CONFIG_FILE)
    logger.info("wrote %d/%d/%d videos to %s", len(corpus.train), len(corpus.calib),
                len(corpus.test), cfg.corpus)


def cmd_train(cfg: RunConfig, args) -> None:
    from .bunet import build_model, save_weights, train, write_loss_trace
    from .corpus import read_corpus

    corpus = read_corpus(_require(Path(cfg.corpus), "corpus directory"))
    out = _output_dir(cfg)
    model = build_model(cfg.arch, cfg.seeds.model)
    result = train(model, corpus.train, cfg.train, cfg.delta, seed=cfg.seeds.train)
    save_weights(model, out / WEIGHTS_FILE)
    write_loss_trace(result.trace, out / LOSS_FILE)


def cmd_calibrate(cfg: RunConfig, args) -> None:
    from .corpus import read_corpus
    from .gating import calibrate

    corpus = read_corpus(_require(Path(cfg.corpus), "corpus directory"))
    model = _load_model(cfg)
    out = _output_dir(cfg)
    stats = calibrate(model, corpus.calib, cfg.gating, cfg.delta, seed=cfg.seeds.inference)
    stats.save(out / STATS_FILE)


def cmd_predict(cfg: RunConfig, args) -> None:
    from .corpus import load_split
    from .pipeline import append_measurements, predict_video

    videos = load_split(_require(Path(cfg.corpus), "corpus directory"), cfg.split, args.video)
    model, stats = _load_model(cfg), _load_stats(cfg)
    out = _output_dir(cfg)
    path = out / PREDICTIONS_FILE
    path.unlink(missing_ok=True)
    for video in videos:
        m = predict_video(model, stats, video, cfg.mode, seed=cfg.seeds.inference,
                          q=cfg.gating.percentile)
        m.gt_mm = video.label.length_gt
        append_measurements([m], path)


def _evaluate(cfg: RunConfig, modes: Sequence[str]) -> None:
    from .corpus import read_corpus
    from .metrics import (analyze_videos, measure_all_methods, reports_from_measurements,
                          write_report, write_scatter)
    from .pipeline import append_measurements

    corpus = read_corpus(_require(Path(cfg.corpus), "corpus directory"))
    model, stats = _load_model(cfg), _load_stats(cfg)
    out = _output_dir(cfg)
    analyses = analyze_videos(model, stats, corpus.split(cfg.split), seed=cfg.seeds.inference)
    methods = measure_all_methods(model, stats, analyses, modes, cfg.semi_auto_all_keys,
                                  q=cfg.gating.percentile)
    write_report(reports_from_measurements(methods), out / REPORT_FILE)
    per_video = out / PREDICTIONS_FILE
    per_video.unlink(missing_ok=True)
    for name, ms in methods.items():
        write_scatter(name, ms, out)
        append_measurements(ms, per_video)


def cmd_eval(cfg: RunConfig, args) -> None:
    _evaluate(cfg, [cfg.mode])


def cmd_ablate(cfg: RunConfig, args) -> None:
    from .gating import MODE_ORDER

    _evaluate(cfg, MODE_ORDER)


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing command; expected one of: " + ", ".join(COMMANDS))
        cfg = resolve_config(args, split_overrides(extra))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(cfg.threads)
    try:
        HANDLERS[args.command](cfg, args)
    except (ULandError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
