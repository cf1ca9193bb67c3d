"""``vistr`` command line: gen-data, train, infer, eval, selftest."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, load_config
from .engine import Trainer, TrainingDiverged, infer, load_model, load_samples, samples_from_dataset
from .evaluation import ResultsFormatError, evaluate_dataset, results_from_json, save_results
from .serialize import TensorFileError
from .synthdata import AnnotationFormatError, SynthConfigError, generate_dataset, load_annotations, save_annotations

log = logging.getLogger("vistr")

# errors reported as one line on stderr with exit status 1
USER_ERRORS = (
    ConfigError,
    SynthConfigError,
    AnnotationFormatError,
    ResultsFormatError,
    TensorFileError,
    TrainingDiverged,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    cfg.validate()
    return cfg


def _annotations_path(path: str) -> Path:
    p = Path(path)
    return p / "annotations.json" if p.is_dir() else p


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    dataset = save_annotations(*generate_dataset(cfg.data), out / "annotations.json")
    print(json.dumps({"annotations": str(out / "annotations.json"), "videos": len(dataset.videos),
                      "instances": len(dataset.annotations)}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.data:
        cfg.dataset = args.data
    if args.out:
        cfg.out_dir = args.out
    samples = load_samples(cfg)
    for s in samples:
        if s.frames.shape[0] != cfg.model.T:
            raise ConfigError(f"clip {s.clip_id} has {s.frames.shape[0]} frames but model.T = {cfg.model.T}")
    trainer = Trainer(cfg, samples, Path(cfg.out_dir))
    history = trainer.fit()
    summary = {"steps": trainer.step, "epochs": trainer.epoch, "checkpoint": str(trainer.checkpoint_path())}
    if history:
        summary["final_loss"] = history[-1]
    print(json.dumps(summary))
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint")
    data = args.data or cfg.dataset
    if not data:
        raise ConfigError("infer needs --data (annotation file or dataset directory)")
    dataset = load_annotations(_annotations_path(data))
    for v in dataset.videos:
        if v.T != cfg.model.T:
            raise ConfigError(f"video {v.id} has {v.T} frames but the model was built for T = {cfg.model.T}")
    model = load_model(cfg, args.checkpoint)
    results = infer(model, samples_from_dataset(dataset))
    out = Path(args.out or "results.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_results(results, out)
    print(json.dumps({"results": str(out), "count": len(results), "videos": len(dataset.videos)}))
    return 0


def cmd_eval(args) -> int:
    if not args.results or not args.annotations:
        raise ConfigError("eval needs --results and --annotations")
    dataset = load_annotations(_annotations_path(args.annotations))
    try:
        doc = json.loads(Path(args.results).read_text())
    except json.JSONDecodeError as exc:
        raise ResultsFormatError(f"{args.results}: not valid JSON ({exc})") from None
    videos = {v.id: (v.T, v.height, v.width) for v in dataset.videos}
    report = evaluate_dataset(results_from_json(doc, videos), dataset)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run

    return 0 if run() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vistr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, *flags):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        if "config" in flags:
            p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        if "out" in flags:
            p.add_argument("--out", metavar="PATH", help="output directory or file")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (tensor file)")
        if "deterministic" in flags:
            p.add_argument("--deterministic", action="store_true", help="bitwise reproducible run")
        if "data" in flags:
            p.add_argument("--data", metavar="PATH", help="annotation file or dataset directory")
        return p

    add("gen-data", cmd_gen_data, "write a synthetic dataset", "config", "out")
    add("train", cmd_train, "train a model", "config", "out", "deterministic", "data")
    add("infer", cmd_infer, "predict instance sequences", "config", "out", "checkpoint", "data")
    ev = add("eval", cmd_eval, "score a results file", "out")
    ev.add_argument("--results", metavar="PATH", required=False, help="results JSON")
    ev.add_argument("--annotations", metavar="PATH", required=False, help="annotation file or dataset directory")
    add("selftest", cmd_selftest, "run the built-in oracle checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"vistr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
