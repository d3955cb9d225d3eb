"""Command-line pipeline: synth, train, calibrate, detect, explain, evaluate, plot.

Every command reads an optional JSON run config (``--config``), applies flag
overrides, persists the resolved config next to its outputs, and exits with
0 on success, 2 on usage/config errors, 3 on data/shape/format errors and 4
on training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, autoencoder, detector, ingest, plotting, rulelearn, synth, windowing
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    PipelineError,
    ShapeError,
    TrainingError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


@dataclass
class DataConfig:
    path: str = "data.csv"
    schema: tuple[str, ...] = ingest.DEFAULT_SCHEMA
    cutoff: str = "2022-06-01T00:00:00"
    gap_policy: str = ingest.GAP_FORWARD_FILL


@dataclass
class WindowConfig:
    length: int = 1800
    stride: int = 300


@dataclass
class ModelConfig:
    num_blocks: int = 10
    hidden_channels: int = 30
    latent_channels: int = 32
    kernel_size: int = 3
    dropout: float = 0.2


@dataclass
class TrainingSection:
    learning_rate: float = 1e-4
    epochs: int = 200
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.3


@dataclass
class DetectorConfig:
    alpha: float = 0.15
    beta: float = 3.0
    tau_warn: float = 0.1
    tau_fail: float = 0.5
    lead_minutes: float = 120.0
    early_grace_hours: float = 12.0


@dataclass
class RulesConfig:
    exclude_channels: tuple[str, ...] = ()
    max_trees: int = 8
    max_history: int | None = None
    near_singleton_max: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    rules: RulesConfig = field(default_factory=RulesConfig)
    synth: dict | None = None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["data"]["schema"] = list(self.data.schema)
        out["rules"]["exclude_channels"] = list(self.rules.exclude_channels)
        return out


_SECTIONS = {
    "data": DataConfig,
    "window": WindowConfig,
    "model": ModelConfig,
    "training": TrainingSection,
    "detector": DetectorConfig,
    "rules": RulesConfig,
}


def _build_section(cls, raw: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    kwargs = dict(raw)
    if cls is DataConfig and "schema" in kwargs:
        kwargs["schema"] = tuple(kwargs["schema"])
    if cls is RulesConfig and "exclude_channels" in kwargs:
        kwargs["exclude_channels"] = tuple(kwargs["exclude_channels"])
    return cls(**kwargs)


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON config: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {"seed", "out_dir", "synth", *_SECTIONS}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    cfg = RunConfig(seed=int(raw.get("seed", 0)), out_dir=str(raw.get("out_dir", "out")))
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _build_section(cls, raw[name]))
    cfg.synth = raw.get("synth")
    return cfg


def _persist_config(cfg: RunConfig, out_dir: Path) -> None:
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out_dir", None) is not None:
        cfg.out_dir = args.out_dir
    for attr, section, key in (
        ("alpha", "detector", "alpha"),
        ("beta", "detector", "beta"),
        ("tau_warn", "detector", "tau_warn"),
        ("tau_fail", "detector", "tau_fail"),
        ("lead_minutes", "detector", "lead_minutes"),
        ("epochs", "training", "epochs"),
        ("batch_size", "training", "batch_size"),
        ("learning_rate", "training", "learning_rate"),
        ("max_history", "rules", "max_history"),
        ("max_trees", "rules", "max_trees"),
        ("data", "data", "path"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    if getattr(args, "exclude_channel", None):
        cfg.rules.exclude_channels = tuple(args.exclude_channel)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _persist_config(cfg, out_dir)
    return cfg, out_dir


def _load_feature_frames(cfg: RunConfig):
    """Load the CSV, split at the cutoff and reduce to model-feature channels."""
    frame = ingest.load_csv(cfg.data.path, cfg.data.schema, cfg.data.gap_policy)
    split = ingest.split_by_timestamp(frame, cfg.data.cutoff)
    features = ingest.feature_channels(cfg.data.schema)
    return split.train.select_channels(features), split.test.select_channels(features)


def _spec(cfg: RunConfig) -> windowing.WindowSpec:
    return windowing.WindowSpec(cfg.window.length, cfg.window.stride)


def cmd_synth(args) -> int:
    cfg, out_dir = _resolve(args)
    if cfg.synth is None:
        raise ConfigError("synth command needs a 'synth' section in the config")
    synth_config = synth.config_from_dict(cfg.seed, cfg.synth)
    frame, annotations = synth.generate(synth_config)
    data_path = out_dir / "data.csv"
    ann_path = out_dir / "annotations.json"
    ingest.write_csv(frame, data_path)
    ingest.write_annotations(annotations, ann_path)
    print(
        f"wrote {frame.n_samples} samples x {frame.n_channels} channels to {data_path} "
        f"({len(annotations)} failures)"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out_dir = _resolve(args)
    train_frame, _ = _load_feature_frames(cfg)
    stats = ingest.fit_normalization(train_frame)
    normalized = ingest.apply_normalization(train_frame, stats)
    windows = windowing.make_windows(normalized, _spec(cfg))

    ae_config = autoencoder.AutoencoderConfig(
        in_channels=train_frame.n_channels,
        window_length=cfg.window.length,
        num_blocks=cfg.model.num_blocks,
        hidden_channels=cfg.model.hidden_channels,
        latent_channels=cfg.model.latent_channels,
        kernel_size=cfg.model.kernel_size,
        dropout=cfg.model.dropout,
        seed=cfg.seed,
    )
    train_config = autoencoder.TrainingConfig(
        learning_rate=cfg.training.learning_rate,
        epochs=cfg.training.epochs,
        batch_size=cfg.training.batch_size,
        beta1=cfg.training.beta1,
        beta2=cfg.training.beta2,
        eps=cfg.training.eps,
        val_fraction=cfg.training.val_fraction,
        seed=cfg.seed,
    )
    result = autoencoder.train(windows, ae_config, train_config)

    model = autoencoder.AutoencoderModel(ae_config, result.net, stats, train_frame.channels)
    model_path = out_dir / "model.bin"
    autoencoder.save_model(model, model_path)
    with open(out_dir / "training_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for row in result.curve:
            fh.write(f"{row.epoch},{row.train_loss!r},{row.val_loss!r}\n")
    with open(out_dir / "val_errors.csv", "w", encoding="utf-8") as fh:
        fh.write("index,error\n")
        for i, err in enumerate(result.validation_errors):
            fh.write(f"{i},{float(err)!r}\n")
    final = result.curve[-1]
    print(
        f"trained {len(windows)} windows for {final.epoch} epochs "
        f"(train {final.train_loss:.6g}, val {final.val_loss:.6g}); model at {model_path}"
    )
    return EXIT_OK


def _read_val_errors(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", skiprows=1, usecols=1, ndmin=1)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read validation errors: {exc}") from None


def _threshold_path(args, out_dir: Path) -> Path:
    return Path(args.threshold) if getattr(args, "threshold", None) else out_dir / "threshold.json"


def _load_or_calibrate_threshold(args, cfg: RunConfig, out_dir: Path) -> detector.AnomalyThreshold:
    path = _threshold_path(args, out_dir)
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return detector.AnomalyThreshold(raw["q99"], raw["beta"], raw["tau_anom"])
    val_path = Path(getattr(args, "val_errors", None) or out_dir / "val_errors.csv")
    if not val_path.exists():
        raise ConfigError(
            f"no threshold file at {path} and no validation errors at {val_path}; "
            "run the calibrate command first"
        )
    return detector.calibrate_threshold(_read_val_errors(val_path), cfg.detector.beta)


def _write_threshold(threshold: detector.AnomalyThreshold, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"q99": threshold.q99, "beta": threshold.beta, "tau_anom": threshold.tau_anom},
            fh,
            indent=2,
        )
        fh.write("\n")


def cmd_calibrate(args) -> int:
    cfg, out_dir = _resolve(args)
    val_path = Path(args.val_errors or out_dir / "val_errors.csv")
    threshold = detector.calibrate_threshold(_read_val_errors(val_path), cfg.detector.beta)
    path = _threshold_path(args, out_dir)
    _write_threshold(threshold, path)
    print(f"q99={threshold.q99!r} beta={threshold.beta:g} tau_anom={threshold.tau_anom!r} -> {path}")
    return EXIT_OK


def _run_detection(args, cfg: RunConfig, out_dir: Path):
    model_path = Path(getattr(args, "model", None) or out_dir / "model.bin")
    model = autoencoder.load_model(model_path)
    _, test_frame = _load_feature_frames(cfg)
    if model.channels != test_frame.channels:
        raise ShapeError(
            f"model was trained on channels {model.channels}, data provides {test_frame.channels}"
        )
    windows = windowing.make_windows(test_frame, _spec(cfg))
    threshold = _load_or_calibrate_threshold(args, cfg, out_dir)
    records, events = detector.detect(
        windows,
        model,
        threshold,
        alpha=cfg.detector.alpha,
        warn_threshold=cfg.detector.tau_warn,
        fail_threshold=cfg.detector.tau_fail,
    )
    return windows, records, events


def _write_signal_files(records, events, out_dir: Path) -> None:
    with open(out_dir / "signal.ndjson", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "time": str(r.start_time),
                        "error": r.error,
                        "y": r.y,
                        "z": r.z,
                        "state": r.state,
                    }
                )
                + "\n"
            )
    with open(out_dir / "events.ndjson", "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps({"kind": e.kind, "time": str(e.time)}) + "\n")


def cmd_detect(args) -> int:
    cfg, out_dir = _resolve(args)
    _, records, events = _run_detection(args, cfg, out_dir)
    _write_signal_files(records, events, out_dir)
    n_onsets = sum(1 for e in events if e.kind == detector.ONSET)
    print(f"{len(records)} windows scored, {n_onsets} failure onsets -> {out_dir}")
    return EXIT_OK


def _tree_record(tree: rulelearn.DecisionTree, provenance: str) -> dict:
    return {
        "provenance": provenance,
        "text": rulelearn.rule_text(tree),
        "depth": tree.depth,
        "support": {
            "n_failure": tree.root.n_failure,
            "n_no_failure": tree.root.n_no_failure,
        },
        "paths": [
            [
                {"feature": p.feature, "comparator": p.comparator, "threshold": p.threshold}
                for p in path
            ]
            for path in rulelearn.failure_paths(tree)
        ],
    }


def _write_ruleset(ruleset: rulelearn.RuleSet, stem: Path, near_singleton_max: int) -> None:
    payload = {
        "provenance": ruleset.provenance,
        "trees": [_tree_record(t, ruleset.provenance) for t in ruleset.trees],
    }
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    with open(stem.with_suffix(".txt"), "w", encoding="utf-8") as fh:
        if not ruleset.trees:
            fh.write("(no rules)\n")
        for tree in ruleset.trees:
            fh.write(rulelearn.rule_text(tree) + "\n")


def cmd_explain(args) -> int:
    cfg, out_dir = _resolve(args)
    windows, records, events = _run_detection(args, cfg, out_dir)
    _write_signal_files(records, events, out_dir)

    learner = rulelearn.RuleLearner(
        channels=windows[0].channels if windows else (),
        warn_threshold=cfg.detector.tau_warn,
        fail_threshold=cfg.detector.tau_fail,
        exclude_channels=cfg.rules.exclude_channels,
        max_trees=cfg.rules.max_trees,
        max_history=cfg.rules.max_history,
        seed=cfg.seed,
    )
    rules_dir = out_dir / "rules"
    rules_dir.mkdir(exist_ok=True)
    emitted: list[rulelearn.RulesEmitted] = []
    for window, record in zip(windows, records):
        for event in learner.step(record.z, windowing.aggregate(window)):
            if isinstance(event, rulelearn.RulesEmitted):
                emitted.append(event)
                _write_ruleset(
                    event.rules, rules_dir / f"local_{event.failure_id}", cfg.rules.near_singleton_max
                )
            elif isinstance(event, rulelearn.InductionFailed):
                print(f"warning: rule induction failed at {event.time}: {event.reason}")
    global_rules = learner.finalize_global()
    _write_ruleset(global_rules, rules_dir / "global", cfg.rules.near_singleton_max)

    support_payload = []
    for emission in emitted:
        for i, tree in enumerate(emission.rules.trees):
            support_payload.append(
                {
                    "provenance": emission.failure_id,
                    "tree": i,
                    "nodes": [
                        dataclasses.asdict(n)
                        for n in rulelearn.node_support(tree, cfg.rules.near_singleton_max)
                    ],
                }
            )
    for i, tree in enumerate(global_rules.trees):
        support_payload.append(
            {
                "provenance": "global",
                "tree": i,
                "nodes": [
                    dataclasses.asdict(n)
                    for n in rulelearn.node_support(tree, cfg.rules.near_singleton_max)
                ],
            }
        )
    with open(rules_dir / "node_support.json", "w", encoding="utf-8") as fh:
        json.dump(support_payload, fh, indent=2, ensure_ascii=False)
        fh.write("\n")

    print(
        f"{len(emitted)} failure rule sets and {len(global_rules.trees)} global trees -> {rules_dir}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, out_dir = _resolve(args)
    events_path = Path(args.events or out_dir / "events.ndjson")
    annotations_path = Path(args.annotations or out_dir / "annotations.json")
    events = []
    with open(events_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw = json.loads(line)
                events.append(detector.DetectionEvent(raw["kind"], np.datetime64(raw["time"], "s")))
    annotations = ingest.load_annotations(annotations_path)
    report = detector.evaluate(
        events,
        annotations,
        lead_requirement_minutes=cfg.detector.lead_minutes,
        early_grace_hours=cfg.detector.early_grace_hours,
    )
    payload = {
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "false_positive_events": report.false_positive_events,
        "vacuous": report.vacuous,
        "annotations": [
            {
                "label": r.label,
                "detected": r.detected,
                "detection_time": str(r.detection_time) if r.detection_time is not None else None,
                "lead_minutes": r.lead_minutes,
            }
            for r in report.annotations
        ],
    }
    with open(out_dir / "evaluation.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    for r in report.annotations:
        if r.detected:
            print(f"{r.label}: detected at {r.detection_time} (lead {r.lead_minutes:.1f} min)")
        elif r.detection_time is not None:
            print(f"{r.label}: detected at {r.detection_time} but lead {r.lead_minutes:.1f} min is short")
        else:
            print(f"{r.label}: missed")
    vacuous_note = " (vacuous: nothing predicted, nothing annotated)" if report.vacuous else ""
    print(
        f"precision={report.precision:.3f} recall={report.recall:.3f} f1={report.f1:.3f} "
        f"false_positives={report.false_positive_events}{vacuous_note}"
    )
    return EXIT_OK


def cmd_plot(args) -> int:
    cfg, out_dir = _resolve(args)
    signal_path = Path(args.signal or out_dir / "signal.ndjson")
    records = []
    with open(signal_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw = json.loads(line)
                records.append(
                    detector.SignalRecord(
                        np.datetime64(raw["time"], "s"),
                        float(raw["error"]),
                        int(raw["y"]),
                        float(raw["z"]),
                        str(raw["state"]),
                    )
                )
    if not records:
        raise ConfigError(f"{signal_path}: no signal records to plot")
    annotations = []
    if args.annotations:
        annotations = ingest.load_annotations(args.annotations)
    plotting.signal_series_csv(records, out_dir / "signal_series.csv")
    plotting.write_signal_svg(
        records, annotations, out_dir / "signal.svg", fail_threshold=cfg.detector.tau_fail
    )
    print(f"wrote {out_dir / 'signal_series.csv'} and {out_dir / 'signal.svg'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdmrules",
        description="Failure prediction and interpretable rule learning on sensor streams.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", help="override the output directory")

    detection = argparse.ArgumentParser(add_help=False)
    detection.add_argument("--data", help="override the input CSV path")
    detection.add_argument("--model", help="model checkpoint path (default: OUT_DIR/model.bin)")
    detection.add_argument("--threshold", help="threshold JSON path (default: OUT_DIR/threshold.json)")
    detection.add_argument("--val-errors", dest="val_errors", help="validation errors CSV")
    detection.add_argument("--alpha", type=float, help="smoothing factor for the failure signal")
    detection.add_argument("--beta", type=float, help="anomaly threshold multiplier")
    detection.add_argument("--tau-warn", dest="tau_warn", type=float, help="warning threshold on z")
    detection.add_argument("--tau-fail", dest="tau_fail", type=float, help="failure threshold on z")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic stream")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the autoencoder")
    p.add_argument("--data", help="override the input CSV path")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate the anomaly threshold")
    p.add_argument("--val-errors", dest="val_errors", help="validation errors CSV")
    p.add_argument("--beta", type=float, help="anomaly threshold multiplier")
    p.add_argument("--threshold", help="output threshold JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", parents=[common, detection], help="score the test stream")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("explain", parents=[common, detection], help="learn failure rules")
    p.add_argument(
        "--exclude-channel",
        action="append",
        dest="exclude_channel",
        help="channel to hide from the rule learner (repeatable)",
    )
    p.add_argument("--max-history", dest="max_history", type=int, help="cap on history windows")
    p.add_argument("--max-trees", dest="max_trees", type=int, help="cap on trees per rule set")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", parents=[common], help="score events against annotations")
    p.add_argument("--events", help="events NDJSON (default: OUT_DIR/events.ndjson)")
    p.add_argument("--annotations", help="annotations JSON (default: OUT_DIR/annotations.json)")
    p.add_argument("--lead-minutes", dest="lead_minutes", type=float, help="required lead time")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common], help="export figure data and an SVG")
    p.add_argument("--signal", help="signal NDJSON (default: OUT_DIR/signal.ndjson)")
    p.add_argument("--annotations", help="annotations JSON for failure shading")
    p.add_argument("--tau-fail", dest="tau_fail", type=float, help="threshold line height")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
