"""
Command-line surface: simulate, train, detect, evaluate and experiment.

Every command reads its defaults from ``Settings`` (an optional JSON file
plus ``--set key=value`` overrides) and returns a process exit code:
0 on success, 1 on usage errors, 2 on data errors.
"""

import argparse
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from config.settings import RunConfig, Settings
from detection.detection_manager import DetectionManager, MetricJob
from detection.scoring import Regime, ScoreRecord, Stage
from detection.streaming import DetectionConfig, MetricModel, StreamingDetector, warm_up
from exceptions import ConfigError, DataError, DetectorError, LateEventError, UsageError
from experiments.evaluation import EvalReport, evaluate_scores, align
from experiments.experiment_runner import Scenario, run_experiment
from experiments.synth import generate, statistical_anomaly_labels
from model.covariates import CovariateSpec
from model.dynamics import Trainer, TrainingSeries
from model.grid import (
    BinGrid,
    BinnedObservation,
    aggregate_events,
    bin_samples,
    cdf_from_quantiles,
    cdf_to_probs,
    floored_observation,
    make_grid,
    pooled_quantile_values,
)
from model.persistence import ModelBundle, load_model, save_model
from utils.file_manager import FileManager, SeriesTable
from utils.logger import get_logger, setup_logger

Window = Tuple[int, np.ndarray]


class _ArgumentParser(argparse.ArgumentParser):
    """Parser whose errors become ``UsageError`` instead of exiting."""

    def error(self, message):
        raise UsageError(message)


@dataclass
class MetricSeries:
    """One input file split into consecutive intervals."""

    metric_id: str
    first_index: int
    windows: Optional[List[Window]] = None
    quantiles: Optional[List[Optional[np.ndarray]]] = None
    levels: Optional[np.ndarray] = None

    @property
    def is_quantile(self) -> bool:
        return self.quantiles is not None

    def __len__(self) -> int:
        return len(self.quantiles) if self.is_quantile else len(self.windows)

    def training_values(self, stop: int) -> np.ndarray:
        if self.is_quantile:
            rows = [row for row in self.quantiles[:stop] if row is not None]
            if not rows:
                raise DataError(f"{self.metric_id}: no quantile rows in the training range")
            return pooled_quantile_values(np.vstack(rows))
        samples = [values for _, values in self.windows[:stop] if len(values)]
        if not samples:
            raise DataError(f"{self.metric_id}: no samples in the training range")
        return np.concatenate(samples)

    def observations(self, grid: BinGrid, asymptotic: bool,
                     start: int = 0, stop: Optional[int] = None) -> List[Optional[BinnedObservation]]:
        """Binned intervals; missing intervals are ``None``."""
        stop = len(self) if stop is None else stop
        observations = []
        for offset in range(start, stop):
            index = self.first_index + offset
            if self.is_quantile:
                row = self.quantiles[offset]
                observation = None if row is None else floored_observation(
                    cdf_to_probs(cdf_from_quantiles(self.levels, row, grid)).probs, index)
            else:
                values = self.windows[offset][1]
                observation = None
                if len(values):
                    observation = bin_samples(values, grid, index)
                    if asymptotic:
                        observation = floored_observation(observation.frequencies(), index)
            observations.append(observation)
        return observations


def split_point(length: int, train_fraction: float) -> int:
    """Number of leading intervals used for training (or warm-up)."""
    if length < 2:
        raise DataError("a series needs at least two intervals to split")
    return min(length - 1, max(1, int(math.floor(length * train_fraction))))


def series_from_table(metric_id: str, table: SeriesTable, window_seconds: float) -> MetricSeries:
    """Group a series file into intervals of ``window_seconds``; gaps become empty intervals."""
    indices = np.floor(table.timestamps / window_seconds).astype(np.int64)
    if table.is_quantile:
        if np.any(np.diff(indices) <= 0):
            row = int(np.argmax(np.diff(indices) <= 0)) + 1
            raise DataError(f"{table.path}:{row + 2}: quantile rows must fall into increasing intervals",
                            table.path, row + 2)
        first = int(indices[0])
        rows: List[Optional[np.ndarray]] = [None] * int(indices[-1] - first + 1)
        for index, row in zip(indices, table.quantiles):
            rows[int(index) - first] = row
        return MetricSeries(metric_id, first, quantiles=rows, levels=table.levels)

    order = np.argsort(table.timestamps, kind="stable")
    events = zip(table.timestamps[order].tolist(), table.values[order].tolist())
    windows = list(aggregate_events(events, window_seconds))
    return MetricSeries(metric_id, windows[0][0], windows=windows)


class CommandContext:
    """Settings, logger and file manager shared by the command handlers."""

    def __init__(self, settings: Settings, logger, out: TextIO = None):
        self.settings = settings
        self.logger = logger
        self.out = out or sys.stdout
        self.file_manager = FileManager()
        self.file_manager.set_logger(logger)

    def run_config(self) -> RunConfig:
        return self.settings.run_config()

    def load_series(self, paths: Sequence[str], window_seconds: float) -> Dict[str, MetricSeries]:
        """Read series files keyed by metric id (the file stem)."""
        series: Dict[str, MetricSeries] = {}
        for path in paths:
            metric_id = Path(path).stem
            if metric_id in series:
                raise UsageError(f"two input files map to metric {metric_id!r}")
            table = self.file_manager.read_series(path)
            series[metric_id] = series_from_table(metric_id, table, window_seconds)
        return series

    def print(self, text: str = "") -> None:
        self.out.write(text + "\n")
        self.out.flush()


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args, ctx: CommandContext) -> int:
    scenario = Scenario.parse(args.scenario)
    seed = ctx.settings.get('seed') if args.seed is None else args.seed
    window = float(ctx.settings.get('window_seconds'))
    series = generate(scenario.synth_config(seed, args.learn_length, args.detect_length))
    out_dir = Path(args.out)
    ctx.file_manager.create_output_directory(out_dir)

    starts = np.arange(series.length) * window
    if series.samples is None:
        _, quantiles = series.quantile_rows()
        ctx.file_manager.write_quantile_series(out_dir / "series.csv", starts, quantiles)
    else:
        n = series.samples.shape[1]
        offsets = np.arange(n) * window / n
        timestamps = (starts[:, None] + offsets[None, :]).ravel()
        values = series.samples.ravel()
        ctx.file_manager.write_sample_series(out_dir / "series.csv", timestamps, values)
        ctx.file_manager.write_events(out_dir / "events.csv", args.metric_id, timestamps, values)

    ctx.file_manager.write_labels(out_dir / "labels.csv", series.labels)
    ctx.file_manager.write_flags(out_dir / "statistical.csv", statistical_anomaly_labels(series))
    description = {
        "scenario": scenario.name,
        "seed": seed,
        "mode": scenario.mode.value,
        "grid_kind": scenario.grid_kind,
        "bin_count": scenario.bin_count,
        "samples_per_interval": scenario.samples_per_interval,
        "learn_length": series.learn_length,
        "detect_length": series.length - series.learn_length,
        "window_seconds": window,
        "malfunctions": int(series.labels.sum()),
    }
    (out_dir / "scenario.json").write_text(json.dumps(description, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    ctx.logger.info(f"Simulated {scenario.name} (seed {seed}) into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _check_regime(series: MetricSeries, mode: Regime) -> None:
    if series.is_quantile and mode is not Regime.ASYMPTOTIC:
        raise ConfigError(f"{series.metric_id}: quantile series need mode=asymptotic", 'mode')


def cmd_train(args, ctx: CommandContext) -> int:
    run = ctx.run_config()
    if not args.data:
        raise UsageError("train needs at least one --data file")
    window = run.detection.window_seconds
    corpus_series = ctx.load_series(args.data, window)
    asymptotic = run.mode is Regime.ASYMPTOTIC

    grids: Dict[str, BinGrid] = {}
    splits: Dict[str, int] = {}
    for metric_id, series in sorted(corpus_series.items()):
        _check_regime(series, run.mode)
        splits[metric_id] = split_point(len(series), run.train_fraction)
        grids[metric_id] = make_grid(run.grid_kind, run.bin_count,
                                     series.training_values(splits[metric_id]),
                                     support=run.support, margin=run.support_margin)

    first = min(s.first_index for s in corpus_series.values())
    stop = max(s.first_index + splits[m] for m, s in corpus_series.items())
    covariates = CovariateSpec.fit(stop - first, window, run.use_age_covariate, first_index=first)

    corpus = []
    for metric_id, series in sorted(corpus_series.items()):
        T = splits[metric_id]
        rows = covariates.build(series.first_index + np.arange(T))
        corpus.append(TrainingSeries(series.observations(grids[metric_id], asymptotic, 0, T), rows, metric_id))

    trainer = Trainer(run.training)
    trainer.set_logger(ctx.logger)
    result = trainer.fit(corpus)

    bundle = ModelBundle(
        params=result.params,
        grids=grids,
        covariates=covariates,
        training=run.training.to_dict(),
        mode=run.mode.value,
        samples_per_interval=None if asymptotic else run.samples_per_interval,
        seed=run.seed,
        final_nll=result.best_loss,
    )
    save_model(args.model, bundle)
    ctx.logger.info(f"Saved model for {len(grids)} metrics to {args.model}")
    ctx.print(f"final NLL: {result.best_loss:.6f}")
    return 0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def _detection_config(run: RunConfig, bundle: ModelBundle) -> DetectionConfig:
    """Regime and interval length always come from the model."""
    return replace(run.detection, mode=Regime.parse(bundle.mode),
                   window_seconds=bundle.covariates.interval_seconds)


def _metric_model(bundle: ModelBundle, metric_id: str) -> MetricModel:
    return MetricModel(bundle.params, bundle.grid_for(metric_id), bundle.covariates)


def _pad_windows(windows: List[Window], start: int) -> List[Window]:
    """Prepend empty intervals so scoring starts right after the warm-up."""
    if not windows:
        return windows
    first = windows[0][0]
    if first < start:
        raise DataError(f"data starts at interval {first}, before the end of the history ({start})")
    empty = np.empty(0)
    return [(index, empty) for index in range(start, first)] + windows


def _batch_job(metric_id: str, series: MetricSeries, model: MetricModel, detection: DetectionConfig,
               history: Optional[MetricSeries], train_fraction: float) -> MetricJob:
    asymptotic = detection.mode is Regime.ASYMPTOTIC
    _check_regime(series, detection.mode)
    if history is not None:
        _check_regime(history, detection.mode)
        warm = history.observations(model.grid, asymptotic)
        first_index = history.first_index
        start = 0
    else:
        start = split_point(len(series), train_fraction)
        warm = series.observations(model.grid, asymptotic, 0, start)
        first_index = series.first_index
    position = first_index + len(warm)

    if asymptotic:
        observations = series.observations(model.grid, True, start)
        gap = series.first_index + start - position
        if gap < 0:
            raise DataError(f"{metric_id}: data overlaps the warm-up history")
        return MetricJob(metric_id, model, observations=[None] * gap + observations,
                         history=warm, first_index=first_index)
    windows = _pad_windows(series.windows[start:], position)
    return MetricJob(metric_id, model, windows=windows, history=warm, first_index=first_index)


def _write_records(ctx: CommandContext, path: Optional[str], records: Sequence[ScoreRecord]) -> None:
    if path:
        ctx.file_manager.write_scores(path, records)
    else:
        ctx.print(ctx.file_manager.score_header())
        ctx.file_manager.write_score_stream(ctx.out, records)


def _detect_batch(args, ctx: CommandContext, bundle: ModelBundle, detection: DetectionConfig,
                  run: RunConfig) -> int:
    if not args.data:
        raise UsageError("batch detection needs at least one --data file")
    data = ctx.load_series(args.data, detection.window_seconds)
    history = ctx.load_series(args.history, detection.window_seconds) if args.history else {}
    unknown = sorted(set(history) - set(data))
    if unknown:
        raise UsageError(f"history given for metrics without data: {', '.join(unknown)}")

    jobs = [_batch_job(metric_id, series, _metric_model(bundle, metric_id), detection,
                       history.get(metric_id), run.train_fraction)
            for metric_id, series in sorted(data.items())]
    manager = DetectionManager(detection, run.max_concurrent_metrics)
    manager.set_logger(ctx.logger)
    results = manager.detect(jobs)

    failed = [r for r in results if not r.success]
    if failed:
        for result in failed[1:]:
            ctx.logger.error(f"Metric {result.metric_id} not scored: {result.error}")
        raise failed[0].error
    records = [record for result in results for record in result.records]
    _write_records(ctx, args.out, records)
    flagged = sum(1 for r in records if r.stage is Stage.COMBINED and r.flagged)
    ctx.logger.info(f"Scored {len(records)} records, {flagged} flagged intervals")
    return 0


class StreamSession:
    """
    Line-delimited event stream scored per metric, with periodic checkpoints.

    On resume each metric skips as many of its events as its checkpoint has
    already consumed, so the same input can be replayed after a crash.
    """

    def __init__(self, ctx: CommandContext, bundle: ModelBundle, detection: DetectionConfig,
                 history: Dict[str, MetricSeries], checkpoint_dir: Optional[str],
                 checkpoint_every: int, resume: bool):
        self.ctx = ctx
        self.bundle = bundle
        self.detection = detection
        self.history = history
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.checkpoint_every = checkpoint_every
        self.resume = resume
        self.detectors: Dict[str, StreamingDetector] = {}
        self.skip: Dict[str, int] = {}
        self.last_checkpoint: Dict[str, Optional[int]] = {}
        self.dropped = 0

    def checkpoint_path(self, metric_id: str) -> Optional[Path]:
        if self.checkpoint_dir is None:
            return None
        safe = metric_id.replace("/", "_").replace("\\", "_")
        return self.checkpoint_dir / f"{safe}.ckpt.json"

    def detector(self, metric_id: str) -> StreamingDetector:
        if metric_id in self.detectors:
            return self.detectors[metric_id]
        model = _metric_model(self.bundle, metric_id)
        path = self.checkpoint_path(metric_id)
        if self.resume and path is not None and path.exists():
            detector = StreamingDetector.restore(path, model, self.detection, metric_id)
            self.ctx.logger.info(f"{metric_id}: resumed at interval {detector.state.interval_index} "
                                 f"after {detector.events_consumed} events")
        else:
            state = None
            if metric_id in self.history:
                series = self.history[metric_id]
                state = warm_up(model, self.detection, series.observations(model.grid, False),
                                first_index=series.first_index)
            detector = StreamingDetector(model, self.detection, metric_id, state)
        detector.set_logger(self.ctx.logger)
        self.detectors[metric_id] = detector
        self.skip[metric_id] = detector.events_consumed
        self.last_checkpoint[metric_id] = detector.state.interval_index
        return detector

    def maybe_checkpoint(self, detector: StreamingDetector, force: bool = False) -> None:
        path = self.checkpoint_path(detector.metric_id)
        if path is None:
            return
        position = detector.state.interval_index
        last = self.last_checkpoint.get(detector.metric_id)
        due = self.checkpoint_every > 0 and position is not None and \
            (last is None or position - last >= self.checkpoint_every)
        if force or due:
            detector.checkpoint(path)
            self.last_checkpoint[detector.metric_id] = position

    def run(self, lines, source: str, keep_open: bool = False) -> int:
        fm = self.ctx.file_manager
        for event in fm.parse_event_lines(lines, source):
            detector = self.detector(event.metric_id)
            if self.skip[event.metric_id] > 0:
                self.skip[event.metric_id] -= 1
                continue
            try:
                records = detector.push(event.timestamp, event.value)
            except LateEventError:
                self.dropped += 1
                continue
            if records:
                fm.write_score_stream(self.ctx.out, records)
            self.maybe_checkpoint(detector)

        for metric_id in sorted(self.detectors):
            detector = self.detectors[metric_id]
            if not keep_open:
                fm.write_score_stream(self.ctx.out, detector.flush())
            self.maybe_checkpoint(detector, force=True)
        if self.dropped:
            self.ctx.logger.warning(f"Dropped {self.dropped} late events")
        return 0


def _detect_stream(args, ctx: CommandContext, bundle: ModelBundle, detection: DetectionConfig,
                   run: RunConfig) -> int:
    if detection.mode is Regime.ASYMPTOTIC:
        raise ConfigError("streaming detection needs raw samples; the model is asymptotic", 'mode')
    if args.resume and not args.checkpoint_dir:
        raise UsageError("--resume needs --checkpoint-dir")
    history = ctx.load_series(args.history, detection.window_seconds) if args.history else {}
    if args.checkpoint_dir:
        ctx.file_manager.create_output_directory(args.checkpoint_dir)

    handle = None
    if args.out:
        output = Path(args.out)
        fresh = not (args.resume and output.exists())
        handle = open(output, "a" if not fresh else "w", encoding="utf-8")
        if fresh:
            handle.write(ctx.file_manager.score_header() + "\n")
    else:
        ctx.print(ctx.file_manager.score_header())

    stream_ctx = CommandContext(ctx.settings, ctx.logger, handle or ctx.out)
    session = StreamSession(stream_ctx, bundle, detection, history, args.checkpoint_dir,
                            run.checkpoint_every_windows, args.resume)
    try:
        if args.events:
            try:
                with open(args.events, "r", encoding="utf-8") as source:
                    return session.run(source, args.events, args.keep_open)
            except OSError as e:
                raise DataError(f"cannot read {args.events}: {e}", args.events) from e
        return session.run(sys.stdin, "<stdin>", args.keep_open)
    finally:
        if handle is not None:
            handle.close()


def cmd_detect(args, ctx: CommandContext) -> int:
    run = ctx.run_config()
    bundle = load_model(args.model)
    detection = _detection_config(run, bundle)
    ctx.logger.info(f"Loaded {bundle.mode} model with {len(bundle.grids)} metric grids from {args.model}")
    if args.stream:
        return _detect_stream(args, ctx, bundle, detection, run)
    return _detect_batch(args, ctx, bundle, detection, run)


# ---------------------------------------------------------------------------
# evaluate / experiment
# ---------------------------------------------------------------------------


def cmd_evaluate(args, ctx: CommandContext) -> int:
    fm = ctx.file_manager
    records = fm.read_scores(args.scores)
    metrics = sorted({r.metric_id for r in records})
    if args.metric_id:
        records = [r for r in records if r.metric_id == args.metric_id]
    elif len(metrics) > 1:
        raise UsageError(f"scores hold {len(metrics)} metrics; choose one with --metric-id")
    stage = Stage(args.stage)
    scored = sorted({r.interval_index for r in records if r.stage is stage})
    if not scored:
        raise DataError(f"{args.scores}: no {stage.value} scores to evaluate", args.scores)

    labels = fm.read_labels(args.labels)
    # labels outside the scored range belong to the training split
    label_map = {i: v for i, v in labels.items() if scored[0] <= i <= scored[-1]}
    scores, flags, truth = align(records, label_map, stage)

    exclude = None
    if args.statistical:
        statistical = fm.read_flags(args.statistical)
        exclude = np.array([statistical.get(i, False) for i in sorted(label_map)], dtype=bool)

    outcome = evaluate_scores(scores, flags, truth, seed=ctx.settings.get('seed'), exclude=exclude)
    report = EvalReport(args.name or Path(args.scores).stem, [outcome])
    ctx.print(report.format_table())
    if args.json:
        ctx.print(report.to_json())
    return 0


def cmd_experiment(args, ctx: CommandContext) -> int:
    report = run_experiment(args.scenario, args.repeats, ctx.settings, ctx.logger, args.first_seed,
                            args.learn_length, args.detect_length)
    ctx.print(report.format_table())
    if args.json:
        ctx.print(report.to_json())
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="dist-anomaly",
                             description="Distributional time-series anomaly detection")
    parser.add_argument("--config", help="JSON settings file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    parser.add_argument("--log-level", help="console log level (default from settings)")
    parser.add_argument("--log-dir", help="directory for the daily log file")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="write a synthetic scenario")
    simulate.add_argument("--scenario", required=True, help="e.g. finite-ds1-mu or asymp-ds2-sigma")
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--out", required=True, help="output directory")
    simulate.add_argument("--metric-id", default="synthetic", help="metric id in events.csv")
    simulate.add_argument("--learn-length", type=int, help="intervals before malfunctions may start")
    simulate.add_argument("--detect-length", type=int, help="intervals after the learning range")
    simulate.set_defaults(handler=cmd_simulate)

    train = commands.add_parser("train", help="fit a global model on series files")
    train.add_argument("--data", nargs="+", default=[], help="series CSV files, one per metric")
    train.add_argument("--model", required=True, help="model file to write")
    train.set_defaults(handler=cmd_train)

    detect = commands.add_parser("detect", help="score series files or an event stream")
    detect.add_argument("--model", required=True)
    detect.add_argument("--data", nargs="+", default=[], help="series CSV files (batch mode)")
    detect.add_argument("--history", nargs="+", default=[], help="warm-up series files per metric")
    detect.add_argument("--out", help="score file (default: stdout)")
    detect.add_argument("--stream", action="store_true", help="read metric_id,timestamp,value events")
    detect.add_argument("--events", help="event file for --stream (default: stdin)")
    detect.add_argument("--checkpoint-dir", help="directory for per-metric detector checkpoints")
    detect.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    detect.add_argument("--keep-open", action="store_true",
                        help="at end of input checkpoint open windows instead of closing them")
    detect.set_defaults(handler=cmd_detect)

    evaluate = commands.add_parser("evaluate", help="compare scores with labels")
    evaluate.add_argument("--scores", required=True)
    evaluate.add_argument("--labels", required=True)
    evaluate.add_argument("--statistical", help="interval_index,statistical file to exclude")
    evaluate.add_argument("--metric-id")
    evaluate.add_argument("--stage", default=Stage.COMBINED.value, choices=[s.value for s in Stage])
    evaluate.add_argument("--name", help="row label of the report")
    evaluate.add_argument("--json", action="store_true", help="also print the report as JSON")
    evaluate.set_defaults(handler=cmd_evaluate)

    experiment = commands.add_parser("experiment", help="run a synthetic scenario over several seeds")
    experiment.add_argument("--scenario", required=True)
    experiment.add_argument("--repeats", type=int, default=10)
    experiment.add_argument("--first-seed", type=int, default=0)
    experiment.add_argument("--learn-length", type=int, help="intervals used for training")
    experiment.add_argument("--detect-length", type=int, help="intervals scored after training")
    experiment.add_argument("--json", action="store_true")
    experiment.set_defaults(handler=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None, out: TextIO = None) -> int:
    """Run one command and return its exit code."""
    logger = get_logger()
    try:
        args = build_parser().parse_args(argv)
        settings = Settings.load(args.config, args.overrides)
        logger = setup_logger(log_level=args.log_level or settings.get('log_level'),
                              log_dir=args.log_dir or settings.get('log_dir') or None)
        logger.info(f"Command {args.command} started")
        code = args.handler(args, CommandContext(settings, logger, out))
        logger.info(f"Command {args.command} finished")
        return code
    except DetectorError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
