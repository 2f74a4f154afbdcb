"""
Experiment runner: generate, train, detect and score one synthetic scenario
over several seeds.
"""

import queue
import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np

from config.settings import Settings
from detection.scoring import Regime
from detection.streaming import MetricModel, detect_observations, detect_windows, warm_up
from exceptions import UsageError
from experiments.evaluation import EvalReport, SeedResult, align, evaluate_scores
from experiments.synth import DYNAMICS, MALFUNCTIONS, LabeledSeries, SynthConfig, generate
from model.covariates import CovariateSpec
from model.dynamics import Trainer, TrainingSeries
from model.grid import BinGrid, make_grid

REGIMES = {
    # prefix: (mode, grid kind, bins, samples per interval)
    "asymp": (Regime.ASYMPTOTIC, "regular", 30, None),
    "finite": (Regime.FINITE, "quantile", 10, 60),
    "single": (Regime.SINGLE, "quantile", 100, 1),
}


@dataclass(frozen=True)
class Scenario:
    name: str
    mode: Regime
    dynamics: str
    malfunction: str
    grid_kind: str
    bin_count: int
    samples_per_interval: Optional[int]

    @classmethod
    def parse(cls, name: str) -> "Scenario":
        """``<asymp|finite|single>-<ds1|ds2>[-<none|mu|sigma|spike>]``."""
        parts = name.lower().split("-")
        if len(parts) == 2:
            parts.append("none")
        if len(parts) != 3 or parts[0] not in REGIMES or parts[1] not in DYNAMICS \
                or parts[2] not in MALFUNCTIONS:
            raise UsageError(f"unknown scenario {name!r}")
        mode, grid_kind, bins, samples = REGIMES[parts[0]]
        if parts[2] == "spike" and mode is not Regime.SINGLE:
            raise UsageError(f"spike malfunctions belong to single-sample scenarios, not {name!r}")
        return cls("-".join(parts), mode, parts[1], parts[2], grid_kind, bins, samples)

    def synth_config(self, seed: int, learn_length: Optional[int] = None,
                     detect_length: Optional[int] = None) -> SynthConfig:
        config = SynthConfig(dynamics=self.dynamics, malfunction=self.malfunction,
                             samples_per_interval=self.samples_per_interval, seed=seed)
        return replace(config, learn_length=learn_length or config.learn_length,
                       detect_length=detect_length or config.detect_length)


def scenario_grid(scenario: Scenario, series: LabeledSeries, margin: float = 0.05) -> BinGrid:
    return make_grid(scenario.grid_kind, scenario.bin_count, series.training_values(), margin=margin)


class ExperimentRunner:
    """Runs a scenario for several seeds with a bounded number of worker threads."""

    def __init__(self, scenario: Scenario, settings: Optional[Settings] = None,
                 learn_length: Optional[int] = None, detect_length: Optional[int] = None):
        self.scenario = scenario
        self.settings = settings or Settings()
        self.lengths = (learn_length, detect_length)
        self.max_concurrent = self.settings.get('max_concurrent_metrics')
        self.logger = None

    def set_logger(self, logger):
        """Set logger instance."""
        self.logger = logger

    def run_seed(self, seed: int) -> SeedResult:
        scenario = self.scenario
        series = generate(scenario.synth_config(seed, *self.lengths))
        T = series.learn_length

        grid = scenario_grid(scenario, series, self.settings.get('support_margin'))
        observations = series.observations(grid)
        # the generators have no trend; an age channel would only extrapolate
        covariates = CovariateSpec.fit(T, self.settings.get('window_seconds'), use_age=False)
        rows = covariates.build(np.arange(series.length))

        trainer = Trainer(replace(self.settings.training_config(), seed=seed))
        trainer.set_logger(self.logger)
        result = trainer.fit([TrainingSeries(observations[:T], rows[:T], f"seed{seed}")])

        detection = replace(self.settings.detection_config(), mode=scenario.mode, seed=seed)
        model = MetricModel(result.params, grid, covariates)
        state = warm_up(model, detection, observations[:T])
        if scenario.mode is Regime.ASYMPTOTIC:
            _, records = detect_observations(model, detection, observations[T:], state=state)
        else:
            _, records = detect_windows(model, detection, series.windows()[T:], state=state)

        label_map = {T + i: bool(label) for i, label in enumerate(series.labels[T:])}
        scores, flags, labels = align(records, label_map)
        outcome = evaluate_scores(scores, flags, labels, seed=seed)
        if self.logger:
            self.logger.info(f"{scenario.name} seed {seed}: FPR {outcome.fpr:.2f}% "
                             f"recall {outcome.recall} AUC {outcome.auc}")
        return outcome

    def run(self, repeats: int, first_seed: int = 0) -> EvalReport:
        """Run ``repeats`` seeds and reduce them in seed order."""
        if repeats < 1:
            raise UsageError("repeat count must be positive")
        seeds = list(range(first_seed, first_seed + repeats))
        seed_queue = queue.Queue()
        for seed in seeds:
            seed_queue.put(seed)
        results: Dict[int, SeedResult] = {}
        errors: List[BaseException] = []
        lock = threading.Lock()

        def worker_thread():
            while True:
                try:
                    seed = seed_queue.get_nowait()
                except queue.Empty:
                    break
                try:
                    outcome = self.run_seed(seed)
                    with lock:
                        results[seed] = outcome
                except Exception as e:
                    with lock:
                        errors.append(e)
                seed_queue.task_done()

        threads = []
        for _ in range(min(self.max_concurrent, len(seeds))):
            thread = threading.Thread(target=worker_thread)
            thread.start()
            threads.append(thread)
        for thread in threads:
            thread.join()

        if errors:
            raise errors[0]
        return EvalReport(self.scenario.name, [results[seed] for seed in sorted(results)])


def run_experiment(scenario: str, repeats: int, settings: Optional[Settings] = None,
                   logger=None, first_seed: int = 0, learn_length: Optional[int] = None,
                   detect_length: Optional[int] = None) -> EvalReport:
    runner = ExperimentRunner(Scenario.parse(scenario), settings, learn_length, detect_length)
    if logger is not None:
        runner.set_logger(logger)
    return runner.run(repeats, first_seed)
