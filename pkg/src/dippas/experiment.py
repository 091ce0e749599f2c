"""Scaled synthetic end-to-end experiment: baseline detector, aware and blind anonymization.

Run as ``python -m dippas.experiment --out results.json`` to print a summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .assembly import AssemblyConfig
from .engine import DipRunConfig
from .evaluation import EvaluationReport, evaluate_dataset
from .generator import GeneratorConfig
from .pipeline import AWARE, BLIND, Corpus, CorpusRun, CorpusSpec, anonymize_corpus, make_corpus

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    depth: int = 2
    base_features: int = 16
    tau_psnr_db: float = 30.0
    stop_psnr_db: float = 35.0
    max_iterations: int = 3000
    block_size: int = 32
    average_count: int = 5
    seed: int = 0
    monitor_every: int = 50
    compile: bool = True

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(depth=self.depth, base_features=self.base_features,
                               input_channels=self.corpus.channels,
                               output_channels=self.corpus.channels)

    def run(self) -> DipRunConfig:
        return DipRunConfig(max_iterations=self.max_iterations, stop_psnr_db=self.stop_psnr_db,
                            tau_psnr_db=self.tau_psnr_db, noise_seed=self.seed,
                            weight_seed=self.seed)

    def assembly(self) -> AssemblyConfig:
        return AssemblyConfig(self.block_size, self.average_count)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModeResult:
    mode: str
    run: CorpusRun
    report: EvaluationReport | None
    seconds: float


def baseline_report(corpus: Corpus) -> EvaluationReport:
    """Detector on the untouched sensor images (identity anonymizer)."""
    return evaluate_dataset(corpus.images, corpus.images, corpus.labels, corpus.fingerprints,
                            config={"mode": "identity"})


def run_mode(corpus: Corpus, mode: str, config: ExperimentConfig) -> ModeResult:
    start = time.perf_counter()
    run = anonymize_corpus(corpus, mode, config.generator(), config.run(), config.assembly(),
                           monitor_true_ncc=True, monitor_every=config.monitor_every,
                           compile=config.compile)
    report = None
    if not run.failures:
        report = evaluate_dataset(run.anonymized, corpus.images, corpus.labels,
                                  corpus.fingerprints,
                                  config=dict(config.to_dict(), mode=mode))
    return ModeResult(mode, run, report, time.perf_counter() - start)


def ncc_reduction(report: EvaluationReport, baseline: EvaluationReport) -> float:
    """Relative drop of the mean |NCC| against the true source device."""
    return 1.0 - report.mean_abs_true_ncc() / baseline.mean_abs_true_ncc()


@dataclass
class TrendResult:
    window_means: list
    window_stderrs: list
    nonincreasing: bool
    violations: list


def ncc_window_trend(traces: dict, window: int = 500, z: float = 2.0) -> TrendResult:
    """Test that the monitored NCC does not rise from one window to the next.

    Each run's monitored NCC values are averaged inside consecutive
    ``window``-iteration windows; window means are then pooled over runs.
    A step counts as an increase only when the pooled mean rises by more than
    ``z`` standard errors of the paired per-run difference.
    """
    per_run = []
    for trace in traces.values():
        pts = [(r["iteration"], r["ncc"]) for r in trace if "ncc" in r]
        means = {}
        for it, v in pts:
            means.setdefault((it - 1) // window, []).append(v)
        per_run.append({w: float(np.mean(v)) for w, v in means.items()})
    windows = sorted(set.intersection(*(set(r) for r in per_run)))
    table = np.array([[r[w] for w in windows] for r in per_run])
    means = table.mean(axis=0)
    n = table.shape[0]
    stderrs = table.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(windows))
    violations = []
    for j in range(1, len(windows)):
        diff = table[:, j] - table[:, j - 1]
        se = diff.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        if diff.mean() > z * se:
            violations.append({"window": int(windows[j]), "rise": float(diff.mean()),
                               "stderr": float(se)})
    return TrendResult(means.tolist(), stderrs.tolist(), not violations, violations)


def loss_drops(trace: list, early: int = 1, late: int = 500) -> bool:
    by_it = {r["iteration"]: r["J"] for r in trace}
    if late not in by_it:
        # run stopped early; compare against its last iteration
        late = max(by_it)
    return by_it[late] < by_it[early]


def summarize(config: ExperimentConfig, baseline: EvaluationReport, results: dict) -> dict:
    out = {"config": config.to_dict(), "baseline_auc": baseline.auc,
           "baseline_mean_abs_ncc": baseline.mean_abs_true_ncc()}
    for mode, res in results.items():
        entry = {"seconds": res.seconds, "failures": res.run.failures,
                 "snapshot_counts": res.run.snapshot_counts, "gammas": res.run.gammas}
        if res.report is not None:
            entry.update(auc=res.report.auc, mean_psnr_db=res.report.mean_psnr,
                         mean_abs_ncc=res.report.mean_abs_true_ncc(),
                         ncc_reduction=ncc_reduction(res.report, baseline),
                         edge_auc=res.report.edge_auc,
                         edge_auc_relative_change=res.report.edge_auc_relative_change)
        trend = ncc_window_trend(res.run.traces)
        entry["ncc_window_means"] = trend.window_means
        entry["ncc_trend_nonincreasing"] = trend.nonincreasing
        out[mode] = entry
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--modes", nargs="+", default=[AWARE, BLIND], choices=[AWARE, BLIND])
    parser.add_argument("--max-iters", type=int, default=ExperimentConfig.max_iterations)
    parser.add_argument("--images-per-device", type=int, default=10)
    parser.add_argument("--no-compile", action="store_true")
    parser.add_argument("--out")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    config = ExperimentConfig(corpus=CorpusSpec(images_per_device=args.images_per_device),
                              max_iterations=args.max_iters, compile=not args.no_compile)
    print(json.dumps(config.to_dict(), indent=2), flush=True)
    corpus = make_corpus(config.corpus)
    baseline = baseline_report(corpus)
    results = {m: run_mode(corpus, m, config) for m in args.modes}
    summary = summarize(config, baseline, results)
    text = json.dumps(summary, indent=2, default=float)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
