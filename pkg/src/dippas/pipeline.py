"""End-to-end orchestration: synthetic corpora, anonymization over a config grid."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .assembly import AssemblyConfig, assemble, snapshot_block_nccs
from .engine import DipRunConfig, EmptyPoolError, run_dip
from .fingerprint import (Fingerprint, SensorNoiseParams, device_ncc, extract_noise_residual,
                          synthesize_sensor_image)
from .generator import GeneratorConfig
from .synth import random_prnu, random_texture

logger = logging.getLogger(__name__)

AWARE = "aware"
BLIND = "blind"


def child_seed(*keys: int) -> int:
    """Deterministic 32-bit seed derived from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class CorpusSpec:
    devices: int = 2
    images_per_device: int = 10
    gamma: float = 0.05
    theta_sigma: float = 0.005
    seed: int = 0
    size: int = 128
    channels: int = 3
    prnu_std: float = 0.2
    flats_per_device: int = 0

    def __post_init__(self):
        if self.devices < 1 or self.images_per_device < 1:
            raise ValueError("need at least one device and one image per device")
        if self.size < 16:
            raise ValueError("image size must be at least 16 pixels")
        if self.prnu_std <= 0:
            raise ValueError("prnu_std must be positive")
        if self.flats_per_device < 0:
            raise ValueError("flats_per_device must be nonnegative")
        SensorNoiseParams(self.gamma, self.theta_sigma)


@dataclass
class Corpus:
    spec: CorpusSpec
    images: dict = field(default_factory=dict)
    clean: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    flats: dict = field(default_factory=dict)


def device_name(d: int) -> str:
    return f"dev{d}"


def flat_field(size: int, channels: int, seed: int) -> np.ndarray:
    """Homogeneously lit frame: constant level with a mild radial falloff."""
    rng = np.random.default_rng(seed)
    level = rng.uniform(0.4, 0.7)
    yy, xx = np.mgrid[:size, :size] / (size - 1) - 0.5
    falloff = 1.0 - 0.1 * (yy ** 2 + xx ** 2)
    return np.repeat((level * falloff)[..., None], channels, axis=2)


def make_corpus(spec: CorpusSpec) -> Corpus:
    """Generate clean textures, per-device PRNUs and the resulting sensor images."""
    corpus = Corpus(spec)
    s, c = spec.size, spec.channels
    params = SensorNoiseParams(spec.gamma, spec.theta_sigma)
    for d in range(spec.devices):
        dev = device_name(d)
        k = random_prnu(s, s, c, std=spec.prnu_std, seed=child_seed(spec.seed, 1, d))
        corpus.fingerprints[dev] = k
        for i in range(spec.images_per_device):
            image_id = f"{dev}_{i:03d}"
            clean = random_texture(s, s, c, seed=child_seed(spec.seed, 2, d, i))
            corpus.clean[image_id] = clean
            corpus.images[image_id] = synthesize_sensor_image(
                clean, k, params, rng_seed=child_seed(spec.seed, 3, d, i))
            corpus.labels[image_id] = dev
        corpus.flats[dev] = [
            synthesize_sensor_image(flat_field(s, c, child_seed(spec.seed, 4, d, j)), k, params,
                                    rng_seed=child_seed(spec.seed, 5, d, j))
            for j in range(spec.flats_per_device)]
    return corpus


@dataclass
class AnonymizationResult:
    outputs: dict            # (tau, B, L) -> image
    empty_taus: list         # taus whose pool was empty
    snapshot_counts: dict    # tau -> M
    final_gamma: float
    trace: list
    max_psnr_db: float

    def output(self, tau, block_size, average_count) -> np.ndarray:
        return self.outputs[(tau, block_size, average_count)]


def fingerprint_for(image: np.ndarray, mode: str, k: Optional[Fingerprint]) -> Fingerprint:
    if mode == BLIND:
        return extract_noise_residual(image)
    if mode == AWARE:
        if k is None:
            raise ValueError("aware mode needs a device PRNU")
        return k
    raise ValueError(f"unknown mode {mode!r}")


def anonymize(image: np.ndarray, p: Fingerprint, gen_config: GeneratorConfig,
              run_config: DipRunConfig, taus, block_sizes, average_counts, *,
              run_dir=None, monitor=None, monitor_every: int = 50,
              compile: bool = False) -> AnonymizationResult:
    """One DIP run, then block assembly for every ``(tau, B, L)`` combination.

    The run collects snapshots at the smallest tau; larger taus reuse the pool
    filtered by PSNR.
    """
    taus = sorted(set(float(t) for t in taus))
    cfg = replace(run_config, tau_psnr_db=taus[0])
    pool = run_dip(image, p, gen_config, cfg, run_dir=run_dir, monitor=monitor,
                   monitor_every=monitor_every, compile=compile)
    outputs, empty, counts = {}, [], {}
    try:
        for tau in taus:
            view = pool.above(tau)
            counts[tau] = len(view)
            if len(view) == 0:
                empty.append(tau)
                continue
            for b in block_sizes:
                nccs = snapshot_block_nccs(view, p, b)
                for l in average_counts:
                    outputs[(tau, b, l)] = assemble(view, p, AssemblyConfig(b, l), nccs)
    finally:
        if run_dir is None:
            pool.close()
    return AnonymizationResult(outputs, empty, counts, pool.final_gamma, pool.trace,
                               max(r["psnr"] for r in pool.trace))


def _anonymize_job(args):
    image_id, image, p, gen_config, run_config, tau, b, l, k_monitor, monitor_every, compile = args
    monitor = None
    if k_monitor is not None:
        def monitor(it, out):
            return {"ncc": device_ncc(np.clip(out, 0.0, 1.0), k_monitor)}
    try:
        res = anonymize(image, p, gen_config, run_config, [tau], [b], [l], monitor=monitor,
                        monitor_every=monitor_every, compile=compile)
    except EmptyPoolError as exc:
        return image_id, None, exc.pool.trace, exc.pool.final_gamma, 0
    return image_id, res.output(tau, b, l), res.trace, res.final_gamma, res.snapshot_counts[tau]


@dataclass
class CorpusRun:
    anonymized: dict
    traces: dict
    gammas: dict
    snapshot_counts: dict
    failures: dict = field(default_factory=dict)  # image id -> best PSNR of an empty run


def worker_count(default: int = 1) -> int:
    return max(1, int(os.environ.get("DIPPAS_WORKERS", default)))


def anonymize_corpus(corpus: Corpus, mode: str, gen_config: GeneratorConfig,
                     run_config: DipRunConfig, assembly: AssemblyConfig, *,
                     monitor_true_ncc: bool = False, monitor_every: int = 50,
                     compile: bool = False, workers: Optional[int] = None) -> CorpusRun:
    """Anonymize every corpus image with one ``(tau, B, L)`` configuration.

    With ``monitor_true_ncc`` the trace of each run records the device NCC of
    the generator output against the true source PRNU. Images whose pool
    stays empty are listed in ``failures`` instead of aborting the corpus.
    """
    jobs = []
    for image_id in sorted(corpus.images):
        image = corpus.images[image_id]
        k = corpus.fingerprints[corpus.labels[image_id]]
        p = fingerprint_for(image, mode, k)
        jobs.append((image_id, image, p, gen_config, run_config, run_config.tau_psnr_db,
                     assembly.block_size, assembly.average_count,
                     k if monitor_true_ncc else None, monitor_every, compile))
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_anonymize_job, jobs))
    else:
        results = [_anonymize_job(j) for j in jobs]
    run = CorpusRun({}, {}, {}, {})
    for image_id, out, trace, gamma, m in results:
        logger.info("%s: M=%d gamma=%.4g", image_id, m, gamma)
        if out is None:
            run.failures[image_id] = max(r["psnr"] for r in trace)
        else:
            run.anonymized[image_id] = out
        run.traces[image_id] = trace
        run.gammas[image_id] = gamma
        run.snapshot_counts[image_id] = m
    return run


def corpus_config(spec: CorpusSpec) -> dict:
    return asdict(spec)


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Persist a corpus: 16-bit PNG sensor/clean images, flats, DPFP fingerprints, manifest."""
    import json

    from .formats import atomic_write_bytes, write_fingerprint
    from .io import DatasetManifest, DeviceEntry, write_png

    out = Path(out_dir)
    manifest = DatasetManifest([])
    for d in range(corpus.spec.devices):
        dev = device_name(d)
        write_fingerprint(out / "fingerprints" / f"{dev}.dpfp", corpus.fingerprints[dev])
        entry = DeviceEntry(dev)
        for j, flat in enumerate(corpus.flats.get(dev, [])):
            path = out / "flats" / dev / f"{j:03d}.png"
            write_png(path, flat, bits=16)
            entry.flats.append(str(path))
        manifest.devices.append(entry)
    for image_id in sorted(corpus.images):
        path = out / "originals" / f"{image_id}.png"
        write_png(path, corpus.images[image_id], bits=16)
        write_png(out / "clean" / f"{image_id}.png", corpus.clean[image_id], bits=16)
        manifest.device(corpus.labels[image_id]).images.append(str(path))
    atomic_write_bytes(out / "originals" / "labels.json",
                       json.dumps(corpus.labels, indent=2, sort_keys=True).encode())
    atomic_write_bytes(out / "manifest.json", manifest.to_json(root=out).encode())
    atomic_write_bytes(out / "synth_config.json",
                       json.dumps(corpus_config(corpus.spec), indent=2).encode())
    return out
