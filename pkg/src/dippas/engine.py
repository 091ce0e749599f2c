"""Fingerprint-injection deep-image-prior optimization.

The generator output ``I_phi`` is pushed through the sensor model
``I_phi * (1 + gamma * P)`` and fitted to the query image. Outputs whose PSNR
against the query clears ``tau_psnr_db`` are collected into a
:class:`SnapshotPool` for block assembly.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import tempfile
import weakref
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .fingerprint import Fingerprint, as_image
from .formats import read_dpim, write_dpim
from .generator import GeneratorConfig, build_generator, to_tensor

logger = logging.getLogger(__name__)

SEED_NOISE_STD = 0.1


class EmptyPoolError(RuntimeError):
    """No iteration reached ``tau_psnr_db``; carries the (empty) pool and its trace."""

    def __init__(self, pool: "SnapshotPool", max_psnr_db: float, tau_psnr_db: float):
        self.pool = pool
        self.max_psnr_db = max_psnr_db
        self.tau_psnr_db = tau_psnr_db
        super().__init__(
            f"no snapshot reached tau_psnr={tau_psnr_db:.2f} dB "
            f"(best PSNR {max_psnr_db:.2f} dB); lower tau_psnr")


class NonFiniteLossError(FloatingPointError):
    pass


def dip_loss(generated, target, p: Fingerprint, gamma: float) -> float:
    """Squared Frobenius misfit ``|| generated * (1 + gamma * P) - target ||^2``."""
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    generated = np.asarray(generated, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (generated.shape == target.shape == p.pattern.shape):
        raise ValueError(
            f"shape mismatch: generated {generated.shape}, target {target.shape}, "
            f"fingerprint {p.pattern.shape}")
    diff = generated * (1.0 + gamma * p.pattern) - target
    return float(np.sum(diff * diff))


def injection_loss(out: torch.Tensor, target: torch.Tensor, pattern: torch.Tensor,
                   gamma: torch.Tensor) -> torch.Tensor:
    """Differentiable counterpart of :func:`dip_loss` on ``1 x C x H x W`` tensors."""
    return ((out * (1.0 + gamma * pattern) - target) ** 2).sum()


@dataclass
class SeedNoise:
    values: np.ndarray
    base_seed: int

    @classmethod
    def draw(cls, shape, base_seed: int, std: float = SEED_NOISE_STD) -> "SeedNoise":
        rng = np.random.default_rng(base_seed)
        return cls(rng.normal(0.0, std, size=tuple(shape)), int(base_seed))


def perturb_seed(z: SeedNoise, sigma: float, iteration: int) -> SeedNoise:
    """Return ``z`` plus fresh gaussian noise keyed on ``(base_seed, iteration)``.

    The perturbation is re-drawn at every iteration and never accumulates.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return SeedNoise(z.values.copy(), z.base_seed)
    rng = np.random.default_rng([z.base_seed, int(iteration)])
    return SeedNoise(z.values + rng.normal(0.0, sigma, size=z.values.shape), z.base_seed)


@dataclass(frozen=True)
class DipRunConfig:
    learning_rate: float = 1e-3
    max_iterations: int = 10000
    stop_psnr_db: float = 39.0
    tau_psnr_db: float = 38.0
    perturbation_sigma: float = 0.1
    snapshot_capacity: int = 256
    noise_seed: int = 0
    weight_seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tau_psnr_db <= 0:
            raise ValueError("tau_psnr_db must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.perturbation_sigma < 0:
            raise ValueError("perturbation_sigma must be nonnegative")
        if self.snapshot_capacity < 0:
            raise ValueError("snapshot_capacity must be nonnegative")


@dataclass
class Snapshot:
    iteration: int
    psnr_db: float
    image: Optional[np.ndarray] = None
    path: Optional[Path] = None


class SnapshotPool:
    """Ordered snapshots of accepted generator outputs.

    The first ``capacity`` images are kept in memory; later ones are written to
    ``spill_dir/iter_<n>.dpimg`` and read back on demand. When no directory is
    given a private temporary one is created and removed with the pool.
    """

    def __init__(self, capacity: int = 256, spill_dir=None):
        self.capacity = capacity
        self.snapshots: list[Snapshot] = []
        self.final_gamma: float = float("nan")
        self.trace: list[dict] = []
        self._spill_dir = Path(spill_dir) if spill_dir is not None else None
        self._finalizer = None

    def __len__(self):
        return len(self.snapshots)

    @property
    def iterations(self) -> list[int]:
        return [s.iteration for s in self.snapshots]

    @property
    def psnrs(self) -> list[float]:
        return [s.psnr_db for s in self.snapshots]

    @property
    def loss_trace(self) -> list[tuple[int, float]]:
        return [(r["iteration"], r["J"]) for r in self.trace]

    @property
    def shape(self):
        return self.image(0).shape

    def _spill_path(self, iteration: int) -> Path:
        if self._spill_dir is None:
            tmp = tempfile.mkdtemp(prefix="dippas-snapshots-")
            self._spill_dir = Path(tmp)
            self._finalizer = weakref.finalize(self, shutil.rmtree, tmp, True)
        self._spill_dir.mkdir(parents=True, exist_ok=True)
        return self._spill_dir / f"iter_{iteration}.dpimg"

    def add(self, iteration: int, image: np.ndarray, psnr_db: float):
        if self.snapshots and iteration <= self.snapshots[-1].iteration:
            raise ValueError("snapshot iterations must be strictly increasing")
        image = np.asarray(image, dtype=np.float32)
        if len(self.snapshots) < self.capacity:
            self.snapshots.append(Snapshot(iteration, float(psnr_db), image=image))
        else:
            path = self._spill_path(iteration)
            write_dpim(path, image)
            self.snapshots.append(Snapshot(iteration, float(psnr_db), path=path))

    def image(self, index: int) -> np.ndarray:
        snap = self.snapshots[index]
        if snap.image is not None:
            return snap.image
        return read_dpim(snap.path)

    def images(self):
        for i in range(len(self.snapshots)):
            yield self.image(i)

    def above(self, tau_psnr_db: float) -> "SnapshotPool":
        """View restricted to snapshots with PSNR >= ``tau_psnr_db`` (shares storage)."""
        view = SnapshotPool(self.capacity, self._spill_dir)
        view.snapshots = [s for s in self.snapshots if s.psnr_db >= tau_psnr_db]
        view.final_gamma = self.final_gamma
        view.trace = self.trace
        view._parent = self  # keeps spilled files alive while the view exists
        return view

    def close(self):
        if self._finalizer is not None:
            self._finalizer()


def _psnr_tensor(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


Monitor = Callable[[int, np.ndarray], dict]


def run_dip(target, p: Fingerprint, gen_config: GeneratorConfig, run_config: DipRunConfig,
            *, run_dir=None, monitor: Optional[Monitor] = None, monitor_every: int = 50,
            dtype: torch.dtype = torch.float32, compile: bool = False) -> SnapshotPool:
    """Optimize a fresh generator against ``target`` with ``p`` injected.

    Each iteration perturbs the seed noise, evaluates the injection loss, takes
    one ADAM step over the weights and gamma, and projects gamma onto
    ``[0, inf)``. The output of that iteration is kept when its PSNR reaches
    ``tau_psnr_db``; the run ends once PSNR reaches ``stop_psnr_db`` or after
    ``max_iterations``.

    ``monitor(iteration, image)`` may return extra fields merged into the trace
    record every ``monitor_every`` iterations (and at iteration 1). ``compile``
    runs the generator through ``torch.compile``; results stay reproducible run
    to run but are not bitwise equal to eager execution.

    Raises:
        EmptyPoolError: no iteration reached ``tau_psnr_db``.
        NonFiniteLossError: the loss became NaN or infinite.
    """
    target = as_image(target)
    if p.pattern.shape != target.shape:
        raise ValueError(f"fingerprint {p.pattern.shape} does not match target {target.shape}")
    if gen_config.output_channels != target.shape[2]:
        raise ValueError("generator output channels do not match the target")

    run_dir = Path(run_dir) if run_dir is not None else None
    spill_dir = run_dir / "snapshots" if run_dir is not None else None
    pool = SnapshotPool(run_config.snapshot_capacity, spill_dir)

    net = build_generator(gen_config, run_config.weight_seed, dtype=dtype)
    forward = torch.compile(net) if compile else net
    h, w, _ = target.shape
    z = SeedNoise.draw((h, w, gen_config.input_channels), run_config.noise_seed)
    target_t = to_tensor(target, dtype)
    pattern_t = to_tensor(p.pattern, dtype)
    optimizer = torch.optim.Adam(net.parameters(), lr=run_config.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)

    trace_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        trace_fh = open(run_dir / "trace.jsonl", "w")

    best_psnr = -math.inf
    try:
        for it in range(1, run_config.max_iterations + 1):
            zt = to_tensor(perturb_seed(z, run_config.perturbation_sigma, it).values, dtype)
            out = forward(zt)
            loss = injection_loss(out, target_t, pattern_t, net.gamma)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NonFiniteLossError(
                    f"non-finite loss {loss_value} at iteration {it} "
                    f"(gamma={net.gamma.item():.6g})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            net.project_gamma()

            out = out.detach()
            psnr_db = _psnr_tensor(out, target_t)
            best_psnr = max(best_psnr, psnr_db)
            record = {"iteration": it, "J": loss_value, "psnr": psnr_db,
                      "gamma": net.gamma.item()}
            image = None
            if psnr_db >= run_config.tau_psnr_db or (
                    monitor is not None and (it == 1 or it % monitor_every == 0)):
                image = out[0].permute(1, 2, 0).numpy()
            if monitor is not None and (it == 1 or it % monitor_every == 0):
                record.update(monitor(it, image.astype(np.float64)))
            pool.trace.append(record)
            if trace_fh is not None:
                trace_fh.write(json.dumps(record) + "\n")

            if psnr_db >= run_config.tau_psnr_db:
                pool.add(it, image, psnr_db)
            if psnr_db >= run_config.stop_psnr_db:
                break
    finally:
        if trace_fh is not None:
            trace_fh.close()

    pool.final_gamma = net.gamma.item()
    logger.info("dip run: %d iterations, %d snapshots, best PSNR %.2f dB, gamma %.4g",
                len(pool.trace), len(pool), best_psnr, pool.final_gamma)
    if len(pool) == 0:
        raise EmptyPoolError(pool, best_psnr, run_config.tau_psnr_db)
    return pool


def config_dict(gen_config: GeneratorConfig, run_config: DipRunConfig) -> dict:
    return {"generator": asdict(gen_config), "run": asdict(run_config)}
