"""PRNU anonymization with a deep image prior and multi-snapshot block assembly."""

__version__ = "0.1.0"

from .assembly import AssemblyConfig, assemble, partition_blocks, rank_block_candidates
from .engine import DipRunConfig, EmptyPoolError, SnapshotPool, dip_loss, run_dip
from .evaluation import EvaluationReport, auc_from_scores, edge_mask, evaluate_dataset, psnr
from .fingerprint import (DegenerateInputError, Fingerprint, FingerprintKind, SensorNoiseParams,
                          device_ncc, estimate_prnu_mle, extract_noise_residual, ncc,
                          synthesize_sensor_image)
from .generator import GeneratorConfig, MultiResUNet, build_generator

__all__ = [
    "AssemblyConfig", "DegenerateInputError", "DipRunConfig", "EmptyPoolError",
    "EvaluationReport", "Fingerprint", "FingerprintKind", "GeneratorConfig", "MultiResUNet",
    "SensorNoiseParams", "SnapshotPool", "assemble", "auc_from_scores", "build_generator",
    "device_ncc", "dip_loss", "edge_mask", "estimate_prnu_mle", "evaluate_dataset",
    "extract_noise_residual", "ncc", "partition_blocks", "psnr", "rank_block_candidates",
    "run_dip", "synthesize_sensor_image",
]
