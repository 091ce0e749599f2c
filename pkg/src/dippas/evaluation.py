"""Anonymization metrics: PSNR, device NCC populations, ROC/AUC and edge analysis."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.ndimage import binary_dilation, sobel
from scipy.stats import rankdata

from .fingerprint import Fingerprint, as_image, device_ncc, extract_noise_residual, ncc

LUMA = np.array([0.299, 0.587, 0.114])
EDGE_PERCENTILE = 90.0


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


class Population(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class ScorePair:
    image_id: str
    device_id: str
    ncc_value: float
    population: Population


@dataclass
class RocCurve:
    fpr: list
    tpr: list
    thresholds: list
    auc: float


def _split(scores) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([s.ncc_value for s in scores if s.population == Population.POSITIVE], float)
    neg = np.array([s.ncc_value for s in scores if s.population == Population.NEGATIVE], float)
    return pos, neg


def auc_from_scores(positives, negatives) -> float:
    """Mann-Whitney AUC: P(positive > negative) with ties counted as one half."""
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def roc_auc(scores) -> RocCurve:
    """ROC curve and AUC of the detector over labelled :class:`ScorePair` values."""
    pos, neg = _split(scores)
    auc = auc_from_scores(pos, neg)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0] + [float(np.mean(pos >= t)) for t in thresholds]
    fpr = [0.0] + [float(np.mean(neg >= t)) for t in thresholds]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=[math.inf] + thresholds.tolist(), auc=auc)


@dataclass
class EdgeMask:
    mask: np.ndarray
    coverage: float
    degenerate: bool = False


def luminance(image: np.ndarray) -> np.ndarray:
    image = as_image(image)
    if image.shape[2] == 1:
        return image[..., 0]
    return image @ LUMA


def edge_mask(image, percentile: float = EDGE_PERCENTILE) -> EdgeMask:
    """Sobel-magnitude edge mask on luminance, thresholded and dilated once.

    Pixels strictly above the ``percentile`` of the gradient magnitude are kept,
    then grown by one 3x3 dilation. A flat image yields an empty, degenerate mask.
    """
    lum = luminance(image)
    mag = np.hypot(sobel(lum, axis=0, mode="reflect"), sobel(lum, axis=1, mode="reflect"))
    thr = np.percentile(mag, percentile)
    mask = mag > thr
    if not mask.any():
        return EdgeMask(mask, 0.0, degenerate=True)
    mask = binary_dilation(mask, structure=np.ones((3, 3), bool))
    return EdgeMask(mask, float(mask.mean()))


def masked_device_ncc(image, k: Fingerprint, mask: EdgeMask | np.ndarray) -> float:
    """Device NCC restricted to the masked pixels (all channels of each pixel).

    The residual is extracted from the full frame; only the correlation is
    restricted.
    """
    image = as_image(image)
    m = getattr(mask, "mask", mask)
    m = np.asarray(m, dtype=bool)
    if m.shape != image.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match image {image.shape[:2]}")
    if not m.any():
        raise ValueError("empty mask")
    residual = extract_noise_residual(image).pattern
    return ncc(residual[m], (image * k.pattern)[m])


def edge_auc_relative_change(full_auc: float, edge_auc: float) -> float:
    """Signed relative AUC change ``(edge - full) / full``."""
    if full_auc == 0:
        raise ValueError("full-image AUC is zero")
    return (edge_auc - full_auc) / full_auc


@dataclass
class EvaluationReport:
    config: dict
    per_image: list
    roc: list
    auc: float
    per_device_auc: dict = field(default_factory=dict)
    edge_auc: Optional[float] = None
    edge_auc_relative_change: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls.from_dict(json.loads(text))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr_db"] for r in self.per_image]))

    def mean_abs_true_ncc(self) -> float:
        """Mean |NCC| of each image against its own source device."""
        return float(np.mean([abs(r["ncc_by_device"][r["device"]]) for r in self.per_image]))


def score_pairs(per_image, key: str = "ncc_by_device") -> list[ScorePair]:
    """Expand per-image NCCs into one labelled score per (image, device)."""
    pairs = []
    for rec in per_image:
        for device, value in sorted(rec[key].items()):
            pop = Population.POSITIVE if device == rec["device"] else Population.NEGATIVE
            pairs.append(ScorePair(rec["id"], device, float(value), pop))
    return pairs


def _roc_entry(name: str, scores) -> dict:
    curve = roc_auc(scores)
    return {"device": name, "fpr": curve.fpr, "tpr": curve.tpr, "auc": curve.auc}


def evaluate_dataset(anonymized: Mapping[str, np.ndarray], originals: Mapping[str, np.ndarray],
                     labels: Mapping[str, str], fingerprints: Mapping[str, Fingerprint],
                     *, config: Optional[dict] = None, edges: bool = True,
                     extra_images: Optional[Mapping[str, Mapping[str, np.ndarray]]] = None,
                     ) -> EvaluationReport:
    """Score anonymized images against every device fingerprint.

    For each device, images it shot form the positive set and all other images
    the negative set. The pooled AUC uses every (image, device) pair. With
    ``edges`` enabled, NCCs are also computed on an edge mask taken from the
    original image and the pooled edge AUC is reported.

    ``extra_images`` maps a variant name (e.g. ``"quantized"``) to another set
    of anonymized images whose PSNR and NCC are recorded alongside.
    """
    missing = []
    for image_id in sorted(anonymized):
        if image_id not in originals:
            missing.append(f"original for image {image_id!r}")
        if image_id not in labels:
            missing.append(f"device label for image {image_id!r}")
        elif labels[image_id] not in fingerprints:
            missing.append(f"fingerprint for device {labels[image_id]!r}")
    if missing:
        raise ValueError("missing inputs: " + "; ".join(sorted(set(missing))))
    devices = sorted(fingerprints)
    if len(devices) < 2:
        raise ValueError("evaluation needs fingerprints of at least two devices")
    if not anonymized:
        raise ValueError("no images to evaluate")

    per_image = []
    for image_id in sorted(anonymized):
        img = as_image(anonymized[image_id])
        rec = {
            "id": image_id,
            "device": labels[image_id],
            "psnr_db": psnr(img, originals[image_id]),
            "ncc_by_device": {d: device_ncc(img, fingerprints[d]) for d in devices},
        }
        if edges:
            mask = edge_mask(originals[image_id])
            rec["edge_coverage"] = mask.coverage
            if not mask.degenerate:
                rec["edge_ncc_by_device"] = {
                    d: masked_device_ncc(img, fingerprints[d], mask) for d in devices}
        for name, variant in (extra_images or {}).items():
            v = as_image(variant[image_id])
            rec[f"{name}_psnr_db"] = psnr(v, originals[image_id])
            rec[f"{name}_ncc_by_device"] = {d: device_ncc(v, fingerprints[d]) for d in devices}
        per_image.append(rec)

    pooled = score_pairs(per_image)
    roc = [_roc_entry("pooled", pooled)]
    per_device_auc = {}
    for d in devices:
        subset = [s for s in pooled if s.device_id == d]
        if {s.population for s in subset} == {Population.POSITIVE, Population.NEGATIVE}:
            entry = _roc_entry(d, subset)
            roc.append(entry)
            per_device_auc[d] = entry["auc"]

    report = EvaluationReport(config=dict(config or {}), per_image=per_image, roc=roc,
                              auc=roc[0]["auc"], per_device_auc=per_device_auc)
    if edges and all("edge_ncc_by_device" in r for r in per_image):
        report.edge_auc = roc_auc(score_pairs(per_image, "edge_ncc_by_device")).auc
        report.edge_auc_relative_change = edge_auc_relative_change(report.auc, report.edge_auc)
    return report
