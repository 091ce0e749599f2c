"""Command-line interface: ``dippas {estimate-prnu,anonymize,evaluate,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .engine import DipRunConfig, EmptyPoolError, config_dict
from .evaluation import EvaluationReport, evaluate_dataset, psnr
from .fingerprint import FingerprintKind, device_ncc, estimate_prnu_mle
from .formats import atomic_write_bytes, read_fingerprint, write_dpim, write_fingerprint
from .generator import GeneratorConfig
from .io import RAW_SUFFIX, DatasetManifest, center_crop, load_and_prepare, read_image, write_png
from .pipeline import AWARE, BLIND, CorpusSpec, anonymize, fingerprint_for, make_corpus, \
    worker_count, write_corpus

logger = logging.getLogger("dippas")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")
EXIT_CONFIG = 2
EXIT_EMPTY_POOL = 3


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    mode: str
    crop_size: int
    gen_config: GeneratorConfig
    run_config: DipRunConfig
    taus: list
    block_sizes: list
    average_counts: list
    images: list = field(default_factory=list)
    prnu: Optional[str] = None
    out: Optional[str] = None
    compile: bool = False

    def __post_init__(self):
        if self.mode not in (AWARE, BLIND):
            raise ConfigError(f"mode must be {AWARE!r} or {BLIND!r}")
        if self.mode == AWARE and not self.prnu:
            raise ConfigError("aware mode requires --prnu")
        if self.mode == BLIND and self.prnu:
            raise ConfigError("--blind and --prnu are mutually exclusive")
        step = 2 ** self.gen_config.depth
        if self.crop_size % step:
            raise ConfigError(f"crop size {self.crop_size} is not divisible by 2^depth={step}")
        for b in self.block_sizes:
            if b < 1 or self.crop_size % b:
                raise ConfigError(f"crop size {self.crop_size} is not divisible by block size {b}")
        if any(l < 1 for l in self.average_counts):
            raise ConfigError("average counts must be >= 1")
        if not self.taus or not self.block_sizes or not self.average_counts:
            raise ConfigError("tau, block size and average count lists must be nonempty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(config_dict(self.gen_config, self.run_config))
        del d["gen_config"], d["run_config"]
        return d


def print_config(name: str, config: dict):
    print(f"[{name}] effective configuration:")
    print(json.dumps(config, indent=2, sort_keys=True, default=str))
    sys.stdout.flush()


def output_dir_name(tau: float, b: int, l: int) -> str:
    return f"tau{tau:g}_B{b}_L{l}"


def cmd_estimate_prnu(args) -> int:
    config = {"manifest": str(args.manifest), "device": args.device, "out": str(args.out),
              "crop_size": args.crop_size}
    print_config("estimate-prnu", config)
    manifest = DatasetManifest.load(args.manifest)
    entry = manifest.device(args.device)
    if not entry.flats:
        raise ConfigError(f"device {args.device!r} has no flat-field images")
    flats = [load_and_prepare(p, args.crop_size) for p in entry.flats]
    k = estimate_prnu_mle(flats)
    write_fingerprint(args.out, k)
    print(f"estimated PRNU of {args.device} from {len(flats)} flats -> {args.out}")
    return 0


def _anonymize_one(path: str, config: PipelineConfig) -> dict:
    image = load_and_prepare(path, config.crop_size)
    k = None
    if config.mode == AWARE:
        k = read_fingerprint(config.prnu)
        if k.kind != FingerprintKind.DEVICE_PRNU:
            raise ConfigError(f"{config.prnu} does not hold a device PRNU")
        if k.pattern.shape[:2] != image.shape[:2]:
            k = type(k)(np.ascontiguousarray(center_crop(k.pattern, config.crop_size)), k.kind)
    p = fingerprint_for(image, config.mode, k)
    stem = Path(path).stem
    out = Path(config.out)
    run_dir = out / stem
    result = anonymize(image, p, config.gen_config, config.run_config, config.taus,
                       config.block_sizes, config.average_counts, run_dir=run_dir,
                       compile=config.compile)
    outputs = {}
    for (tau, b, l), img in sorted(result.outputs.items()):
        d = out / output_dir_name(tau, b, l)
        write_png(d / f"{stem}.png", img, bits=8)
        write_dpim(d / f"{stem}{RAW_SUFFIX}", img.astype(np.float32))
        quantized = np.round(np.clip(img, 0, 1) * 255) / 255
        entry = {"psnr_db": psnr(img, image), "quantized_psnr_db": psnr(quantized, image)}
        if k is not None:
            entry["ncc_in"] = device_ncc(image, k)
            entry["ncc_out"] = device_ncc(img, k)
        outputs[output_dir_name(tau, b, l)] = entry
    meta = {
        "image": str(path), "config": config.to_dict(), "iterations": len(result.trace),
        "final_gamma": result.final_gamma, "max_psnr_db": result.max_psnr_db,
        "snapshot_counts": {f"{t:g}": m for t, m in result.snapshot_counts.items()},
        "empty_taus": result.empty_taus, "outputs": outputs,
    }
    atomic_write_bytes(run_dir / "metadata.json", json.dumps(meta, indent=2).encode())
    return meta


def _anonymize_job(args):
    path, config = args
    try:
        return path, _anonymize_one(path, config), None
    except EmptyPoolError as exc:
        return path, None, (exc.max_psnr_db, exc.tau_psnr_db)


def cmd_anonymize(args) -> int:
    if args.blind and args.prnu:
        raise ConfigError("--blind and --prnu are mutually exclusive")
    gen = GeneratorConfig(depth=args.depth, base_features=args.base_features)
    run = DipRunConfig(learning_rate=args.lr, max_iterations=args.max_iters,
                       stop_psnr_db=args.stop_psnr, tau_psnr_db=min(args.tau_psnr),
                       perturbation_sigma=args.sigma, noise_seed=args.seed,
                       weight_seed=args.seed)
    config = PipelineConfig(mode=BLIND if args.blind else AWARE, crop_size=args.crop_size,
                            gen_config=gen, run_config=run, taus=sorted(args.tau_psnr),
                            block_sizes=args.block_size, average_counts=args.avg_count,
                            images=[str(p) for p in args.image],
                            prnu=str(args.prnu) if args.prnu else None, out=str(args.out),
                            compile=args.compile)
    workers = min(worker_count(), len(config.images))
    print_config("anonymize", dict(config.to_dict(), workers=workers))
    jobs = [(p, config) for p in config.images]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_anonymize_job, jobs))
    else:
        results = [_anonymize_job(j) for j in jobs]
    status = 0
    for path, meta, empty in results:
        if empty is not None:
            print(f"error: {path}: no snapshot reached tau_psnr={empty[1]:g} dB; best PSNR "
                  f"{empty[0]:.2f} dB. Lower --tau-psnr.", file=sys.stderr)
            status = EXIT_EMPTY_POOL
            continue
        for tau in meta["empty_taus"]:
            print(f"warning: {path}: no snapshot reached tau_psnr={tau:g} dB "
                  f"(best {meta['max_psnr_db']:.2f} dB)", file=sys.stderr)
        for name, entry in meta["outputs"].items():
            line = f"{path} [{name}] PSNR {entry['psnr_db']:.2f} dB"
            if "ncc_out" in entry:
                line += f", NCC {entry['ncc_in']:.4f} -> {entry['ncc_out']:.4f}"
            print(line)
    return status


def _list_images(directory: Path) -> dict:
    """Map image id (file stem) to path; float dumps win over PNGs of the same stem."""
    found = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem not in found:
            found[p.stem] = p
    for p in sorted(directory.glob(f"*{RAW_SUFFIX}")):
        found[p.stem] = p
    return found


def _load_labels(args, originals_dir: Path) -> dict:
    path = Path(args.labels) if args.labels else originals_dir / "labels.json"
    if not path.exists():
        raise ConfigError(f"device labels not found at {path}")
    return json.loads(path.read_text())


def _match_size(image: np.ndarray, shape) -> np.ndarray:
    if image.shape[:2] == tuple(shape[:2]):
        return image
    if shape[0] != shape[1]:
        raise ConfigError(f"cannot align image {image.shape} with {shape}")
    return np.ascontiguousarray(center_crop(image, shape[0]))


def write_plots(report: EvaluationReport, stem: Path) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for entry in report.roc:
        ax.plot(entry["fpr"], entry["tpr"], label=f"{entry['device']} (AUC {entry['auc']:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    paths.append(stem.with_name(stem.name + "_roc.png"))
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for device, auc in sorted(report.per_device_auc.items()):
        vals = [r["psnr_db"] for r in report.per_image if r["device"] == device]
        ax.scatter([np.mean(vals)], [auc], label=device)
    ax.scatter([report.mean_psnr], [report.auc], marker="*", s=120, c="k", label="pooled")
    ax.set_xlabel("mean PSNR [dB]")
    ax.set_ylabel("AUC")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    paths.append(stem.with_name(stem.name + "_psnr_auc.png"))
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths


def cmd_evaluate(args) -> int:
    originals_dir, anon_dir, fp_dir = Path(args.originals), Path(args.anonymized), \
        Path(args.fingerprints)
    config = {"originals": str(originals_dir), "anonymized": str(anon_dir),
              "fingerprints": str(fp_dir), "report": str(args.report),
              "labels": str(args.labels) if args.labels else None, "edges": not args.no_edges,
              "plots": not args.no_plots}
    print_config("evaluate", config)
    for d in (originals_dir, anon_dir, fp_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    labels = _load_labels(args, originals_dir)
    anon_paths = _list_images(anon_dir)
    orig_paths = _list_images(originals_dir)
    fp_paths = {p.stem: p for p in sorted(fp_dir.glob("*.dpfp"))}

    missing = []
    for image_id in sorted(anon_paths):
        if image_id not in orig_paths:
            missing.append(f"original for {image_id!r}")
        if image_id not in labels:
            missing.append(f"device label for {image_id!r}")
        elif labels[image_id] not in fp_paths:
            missing.append(f"fingerprint {labels[image_id]}.dpfp")
    if not anon_paths:
        missing.append(f"anonymized images in {anon_dir}")
    if missing:
        raise ConfigError("missing inputs: " + "; ".join(sorted(set(missing))))

    anonymized, quantized, originals = {}, {}, {}
    for image_id, path in anon_paths.items():
        anonymized[image_id] = read_image(path)
        png = path.with_suffix(".png")
        if path.suffix == RAW_SUFFIX and png.exists():
            quantized[image_id] = read_image(png)
        originals[image_id] = _match_size(read_image(orig_paths[image_id]),
                                          anonymized[image_id].shape)
    shape = next(iter(anonymized.values())).shape
    fingerprints = {}
    for device, path in fp_paths.items():
        k = read_fingerprint(path)
        fingerprints[device] = type(k)(_match_size(k.pattern, shape), k.kind)
    extra = {"quantized": quantized} if len(quantized) == len(anonymized) else None
    report = evaluate_dataset(anonymized, originals, labels, fingerprints, config=config,
                              edges=not args.no_edges, extra_images=extra)
    atomic_write_bytes(args.report, report.to_json().encode())
    print(f"pooled AUC {report.auc:.4f}, mean PSNR {report.mean_psnr:.2f} dB over "
          f"{len(report.per_image)} images")
    if report.edge_auc is not None:
        print(f"edge AUC {report.edge_auc:.4f} (relative change "
              f"{report.edge_auc_relative_change:+.4f})")
    if not args.no_plots:
        for p in write_plots(report, Path(args.report).with_suffix("")):
            print(f"wrote {p}")
    return 0


def cmd_synth(args) -> int:
    spec = CorpusSpec(devices=args.devices, images_per_device=args.images_per_device,
                      gamma=args.gamma, theta_sigma=args.theta_sigma, seed=args.seed,
                      size=args.size, prnu_std=args.prnu_std, flats_per_device=args.flats)
    print_config("synth", dict(asdict(spec), out=str(args.out)))
    out = write_corpus(make_corpus(spec), args.out)
    print(f"wrote {spec.devices * spec.images_per_device} images and {spec.devices} "
          f"fingerprints to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dippas", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-prnu", help="estimate a device PRNU from flat-field images")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--device", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--crop-size", type=int, default=512)
    p.set_defaults(func=cmd_estimate_prnu)

    p = sub.add_parser("anonymize", help="remove PRNU traces from images")
    p.add_argument("--image", required=True, nargs="+", type=Path)
    p.add_argument("--prnu", type=Path, help="device PRNU (.dpfp) for aware mode")
    p.add_argument("--blind", action="store_true", help="inject the image's own noise residual")
    p.add_argument("--tau-psnr", type=float, nargs="+", default=[38.0])
    p.add_argument("--stop-psnr", type=float, default=39.0)
    p.add_argument("--max-iters", type=int, default=10000)
    p.add_argument("--block-size", type=int, nargs="+", default=[64])
    p.add_argument("--avg-count", type=int, nargs="+", default=[10])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma", type=float, default=0.1, help="seed perturbation std")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-features", type=int, default=512)
    p.add_argument("--crop-size", type=int, default=512)
    p.add_argument("--compile", action="store_true",
                   help="run the generator through torch.compile (faster, not bitwise equal "
                        "to eager runs)")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_anonymize)

    p = sub.add_parser("evaluate", help="score anonymized images with the PRNU detector")
    p.add_argument("--originals", required=True, type=Path)
    p.add_argument("--anonymized", required=True, type=Path)
    p.add_argument("--fingerprints", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--labels", type=Path, help="image id -> device JSON "
                   "(default: ORIGINALS/labels.json)")
    p.add_argument("--no-edges", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic multi-device corpus")
    p.add_argument("--devices", type=int, default=2)
    p.add_argument("--images-per-device", type=int, default=10)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--theta-sigma", type=float, default=0.005)
    p.add_argument("--prnu-std", type=float, default=0.2)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--flats", type=int, default=0, help="flat-field images per device")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
