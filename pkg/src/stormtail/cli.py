"""Command-line pipeline: datagen, train, eval, calibrate, attribute, report.

Every command reads one YAML config, writes its artifacts under --out, and
records a manifest listing the config snapshot, seeds, input hashes, and
every emitted file. Exit codes: 0 success, 2 configuration error, 3 data
or container error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .container import write_container
from .data import (
    PRESSURE_LEVEL_CHANNELS,
    generate_synthetic,
    load_archive,
    save_archive,
    split_by_period,
)
from .errors import ConfigError, ContainerError, DataError, StormtailError
from .evaluation import evaluate_dataset
from .reports import (
    REPORT_SCHEMA_VERSION,
    consolidated_report,
    metrics_rows,
    plot_channel_importance,
    plot_csi_by_threshold,
    write_comparison_csv,
    write_json,
    write_metrics_csv,
)
from .training import (
    VARIANTS,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

CACHE_ENV = "STORMTAIL_CACHE"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    out_dir: Path,
    command: str,
    cfg: RunConfig,
    outputs: list[Path],
    seeds: list[int],
    input_hashes: dict[str, str],
    deterministic: bool,
    started: float,
    tag: str = "",
) -> Path:
    manifest = {
        "schema_version": 1,
        "command": command,
        "code_version": __version__,
        "config": cfg.snapshot(),
        "seeds": seeds,
        "input_hashes": input_hashes,
        "outputs": sorted(str(p.relative_to(out_dir)) for p in outputs),
        "deterministic": deterministic,
        "wall_clock": None if deterministic else time.time() - started,
    }
    name = f"{command}{'-' + tag if tag else ''}-manifest.json"
    path = out_dir / name
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _dataset_hashes(dataset_dir: Path) -> dict[str, str]:
    index = dataset_dir / "index.json" if dataset_dir.is_dir() else dataset_dir
    hashes = {index.name: _sha256(index)}
    for shard in json.loads(index.read_text())["shards"]:
        p = index.parent / shard["path"]
        hashes[shard["path"]] = _sha256(p)
    return hashes


def _load_dataset(path: str, cfg: RunConfig):
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset not found: {path}")
    samples = load_archive(p, schema=cfg.schema)
    split = split_by_period(samples, boundaries=cfg.boundaries)
    return samples, split


def cmd_datagen(args, cfg: RunConfig) -> list[Path]:
    out = Path(args.out)
    dataset_dir = out / "dataset"
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    cache_root = os.environ.get(CACHE_ENV)
    cache_key = hashlib.sha256(
        json.dumps(cfg.snapshot()["data"] | {"seed": synth.seed}, sort_keys=True).encode()
    ).hexdigest()[:16]
    cache_dir = Path(cache_root) / cache_key if cache_root else None

    if cache_dir is not None and (cache_dir / "index.json").exists():
        shutil.copytree(cache_dir, dataset_dir, dirs_exist_ok=True)
    else:
        samples = generate_synthetic(synth, schema=cfg.schema)
        save_archive(samples, dataset_dir)
        if cache_dir is not None:
            cache_dir.parent.mkdir(parents=True, exist_ok=True)
            shutil.copytree(dataset_dir, cache_dir, dirs_exist_ok=True)
    return sorted(dataset_dir.iterdir())


def cmd_train(args, cfg: RunConfig) -> tuple[list[Path], list[int]]:
    out = Path(args.out)
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; known: {sorted(VARIANTS)}")
    samples, split = _load_dataset(args.dataset, cfg)
    train_cfg = cfg.train
    if args.deterministic:
        train_cfg = replace(train_cfg, deterministic=True)
    seeds = [args.seed] if args.seed is not None else list(train_cfg.seeds)
    in_channels = len(samples[0].predictors.channel_names)
    model_cfg = cfg.model_config(in_channels)
    outputs: list[Path] = []
    for seed in seeds:
        result = train(
            args.variant, samples, list(split.train), list(split.val), train_cfg,
            seed=seed, model_cfg=model_cfg, loss_cfg=cfg.loss, schema=cfg.schema,
        )
        ckpt_path = out / f"ckpt-{args.variant}-seed{seed}.dpsg"
        save_checkpoint(result.checkpoint, ckpt_path)
        log_path = out / f"train-{args.variant}-seed{seed}.jsonl"
        with open(log_path, "w") as fh:
            for entry in result.log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        outputs += [ckpt_path, log_path]
    return outputs, seeds


def cmd_eval(args, cfg: RunConfig) -> tuple[list[Path], dict]:
    out = Path(args.out)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(ckpt_path)
    samples, split = _load_dataset(args.dataset, cfg)
    test_samples = [samples[i] for i in split.test]
    preds = predict(ckpt, test_samples)
    summary = evaluate_dataset(
        preds, test_samples, schema=cfg.schema,
        fss_n=cfg.eval.fss_neighborhood, n_boot=cfg.eval.n_boot,
        boot_seed=cfg.eval.bootstrap_seed, ci_metrics=cfg.eval.ci_metrics,
        top_fracs=cfg.eval.top_fracs,
    )
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "variant": ckpt.variant,
        "seed": ckpt.seed,
        "summary": summary,
    }
    json_path = out / f"eval-{ckpt.variant}-seed{ckpt.seed}.json"
    write_json(json_path, doc)
    csv_path = out / f"metrics-{ckpt.variant}-seed{ckpt.seed}.csv"
    write_metrics_csv(csv_path, metrics_rows(ckpt.variant, ckpt.seed, summary))
    outputs = [json_path, csv_path]
    if args.feature_quality:
        if ckpt.kind != "model":
            raise ConfigError("feature quality needs a neural checkpoint")
        from .features import progressive_sample, quality_report
        from .training import extract_embeddings

        fq = {"schema_version": 1, "variant": ckpt.variant, "seed": ckpt.seed, "branches": {}}
        rng = np.random.default_rng(cfg.eval.bootstrap_seed)
        branches = ("backbone", "spatial", "fused") if ckpt.model_config.architecture == "dual" \
            else ("fused",)
        for branch in branches:
            pools = extract_embeddings(ckpt, test_samples[:64], branch=branch)
            sample = progressive_sample(pools, rng=rng, source_layer=f"penultimate/{branch}")
            fq["branches"][branch] = quality_report(
                sample, rng=rng, heavy_classes=tuple(sorted(cfg.schema.heavy_classes))
            )
        fq_path = out / f"feature-quality-{ckpt.variant}-seed{ckpt.seed}.json"
        write_json(fq_path, fq)
        outputs.append(fq_path)
    return outputs, {"checkpoint": _sha256(ckpt_path)}


def cmd_calibrate(args, cfg: RunConfig) -> tuple[list[Path], dict]:
    from .conformal import (
        avg_set_size,
        calibrate,
        class_conditional_picp,
        conformity_scores,
        picp,
        predict_set,
    )

    out = Path(args.out)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(ckpt_path)
    samples, split = _load_dataset(args.dataset, cfg)
    alpha = args.alpha if args.alpha is not None else cfg.conformal.alpha

    n_cal = max(1, int(round(cfg.conformal.calibration_fraction * len(split.val))))
    cal_samples = [samples[i] for i in split.val[:n_cal]]
    test_samples = [samples[i] for i in split.test]
    num_classes = cfg.schema.num_classes

    cal_preds = predict(ckpt, cal_samples)
    pooled: dict[int, list] = {k: [] for k in range(num_classes)}
    for p, s in zip(cal_preds, cal_samples):
        grouped = conformity_scores(p.probs, s.target_class.labels, num_classes)
        for k, v in grouped.items():
            pooled[k].append(v)
    scores_by_class = {
        k: np.concatenate(v) if v else np.array([]) for k, v in pooled.items()
    }
    calib = calibrate(scores_by_class, alpha, num_classes=num_classes)

    artifact_path = out / f"conformal-{ckpt.variant}-seed{ckpt.seed}.dpsg"
    write_container(
        artifact_path,
        {"q": calib.q, "counts": calib.counts.astype(np.float64)},
        meta={
            "kind": "conformal", "alpha": alpha, "variant": ckpt.variant,
            "seed": ckpt.seed, "num_classes": num_classes,
        },
        dtype="f64",
    )

    test_preds = predict(ckpt, test_samples)
    covered, sizes, labels_all, sets_all = [], [], [], []
    for p, s in zip(test_preds, test_samples):
        sets = predict_set(p.probs, calib)
        sets_all.append(sets.reshape(num_classes, -1).T)
        labels_all.append(s.target_class.labels.reshape(-1))
    sets_flat = np.concatenate(sets_all)
    labels_flat = np.concatenate(labels_all)
    report = {
        "schema_version": 1,
        "variant": ckpt.variant,
        "seed": ckpt.seed,
        "alpha": alpha,
        "num_calibration_samples": len(cal_samples),
        "picp": picp(sets_flat, labels_flat),
        "picp_per_class": class_conditional_picp(sets_flat, labels_flat, num_classes),
        "avg_set_size": avg_set_size(sets_flat),
        "q": calib.q.tolist(),
        "calibration_counts": calib.counts.tolist(),
    }
    report_path = out / f"conformal-report-{ckpt.variant}-seed{ckpt.seed}.json"
    write_json(report_path, report)
    return [artifact_path, report_path], {"checkpoint": _sha256(ckpt_path)}


def cmd_attribute(args, cfg: RunConfig) -> tuple[list[Path], dict]:
    import torch

    from .attribution import aggregate_importance, channel_attribution
    from .data import apply_normalization
    from .model import DualPathSegmenter

    out = Path(args.out)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.kind != "model":
        raise ConfigError(f"attribution needs a neural checkpoint, got kind {ckpt.kind!r}")
    samples, split = _load_dataset(args.dataset, cfg)
    reduction = args.reduction or cfg.attribution.reduction

    model = DualPathSegmenter(ckpt.model_config)
    model.load_state_dict(ckpt.state)
    model.eval()

    chosen = [samples[i] for i in split.test[: cfg.attribution.max_samples]]
    per_sample, skipped = [], 0
    for s in chosen:
        x = torch.from_numpy(
            apply_normalization(s.predictors, ckpt.stats).channels.astype(np.float32)
        )
        truth = s.target_class.labels if cfg.attribution.heavy_from_truth else None
        attr = channel_attribution(
            model, x, reduction=reduction, steps=cfg.attribution.steps,
            heavy_classes=tuple(sorted(cfg.schema.heavy_classes)),
            heavy_from_truth=truth,
        )
        if attr is None:
            skipped += 1
        else:
            per_sample.append(attr)
    if not per_sample:
        raise DataError(f"all {len(chosen)} samples were skipped by the {reduction} reduction")
    names = samples[0].predictors.channel_names
    result = aggregate_importance(
        per_sample, names, pressure_level_count=len(PRESSURE_LEVEL_CHANNELS),
        reduction=reduction, steps=cfg.attribution.steps, num_skipped=skipped,
    )
    doc = {
        "schema_version": 1,
        "variant": ckpt.variant,
        "seed": ckpt.seed,
        "reduction": result.reduction,
        "steps": result.steps,
        "baseline": result.baseline,
        "num_samples": result.num_samples,
        "num_skipped": result.num_skipped,
        "mean_abs_attribution": {
            names[i]: float(result.per_channel[i]) for i in range(len(names))
        },
        "views": result.views,
    }
    json_path = out / f"attribution-{ckpt.variant}-seed{ckpt.seed}-{reduction}.json"
    write_json(json_path, doc)
    png_path = out / f"attribution-{ckpt.variant}-seed{ckpt.seed}-{reduction}.png"
    plot_channel_importance(result.views, names, png_path)
    return [json_path, png_path], {"checkpoint": _sha256(ckpt_path)}


def cmd_report(args, cfg: RunConfig) -> tuple[list[Path], dict]:
    out = Path(args.out)
    docs, hashes = [], {}
    for inp in args.inputs:
        p = Path(inp)
        if not p.exists():
            raise DataError(f"evaluation output not found: {inp}")
        docs.append(json.loads(p.read_text()))
        hashes[p.name] = _sha256(p)
    report = consolidated_report(docs, reference_variant=args.reference)
    json_path = out / "report.json"
    write_json(json_path, report)
    csv_path = out / "comparison.csv"
    write_comparison_csv(csv_path, report)
    png_path = out / "csi_by_threshold.png"
    plot_csi_by_threshold(report, png_path)
    return [json_path, csv_path, png_path], hashes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stormtail",
        description="Long-tail-aware heavy-rainfall post-processing pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML run config (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--deterministic", action="store_true",
                       help="bit-reproducible outputs (no wall-clock in artifacts)")

    p = sub.add_parser("datagen", help="generate synthetic dataset shards")
    common(p)

    p = sub.add_parser("train", help="train one experiment variant")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", default="dpsformer", help=f"one of {sorted(VARIANTS)}")

    p = sub.add_parser("eval", help="verification metrics for a checkpoint")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feature-quality", action="store_true",
                   help="also emit the feature-separability report")

    p = sub.add_parser("calibrate", help="conformal calibration + coverage report")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha", type=float, default=None)

    p = sub.add_parser("attribute", help="integrated-gradients channel attribution")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reduction", choices=("all_pixels", "heavy_pixels"), default=None)

    p = sub.add_parser("report", help="consolidate evaluation outputs")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="eval JSON outputs")
    p.add_argument("--reference", default="raw_nwp",
                   help="variant used as the delta-SEDI reference")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        seeds: list[int] = [] if args.seed is None else [args.seed]
        input_hashes: dict[str, str] = {}
        tag = ""
        if args.command == "datagen":
            outputs = cmd_datagen(args, cfg)
            seeds = [args.seed if args.seed is not None else cfg.synth.seed]
        elif args.command == "train":
            outputs, seeds = cmd_train(args, cfg)
            input_hashes = _dataset_hashes(Path(args.dataset))
            tag = args.variant
        elif args.command == "eval":
            outputs, input_hashes = cmd_eval(args, cfg)
            input_hashes |= _dataset_hashes(Path(args.dataset))
            tag = Path(args.checkpoint).stem.removeprefix("ckpt-")
        elif args.command == "calibrate":
            outputs, input_hashes = cmd_calibrate(args, cfg)
            input_hashes |= _dataset_hashes(Path(args.dataset))
            tag = Path(args.checkpoint).stem.removeprefix("ckpt-")
        elif args.command == "attribute":
            outputs, input_hashes = cmd_attribute(args, cfg)
            input_hashes |= _dataset_hashes(Path(args.dataset))
            tag = Path(args.checkpoint).stem.removeprefix("ckpt-")
        elif args.command == "report":
            outputs, input_hashes = cmd_report(args, cfg)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
        _write_manifest(
            out, args.command, cfg, outputs, seeds, input_hashes,
            deterministic=bool(args.deterministic), started=started, tag=tag,
        )
        return EXIT_OK
    except ConfigError as exc:
        print(f"stormtail: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError) as exc:
        print(f"stormtail: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StormtailError as exc:
        print(f"stormtail: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
