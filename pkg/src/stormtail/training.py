"""Training loop, experiment variants, checkpoints, and prediction.

Variants cover the full dual-path model, single-backbone baselines with
the transplanted imbalance losses (weighted CE, prior adjustment, logit
noise, focal, oversampling), the fixed-resolution ablations, and the two
non-neural references (quantile mapping and the raw NWP forecast).
Checkpoint selection uses the best validation mean CSI over the heavy
classes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .container import read_container, write_container
from .data import NWP_PRECIP_INDEX, NormalizationStats, Sample, apply_normalization
from .errors import ConfigError, DataError, TrainingDivergedError, ValidationError
from .grids import RainGrid, ThresholdSchema, classify
from .metrics import contingency, scores
from .model import DualPathSegmenter, LogitsField, ModelConfig, synthetic_config
from .model.config import StageConfig
from .qm import QMModel, apply_qm, fit_qm

FOCAL_EXPONENT = 2.0
HEAVY_OVERSAMPLE_TARGET = 0.5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    deterministic: bool = False
    checkpoint_every: int = 1
    lr_schedule: str = "constant"  # constant (default) or cosine decay

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size/checkpoint_every must be >= 1 and epochs >= 0")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass(frozen=True)
class VariantSpec:
    """Architecture plus loss-mode deltas for one experiment variant."""

    name: str
    architecture: str | None  # None for non-neural variants
    loss_mode: str = "wce"    # dual | wce | la | blv | focal
    oversample_heavy: bool = False
    la_shift_at_inference: bool = False


VARIANTS: dict[str, VariantSpec] = {
    v.name: v
    for v in (
        VariantSpec("dpsformer", "dual", "dual"),
        VariantSpec("backbone_wce", "backbone", "wce"),
        VariantSpec("backbone_la", "backbone", "la"),
        VariantSpec("backbone_blv", "backbone", "blv"),
        VariantSpec("backbone_focal", "backbone", "focal"),
        VariantSpec("backbone_resample", "backbone", "wce", oversample_heavy=True),
        VariantSpec("hrf_only", "hrf", "wce"),
        VariantSpec("hrf_dualpath", "dual", "wce"),
        VariantSpec("qm", None),
        VariantSpec("raw_nwp", None),
    )
}


@dataclass
class Checkpoint:
    """Everything needed to reproduce predictions for one trained variant."""

    kind: str                       # model | qm | raw_nwp
    variant: str
    schema: ThresholdSchema
    seed: int = 0
    model_config: ModelConfig | None = None
    loss_config: L.LossConfig | None = None
    state: dict | None = None       # torch state_dict (model kind)
    stats: NormalizationStats | None = None
    class_counts: np.ndarray | None = None
    qm_model: QMModel | None = None
    la_shift_at_inference: bool = False


def adapt_config_for_architecture(cfg: ModelConfig, architecture: str) -> ModelConfig:
    """Re-target a model config at a variant's architecture.

    The decoder must reach full resolution from the architecture's feature
    stride, so its depth is adjusted: extra widths are dropped from the
    tail, missing ones repeat the last width.
    """
    start = {
        "dual": cfg.spatial_resolution_factor,
        "hrf": cfg.spatial_resolution_factor,
        "backbone": cfg.backbone_stages[0].downsample,
    }[architecture]
    need = start.bit_length()  # log2(start) + 1 entries
    dims = list(cfg.decoder_dims[:need])
    while len(dims) < need:
        dims.append(dims[-1])
    return replace(cfg, architecture=architecture, decoder_dims=tuple(dims))


def focal_loss(logits: torch.Tensor, target: torch.Tensor, exponent: float = FOCAL_EXPONENT) -> torch.Tensor:
    """Mean over pixels of -(1 - p_y)^exponent * log p_y."""
    logp = F.log_softmax(logits, dim=1)
    logp_y = logp.gather(1, target.unsqueeze(1)).squeeze(1)
    p_y = logp_y.exp()
    return (-((1.0 - p_y) ** exponent) * logp_y).mean()


def _loss_for_variant(
    spec: VariantSpec,
    out: LogitsField,
    target: torch.Tensor,
    stats: L.ClassStats,
    cfg: L.LossConfig,
    rng: torch.Generator | None,
    training: bool,
) -> tuple[torch.Tensor, dict[str, float]]:
    if spec.loss_mode == "dual":
        main = L.main_loss(out.main_logits, target, stats, cfg)
        spatial = L.spatial_loss(out.spatial_logits, target, stats, cfg, rng=rng, training=training)
        total = (1.0 - cfg.alpha) * main + cfg.alpha * spatial
        return total, {"main": float(main.detach()), "spatial": float(spatial.detach())}
    z = out.main_logits
    if spec.loss_mode == "wce":
        total = L.pixel_mean_ce(z, target, weights=L.wce_weights(stats))
    elif spec.loss_mode == "la":
        total = L.pixel_mean_ce(L.la_adjust(z, stats, cfg.tau), target)
    elif spec.loss_mode == "blv":
        zh = L.blv_perturb(z, stats, cfg.sigma, rng=rng, training=training)
        total = L.pixel_mean_ce(zh, target, weights=L.wce_weights(stats))
    elif spec.loss_mode == "focal":
        total = focal_loss(z, target)
    else:
        raise ConfigError(f"unknown loss mode {spec.loss_mode!r}")
    return total, {}


def _heavy_csi(pred_labels: np.ndarray, obs_rain: np.ndarray, schema: ThresholdSchema) -> float:
    """Mean CSI over the heavy classes; undefined scores count as 0."""
    vals = []
    for k in sorted(schema.heavy_classes):
        t = schema.thresholds[k - 1]
        table = contingency(pred_labels >= k, obs_rain >= t)
        csi = scores(table).csi
        vals.append(0.0 if csi is None else csi)
    return float(np.mean(vals))


def _epoch_order(
    rng: np.random.Generator, n: int, oversample: bool, heavy_sample: np.ndarray
) -> np.ndarray:
    if not oversample or not heavy_sample.any() or heavy_sample.all():
        return rng.permutation(n)
    f0 = heavy_sample.mean()
    t = HEAVY_OVERSAMPLE_TARGET
    w = np.where(heavy_sample, t / f0, (1.0 - t) / (1.0 - f0))
    return rng.choice(n, size=n, replace=True, p=w / w.sum())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_val_csi: float | None = None


def train(
    variant: str,
    samples: list[Sample],
    train_idx: list[int],
    val_idx: list[int],
    train_cfg: TrainConfig,
    seed: int = 0,
    model_cfg: ModelConfig | None = None,
    loss_cfg: L.LossConfig | None = None,
    schema: ThresholdSchema | None = None,
) -> TrainResult:
    """Train one variant with one seed; returns the best-val checkpoint."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; known: {sorted(VARIANTS)}")
    spec = VARIANTS[variant]
    schema = schema or ThresholdSchema()
    loss_cfg = loss_cfg or L.LossConfig(heavy_classes=tuple(sorted(schema.heavy_classes)))
    train_samples = [samples[i] for i in train_idx]
    val_samples = [samples[i] for i in val_idx]

    if spec.architecture is None:
        return _fit_reference(spec, train_samples, schema, seed)

    from .data import fit_normalization

    stats = fit_normalization(train_samples)
    class_stats = L.ClassStats.from_labels(
        [s.target_class.labels for s in train_samples], schema.num_classes
    ).floored(1)

    if train_cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    cfg = model_cfg or synthetic_config(in_channels=len(train_samples[0].predictors.channel_names))
    cfg = adapt_config_for_architecture(cfg, spec.architecture)
    model = DualPathSegmenter(cfg)
    opt = torch.optim.AdamW(
        model.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay
    )
    scheduler = None
    if train_cfg.lr_schedule == "cosine" and train_cfg.epochs > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=train_cfg.epochs)
    noise_rng = torch.Generator().manual_seed(seed + 1)
    order_rng = np.random.default_rng(seed + 2)

    x_train = torch.stack(
        [torch.from_numpy(apply_normalization(s.predictors, stats).channels.astype(np.float32))
         for s in train_samples]
    )
    y_train = torch.stack([torch.from_numpy(s.target_class.labels) for s in train_samples])
    heavy_sample = np.array(
        [bool(np.isin(s.target_class.labels, sorted(schema.heavy_classes)).any())
         for s in train_samples]
    )

    log: list[dict] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_csi: float | None = None

    def snapshot() -> Checkpoint:
        return Checkpoint(
            kind="model", variant=variant, schema=schema, seed=seed,
            model_config=cfg, loss_config=loss_cfg,
            state={k: v.detach().clone() for k, v in best_state.items()},
            stats=stats, class_counts=class_stats.counts,
            la_shift_at_inference=spec.la_shift_at_inference,
        )

    n = len(train_samples)
    for epoch in range(train_cfg.epochs):
        t0 = time.monotonic()
        model.train()
        order = _epoch_order(order_rng, n, spec.oversample_heavy, heavy_sample)
        epoch_loss = 0.0
        comp_sums: dict[str, float] = {}
        steps = 0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            opt.zero_grad()
            out = model(xb)
            loss, comps = _loss_for_variant(
                spec, out, yb, class_stats, loss_cfg, noise_rng, training=True
            )
            if not torch.isfinite(loss):
                z = out.main_logits.detach()
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {steps}",
                    diagnostics={
                        "epoch": epoch, "step": steps, "batch_indices": idx.tolist(),
                        "logit_min": float(z.min()), "logit_max": float(z.max()),
                        "logit_mean": float(z.mean()),
                    },
                )
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            for k, v in comps.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v
            steps += 1
        current_lr = opt.param_groups[0]["lr"]
        entry = {
            "epoch": epoch, "split": "train", "loss": epoch_loss / max(steps, 1),
            "lr": current_lr,
            "wall_clock": None if train_cfg.deterministic else time.monotonic() - t0,
        }
        for k, v in comp_sums.items():
            entry[f"loss_{k}"] = v / max(steps, 1)
        log.append(entry)

        val_loss, val_csi = _validate(
            model, spec, val_samples, stats, class_stats, loss_cfg, schema, train_cfg.batch_size
        )
        log.append({
            "epoch": epoch, "split": "val", "loss": val_loss, "heavy_csi": val_csi,
            "lr": current_lr,
            "wall_clock": None if train_cfg.deterministic else time.monotonic() - t0,
        })
        if best_csi is None or val_csi > best_csi:
            best_csi = val_csi
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if scheduler is not None:
            scheduler.step()
    return TrainResult(checkpoint=snapshot(), log=log, best_val_csi=best_csi)


def _validate(model, spec, val_samples, stats, class_stats, loss_cfg, schema, batch_size):
    model.eval()
    losses_sum, batches = 0.0, 0
    preds = []
    with torch.no_grad():
        for lo in range(0, len(val_samples), batch_size):
            chunk = val_samples[lo : lo + batch_size]
            xb = torch.stack(
                [torch.from_numpy(apply_normalization(s.predictors, stats).channels.astype(np.float32))
                 for s in chunk]
            )
            yb = torch.stack([torch.from_numpy(s.target_class.labels) for s in chunk])
            out = model(xb)
            loss, _ = _loss_for_variant(
                spec, out, yb, class_stats, loss_cfg, rng=None, training=False
            )
            losses_sum += float(loss)
            batches += 1
            preds.append(out.main_logits.argmax(dim=1).numpy())
    pred_labels = np.concatenate(preds)
    obs = np.stack([s.target_rain.values for s in val_samples])
    return losses_sum / max(batches, 1), _heavy_csi(pred_labels, obs, schema)


def _fit_reference(spec: VariantSpec, train_samples, schema, seed) -> TrainResult:
    """Fit the non-neural references (quantile mapping / raw NWP passthrough)."""
    if spec.name == "qm":
        if not train_samples:
            raise DataError("quantile mapping needs a nonempty training pool")
        qmm = fit_qm(
            [np.asarray(s.predictors.channels[NWP_PRECIP_INDEX], dtype=np.float64)
             for s in train_samples],
            [s.target_rain.values for s in train_samples],
        )
        ckpt = Checkpoint(kind="qm", variant="qm", schema=schema, seed=seed, qm_model=qmm)
        return TrainResult(checkpoint=ckpt, log=[])
    ckpt = Checkpoint(kind="raw_nwp", variant="raw_nwp", schema=schema, seed=seed)
    return TrainResult(checkpoint=ckpt, log=[])


@dataclass
class Prediction:
    """Per-sample probability field and the derived class decision."""

    probs: np.ndarray        # [C, H, W]
    labels: np.ndarray       # [H, W]


def predict(
    checkpoint: Checkpoint,
    samples: list[Sample],
    batch_size: int = 64,
    la_shift: bool | None = None,
) -> list[Prediction]:
    """Frozen-checkpoint prediction: probability fields plus argmax classes."""
    schema = checkpoint.schema
    if checkpoint.kind == "raw_nwp":
        out = []
        for s in samples:
            nwp = np.maximum(np.asarray(s.predictors.channels[NWP_PRECIP_INDEX], np.float64), 0.0)
            labels = classify(RainGrid(values=nwp), schema).labels
            out.append(Prediction(probs=_one_hot(labels, schema.num_classes), labels=labels))
        return out
    if checkpoint.kind == "qm":
        out = []
        for s in samples:
            nwp = np.maximum(np.asarray(s.predictors.channels[NWP_PRECIP_INDEX], np.float64), 0.0)
            mapped = apply_qm(RainGrid(values=nwp), checkpoint.qm_model)
            labels = classify(mapped, schema).labels
            out.append(Prediction(probs=_one_hot(labels, schema.num_classes), labels=labels))
        return out

    if checkpoint.stats is None or checkpoint.state is None:
        raise ValidationError("model checkpoint is missing stats or parameters")
    names = samples[0].predictors.channel_names if samples else checkpoint.stats.channel_names
    if tuple(names) != tuple(checkpoint.stats.channel_names):
        raise DataError(
            "normalization stats mismatch: checkpoint was fitted for channels "
            f"{checkpoint.stats.channel_names[:3]}... but dataset has {names[:3]}..."
        )
    model = DualPathSegmenter(checkpoint.model_config)
    model.load_state_dict(checkpoint.state)
    model.eval()
    use_la = checkpoint.la_shift_at_inference if la_shift is None else la_shift
    stats_t = None
    if use_la:
        stats_t = L.ClassStats(counts=checkpoint.class_counts)

    out = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            xb = torch.stack(
                [torch.from_numpy(
                    apply_normalization(s.predictors, checkpoint.stats).channels.astype(np.float32))
                 for s in chunk]
            )
            logits = model(xb).main_logits
            probs = torch.softmax(logits, dim=1)
            decision = logits
            if use_la:
                decision = L.la_adjust(logits, stats_t, checkpoint.loss_config.tau)
            labels = decision.argmax(dim=1)
            for b in range(len(chunk)):
                out.append(Prediction(
                    probs=probs[b].numpy().astype(np.float64),
                    labels=labels[b].numpy().astype(np.int64),
                ))
    return out


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    probs = np.zeros((num_classes, *labels.shape))
    for k in range(num_classes):
        probs[k] = labels == k
    return probs


def extract_embeddings(
    checkpoint: Checkpoint,
    samples: list[Sample],
    branch: str = "fused",
    batch_size: int = 32,
    max_per_class: int = 20_000,
) -> dict[int, np.ndarray]:
    """Pixel embeddings from a trained model, grouped by true class.

    Feature maps are upsampled bilinearly to label resolution so every
    pixel gets a vector; per-class pools are capped (first-come) to bound
    memory before progressive sampling.
    """
    if checkpoint.kind != "model":
        raise ValidationError("embedding extraction needs a neural checkpoint")
    model = DualPathSegmenter(checkpoint.model_config)
    model.load_state_dict(checkpoint.state)
    model.eval()
    pools: dict[int, list[np.ndarray]] = {}
    counts: dict[int, int] = {}
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            xb = torch.stack(
                [torch.from_numpy(
                    apply_normalization(s.predictors, checkpoint.stats).channels.astype(np.float32))
                 for s in chunk]
            )
            feats = model.penultimate_features(xb, branch=branch)
            h, w = chunk[0].target_class.labels.shape
            if feats.shape[2:] != (h, w):
                feats = torch.nn.functional.interpolate(
                    feats, size=(h, w), mode="bilinear", align_corners=False
                )
            flat = feats.permute(0, 2, 3, 1).reshape(len(chunk), -1, feats.shape[1]).numpy()
            for b, s in enumerate(chunk):
                labels = s.target_class.labels.reshape(-1)
                for k in np.unique(labels):
                    have = counts.get(int(k), 0)
                    if have >= max_per_class:
                        continue
                    vecs = flat[b][labels == k][: max_per_class - have]
                    pools.setdefault(int(k), []).append(vecs)
                    counts[int(k)] = have + len(vecs)
    return {k: np.concatenate(v) for k, v in pools.items()}


def aggregate_over_seeds(per_seed: list[dict[str, float | None]]) -> dict[str, float | None]:
    """Mean of each metric over seeds; None propagates when always undefined."""
    if not per_seed:
        raise ValidationError("nothing to aggregate")
    keys = per_seed[0].keys()
    out: dict[str, float | None] = {}
    for k in keys:
        vals = [d[k] for d in per_seed if d.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


# ---------------------------------------------------------------------------
# Checkpoint serialization (binary container with JSON meta)

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "kind": ckpt.kind,
        "variant": ckpt.variant,
        "seed": ckpt.seed,
        "schema_thresholds": list(ckpt.schema.thresholds),
        "heavy_classes": sorted(ckpt.schema.heavy_classes),
        "la_shift_at_inference": ckpt.la_shift_at_inference,
    }
    arrays: dict[str, np.ndarray] = {}
    dtype = "f32"
    if ckpt.kind == "model":
        mc = ckpt.model_config
        meta["model_config"] = {
            "in_channels": mc.in_channels,
            "num_classes": mc.num_classes,
            "backbone_stages": [
                [s.embed_dim, s.depth, s.num_heads, s.downsample, s.sr_ratio]
                for s in mc.backbone_stages
            ],
            "spatial_branch_dim": mc.spatial_branch_dim,
            "spatial_branch_depth": mc.spatial_branch_depth,
            "spatial_resolution_factor": mc.spatial_resolution_factor,
            "fusion_groups": mc.fusion_groups,
            "decoder_dims": list(mc.decoder_dims),
            "ffn_expansion": mc.ffn_expansion,
            "architecture": mc.architecture,
        }
        lc = ckpt.loss_config
        meta["loss_config"] = {
            "alpha": lc.alpha, "gamma": lc.gamma, "tau": lc.tau, "sigma": lc.sigma,
            "dice_smoothing": lc.dice_smoothing, "heavy_classes": list(lc.heavy_classes),
        }
        meta["normalization"] = {
            "mean": ckpt.stats.mean.tolist(),
            "std": ckpt.stats.std.tolist(),
            "channel_names": list(ckpt.stats.channel_names),
        }
        meta["class_counts"] = np.asarray(ckpt.class_counts).tolist()
        arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in ckpt.state.items()}
    elif ckpt.kind == "qm":
        dtype = "f64"
        arrays = {
            "source_quantiles": ckpt.qm_model.source_quantiles,
            "target_quantiles": ckpt.qm_model.target_quantiles,
        }
    write_container(path, arrays, meta=meta, dtype=dtype)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_container(path)
    schema = ThresholdSchema(
        thresholds=tuple(meta["schema_thresholds"]),
        heavy_classes=frozenset(meta["heavy_classes"]),
    )
    kind = meta["kind"]
    if kind == "raw_nwp":
        return Checkpoint(kind=kind, variant=meta["variant"], schema=schema, seed=meta["seed"])
    if kind == "qm":
        return Checkpoint(
            kind=kind, variant=meta["variant"], schema=schema, seed=meta["seed"],
            qm_model=QMModel(
                source_quantiles=arrays["source_quantiles"],
                target_quantiles=arrays["target_quantiles"],
            ),
        )
    mc = meta["model_config"]
    model_cfg = ModelConfig(
        in_channels=mc["in_channels"],
        num_classes=mc["num_classes"],
        backbone_stages=tuple(StageConfig(*s) for s in mc["backbone_stages"]),
        spatial_branch_dim=mc["spatial_branch_dim"],
        spatial_branch_depth=mc["spatial_branch_depth"],
        spatial_resolution_factor=mc["spatial_resolution_factor"],
        fusion_groups=mc["fusion_groups"],
        decoder_dims=tuple(mc["decoder_dims"]),
        ffn_expansion=mc["ffn_expansion"],
        architecture=mc["architecture"],
    )
    lc = meta["loss_config"]
    loss_cfg = L.LossConfig(
        alpha=lc["alpha"], gamma=lc["gamma"], tau=lc["tau"], sigma=lc["sigma"],
        dice_smoothing=lc["dice_smoothing"], heavy_classes=tuple(lc["heavy_classes"]),
    )
    stats = NormalizationStats(
        mean=np.array(meta["normalization"]["mean"]),
        std=np.array(meta["normalization"]["std"]),
        channel_names=tuple(meta["normalization"]["channel_names"]),
    )
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items()}
    return Checkpoint(
        kind="model", variant=meta["variant"], schema=schema, seed=meta["seed"],
        model_config=model_cfg, loss_config=loss_cfg, state=state, stats=stats,
        class_counts=np.array(meta["class_counts"], dtype=np.int64),
        la_shift_at_inference=meta["la_shift_at_inference"],
    )
