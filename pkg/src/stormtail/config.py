"""Run configuration: one YAML file drives every CLI command.

The file carries a ``schema_version`` and sections for data, model, loss,
training, evaluation, conformal calibration, and attribution. Every field
has a default, so an empty-but-versioned config is valid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import SynthConfig
from .errors import ConfigError
from .grids import ThresholdSchema
from .losses import LossConfig
from .model import ModelConfig, reference_config, synthetic_config, toy_config
from .training import TrainConfig

CONFIG_SCHEMA_VERSION = 1

_MODEL_PRESETS = {
    "toy": toy_config,
    "synthetic": synthetic_config,
    "reference": reference_config,
}


@dataclass(frozen=True)
class EvalConfig:
    fss_neighborhood: int = 5
    n_boot: int = 1000
    bootstrap_seed: int = 0
    ci_metrics: tuple[str, ...] = ("csi",)
    top_fracs: tuple[float, ...] = (0.25, 0.10, 0.05, 0.01)


@dataclass(frozen=True)
class ConformalConfig:
    alpha: float = 0.05
    calibration_fraction: float = 0.5  # leading share of the val split


@dataclass(frozen=True)
class AttributionConfig:
    steps: int = 50
    reduction: str = "all_pixels"
    max_samples: int = 16
    heavy_from_truth: bool = False


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    schema: ThresholdSchema = field(default_factory=ThresholdSchema)
    model_preset: str = "synthetic"
    model_overrides: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    boundaries: tuple[str, str] = ("2011-01-01T00:00:00Z", "2012-01-01T00:00:00Z")

    def model_config(self, in_channels: int) -> ModelConfig:
        if self.model_preset not in _MODEL_PRESETS:
            raise ConfigError(
                f"unknown model preset {self.model_preset!r}; "
                f"known: {sorted(_MODEL_PRESETS)}"
            )
        overrides = dict(self.model_overrides)
        if "backbone_stages" in overrides:
            overrides["backbone_stages"] = tuple(
                tuple(s) for s in overrides["backbone_stages"]
            )
        if "decoder_dims" in overrides:
            overrides["decoder_dims"] = tuple(overrides["decoder_dims"])
        return _MODEL_PRESETS[self.model_preset](in_channels=in_channels, **overrides)

    def snapshot(self) -> dict:
        """JSON-safe snapshot for manifests."""
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "data": _synth_dict(self.synth),
            "thresholds": list(self.schema.thresholds),
            "heavy_classes": sorted(self.schema.heavy_classes),
            "model": {"preset": self.model_preset, "overrides": self.model_overrides},
            "loss": {
                "alpha": self.loss.alpha, "gamma": self.loss.gamma, "tau": self.loss.tau,
                "sigma": self.loss.sigma, "dice_smoothing": self.loss.dice_smoothing,
                "heavy_classes": list(self.loss.heavy_classes),
            },
            "train": {
                "learning_rate": self.train.learning_rate,
                "weight_decay": self.train.weight_decay,
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "seeds": list(self.train.seeds),
                "deterministic": self.train.deterministic,
                "checkpoint_every": self.train.checkpoint_every,
                "lr_schedule": self.train.lr_schedule,
            },
            "eval": asdict(self.eval),
            "conformal": asdict(self.conformal),
            "attribution": asdict(self.attribution),
            "boundaries": list(self.boundaries),
        }


def _synth_dict(s: SynthConfig) -> dict:
    return {
        "num_samples": s.num_samples, "grid": list(s.grid),
        "gamma_shape": s.gamma_shape, "gamma_scale": s.gamma_scale,
        "blob_rate": s.blob_rate, "blob_intensity": s.blob_intensity,
        "smoothness": s.smoothness, "noise_level": s.noise_level,
        "seed": s.seed, "split_weights": list(s.split_weights),
    }


def _tupled(x, n=None):
    t = tuple(x)
    if n is not None and len(t) != n:
        raise ConfigError(f"expected {n} entries, got {len(t)}")
    return t


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML run config; None yields the full defaults."""
    if path is None:
        return RunConfig()
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    version = doc.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: config schema_version {version!r} does not match "
            f"supported version {CONFIG_SCHEMA_VERSION}"
        )
    try:
        data = doc.get("data", {})
        synth = SynthConfig(
            num_samples=data.get("num_samples", 2800),
            grid=_tupled(data.get("grid", (32, 32)), 2),
            gamma_shape=data.get("gamma_shape", SynthConfig.gamma_shape),
            gamma_scale=data.get("gamma_scale", SynthConfig.gamma_scale),
            blob_rate=data.get("blob_rate", SynthConfig.blob_rate),
            blob_intensity=data.get("blob_intensity", SynthConfig.blob_intensity),
            smoothness=data.get("smoothness", SynthConfig.smoothness),
            noise_level=data.get("noise_level", SynthConfig.noise_level),
            seed=data.get("seed", 0),
            split_weights=_tupled(data.get("split_weights", (5, 1, 1)), 3),
        )
        schema = ThresholdSchema(
            thresholds=_tupled(doc.get("thresholds", ThresholdSchema().thresholds)),
            heavy_classes=frozenset(doc.get("heavy_classes", (4, 5))),
        )
        loss_doc = doc.get("loss", {})
        loss = LossConfig(
            alpha=loss_doc.get("alpha", 0.5),
            gamma=loss_doc.get("gamma", 0.7),
            tau=loss_doc.get("tau", 0.5),
            sigma=loss_doc.get("sigma", 0.5),
            dice_smoothing=loss_doc.get("dice_smoothing", 1.0),
            heavy_classes=_tupled(loss_doc.get("heavy_classes", sorted(schema.heavy_classes))),
        )
        train_doc = doc.get("train", {})
        train = TrainConfig(
            learning_rate=train_doc.get("learning_rate", 1e-3),
            weight_decay=train_doc.get("weight_decay", 1e-4),
            batch_size=train_doc.get("batch_size", 64),
            epochs=train_doc.get("epochs", 30),
            seeds=_tupled(train_doc.get("seeds", (0, 1, 2, 3, 4))),
            deterministic=train_doc.get("deterministic", False),
            checkpoint_every=train_doc.get("checkpoint_every", 1),
            lr_schedule=train_doc.get("lr_schedule", "constant"),
        )
        eval_doc = doc.get("eval", {})
        eval_cfg = EvalConfig(
            fss_neighborhood=eval_doc.get("fss_neighborhood", 5),
            n_boot=eval_doc.get("n_boot", 1000),
            bootstrap_seed=eval_doc.get("bootstrap_seed", 0),
            ci_metrics=_tupled(eval_doc.get("ci_metrics", ("csi",))),
            top_fracs=_tupled(eval_doc.get("top_fracs", (0.25, 0.10, 0.05, 0.01))),
        )
        conf_doc = doc.get("conformal", {})
        conformal = ConformalConfig(
            alpha=conf_doc.get("alpha", 0.05),
            calibration_fraction=conf_doc.get("calibration_fraction", 0.5),
        )
        attr_doc = doc.get("attribution", {})
        attribution = AttributionConfig(
            steps=attr_doc.get("steps", 50),
            reduction=attr_doc.get("reduction", "all_pixels"),
            max_samples=attr_doc.get("max_samples", 16),
            heavy_from_truth=attr_doc.get("heavy_from_truth", False),
        )
        model_doc = doc.get("model", {})
        return RunConfig(
            synth=synth,
            schema=schema,
            model_preset=model_doc.get("preset", "synthetic"),
            model_overrides=model_doc.get("overrides", {}),
            loss=loss,
            train=train,
            eval=eval_cfg,
            conformal=conformal,
            attribution=attribution,
            boundaries=_tupled(doc.get("boundaries", RunConfig.boundaries), 2),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: invalid config: {exc}") from exc
