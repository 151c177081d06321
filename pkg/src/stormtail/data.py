"""Dataset plumbing: predictor stacks, synthetic data, normalization, splits.

Real archives enter through the binary shard container (see container.py);
conversion from GRIB/NetCDF is an external preprocessing step. The synthetic
generator produces long-tailed rainfall with predictors that are noisy,
deterministic transforms of the latent rain field, so a correct model can
actually learn the mapping at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy import stats as sps

from .container import read_container, read_shard_index, write_container, write_shard_index
from .errors import DataError, ValidationError
from .grids import ClassField, RainGrid, ThresholdSchema, classify

# Canonical predictor order: five variables at four pressure levels, then
# seven surface fields. "tp" is the raw NWP precipitation forecast.
CHANNEL_NAMES = (
    "t500", "t700", "t850", "t925",
    "z500", "z700", "z850", "z925",
    "u500", "u700", "u850", "u925",
    "v500", "v700", "v850", "v925",
    "q500", "q700", "q850", "q925",
    "t2m", "u10", "v10", "tp", "tcw", "cape", "mslp",
)
NUM_CHANNELS = len(CHANNEL_NAMES)
PRESSURE_LEVEL_CHANNELS = CHANNEL_NAMES[:20]
NWP_PRECIP_CHANNEL = "tp"
NWP_PRECIP_INDEX = CHANNEL_NAMES.index(NWP_PRECIP_CHANNEL)


@dataclass(frozen=True)
class PredictorStack:
    """Stack of predictor channels [C, H, W] in canonical order."""

    channels: np.ndarray
    channel_names: tuple[str, ...] = CHANNEL_NAMES

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 3:
            raise ValidationError(f"predictor stack must be [C, H, W], got {ch.shape}")
        if ch.shape[0] != len(self.channel_names):
            raise ValidationError(
                f"{ch.shape[0]} channels but {len(self.channel_names)} names"
            )
        if not np.isfinite(ch).all():
            raise ValidationError("predictor stack contains non-finite values")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))


@dataclass(frozen=True)
class Sample:
    """One forecast case: predictors plus the observed rainfall target."""

    predictors: PredictorStack
    target_rain: RainGrid
    target_class: ClassField
    timestamp: str
    lead_hours: int

    def __post_init__(self):
        ph, pw = self.predictors.channels.shape[1:]
        if (ph, pw) != (self.target_rain.height, self.target_rain.width):
            raise ValidationError(
                f"predictor dims {(ph, pw)} != target dims "
                f"{(self.target_rain.height, self.target_rain.width)}"
            )
        if self.lead_hours not in (6, 12, 18, 24):
            raise ValidationError(f"lead_hours must be one of 6/12/18/24, got {self.lead_hours}")


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel z-score statistics fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray
    channel_names: tuple[str, ...] = CHANNEL_NAMES

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.std, dtype=np.float64)
        if m.shape != s.shape or m.ndim != 1:
            raise ValidationError("mean/std must be matching 1-D arrays")
        if (s <= 0).any():
            k = int(np.argmax(s <= 0))
            raise DataError(f"non-positive std for channel {k} ({self.channel_names[k]})")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "std", s)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint chronological train/val/test index lists."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        parts = [set(self.train), set(self.val), set(self.test)]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise DataError("split partitions overlap")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic long-tailed dataset configuration.

    The base rain field has exact gamma marginals with spatial correlation
    length ``smoothness`` (Gaussian-copula construction); localized storm
    blobs of peak ~``blob_intensity`` mm arrive at Poisson rate
    ``blob_rate`` per sample. Predictors are noisy deterministic transforms
    of the rain field, repeated across the 27 canonical channels.
    """

    num_samples: int = 2000
    grid: tuple[int, int] = (32, 32)
    gamma_shape: float = 0.07
    gamma_scale: float = 14.0
    blob_rate: float = 1.0
    blob_intensity: float = 55.0
    smoothness: float = 2.0
    noise_level: float = 0.3
    seed: int = 0
    split_weights: tuple[int, int, int] = (5, 1, 1)

    def __post_init__(self):
        if self.num_samples < 1:
            raise DataError("num_samples must be >= 1")
        if self.grid[0] < 8 or self.grid[1] < 8:
            raise DataError(f"grid {self.grid} is degenerate; need at least 8x8")
        for name in ("gamma_shape", "gamma_scale", "blob_intensity", "smoothness"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be > 0")
        if self.blob_rate < 0 or self.noise_level < 0:
            raise DataError("blob_rate and noise_level must be >= 0")


DEFAULT_BOUNDARIES = ("2011-01-01T00:00:00Z", "2012-01-01T00:00:00Z")

# Which base transform feeds each canonical channel. Transform 0 is the
# mm-scale NWP precipitation analog and always backs the "tp" slot.
_TRANSFORM_OF_CHANNEL = tuple(
    0 if name == NWP_PRECIP_CHANNEL else i % 8 for i, name in enumerate(CHANNEL_NAMES)
)
_TP_NOISE_SCALE = 10.0  # mm-scale channel noise = noise_level * this
_MAX_DISPLACEMENT = 2   # NWP location error, pixels, each axis


def _parse_timestamp(ts: str) -> datetime:
    try:
        dt = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {ts!r}: {exc}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def fit_normalization(samples: list[Sample]) -> NormalizationStats:
    """Per-channel mean and population std over all pixels of all samples.

    Fit on the training split only; constant channels are rejected.
    """
    if len(samples) < 2:
        raise DataError(f"need at least 2 samples to fit normalization, got {len(samples)}")
    names = samples[0].predictors.channel_names
    stacked = np.stack([s.predictors.channels for s in samples]).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))  # population (divide-by-N) convention
    if (std < 1e-12).any():
        k = int(np.argmax(std < 1e-12))
        raise DataError(f"zero-variance channel {k} ({names[k]}); cannot z-score")
    return NormalizationStats(mean=mean, std=std, channel_names=names)


def apply_normalization(stack: PredictorStack, stats: NormalizationStats) -> PredictorStack:
    """z-score every channel: (x - mean) / std."""
    if stack.channels.shape[0] != stats.mean.shape[0]:
        raise DataError(
            f"stack has {stack.channels.shape[0]} channels, "
            f"stats were fitted for {stats.mean.shape[0]}"
        )
    out = (stack.channels - stats.mean[:, None, None]) / stats.std[:, None, None]
    return PredictorStack(channels=out, channel_names=stack.channel_names)


def _latent_rain(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Correlated field with gamma marginals, plus Poisson storm blobs."""
    h, w = cfg.grid
    z = rng.standard_normal((h, w))
    z = ndimage.gaussian_filter(z, sigma=cfg.smoothness, mode="wrap")
    sd = z.std()
    if sd > 0:
        z = z / sd
    u = np.clip(sps.norm.cdf(z), 1e-12, 1 - 1e-12)
    base = sps.gamma.ppf(u, a=cfg.gamma_shape, scale=cfg.gamma_scale)

    blobs = np.zeros((h, w))
    n_blobs = rng.poisson(cfg.blob_rate)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(1.0, 2.2)
        peak = cfg.blob_intensity * rng.uniform(0.6, 1.4)
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        blobs += peak * np.exp(-d2 / (2.0 * radius**2))
    return base + blobs


def _predictor_transforms(rain: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """The eight deterministic base transforms of the latent rain field."""
    lograin = np.log1p(rain)
    gy, gx = np.gradient(lograin)
    if cfg.noise_level > 0:
        dy, dx = rng.integers(-_MAX_DISPLACEMENT, _MAX_DISPLACEMENT + 1, size=2)
    else:
        dy = dx = 0
    nwp = np.roll(rain, (int(dy), int(dx)), axis=(0, 1))
    return [
        nwp,                                      # 0: mm-scale NWP forecast analog
        lograin,                                  # 1: log-intensity
        gy,                                       # 2: meridional gradient
        gx,                                       # 3: zonal gradient
        ndimage.gaussian_filter(lograin, 1.0),    # 4: short-range blur
        (rain >= 0.1).astype(np.float64),         # 5: wet-area indicator
        (rain >= 3.0).astype(np.float64),         # 6: moderate-rain indicator
        (rain >= 10.0).astype(np.float64),        # 7: strong-rain indicator
    ]


def _period_counts(n: int, weights: tuple[int, int, int]) -> tuple[int, int, int]:
    total = sum(weights)
    n_train = round(n * weights[0] / total)
    n_val = round(n * weights[1] / total)
    n_test = n - n_train - n_val
    return n_train, n_val, n_test


def _synthetic_timestamps(cfg: SynthConfig) -> list[str]:
    """6-hourly timestamps spread over the 2007-2010 / 2011 / 2012 periods."""
    counts = _period_counts(cfg.num_samples, cfg.split_weights)
    starts = (datetime(2007, 1, 1, tzinfo=timezone.utc),
              datetime(2011, 1, 1, tzinfo=timezone.utc),
              datetime(2012, 1, 1, tzinfo=timezone.utc))
    out: list[str] = []
    for start, count in zip(starts, counts):
        for i in range(count):
            ts = start + timedelta(hours=6 * i)
            out.append(ts.strftime("%Y-%m-%dT%H:%M:%SZ"))
    return out


def generate_synthetic(cfg: SynthConfig, schema: ThresholdSchema | None = None) -> list[Sample]:
    """Generate a reproducible long-tailed synthetic dataset.

    Equal seeds give byte-identical datasets; per-sample generators are
    independent so generation order cannot matter.
    """
    schema = schema or ThresholdSchema()
    root = np.random.default_rng(cfg.seed)
    sample_seeds = root.integers(0, 2**63 - 1, size=cfg.num_samples)
    timestamps = _synthetic_timestamps(cfg)
    lead_cycle = (6, 12, 18, 24)

    samples: list[Sample] = []
    for i in range(cfg.num_samples):
        rng = np.random.default_rng(int(sample_seeds[i]))
        rain = _latent_rain(cfg, rng)
        transforms = _predictor_transforms(rain, cfg, rng)
        channels = np.empty((NUM_CHANNELS, *cfg.grid), dtype=np.float64)
        for c, t_idx in enumerate(_TRANSFORM_OF_CHANNEL):
            scale = _TP_NOISE_SCALE if t_idx == 0 else 1.0
            noisy = transforms[t_idx] + rng.normal(0.0, cfg.noise_level * scale, size=cfg.grid)
            if t_idx == 0:
                noisy = np.maximum(noisy, 0.0)  # forecast rain stays physical
            channels[c] = noisy
        rain32 = rain.astype(np.float32).astype(np.float64)
        grid = RainGrid(values=rain32)
        samples.append(
            Sample(
                predictors=PredictorStack(channels=channels.astype(np.float32)),
                target_rain=grid,
                target_class=classify(grid, schema),
                timestamp=timestamps[i],
                lead_hours=lead_cycle[i % 4],
            )
        )
    return samples


def split_by_period(
    samples: list[Sample],
    boundaries: tuple[str, str] = DEFAULT_BOUNDARIES,
    seed: int = 0,
) -> DatasetSplit:
    """Chronological split: train < boundary0 <= val < boundary1 <= test."""
    b0, b1 = (_parse_timestamp(b) for b in boundaries)
    if b1 <= b0:
        raise DataError(f"split boundaries out of order: {boundaries}")
    train, val, test = [], [], []
    for i, s in enumerate(samples):
        ts = _parse_timestamp(s.timestamp)
        if ts < b0:
            train.append(i)
        elif ts < b1:
            val.append(i)
        else:
            test.append(i)
    for name, part in (("train", train), ("val", val), ("test", test)):
        if not part:
            raise DataError(f"{name} partition is empty under boundaries {boundaries}")
    return DatasetSplit(train=tuple(train), val=tuple(val), test=tuple(test), seed=seed)


def save_archive(samples: list[Sample], path: str | Path, samples_per_shard: int = 512) -> Path:
    """Write samples as container shards plus an index file; returns index path."""
    if not samples:
        raise DataError("cannot save an empty archive")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shards = []
    for shard_no, lo in enumerate(range(0, len(samples), samples_per_shard)):
        chunk = samples[lo : lo + samples_per_shard]
        arrays: dict[str, np.ndarray] = {}
        for j, s in enumerate(chunk):
            arrays[f"predictors/{lo + j:06d}"] = s.predictors.channels
            arrays[f"rain/{lo + j:06d}"] = s.target_rain.values
        meta = {
            "kind": "dataset-shard",
            "channel_names": list(chunk[0].predictors.channel_names),
            "timestamps": [s.timestamp for s in chunk],
            "lead_hours": [s.lead_hours for s in chunk],
            "num_classes": chunk[0].target_class.num_classes,
        }
        shard_path = path / f"shard-{shard_no:04d}.dpsg"
        write_container(shard_path, arrays, meta=meta)
        shards.append({"path": shard_path.name, "num_samples": len(chunk)})
    index_path = path / "index.json"
    write_shard_index(index_path, shards)
    return index_path


def load_archive(path: str | Path, schema: ThresholdSchema | None = None) -> list[Sample]:
    """Load an archive written by save_archive; inverse up to f32 precision.

    Negative rainfall (possible in real differenced archives) is clamped to
    zero; the clamp count is reported on the returned list's ``clamped``
    attribute via logging.
    """
    import logging

    schema = schema or ThresholdSchema()
    path = Path(path)
    index_path = path / "index.json" if path.is_dir() else path
    shards = read_shard_index(index_path)
    base = index_path.parent
    samples: list[Sample] = []
    clamped = 0
    for shard in shards:
        arrays, meta = read_container(base / shard["path"])
        names = tuple(meta["channel_names"])
        n = shard["num_samples"]
        keys = sorted(k for k in arrays if k.startswith("rain/"))
        if len(keys) != n or len(meta["timestamps"]) != n:
            raise DataError(f"shard {shard['path']}: index says {n} samples, found {len(keys)}")
        for pos, k in enumerate(keys):
            idx = k.split("/")[1]
            rain = arrays[k].astype(np.float64)
            neg = rain < 0
            if neg.any():
                clamped += int(neg.sum())
                rain = np.maximum(rain, 0.0)
            grid = RainGrid(values=rain)
            samples.append(
                Sample(
                    predictors=PredictorStack(
                        channels=arrays[f"predictors/{idx}"], channel_names=names
                    ),
                    target_rain=grid,
                    target_class=classify(grid, schema),
                    timestamp=meta["timestamps"][pos],
                    lead_hours=int(meta["lead_hours"][pos]),
                )
            )
    if clamped:
        logging.getLogger(__name__).warning(
            "clamped %d negative rainfall pixels to 0 during load", clamped
        )
    return samples
