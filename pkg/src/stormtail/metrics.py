"""Categorical and neighborhood forecast verification.

All scores derive from the 2x2 contingency table of binary event masks.
Quotients with zero denominators are reported as ``None`` (an explicit
"undefined" marker), never NaN. Tables are additive, so pooling over a
test set means summing tables and scoring once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ValidationError

SCORE_NAMES = ("csi", "ets", "pod", "bias", "mar", "far", "f1", "sedi")


@dataclass(frozen=True)
class ContingencyTable:
    """Hit / false-alarm / miss / correct-rejection counts."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0 or v != int(v):
                raise ValidationError(f"{f.name} must be a nonnegative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )


@dataclass(frozen=True)
class ScoreSet:
    """The eight categorical scores; None marks an undefined quotient."""

    csi: float | None
    ets: float | None
    pod: float | None
    bias: float | None
    mar: float | None
    far: float | None
    f1: float | None
    sedi: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in SCORE_NAMES}


def contingency(pred_mask: np.ndarray, obs_mask: np.ndarray) -> ContingencyTable:
    """Count hits, false alarms, misses, and correct rejections."""
    p = np.asarray(pred_mask)
    o = np.asarray(obs_mask)
    if p.shape != o.shape:
        raise ValidationError(f"mask shapes differ: {p.shape} vs {o.shape}")
    p = p.astype(bool)
    o = o.astype(bool)
    return ContingencyTable(
        tp=int(np.count_nonzero(p & o)),
        fp=int(np.count_nonzero(p & ~o)),
        fn=int(np.count_nonzero(~p & o)),
        tn=int(np.count_nonzero(~p & ~o)),
    )


def _ratio(num: float, den: float) -> float | None:
    return num / den if den != 0 else None


def scores(t: ContingencyTable, clamp_sedi: bool = False, sedi_delta: float = 1e-7) -> ScoreSet:
    """Compute the full score set from one contingency table.

    CSI = TP/(TP+FN+FP); ETS corrects CSI for chance hits with
    TP_random = (TP+FP)(TP+FN)/N; POD = TP/(TP+FN); Bias = (TP+FP)/(TP+FN);
    MAR = FN/(TP+FN); FAR = FP/(TP+FP); F1 = 2TP/(2TP+FP+FN); SEDI is built
    from H = POD and F = FP/(FP+TN) and is undefined at H or F in {0, 1}
    unless ``clamp_sedi`` pulls the rates into [delta, 1-delta].
    """
    tp, fp, fn, tn = t.tp, t.fp, t.fn, t.tn
    n = t.total

    csi = _ratio(tp, tp + fn + fp)
    pod = _ratio(tp, tp + fn)
    bias = _ratio(tp + fp, tp + fn)
    mar = _ratio(fn, tp + fn)
    far = _ratio(fp, tp + fp)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)

    ets = None
    if n > 0:
        tp_random = (tp + fp) * (tp + fn) / n
        ets = _ratio(tp - tp_random, tp + fn + fp - tp_random)

    h = pod
    f = _ratio(fp, fp + tn)
    sedi = None
    if h is not None and f is not None:
        if clamp_sedi:
            h = min(max(h, sedi_delta), 1 - sedi_delta)
            f = min(max(f, sedi_delta), 1 - sedi_delta)
        if 0 < h < 1 and 0 < f < 1:
            num = math.log(f) - math.log(h) + math.log(1 - h) - math.log(1 - f)
            den = math.log(f) + math.log(h) + math.log(1 - h) + math.log(1 - f)
            sedi = num / den if den != 0 else None
    return ScoreSet(csi=csi, ets=ets, pod=pod, bias=bias, mar=mar, far=far, f1=f1, sedi=sedi)


def _window_fractions(mask: np.ndarray, n: int) -> np.ndarray:
    """n x n mean event coverage per pixel; windows shrink at the borders."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    r = n // 2
    # integral image with a zero border row/col
    integ = np.zeros((h + 1, w + 1))
    integ[1:, 1:] = np.cumsum(np.cumsum(m, axis=0), axis=1)
    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows - r, 0, h)[:, None]
    r1 = np.clip(rows + r + 1, 0, h)[:, None]
    c0 = np.clip(cols - r, 0, w)[None, :]
    c1 = np.clip(cols + r + 1, 0, w)[None, :]
    total = integ[r1, c1] - integ[r0, c1] - integ[r1, c0] + integ[r0, c0]
    count = (r1 - r0) * (c1 - c0)
    return total / count


def fss(pred_mask: np.ndarray, obs_mask: np.ndarray, n: int = 5) -> float:
    """Fractions Skill Score over an n x n neighborhood.

    FSS = 1 - MSE / MSE_ref with MSE over the fraction fields and
    MSE_ref = mean(f_pred^2) + mean(f_obs^2). Two empty fields score 1.
    """
    p = np.asarray(pred_mask)
    o = np.asarray(obs_mask)
    if p.shape != o.shape:
        raise ValidationError(f"mask shapes differ: {p.shape} vs {o.shape}")
    if n < 1 or n % 2 == 0:
        raise ValidationError(f"neighborhood must be odd and positive, got {n}")
    if n > min(p.shape):
        raise ValidationError(f"neighborhood {n} exceeds grid {p.shape}")
    fp = _window_fractions(p, n)
    fo = _window_fractions(o, n)
    mse = float(np.mean((fp - fo) ** 2))
    mse_ref = float(np.mean(fp**2) + np.mean(fo**2))
    if mse_ref == 0.0:
        return 1.0
    return 1.0 - mse / mse_ref


def pooled_scores(tables: list[ContingencyTable], **kw) -> ScoreSet:
    """Sum tables over samples, then score once (pooled aggregation)."""
    total = ContingencyTable()
    for t in tables:
        total = total + t
    return scores(total, **kw)


def mean_scores(tables: list[ContingencyTable], **kw) -> ScoreSet:
    """Score each sample, then average the defined values per metric."""
    per_sample = [scores(t, **kw) for t in tables]
    out = {}
    for name in SCORE_NAMES:
        vals = [getattr(s, name) for s in per_sample if getattr(s, name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return ScoreSet(**out)


def bootstrap_ci(
    per_sample_tables: list[ContingencyTable],
    metric: str,
    n_boot: int = 1000,
    level: float = 0.95,
    rng: np.random.Generator | None = None,
) -> tuple[float, float] | None:
    """Percentile bootstrap interval for a pooled metric.

    Samples (tables) are resampled with replacement; the pooled metric is
    recomputed per replicate. Endpoints are order statistics of the
    replicate values (no interpolation). Returns None when the metric is
    undefined in more than half of the replicates.
    """
    if metric not in SCORE_NAMES:
        raise ValidationError(f"unknown metric {metric!r}")
    if len(per_sample_tables) < 2:
        raise ValidationError("bootstrap needs at least 2 samples")
    rng = rng or np.random.default_rng()
    n = len(per_sample_tables)
    vals = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        pooled = pooled_scores([per_sample_tables[i] for i in idx])
        vals.append(getattr(pooled, metric))
    defined = np.array([v for v in vals if v is not None], dtype=np.float64)
    if defined.size <= n_boot / 2:
        return None
    lo_q = (1 - level) / 2
    lo = float(np.quantile(defined, lo_q, method="lower"))
    hi = float(np.quantile(defined, 1 - lo_q, method="higher"))
    return (lo, hi)


def coverage_ranking(
    pred_masks: list[np.ndarray],
    obs_masks: list[np.ndarray],
    top_fracs: tuple[float, ...] = (0.25, 0.10, 0.05, 0.01),
    fss_n: int = 5,
) -> dict[float, dict]:
    """Score the samples with the most widespread observed events.

    Samples are ranked by observed event coverage (descending; ties broken
    by sample index), and pooled scores plus FSS are computed within the
    top ``ceil(frac * N)`` samples for each requested fraction.
    """
    if len(pred_masks) != len(obs_masks) or not obs_masks:
        raise ValidationError("need equal-length, nonempty mask lists")
    coverage = np.array([np.mean(np.asarray(o, dtype=bool)) for o in obs_masks])
    order = np.lexsort((np.arange(len(obs_masks)), -coverage))
    out: dict[float, dict] = {}
    for frac in top_fracs:
        k = math.ceil(frac * len(obs_masks))
        if k < 1:
            raise ValidationError(f"top fraction {frac} selects zero samples")
        chosen = order[:k]
        tables = [contingency(pred_masks[i], obs_masks[i]) for i in chosen]
        fss_vals = [fss(pred_masks[i], obs_masks[i], fss_n) for i in chosen]
        out[frac] = {
            "num_samples": int(k),
            "scores": pooled_scores(tables),
            "fss": float(np.mean(fss_vals)),
        }
    return out
