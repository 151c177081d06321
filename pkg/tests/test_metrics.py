import math

import numpy as np
import pytest

from stormtail.errors import ValidationError
from stormtail.metrics import (
    ContingencyTable,
    bootstrap_ci,
    contingency,
    coverage_ranking,
    fss,
    mean_scores,
    pooled_scores,
    scores,
)

# ---------------------------------------------------------------------------
# Independent loop-based references (kept deliberately dumb)


def loop_contingency(pred, obs):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, o = bool(pred[i, j]), bool(obs[i, j])
            if p and o:
                tp += 1
            elif p and not o:
                fp += 1
            elif not p and o:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def loop_scores(tp, fp, fn, tn):
    n = tp + fp + fn + tn
    out = {}
    out["csi"] = tp / (tp + fn + fp) if tp + fn + fp else None
    out["pod"] = tp / (tp + fn) if tp + fn else None
    out["bias"] = (tp + fp) / (tp + fn) if tp + fn else None
    out["mar"] = fn / (tp + fn) if tp + fn else None
    out["far"] = fp / (tp + fp) if tp + fp else None
    out["f1"] = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None
    if n:
        tp_r = (tp + fp) * (tp + fn) / n
        den = tp + fn + fp - tp_r
        out["ets"] = (tp - tp_r) / den if den else None
    else:
        out["ets"] = None
    h = out["pod"]
    f = fp / (fp + tn) if fp + tn else None
    if h is None or f is None or not (0 < h < 1) or not (0 < f < 1):
        out["sedi"] = None
    else:
        num = math.log(f) - math.log(h) + math.log(1 - h) - math.log(1 - f)
        den = math.log(f) + math.log(h) + math.log(1 - h) + math.log(1 - f)
        out["sedi"] = num / den if den else None
    return out


def loop_fss(pred, obs, n):
    h, w = pred.shape
    r = n // 2

    def frac(mask, i, j):
        total = 0
        count = 0
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w:
                    total += int(mask[ii, jj])
                    count += 1
        return total / count

    fp = np.array([[frac(pred, i, j) for j in range(w)] for i in range(h)])
    fo = np.array([[frac(obs, i, j) for j in range(w)] for i in range(h)])
    mse = ((fp - fo) ** 2).mean()
    ref = (fp**2).mean() + (fo**2).mean()
    return 1.0 if ref == 0 else 1.0 - mse / ref


# ---------------------------------------------------------------------------


class TestContingency:
    def test_hand_counts(self):
        pred = np.array([[1, 0], [0, 0]])
        obs = np.array([[1, 1], [0, 0]])
        t = contingency(pred, obs)
        assert (t.tp, t.fn, t.fp, t.tn) == (1, 1, 0, 2)

    def test_perfect_and_complement(self, rng):
        obs = rng.integers(0, 2, size=(6, 6))
        t = contingency(obs, obs)
        assert t.fp == 0 and t.fn == 0
        t2 = contingency(1 - obs, obs)
        assert t2.tp == 0 and t2.tn == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            contingency(np.zeros((2, 2)), np.zeros((3, 3)))


class TestScores:
    def test_spec_spot_values(self):
        s = scores(ContingencyTable(tp=1, fn=1, fp=0, tn=2))
        assert s.csi == 0.5
        assert s.pod == 0.5
        assert s.far == 0.0
        assert s.bias == 0.5
        assert s.mar == 0.5
        assert s.f1 == pytest.approx(2 / 3, abs=0)
        assert s.ets == pytest.approx(1 / 3, abs=1e-15)

    def test_perfect_forecast(self):
        s = scores(ContingencyTable(tp=5, fn=0, fp=0, tn=7))
        assert (s.csi, s.ets, s.pod, s.f1) == (1.0, 1.0, 1.0, 1.0)
        assert s.bias == 1.0 and s.mar == 0.0 and s.far == 0.0

    def test_sedi_zero_when_h_equals_f(self):
        # H = 2/4, F = 3/6
        s = scores(ContingencyTable(tp=2, fn=2, fp=3, tn=3))
        assert s.sedi == pytest.approx(0.0, abs=1e-15)

    def test_undefined_marker_not_nan(self):
        s = scores(ContingencyTable(tp=0, fn=0, fp=0, tn=4))
        assert s.csi is None and s.pod is None and s.bias is None
        assert s.sedi is None  # H undefined
        for v in s.as_dict().values():
            assert v is None or not math.isnan(v)

    def test_identities(self, rng):
        for _ in range(100):
            t = ContingencyTable(*(int(x) for x in rng.integers(0, 30, size=4)))
            s = scores(t)
            if s.pod is not None and s.mar is not None:
                assert abs(s.mar - (1 - s.pod)) < 1e-12
            if s.csi is not None and s.f1 is not None:
                assert abs(s.f1 - 2 * s.csi / (1 + s.csi)) < 1e-12

    def test_oracle_equivalence_200_pairs(self, rng):
        for _ in range(200):
            pred = rng.integers(0, 2, size=(16, 16))
            obs = rng.integers(0, 2, size=(16, 16))
            t = contingency(pred, obs)
            assert (t.tp, t.fp, t.fn, t.tn) == tuple(
                loop_contingency(pred, obs)[i] for i in (0, 1, 2, 3)
            )
            expected = loop_scores(t.tp, t.fp, t.fn, t.tn)
            got = scores(t).as_dict()
            for name, want in expected.items():
                if want is None:
                    assert got[name] is None, name
                else:
                    assert got[name] == pytest.approx(want, abs=1e-12), name


class TestFss:
    def test_identical_nonempty_fields(self, rng):
        mask = rng.integers(0, 2, size=(9, 9))
        mask[0, 0] = 1
        assert fss(mask, mask, 3) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_singletons_n1(self):
        pred = np.zeros((7, 7), dtype=int)
        obs = np.zeros((7, 7), dtype=int)
        pred[0, 0] = 1
        obs[6, 6] = 1
        assert fss(pred, obs, 1) == pytest.approx(0.0, abs=1e-12)

    def test_both_empty_defined_as_one(self):
        z = np.zeros((5, 5), dtype=int)
        assert fss(z, z, 3) == 1.0

    def test_brute_force_oracle(self, rng):
        for n in (1, 3, 5):
            for _ in range(20):
                pred = rng.integers(0, 2, size=(9, 9))
                obs = rng.integers(0, 2, size=(9, 9))
                assert fss(pred, obs, n) == pytest.approx(loop_fss(pred, obs, n), abs=1e-10)

    def test_bounds(self, rng):
        for _ in range(50):
            pred = rng.integers(0, 2, size=(8, 8))
            obs = rng.integers(0, 2, size=(8, 8))
            v = fss(pred, obs, 3)
            assert 0.0 <= v <= 1.0

    def test_window_validation(self):
        z = np.zeros((5, 5))
        with pytest.raises(ValidationError):
            fss(z, z, 7)
        with pytest.raises(ValidationError):
            fss(z, z, 2)


class TestBootstrap:
    def test_identical_samples_zero_width(self, rng):
        t = ContingencyTable(tp=3, fp=1, fn=2, tn=10)
        ci = bootstrap_ci([t] * 8, "csi", n_boot=200, rng=rng)
        assert ci[0] == ci[1] == pytest.approx(3 / 6)

    def test_seeded_reproducible(self):
        tables = [
            ContingencyTable(tp=i, fp=1, fn=2, tn=10 + i) for i in range(6)
        ]
        a = bootstrap_ci(tables, "csi", rng=np.random.default_rng(5))
        b = bootstrap_ci(tables, "csi", rng=np.random.default_rng(5))
        assert a == b

    def test_two_sample_support_enumeration(self, rng):
        t1 = ContingencyTable(tp=4, fp=0, fn=0, tn=12)
        t2 = ContingencyTable(tp=1, fp=3, fn=3, tn=9)
        # the 3 possible resamples: {t1,t1}, {t1,t2} (either order), {t2,t2}
        support = {
            pooled_scores([a, b]).csi
            for a, b in [(t1, t1), (t1, t2), (t2, t2)]
        }
        ci = bootstrap_ci([t1, t2], "csi", n_boot=1000, rng=rng)
        assert ci[0] in support and ci[1] in support

    def test_mostly_undefined_returns_none(self, rng):
        empty = ContingencyTable(tp=0, fp=0, fn=0, tn=16)
        ci = bootstrap_ci([empty, empty, empty], "csi", n_boot=100, rng=rng)
        assert ci is None


class TestAggregation:
    def test_pooled_vs_mean_differ_in_general(self):
        tables = [
            ContingencyTable(tp=1, fp=0, fn=0, tn=3),
            ContingencyTable(tp=0, fp=2, fn=2, tn=0),
        ]
        pooled = pooled_scores(tables)
        mean = mean_scores(tables)
        assert pooled.csi == pytest.approx(1 / 5)
        assert mean.csi == pytest.approx((1.0 + 0.0) / 2)


class TestCoverageRanking:
    def _masks(self, coverages, size=10):
        obs = []
        for c in coverages:
            m = np.zeros(size * size, dtype=int)
            m[: int(c * size * size)] = 1
            obs.append(m.reshape(size, size))
        pred = [o.copy() for o in obs]
        return pred, obs

    def test_ceiling_rule_top_one_percent(self):
        pred, obs = self._masks([i / 200 for i in range(100)])
        out = coverage_ranking(pred, obs, top_fracs=(0.01,))
        assert out[0.01]["num_samples"] == 1

    def test_top_100_percent_equals_whole_set(self):
        pred, obs = self._masks([0.1, 0.4, 0.2, 0.3])
        out = coverage_ranking(pred, obs, top_fracs=(1.0,))
        tables = [contingency(p, o) for p, o in zip(pred, obs)]
        assert out[1.0]["scores"].as_dict() == pooled_scores(tables).as_dict()

    def test_tie_break_by_index(self):
        pred, obs = self._masks([0.2, 0.2, 0.2, 0.2])
        obs[3][0, 0] = 1  # bump only prediction? no: keep obs ties intact
        obs[3][0, 0] = obs[0][0, 0]
        out = coverage_ranking(pred, obs, top_fracs=(0.5,))
        # ties: prefix of the stable order, i.e. samples 0 and 1
        assert out[0.5]["num_samples"] == 2
        pred[0][:] = 0  # make sample-0 prediction empty -> FN only from it
        out2 = coverage_ranking(pred, obs, top_fracs=(0.5,))
        assert out2[0.5]["scores"].pod < 1.0

    def test_zero_fraction_is_error(self):
        pred, obs = self._masks([0.1, 0.2])
        with pytest.raises(ValidationError):
            coverage_ranking(pred, obs, top_fracs=(0.0,))
