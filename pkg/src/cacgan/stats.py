"""Detection and interscan reproducibility statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

LOA_MULTIPLIER = 1.96 * math.sqrt(math.pi / 2)
CATEGORY_INDEX = {"I": 0, "II": 1, "III": 2, "IV": 3}


@dataclass
class DetectionMetrics:
    accuracy: float
    sensitivity: float | None
    fpr: float | None
    f1: float | None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0


def detection_metrics(predicted, reference) -> DetectionMetrics:
    """Accuracy, sensitivity, false positive rate FP/(FP+TN) and F1.

    Metrics with an empty denominator come back as ``None``.
    """
    p = np.asarray(predicted, dtype=bool)
    r = np.asarray(reference, dtype=bool)
    if p.shape != r.shape or p.size == 0:
        raise ValueError("need equally sized, nonempty prediction and reference columns")
    tp = int((p & r).sum())
    fp = int((p & ~r).sum())
    tn = int((~p & ~r).sum())
    fn = int((~p & r).sum())

    def ratio(a, b):
        return a / b if b else None

    return DetectionMetrics(
        accuracy=(tp + tn) / p.size,
        sensitivity=ratio(tp, tp + fn),
        fpr=ratio(fp, fp + tn),
        f1=ratio(2 * tp, 2 * tp + fp + fn),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def abs_rel_diff(a, b):
    """|a - b| relative to the pair mean; 0 for a pair of zeros."""
    if a < 0 or b < 0:
        raise ValueError("scores must be nonnegative")
    if a == b:
        return 0.0
    return abs(a - b) / ((a + b) / 2.0)


def _anova2(y):
    n, k = y.shape
    gm = y.mean()
    ssr = k * ((y.mean(axis=1) - gm) ** 2).sum()
    ssc = n * ((y.mean(axis=0) - gm) ** 2).sum()
    sst = ((y - gm) ** 2).sum()
    sse = sst - ssr - ssc
    return ssr / (n - 1), ssc / (k - 1), sse / ((n - 1) * (k - 1))


@dataclass
class ICCResult:
    icc: float | None
    ci_low: float | None
    ci_high: float | None
    msr: float = 0.0
    msc: float = 0.0
    mse: float = 0.0


def icc_absolute_agreement(scan1, scan2, alpha=0.05) -> ICCResult:
    """Two-way random, absolute agreement, single-measure ICC with F-based CI."""
    y = np.column_stack([np.asarray(scan1, float), np.asarray(scan2, float)])
    n, k = y.shape
    if n < 3:
        raise ValueError("ICC needs at least 3 subjects")
    msr, msc, mse = _anova2(y)
    den = msr + (k - 1) * mse + k * (msc - mse) / n
    if den <= 0 or not np.isfinite(den):
        return ICCResult(None, None, None, msr, msc, mse)
    icc = (msr - mse) / den
    if mse <= 0 and msc <= 0:
        return ICCResult(float(icc), 1.0, 1.0, msr, msc, mse)
    a = k * icc / (n * (1 - icc))
    b = 1 + k * icc * (n - 1) / (n * (1 - icc))
    v = (a * msc + b * mse) ** 2 / ((a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1)))
    fl = sps.f.ppf(1 - alpha / 2, n - 1, v)
    fu = sps.f.ppf(1 - alpha / 2, v, n - 1)
    low = n * (msr - fl * mse) / (fl * (k * msc + (k * n - k - n) * mse) + n * msr)
    high = n * (fu * msr - mse) / (k * msc + (k * n - k - n) * mse + n * fu * msr)
    return ICCResult(float(icc), float(low), float(high), msr, msc, mse)


@dataclass
class BlandAltman:
    mean: np.ndarray
    diff: np.ndarray
    bias_coef: tuple  # (intercept, slope) of diff on mean
    spread_coef: tuple  # (intercept, slope) of |diff - bias| on mean
    multiplier: float = LOA_MULTIPLIER

    def bias(self, m):
        return self.bias_coef[0] + self.bias_coef[1] * np.asarray(m, float)

    def halfwidth(self, m):
        return self.multiplier * (self.spread_coef[0] + self.spread_coef[1] * np.asarray(m, float))

    def lower(self, m):
        return self.bias(m) - self.halfwidth(m)

    def upper(self, m):
        return self.bias(m) + self.halfwidth(m)

    def table(self):
        """Rows of (mean, diff, bias, lower, upper) sorted by mean, ready to plot."""
        o = np.argsort(self.mean, kind="stable")
        m = self.mean[o]
        return np.column_stack([m, self.diff[o], self.bias(m), self.lower(m), self.upper(m)])


def _linfit(x, y):
    if np.ptp(x) == 0:
        return float(np.mean(y)), 0.0
    slope, intercept = np.polyfit(x, y, 1)
    return float(intercept), float(slope)


def bland_altman(scan1, scan2) -> BlandAltman:
    """Bland-Altman with regression-based bias and nonuniform limits of agreement.

    The absolute residuals around the bias line are half-normal, so their
    fitted mean is scaled by 1.96 * sqrt(pi / 2) to give the 95% limits.
    """
    a, b = np.asarray(scan1, float), np.asarray(scan2, float)
    if len(a) < 3 or len(a) != len(b):
        raise ValueError("Bland-Altman needs at least 3 paired rows")
    mean = (a + b) / 2
    diff = a - b
    bias = _linfit(mean, diff)
    resid = np.abs(diff - (bias[0] + bias[1] * mean))
    spread = _linfit(mean, resid)
    return BlandAltman(mean, diff, bias, spread)


@dataclass
class KappaResult:
    kappa: float | None
    ci_low: float | None
    ci_high: float | None
    n: int = 0


def _as_index(c):
    return CATEGORY_INDEX[c] if isinstance(c, str) else int(c)


def weighted_kappa(cat1, cat2, n_categories=4, alpha=0.05) -> KappaResult:
    """Cohen's linearly weighted kappa with the Fleiss-Cohen-Everitt large-sample CI."""
    i = np.array([_as_index(c) for c in cat1])
    j = np.array([_as_index(c) for c in cat2])
    if len(i) == 0 or len(i) != len(j):
        raise ValueError("need equally sized, nonempty category columns")
    C = n_categories
    if i.min() < 0 or j.min() < 0 or i.max() >= C or j.max() >= C:
        raise ValueError("category outside range")
    n = len(i)
    p = np.zeros((C, C))
    np.add.at(p, (i, j), 1.0)
    p /= n
    idx = np.arange(C)
    w = 1.0 - np.abs(idx[:, None] - idx[None, :]) / (C - 1)
    pr, pc = p.sum(axis=1), p.sum(axis=0)
    po = (w * p).sum()
    pe = (w * np.outer(pr, pc)).sum()
    if pe >= 1.0:
        return KappaResult(None, None, None, n)
    kappa = (po - pe) / (1 - pe)
    wr = w @ pc  # weighted mean over columns for each row category
    wc = pr @ w
    var = ((p * (w - (wr[:, None] + wc[None, :]) * (1 - kappa)) ** 2).sum()
           - (kappa - pe * (1 - kappa)) ** 2) / (n * (1 - pe) ** 2)
    z = sps.norm.ppf(1 - alpha / 2)
    half = z * math.sqrt(max(var, 0.0))
    return KappaResult(float(kappa), float(kappa - half), float(kappa + half), n)


# ---------------------------------------------------------------- pair tables


@dataclass
class PairRow:
    subject: str
    score_type: str
    scan1: float
    scan2: float
    category1: str = ""
    category2: str = ""


@dataclass
class PairTable:
    rows: list = field(default_factory=list)

    def of_type(self, score_type):
        return [r for r in self.rows if r.score_type == score_type]

    def score_types(self):
        seen = []
        for r in self.rows:
            if r.score_type not in seen:
                seen.append(r.score_type)
        return seen

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "score_type", "scan1", "scan2", "category1", "category2"])
            for r in self.rows:
                w.writerow([r.subject, r.score_type, repr(float(r.scan1)), repr(float(r.scan2)), r.category1, r.category2])

    @classmethod
    def read_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                s1, s2 = float(d["scan1"]), float(d["scan2"])
                if s1 < 0 or s2 < 0:
                    raise ValueError(f"negative score for subject {d['subject']}")
                rows.append(PairRow(d["subject"], d["score_type"], s1, s2,
                                    d.get("category1", "") or "", d.get("category2", "") or ""))
        return cls(rows)


def reproducibility(scan1, scan2):
    """Interscan relative differences over all pairs and concordant positive pairs."""
    a, b = np.asarray(scan1, float), np.asarray(scan2, float)
    d = np.array([abs_rel_diff(x, y) for x, y in zip(a, b)])
    pos = (a > 0) & (b > 0)
    out = {
        "n_pairs": int(len(a)),
        "n_concordant_positive": int(pos.sum()),
        "delta_r_all_mean": float(d.mean()) if len(d) else None,
        "delta_r_all_median": float(np.median(d)) if len(d) else None,
        "delta_r_pos_mean": float(d[pos].mean()) if pos.any() else None,
        "delta_r_pos_median": float(np.median(d[pos])) if pos.any() else None,
    }
    return out


def summarize_pairs(rows, with_bland_altman=True):
    """Reproducibility, ICC, kappa and Bland-Altman coefficients for one score type."""
    a = np.array([r.scan1 for r in rows], float)
    b = np.array([r.scan2 for r in rows], float)
    out = reproducibility(a, b)
    if len(rows) >= 3:
        icc = icc_absolute_agreement(a, b)
        out["icc"] = {"icc": icc.icc, "ci_low": icc.ci_low, "ci_high": icc.ci_high}
        if with_bland_altman:
            ba = bland_altman(a, b)
            out["bland_altman"] = {
                "bias_intercept": ba.bias_coef[0], "bias_slope": ba.bias_coef[1],
                "spread_intercept": ba.spread_coef[0], "spread_slope": ba.spread_coef[1],
                "multiplier": ba.multiplier,
            }
    cats = [(r.category1, r.category2) for r in rows if r.category1 and r.category2]
    if cats:
        k = weighted_kappa([c[0] for c in cats], [c[1] for c in cats])
        out["kappa"] = {"kappa": k.kappa, "ci_low": k.ci_low, "ci_high": k.ci_high, "n": k.n}
        out["category_accuracy"] = float(np.mean([c[0] == c[1] for c in cats]))
    return out
