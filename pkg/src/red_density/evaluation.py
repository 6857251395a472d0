"""Held-out NLL reporting and density-based anomaly detection metrics.

Instances are ranked by ascending log-likelihood: rank 1 is the least likely
and therefore the most anomalous. Ties keep the original row order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .exceptions import ContractError, DegenerateTestError


@dataclass
class RankedScores:
    scores: np.ndarray
    labels: np.ndarray | None
    order: np.ndarray  # row indices, most anomalous first

    @classmethod
    def from_scores(cls, scores, labels=None):
        scores = np.asarray(scores, dtype=np.float64)
        labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if labels is not None and labels.shape != scores.shape:
            raise ContractError("scores and labels differ in length")
        return cls(scores, labels, np.argsort(scores, kind="stable"))

    @property
    def ranked_labels(self):
        if self.labels is None:
            raise ContractError("ranking has no labels")
        return self.labels[self.order]

    @property
    def ranks(self):
        """1-based rank of each row in original order."""
        r = np.empty(self.order.size, dtype=np.int64)
        r[self.order] = np.arange(1, self.order.size + 1)
        return r


def ranking_from_labels(ranked_labels) -> RankedScores:
    """Ranking that already lists labels in ranked order (handy for fixtures)."""
    lab = np.asarray(ranked_labels, dtype=np.int64)
    return RankedScores(np.arange(lab.size, dtype=np.float64), lab, np.arange(lab.size))


def anomaly_scores(model, X, labels=None) -> RankedScores:
    return RankedScores.from_scores(model.log_prob(X), labels)


@dataclass
class PrCurve:
    precision: np.ndarray
    recall: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["r", "precision", "recall"])
            for r, (p, rc) in enumerate(zip(self.precision, self.recall), 1):
                w.writerow([r, repr(float(p)), repr(float(rc))])


def _positives(rs: RankedScores):
    lab = rs.ranked_labels
    n_pos = int(lab.sum())
    if n_pos == 0:
        raise ContractError("no positive (anomaly) labels: recall is undefined")
    return lab, n_pos


def pr_curve(rs: RankedScores) -> PrCurve:
    """Precision/recall of the bottom-``r`` set for ``r = 1..N``."""
    lab, n_pos = _positives(rs)
    tp = np.cumsum(lab)
    r = np.arange(1, lab.size + 1)
    return PrCurve(tp / r, tp / n_pos)


def average_precision(rs: RankedScores) -> float:
    """``sum_r precision_r * (recall_r - recall_{r-1})`` with ``recall_0 = 0``."""
    c = pr_curve(rs)
    return float(np.sum(c.precision * np.diff(c.recall, prepend=0.0)))


def mean_average_precision(aps) -> float:
    aps = list(aps)
    if not aps:
        raise ContractError("MAP of an empty list")
    return float(np.mean(aps))


def ndcg(rs: RankedScores) -> float:
    """Binary-gain nDCG over the full ranking, discount ``1 / log2(rank + 1)``."""
    lab, n_pos = _positives(rs)
    disc = 1.0 / np.log2(np.arange(2, lab.size + 2))
    return float(np.sum(disc[lab == 1]) / np.sum(disc[:n_pos]))


def paired_t_test(a, b):
    """Paired t statistic on ``a - b`` and its two-sided p-value.

    Uses the sample (n-1) standard deviation. The p-value is
    ``I_{dof/(dof+t^2)}(dof/2, 1/2)``, the Student-t two-sided tail written as
    a regularized incomplete beta function.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractError("paired t-test needs two equal-length vectors of length >= 2")
    diff = a - b
    n = diff.size
    sd = np.std(diff, ddof=1)
    if sd == 0:
        raise DegenerateTestError("differences have zero variance")
    t = float(np.mean(diff) / (sd / np.sqrt(n)))
    dof = n - 1
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return t, p


@dataclass
class EvalReport:
    n_rows: int
    n_nll_rows: int
    test_nll: float
    test_nll_stderr: float
    anomaly: dict | None = None
    pr: PrCurve | None = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "n_rows": self.n_rows,
            "n_nll_rows": self.n_nll_rows,
            "test_nll": self.test_nll,
            "test_nll_stderr": self.test_nll_stderr,
        }
        if self.anomaly is not None:
            out["anomaly"] = self.anomaly
        out.update(self.extra)
        return out

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def test_nll_report(model, X, labels=None, log_abs_det=0.0):
    """Mean NLL over inlier rows, plus per-row NLLs for significance tests.

    ``log_abs_det`` is added to every log-likelihood, e.g. the standardizer's
    Jacobian to report in original data units.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mask = np.ones(X.shape[0], bool) if labels is None else (np.asarray(labels) == 0)
    if not mask.any():
        raise ContractError("no non-anomalous rows to report an NLL on")
    per_row = -(model.log_prob(X[mask]) + log_abs_det)
    stderr = float(np.std(per_row, ddof=1) / np.sqrt(per_row.size)) if per_row.size > 1 else float("nan")
    return float(per_row.mean()), stderr, per_row


test_nll_report.__test__ = False  # not a pytest test despite the name


def evaluate(model, X, labels=None, log_abs_det=0.0, name="dataset") -> EvalReport:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mean, se, per_row = test_nll_report(model, X, labels, log_abs_det)
    rep = EvalReport(X.shape[0], per_row.size, mean, se)
    if labels is not None and np.any(np.asarray(labels) == 1):
        rs = anomaly_scores(model, X, labels)
        ap = average_precision(rs)
        rep.anomaly = {
            "dataset": name,
            "anomaly_count": int(np.sum(labels)),
            "average_precision": ap,
            "ndcg": ndcg(rs),
        }
        rep.pr = pr_curve(rs)
    return rep


def write_nll_table(rows, path):
    """Rows of ``(dataset, N, d, nll)`` in the held-out NLL table layout."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "N", "d", "RED NLL"])
        for name, n, d, v in rows:
            w.writerow([name, n, d, f"{v:.2f}"])


def write_ap_table(rows, path):
    """Rows of ``(dataset, anomaly_count, ap, ndcg)``; appends MAP and mean nDCG."""
    rows = list(rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "anomaly_count", "RED avg-prec"])
        for name, count, ap, _ in rows:
            w.writerow([name, count, f"{ap:.3f}"])
        w.writerow(["MAP", "", f"{mean_average_precision(r[2] for r in rows):.3f}"])
        w.writerow(["nDCG", "", f"{np.mean([r[3] for r in rows]):.3f}"])
