"""Open-set evaluation metrics: csID accuracy, AUROC, FPR95, OSCR, H-score.

Conventions, fixed so every metric is checkable against a brute-force
oracle:

  * detection scores are oriented larger = more OOD;
  * AUROC uses the Mann-Whitney form with half credit for ties;
  * FPR95 admits csID at `score <= t`, picks the smallest admissible true
    positive level >= 0.95 and, within that level, the largest threshold
    (no interpolation);
  * OSCR sweeps confidence = -score over all distinct values, pairing the
    correct-classification rate of csID against the false positive rate of
    csOOD, and integrates the curve by trapezoid with (0,0) and (1, Acc)
    endpoints. Sums are accumulated with math.fsum so the result is
    independent of summation order.
"""

import math
from dataclasses import dataclass

import numpy as np

from .mathcore import ContractError, require_finite

_TPR_TARGET = 0.95


@dataclass
class EpisodeRecord:
    """Per-sample evaluation data for one episode."""

    ood_score: np.ndarray       # detection score, larger = more OOD
    is_ood: np.ndarray          # bool, True = csOOD
    true_class: np.ndarray      # int, -1 for csOOD samples
    predicted_class: np.ndarray # argmax class

    def __post_init__(self):
        n = len(self.ood_score)
        if not (len(self.is_ood) == len(self.true_class) == len(self.predicted_class) == n):
            raise ContractError("episode record arrays must be aligned")
        require_finite(self.ood_score, "ood_score")
        if np.any(self.true_class[self.is_ood] >= 0):
            raise ContractError("csOOD samples must not carry a true class")

    @property
    def n_id(self):
        return int((~self.is_ood).sum())

    @property
    def n_ood(self):
        return int(self.is_ood.sum())


def _need_both_domains(record, name):
    if record.n_id == 0 or record.n_ood == 0:
        raise ContractError(f"{name} needs both csID and csOOD samples")


def accuracy(record):
    """Fraction of csID samples classified into their true class."""
    if record.n_id == 0:
        raise ContractError("accuracy needs at least one csID sample")
    mask = ~record.is_ood
    return float(np.mean(record.predicted_class[mask] == record.true_class[mask]))


def _midranks(x):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j < n and sx[j] == sx[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        i = j
    return ranks


def auroc(record):
    """P(random csOOD scores strictly above random csID) + half tie credit."""
    _need_both_domains(record, "auroc")
    ranks = _midranks(record.ood_score)
    n_ood = record.n_ood
    rank_sum = ranks[record.is_ood].sum()
    return float((rank_sum - n_ood * (n_ood + 1) / 2) / (record.n_id * n_ood))


def fpr95(record):
    """Fraction of csOOD admitted at the threshold that keeps >= 95% of csID."""
    _need_both_domains(record, "fpr95")
    scores = record.ood_score
    sorted_id = np.sort(scores[~record.is_ood])
    candidates = np.unique(scores)
    tpr = np.searchsorted(sorted_id, candidates, side="right") / record.n_id
    admissible = tpr >= _TPR_TARGET
    level = tpr[admissible].min()
    threshold = candidates[tpr == level].max()
    return float(np.mean(scores[record.is_ood] <= threshold))


def _oscr_points(record):
    conf = -record.ood_score
    id_mask = ~record.is_ood
    correct_conf = np.sort(conf[id_mask & (record.predicted_class == record.true_class)])
    ood_conf = np.sort(conf[record.is_ood])
    n_id, n_ood = record.n_id, record.n_ood
    points = [(0.0, 0.0), (1.0, len(correct_conf) / n_id)]
    for theta in np.unique(conf):
        ccr = (len(correct_conf) - np.searchsorted(correct_conf, theta, side="right")) / n_id
        fpr = (n_ood - np.searchsorted(ood_conf, theta, side="right")) / n_ood
        points.append((float(fpr), float(ccr)))
    points.sort()
    return points


def oscr(record):
    """Area under the correct-classification-rate vs false-positive-rate curve."""
    _need_both_domains(record, "oscr")
    points = _oscr_points(record)
    terms = [
        (points[k + 1][0] - points[k][0]) * (points[k][1] + points[k + 1][1]) / 2.0
        for k in range(len(points) - 1)
    ]
    return math.fsum(terms)


def h_score(acc, auroc_value):
    """Harmonic mean of csID accuracy and csOOD detection AUROC."""
    for v in (acc, auroc_value):
        if not 0.0 <= v <= 1.0:
            raise ContractError("h_score inputs must lie in [0, 1]")
    if acc == 0.0 or auroc_value == 0.0:
        return 0.0
    return 2.0 * acc * auroc_value / (acc + auroc_value)


@dataclass
class MetricsReport:
    """One episode's metric values in [0, 1]; None where undefined."""

    acc: float = None
    auroc: float = None
    fpr95: float = None
    oscr: float = None
    h_score: float = None
    detector_acc: float = None

    FIELDS = ("acc", "auroc", "fpr95", "oscr", "h_score", "detector_acc")

    def as_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}


def compute_report(record, detector_acc=None):
    """Full metric report; detection metrics are None without both domains."""
    report = MetricsReport(detector_acc=detector_acc)
    if record.n_id > 0:
        report.acc = accuracy(record)
    if record.n_id > 0 and record.n_ood > 0:
        report.auroc = auroc(record)
        report.fpr95 = fpr95(record)
        report.oscr = oscr(record)
        report.h_score = h_score(report.acc, report.auroc)
    return report


def mean_report(reports):
    """Fieldwise arithmetic mean over reports, ignoring undefined entries."""
    out = MetricsReport()
    for name in MetricsReport.FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if values:
            setattr(out, name, float(np.mean(values)))
    return out


def record_to_table(record):
    """Flat delimited form: score, domain, true_class, predicted_class."""
    lines = ["score,domain,true_class,predicted_class"]
    for i in range(len(record.ood_score)):
        domain = "csOOD" if record.is_ood[i] else "csID"
        cls = "" if record.is_ood[i] else str(int(record.true_class[i]))
        lines.append(
            f"{float(record.ood_score[i])!r},{domain},{cls},{int(record.predicted_class[i])}"
        )
    return "\n".join(lines) + "\n"


def record_from_table(text):
    lines = [ln for ln in text.strip().split("\n")]
    if lines[0] != "score,domain,true_class,predicted_class":
        raise ContractError("unexpected episode record header")
    scores, flags, classes, preds = [], [], [], []
    for ln in lines[1:]:
        s, domain, cls, pred = ln.split(",")
        scores.append(float(s))
        flags.append(domain == "csOOD")
        classes.append(int(cls) if cls else -1)
        preds.append(int(pred))
    return EpisodeRecord(
        ood_score=np.array(scores),
        is_ood=np.array(flags, dtype=bool),
        true_class=np.array(classes, dtype=int),
        predicted_class=np.array(preds, dtype=int),
    )
