"""OOD scoring functions and batch partitioners.

Every score is oriented so that larger means more OOD-like:

  entropy   H(softmax(logits))
  energy    -logsumexp(logits)
  l1norm    -|features|_1
  nan       -|features|_1 / (|features|_2 + eps)

Partitioners split a batch into presumed csID/csOOD sets. The clustering
detectors (two-component Gaussian mixture on energy, k-means on entropy or
energy) are fit per batch; the fixed and oracle thresholds compare a score
against a constant. The oracle threshold uses ground-truth domain flags and
exists for evaluation only.
"""

from dataclasses import dataclass

import numpy as np

from .mathcore import (
    ContractError,
    DegenerateInputError,
    entropy,
    log_sum_exp,
    softmax,
)
from .losses import PartitionedBatch

SCORE_KINDS = ("entropy", "energy", "l1norm", "nan")
PARTITIONER_TAGS = (
    "gmm_energy",
    "kmeans_entropy",
    "kmeans_energy",
    "fixed_threshold",
    "oracle_best_threshold",
)
_NAN_EPS = 1e-12
_GMM_VAR_FLOOR = 1e-6


def score(forward_output, kind):
    """Per-sample OOD score for one forward pass (larger = more OOD)."""
    if kind == "entropy":
        return entropy(softmax(forward_output.logits))
    if kind == "energy":
        return -log_sum_exp(forward_output.logits)
    if kind == "l1norm":
        return -np.abs(forward_output.features).sum(axis=1)
    if kind == "nan":
        l1 = np.abs(forward_output.features).sum(axis=1)
        l2 = np.linalg.norm(forward_output.features, axis=1)
        return -(l1 / (l2 + _NAN_EPS))
    raise ContractError(f"unknown score kind {kind!r}")


def kmeans2(scores):
    """Two-center Lloyd clustering of scalar scores.

    Starts from (min, max), iterates until the assignment is a fixed point.
    Distance ties go to the lower center. Returns (sorted centers,
    assignment into them).
    """
    x = np.asarray(scores, dtype=float)
    if np.unique(x).size < 2:
        raise DegenerateInputError("kmeans2 needs at least two distinct values")
    centers = np.array([x.min(), x.max()])
    assign = None
    for _ in range(1000):
        dist = np.abs(x[:, None] - centers[None, :])
        new_assign = dist.argmin(axis=1)  # argmin ties -> first index = lower center
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centers = np.array([x[assign == 0].mean(), x[assign == 1].mean()])
    else:
        raise DegenerateInputError("kmeans2 did not reach a fixed point")
    return centers, assign


@dataclass(frozen=True)
class Gmm2:
    """Two-component 1-D Gaussian mixture, components ordered by mean."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def _log_joint(self, x):
        x = np.asarray(x, dtype=float)[:, None]
        return (
            np.log(self.weights)[None, :]
            - 0.5 * (np.log(2.0 * np.pi * self.variances)[None, :]
                     + (x - self.means[None, :]) ** 2 / self.variances[None, :])
        )

    def responsibilities(self, x):
        lj = self._log_joint(x)
        m = lj.max(axis=1, keepdims=True)
        r = np.exp(lj - m)
        return r / r.sum(axis=1, keepdims=True)

    def log_likelihood(self, x):
        lj = self._log_joint(x)
        m = lj.max(axis=1, keepdims=True)
        return float((m.squeeze(1) + np.log(np.exp(lj - m).sum(axis=1))).sum())


def fit_gmm2(scores, tol=1e-8, max_iter=200, return_history=False):
    """EM fit of a two-component mixture to scalar scores.

    Initialised from the kmeans2 split for determinism; component variances
    are floored at 1e-6, so the constrained M-step keeps the log-likelihood
    non-decreasing. Stops when the improvement drops below `tol`.
    """
    x = np.asarray(scores, dtype=float)
    if len(x) < 4:
        raise ContractError("fit_gmm2 needs at least 4 samples")
    if np.unique(x).size < 2:
        raise DegenerateInputError("fit_gmm2 needs at least two distinct values")
    centers, assign = kmeans2(x)
    means = centers.copy()
    variances = np.array([
        max(x[assign == k].var(), _GMM_VAR_FLOOR) for k in (0, 1)
    ])
    weights = np.array([np.mean(assign == 0), np.mean(assign == 1)])

    gmm = Gmm2(means, variances, weights)
    history = [gmm.log_likelihood(x)]
    for _ in range(max_iter):
        r = gmm.responsibilities(x)
        nk = r.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        means = (r * x[:, None]).sum(axis=0) / nk
        variances = np.maximum(
            (r * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk, _GMM_VAR_FLOOR
        )
        weights = nk / len(x)
        gmm = Gmm2(means, variances, weights)
        history.append(gmm.log_likelihood(x))
        if history[-1] - history[-2] < tol:
            break
    order = np.argsort(gmm.means)
    gmm = Gmm2(gmm.means[order], gmm.variances[order], gmm.weights[order])
    return (gmm, history) if return_history else gmm


def best_threshold(scores, is_ood):
    """Accuracy-maximising threshold for `score > t  =>  csOOD`.

    Scans the midpoints between consecutive distinct scores plus -inf/+inf
    sentinels. Uses ground truth: evaluation oracle only, never fed to
    adaptation. Returns (threshold, accuracy); ties resolve to the lowest
    threshold.
    """
    x = np.asarray(scores, dtype=float)
    flags = np.asarray(is_ood, dtype=bool)
    if len(x) != len(flags):
        raise ContractError("scores and domain flags must be aligned")
    if flags.all() or not flags.any():
        raise ContractError("best_threshold needs both domains present")
    values = np.unique(x)
    candidates = np.concatenate([[-np.inf], (values[:-1] + values[1:]) / 2.0, [np.inf]])
    sorted_id = np.sort(x[~flags])
    sorted_ood = np.sort(x[flags])
    n = len(x)
    # accuracy(t) = (#csID with score <= t + #csOOD with score > t) / n
    id_le = np.searchsorted(sorted_id, candidates, side="right")
    ood_gt = len(sorted_ood) - np.searchsorted(sorted_ood, candidates, side="right")
    acc = (id_le + ood_gt) / n
    best = int(np.argmax(acc))
    return float(candidates[best]), float(acc[best])


@dataclass(frozen=True)
class PartitionerSpec:
    tag: str
    score_kind: str = None
    threshold: float = None

    def __post_init__(self):
        if self.tag not in PARTITIONER_TAGS:
            raise ContractError(f"unknown partitioner tag {self.tag!r}")
        if self.tag in ("fixed_threshold", "oracle_best_threshold"):
            if self.score_kind not in SCORE_KINDS:
                raise ContractError(f"{self.tag} needs a score_kind from {SCORE_KINDS}")
        if self.tag == "fixed_threshold":
            if self.threshold is None or not np.isfinite(self.threshold):
                raise ContractError("fixed_threshold needs a finite threshold")

    @property
    def is_oracle(self):
        return self.tag == "oracle_best_threshold"


def partition(forward_output, spec, true_is_ood=None):
    """Split a batch into presumed csID/csOOD index sets per the spec.

    Boundary convention: a score exactly equal to a threshold stays csID.
    Pseudo-labels for the csID side are the argmax class (ties to the lowest
    index).
    """
    if spec.tag == "gmm_energy":
        s = score(forward_output, "energy")
        gmm = fit_gmm2(s)
        resp = gmm.responsibilities(s)
        pred_ood = resp[:, int(np.argmax(gmm.means))] > 0.5
    elif spec.tag in ("kmeans_entropy", "kmeans_energy"):
        s = score(forward_output, spec.tag.split("_", 1)[1])
        centers, assign = kmeans2(s)
        pred_ood = assign == int(np.argmax(centers))
    elif spec.tag == "fixed_threshold":
        pred_ood = score(forward_output, spec.score_kind) > spec.threshold
    elif spec.tag == "oracle_best_threshold":
        if true_is_ood is None:
            raise ContractError("oracle_best_threshold needs ground-truth domain flags")
        s = score(forward_output, spec.score_kind)
        threshold, _ = best_threshold(s, true_is_ood)
        pred_ood = s > threshold
    else:  # pragma: no cover - rejected at spec construction
        raise ContractError(f"unknown partitioner tag {spec.tag!r}")

    csood = np.flatnonzero(pred_ood)
    csid = np.flatnonzero(~pred_ood)
    pseudo = forward_output.logits[csid].argmax(axis=1) if len(csid) else np.empty(0, dtype=int)
    return PartitionedBatch(csid_indices=csid, pseudo_labels=pseudo, csood_indices=csood)


def detector_accuracy(part, true_is_ood):
    """Fraction of samples whose predicted domain matches the true domain."""
    flags = np.asarray(true_is_ood, dtype=bool)
    if part.batch_size != len(flags):
        raise ContractError("partition and domain flags must cover the same batch")
    pred = np.zeros(len(flags), dtype=bool)
    pred[part.csood_indices] = True
    return float(np.mean(pred == flags))
