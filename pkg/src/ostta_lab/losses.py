"""Adaptation objectives and their analytic gradients.

Three ingredients, combined per batch:

  csid term   mean prediction entropy over detected csID samples minus a
              weighted entropy of the batch-mean prediction (anti-collapse);
  ang term    mean (1 - cosine) between detected csID features and their
              running class prototypes, raising confidence by alignment
              instead of norm growth;
  norm term   mean l1-norm of detected csOOD features, suppressing their
              logits.

      total = csid + tau * gamma1 * ang + tau * gamma2 * norm

The detector's partition is a stop-gradient boundary: gradients never flow
through the csID/csOOD assignment, and the prototype bank is held constant
within a step. Gradients are taken with respect to the batch-norm affine
parameters only and are checked against central finite differences in the
test suite.
"""

from dataclasses import dataclass

import numpy as np

from .mathcore import (
    ContractError,
    DegenerateInputError,
    entropy,
    require_finite,
    softmax,
)
from .model import backward_from_cache, forward_cache


@dataclass(frozen=True)
class LossConfig:
    beta1: float = 1.0     # weight of the batch-mean entropy term
    gamma1: float = 0.3    # weight of the angular term
    gamma2: float = 0.005  # weight of the feature-norm term; far below gamma1
                           # because the feature l1 values sit far above the
                           # [0, 2] range of the angular term
    alpha: float = 0.005   # prototype running-mean momentum
    tau: float = 1.0       # common scale on both OOD-side terms

    def __post_init__(self):
        for name in ("beta1", "gamma1", "gamma2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ContractError(f"{name} must be finite and >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError("alpha must lie in (0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError("tau must lie in [0, 1]")


@dataclass
class PrototypeBank:
    """Per-class running-mean feature prototypes."""

    prototypes: np.ndarray   # (K, d_feat)
    initialized: np.ndarray  # (K,) bool

    @classmethod
    def from_classifier(cls, W_L):
        """Seed the bank with the classifier columns as source prototypes."""
        protos = np.array(W_L.T, dtype=float, copy=True)
        init = np.linalg.norm(protos, axis=1) > 0.0
        return cls(prototypes=protos, initialized=init)


@dataclass(frozen=True)
class PartitionedBatch:
    """Detector output for one batch: index sets into a single forward pass."""

    csid_indices: np.ndarray    # indices the detector kept as csID
    pseudo_labels: np.ndarray   # argmax class per csID sample, aligned with csid_indices
    csood_indices: np.ndarray

    def __post_init__(self):
        if len(self.pseudo_labels) != len(self.csid_indices):
            raise ContractError("pseudo_labels must align with csid_indices")
        if np.intersect1d(self.csid_indices, self.csood_indices).size:
            raise ContractError("csID and csOOD index sets must be disjoint")

    @property
    def batch_size(self):
        return len(self.csid_indices) + len(self.csood_indices)


def csid_loss(probs_csid, probs_all, beta1):
    """Mean entropy over csID predictions minus beta1 times the entropy of
    the mean prediction over the whole batch."""
    probs_all = np.atleast_2d(np.asarray(probs_all, dtype=float))
    if probs_all.shape[0] == 0:
        raise ContractError("csid_loss needs a non-empty batch")
    probs_csid = np.asarray(probs_csid, dtype=float).reshape(-1, probs_all.shape[1])
    mean_ent = float(np.mean(entropy(probs_csid))) if probs_csid.shape[0] else 0.0
    marginal = entropy(probs_all.mean(axis=0))
    return mean_ent - beta1 * marginal


def update_prototypes(bank, features, pseudo_labels, alpha):
    """Blend per-class batch means into the bank with momentum alpha.

    Class means are computed before any blending, so the update does not
    depend on sample order. Classes absent from the batch are untouched; a
    class seen for the first time adopts its batch mean directly.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    pseudo_labels = np.asarray(pseudo_labels, dtype=int)
    if features.shape[0] != len(pseudo_labels):
        raise ContractError("features must be row-aligned with pseudo_labels")
    for c in np.unique(pseudo_labels):
        if not 0 <= c < bank.prototypes.shape[0]:
            raise ContractError(f"pseudo label {c} outside the known classes")
        mean_c = features[pseudo_labels == c].mean(axis=0)
        if bank.initialized[c]:
            bank.prototypes[c] = (1.0 - alpha) * bank.prototypes[c] + alpha * mean_c
        else:
            bank.prototypes[c] = mean_c
            bank.initialized[c] = True
    return bank


def _csid_rows(features, pseudo_labels, bank):
    protos = bank.prototypes[pseudo_labels]
    if not np.all(bank.initialized[pseudo_labels]):
        raise DegenerateInputError("angular loss referenced an uninitialized prototype")
    fn = np.linalg.norm(features, axis=1)
    pn = np.linalg.norm(protos, axis=1)
    if np.any(fn == 0.0) or np.any(pn == 0.0):
        raise DegenerateInputError("angular loss is undefined for zero-norm vectors")
    return protos, fn, pn


def angular_loss(features_csid, pseudo_labels, bank):
    """Mean (1 - cosine similarity) between csID features and their prototypes."""
    features_csid = np.atleast_2d(np.asarray(features_csid, dtype=float))
    pseudo_labels = np.asarray(pseudo_labels, dtype=int)
    if features_csid.shape[0] == 0:
        return 0.0
    protos, fn, pn = _csid_rows(features_csid, pseudo_labels, bank)
    cos = (features_csid * protos).sum(axis=1) / (fn * pn)
    return float(np.mean(1.0 - cos))


def norm_loss(features_csood):
    """Mean l1-norm of the detected csOOD features (0 for an empty set)."""
    features_csood = np.asarray(features_csood, dtype=float)
    if features_csood.size == 0:
        return 0.0
    require_finite(features_csood, "csOOD features")
    return float(np.abs(features_csood).sum(axis=1).mean())


@dataclass(frozen=True)
class LossComponents:
    csid: float
    ang: float
    norm: float
    total: float


def rosetta_loss(partition, forward_output, bank, cfg):
    """Combined objective and its unweighted components for one batch."""
    logits = forward_output.logits
    if partition.batch_size != logits.shape[0]:
        raise ContractError("partition does not cover the forward batch")
    probs = softmax(logits)
    l_csid = csid_loss(probs[partition.csid_indices], probs, cfg.beta1)
    l_ang = angular_loss(
        forward_output.features[partition.csid_indices], partition.pseudo_labels, bank
    )
    l_norm = norm_loss(forward_output.features[partition.csood_indices])
    total = l_csid + cfg.tau * cfg.gamma1 * l_ang + cfg.tau * cfg.gamma2 * l_norm
    return total, LossComponents(csid=l_csid, ang=l_ang, norm=l_norm, total=total)


def _safe_log(p):
    return np.log(np.where(p > 0.0, p, 1.0))


def _dlogits_csid(probs, csid_indices, beta1):
    """Gradient of the csid term with respect to the logits."""
    B = probs.shape[0]
    logp = _safe_log(probs)
    d = np.zeros_like(probs)
    if len(csid_indices):
        p_id = probs[csid_indices]
        lp_id = logp[csid_indices]
        h = -(p_id * lp_id).sum(axis=1, keepdims=True)
        # dH(softmax(z))/dz_j = -p_j (log p_j + H)
        d[csid_indices] = -p_id * (lp_id + h) / len(csid_indices)
    if beta1 != 0.0:
        pbar = probs.mean(axis=0)
        log_pbar = _safe_log(pbar)
        s = probs @ log_pbar  # per-sample expectation of log pbar
        # d[-H(pbar)]/dz_ij = (beta1/B) p_ij (log pbar_j - s_i) flipped in sign below
        d -= beta1 * probs * (s[:, None] - log_pbar[None, :]) / B
    return d


def _dfeatures_ang(features, partition, bank):
    """Gradient of the angular term with respect to the features."""
    d = np.zeros_like(features)
    idx = partition.csid_indices
    if len(idx) == 0:
        return d
    feats = features[idx]
    protos, fn, pn = _csid_rows(feats, partition.pseudo_labels, bank)
    dot = (feats * protos).sum(axis=1)
    # d cos / da = mu/(|mu||a|) - (mu.a) a / (|mu||a|^3); the loss is (1 - cos)
    dcos = protos / (pn * fn)[:, None] - dot[:, None] * feats / (pn * fn**3)[:, None]
    d[idx] = -dcos / len(idx)
    return d


def _dfeatures_norm(features, partition):
    """Gradient of the feature-norm term with respect to the features."""
    d = np.zeros_like(features)
    idx = partition.csood_indices
    if len(idx) == 0:
        return d
    d[idx] = np.sign(features[idx]) / len(idx)
    return d


def component_gradients(model, batch, partition, bank, cfg):
    """(dgamma, dbeta) for each objective component and their weighted total.

    Runs one batch-mode forward pass and three independent backward passes;
    the total is composed linearly, skipping components whose effective
    weight is exactly zero so a disabled term cannot perturb the update.
    """
    cache = forward_cache(model, batch, "batch")
    probs = softmax(cache["logits"])

    def bn_grads(**kwargs):
        g = backward_from_cache(model, cache, **kwargs)
        return g["gamma"], g["beta"]

    grads = {
        "csid": bn_grads(dlogits=_dlogits_csid(probs, partition.csid_indices, cfg.beta1)),
        "ang": bn_grads(dfeatures=_dfeatures_ang(cache["a"], partition, bank)),
        "norm": bn_grads(dfeatures=_dfeatures_norm(cache["a"], partition)),
    }
    dgamma = grads["csid"][0].copy()
    dbeta = grads["csid"][1].copy()
    w_ang = cfg.tau * cfg.gamma1
    w_norm = cfg.tau * cfg.gamma2
    if w_ang != 0.0:
        dgamma += w_ang * grads["ang"][0]
        dbeta += w_ang * grads["ang"][1]
    if w_norm != 0.0:
        dgamma += w_norm * grads["norm"][0]
        dbeta += w_norm * grads["norm"][1]
    grads["total"] = (dgamma, dbeta)
    return grads


def grad_bn(model, batch, partition, bank, cfg):
    """Analytic gradient of the combined objective over (gamma, beta)."""
    return component_gradients(model, batch, partition, bank, cfg)["total"]
