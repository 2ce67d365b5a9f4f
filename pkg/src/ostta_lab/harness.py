"""Episode orchestration: pretrain -> adapt -> evaluate, plus the experiment
grid (ablations, weight sweeps, detector audit).

Per batch the pipeline is: forward (batch statistics for everything except
the frozen source baseline), detector partition, masked loss, one optimizer
step on the batch-norm affine parameters, prototype update. Ground-truth
labels and domain flags never enter that path; they are consumed only by the
diagnostics and metric computations in this module, after the step.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .detectors import PartitionerSpec, best_threshold, detector_accuracy, partition, score
from .losses import LossConfig, PrototypeBank, grad_bn, rosetta_loss, update_prototypes
from .mathcore import ConfigError, ContractError, NumericError
from .metrics import EpisodeRecord, compute_report, mean_report
from .model import TinyModel, forward
from .stream import CORRUPTION_KINDS, CorruptionSpec, sample_batch

METHODS = ("source", "bn_adapt", "tent_csid_only", "rosetta")
# Detection score used for episode metrics. The feature-norm score is the
# quantity the adaptation objective actually controls; at this model scale it
# is the axis on which the entropy-minimization / OOD-suppression dynamics
# are measurable, and it doubles as a valid detection score in its own right.
EVAL_SCORE_KIND = "l1norm"
LOGIT_CURVE_POINTS = 16

AUDIT_DETECTORS = (
    ("gmm_energy", PartitionerSpec("gmm_energy")),
    ("kmeans_entropy", PartitionerSpec("kmeans_entropy")),
    ("kmeans_energy", PartitionerSpec("kmeans_energy")),
    ("oracle_best_entropy", PartitionerSpec("oracle_best_threshold", score_kind="entropy")),
    ("oracle_best_energy", PartitionerSpec("oracle_best_threshold", score_kind="energy")),
)

ABLATION_MASKS = (
    ("none", (False, False, False)),
    ("csid", (True, False, False)),
    ("csid+ang", (True, True, False)),
    ("csid+ang+norm", (True, True, True)),
)


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")


class _Sgd:
    def __init__(self, spec, lr, n):
        self.lr = lr

    def step(self, params, grads):
        return params - self.lr * grads


class _Adam:
    def __init__(self, spec, lr, n):
        self.lr = lr
        self.b1, self.b2, self.eps = spec.b1, spec.b2, spec.eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grads
        self.v = self.b2 * self.v + (1.0 - self.b2) * grads * grads
        m_hat = self.m / (1.0 - self.b1**self.t)
        v_hat = self.v / (1.0 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(spec, lr, n_params):
    return (_Adam if spec.kind == "adam" else _Sgd)(spec, lr, n_params)


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "rosetta"
    partitioner: PartitionerSpec = field(default_factory=lambda: PartitionerSpec("gmm_energy"))
    loss: LossConfig = field(default_factory=LossConfig)
    # Desk-scale defaults; with 2*d_feat trainable scalars, the reference
    # deep-net rate of 1e-3 over 50 batches moves the model too little for
    # any method to differ.
    lr: float = 1e-2
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    batches_per_corruption: int = 150

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.partitioner.is_oracle:
            raise ConfigError(
                "oracle partitioners use ground truth and are rejected for adaptation"
            )
        if self.method in ("tent_csid_only", "rosetta") and not self.lr > 0.0:
            raise ConfigError("learning methods need lr > 0")
        if self.batches_per_corruption < 1:
            raise ConfigError("batches_per_corruption must be >= 1")

    def effective_loss(self):
        """The loss-term mask implied by the method tag."""
        if self.method == "tent_csid_only":
            return replace(self.loss, gamma1=0.0, gamma2=0.0)
        return self.loss


@dataclass
class StepResult:
    forward: object          # ForwardOutput seen by the detector and metrics
    partition: object
    components: object       # LossComponents or None for gradient-free methods


@dataclass
class BatchDiagnostics:
    corruption: str
    batch_index: int
    loss_total: float
    loss_csid: float
    loss_ang: float
    loss_norm: float
    feat_l2_csid: float
    feat_l2_csood: float
    logits_sorted_csid: list
    logits_sorted_csood: list
    detector_acc: float


@dataclass
class AdaptReport:
    batches: list = field(default_factory=list)
    per_corruption: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    mean: object = None


def adapt_step(model, bank, optimizer, batch_inputs, cfg):
    """One adaptation step on a batch of raw inputs (no labels).

    source      running statistics, no update of any kind;
    bn_adapt    batch statistics only (the forward already swapped them in);
    tent_csid_only / rosetta
                batch statistics plus one optimizer step on (gamma, beta);
                rosetta additionally folds the batch's csID class means into
                the prototype bank after the step.
    """
    stat_mode = "running" if cfg.method == "source" else "batch"
    fo = forward(model, batch_inputs, stat_mode)
    part = partition(fo, cfg.partitioner)
    components = None
    if cfg.method in ("tent_csid_only", "rosetta"):
        loss_cfg = cfg.effective_loss()
        _, components = rosetta_loss(part, fo, bank, loss_cfg)
        dgamma, dbeta = grad_bn(model, batch_inputs, part, bank, loss_cfg)
        params = model.trainable_parameters()
        updated = optimizer.step(params, np.concatenate([dgamma, dbeta]))
        model.set_trainable_parameters(updated)
        if cfg.method == "rosetta" and len(part.csid_indices):
            update_prototypes(
                bank, fo.features[part.csid_indices], part.pseudo_labels, loss_cfg.alpha
            )
    return StepResult(forward=fo, partition=part, components=components)


def _mean_l2(rows):
    if rows.shape[0] == 0:
        return None
    return float(np.linalg.norm(rows, axis=1).mean())


def _sorted_logit_curve(logits):
    """Mean sorted-logit profile resampled onto a fixed 16-point rank grid."""
    if logits.shape[0] == 0:
        return None
    curve = np.sort(logits, axis=1)[:, ::-1].mean(axis=0)
    k = len(curve)
    if k == 1:
        return [float(curve[0])] * LOGIT_CURVE_POINTS
    grid = np.linspace(0.0, 1.0, LOGIT_CURVE_POINTS)
    ranks = np.linspace(0.0, 1.0, k)
    return [float(v) for v in np.interp(grid, ranks, curve)]


def _diagnose(kind, t, step, batch):
    comps = step.components
    id_mask = ~batch.is_ood
    return BatchDiagnostics(
        corruption=kind,
        batch_index=t,
        loss_total=None if comps is None else comps.total,
        loss_csid=None if comps is None else comps.csid,
        loss_ang=None if comps is None else comps.ang,
        loss_norm=None if comps is None else comps.norm,
        feat_l2_csid=_mean_l2(step.forward.features[id_mask]),
        feat_l2_csood=_mean_l2(step.forward.features[batch.is_ood]),
        logits_sorted_csid=_sorted_logit_curve(step.forward.logits[id_mask]),
        logits_sorted_csood=_sorted_logit_curve(step.forward.logits[batch.is_ood]),
        detector_acc=detector_accuracy(step.partition, batch.is_ood),
    )


def _load_model(model_or_path):
    if isinstance(model_or_path, (str, Path)):
        return TinyModel.load(model_or_path)
    return model_or_path.clone()


def run_episode(stream_cfg, adapt_cfg, model_checkpoint, continual=False):
    """Stream every corruption kind at the configured severity and evaluate.

    The model is reset to the checkpoint before each corruption kind unless
    `continual` is set, in which case one model adapts across the whole
    sequence. Deterministic: identical (configs, checkpoint) give identical
    reports.
    """
    base = _load_model(model_checkpoint)
    report = AdaptReport()
    model = bank = optimizer = None
    for kind in CORRUPTION_KINDS:
        if model is None or not continual:
            model = base.clone()
            bank = PrototypeBank.from_classifier(model.W_L)
            optimizer = make_optimizer(adapt_cfg.optimizer, adapt_cfg.lr, 2 * model.d_feat)
        scfg = replace(
            stream_cfg,
            corruption=CorruptionSpec(kind, stream_cfg.corruption.severity),
        )
        scores, flags, classes, preds = [], [], [], []
        det_hits = 0
        det_total = 0
        for t in range(adapt_cfg.batches_per_corruption):
            batch = sample_batch(scfg, t)
            try:
                step = adapt_step(model, bank, optimizer, batch.inputs, adapt_cfg)
            except (NumericError, FloatingPointError) as exc:
                raise NumericError(
                    f"episode aborted at corruption={kind} batch={t}: {exc}"
                ) from exc
            diag = _diagnose(kind, t, step, batch)
            report.batches.append(diag)
            scores.append(score(step.forward, EVAL_SCORE_KIND))
            flags.append(batch.is_ood)
            classes.append(batch.true_class)
            preds.append(step.forward.logits.argmax(axis=1))
            det_hits += diag.detector_acc * len(batch.is_ood)
            det_total += len(batch.is_ood)
        record = EpisodeRecord(
            ood_score=np.concatenate(scores),
            is_ood=np.concatenate(flags),
            true_class=np.concatenate(classes),
            predicted_class=np.concatenate(preds),
        )
        report.records[kind] = record
        report.per_corruption[kind] = compute_report(record, detector_acc=det_hits / det_total)
    report.mean = mean_report(report.per_corruption.values())
    return report


def run_ablation(stream_cfg, adapt_cfg, model_checkpoint):
    """The four loss-term masks (none / csid / csid+ang / all), each evaluated
    as a full episode."""
    base = _load_model(model_checkpoint)
    rows = {}
    for label, (use_csid, use_ang, use_norm) in ABLATION_MASKS:
        if not use_csid:
            acfg = replace(adapt_cfg, method="bn_adapt")
        else:
            masked = replace(
                adapt_cfg.loss,
                gamma1=adapt_cfg.loss.gamma1 if use_ang else 0.0,
                gamma2=adapt_cfg.loss.gamma2 if use_norm else 0.0,
            )
            acfg = replace(adapt_cfg, method="rosetta", loss=masked)
        rows[label] = run_episode(stream_cfg, acfg, base)
    return rows


def run_sweep(stream_cfg, adapt_cfg, model_checkpoint, *,
              gamma1_list=None, gamma2_list=None, tau_list=None):
    """Hyperparameter sweep: either a (gamma1, gamma2) grid or a tau list."""
    grid_mode = gamma1_list is not None or gamma2_list is not None
    if grid_mode and tau_list is not None:
        raise ConfigError("sweep takes either gamma lists or a tau list, not both")
    if grid_mode and (not gamma1_list or not gamma2_list):
        raise ConfigError("gamma sweeps need both gamma1_list and gamma2_list")
    if not grid_mode and not tau_list:
        raise ConfigError("sweep needs gamma lists or a tau list")
    base = _load_model(model_checkpoint)
    cells = []
    if grid_mode:
        for g1 in gamma1_list:
            for g2 in gamma2_list:
                loss = replace(adapt_cfg.loss, gamma1=float(g1), gamma2=float(g2))
                acfg = replace(adapt_cfg, method="rosetta", loss=loss)
                rep = run_episode(stream_cfg, acfg, base)
                cells.append({"gamma1": float(g1), "gamma2": float(g2), "report": rep.mean})
    else:
        for tau in tau_list:
            loss = replace(adapt_cfg.loss, tau=float(tau))
            acfg = replace(adapt_cfg, method="rosetta", loss=loss)
            rep = run_episode(stream_cfg, acfg, base)
            cells.append({"tau": float(tau), "report": rep.mean})
    return cells


def run_detector_audit(stream_cfg, model_checkpoint, n_batches=50):
    """Detector accuracy per corruption for the un-adapted model.

    The clustering detectors are fit per batch (their operating point during
    adaptation); the oracle rows scan one accuracy-maximising threshold over
    the pooled scores of the whole corruption stream. Forward passes use
    batch statistics, with no parameter updates anywhere.
    """
    base = _load_model(model_checkpoint)
    table = {label: {} for label, _ in AUDIT_DETECTORS}
    for kind in CORRUPTION_KINDS:
        scfg = replace(
            stream_cfg, corruption=CorruptionSpec(kind, stream_cfg.corruption.severity)
        )
        model = base.clone()
        outputs = []
        for t in range(n_batches):
            batch = sample_batch(scfg, t)
            outputs.append((forward(model, batch.inputs, "batch"), batch.is_ood))
        pooled = {
            k: np.concatenate([score(fo, k) for fo, _ in outputs])
            for k in ("entropy", "energy")
        }
        pooled_flags = np.concatenate([fl for _, fl in outputs])
        for label, spec in AUDIT_DETECTORS:
            if spec.is_oracle:
                _, acc = best_threshold(pooled[spec.score_kind], pooled_flags)
            else:
                hits = 0
                for fo, fl in outputs:
                    hits += detector_accuracy(partition(fo, spec), fl) * len(fl)
                acc = hits / len(pooled_flags)
            table[label][kind] = float(acc)
    for label in table:
        table[label]["mean"] = float(np.mean([table[label][k] for k in CORRUPTION_KINDS]))
    return table


def logit_l1_gap(model, stream_cfg, n_batches, kind=None):
    """Mean logit l1-norms (csID, csOOD) over a deterministic evaluation pass.

    Evaluation only: forwards with batch statistics on a throwaway copy, no
    updates. Used to compare adapted and un-adapted models on one stream.
    """
    kind = kind or stream_cfg.corruption.kind
    scfg = replace(stream_cfg, corruption=CorruptionSpec(kind, stream_cfg.corruption.severity))
    probe = model.clone()
    id_norms, ood_norms = [], []
    for t in range(n_batches):
        batch = sample_batch(scfg, t)
        fo = forward(probe, batch.inputs, "batch")
        l1 = np.abs(fo.logits).sum(axis=1)
        id_norms.extend(l1[~batch.is_ood])
        ood_norms.extend(l1[batch.is_ood])
    if not id_norms or not ood_norms:
        raise ContractError("logit_l1_gap needs both domains in the stream")
    return float(np.mean(id_norms)), float(np.mean(ood_norms))
