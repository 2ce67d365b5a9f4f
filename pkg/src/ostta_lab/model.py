"""Tiny differentiable backbone: linear -> batch-norm -> rectifier, plus a
fixed bias-free linear classifier.

The batch-norm affine pair (gamma, beta) is the only thing adaptation is
allowed to touch; everything else is written once by pretraining. Forward in
"batch" statistics mode normalises by the current batch mean/variance and
replaces the running statistics with them (the BN-Adapt convention); "running"
mode uses the stored statistics and never mutates state.
"""

from dataclasses import dataclass

import numpy as np

from .mathcore import ContractError, NumericError, require_finite, softmax

CHECKPOINT_VERSION = 1
_STAT_MODES = ("running", "batch")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ContractError("bn eps must be > 0")
        if np.any(self.running_var < 0.0):
            raise ContractError("running variance entries must be >= 0")


@dataclass
class ForwardOutput:
    features: np.ndarray    # (B, d_feat), post-activation
    logits: np.ndarray      # (B, K), exactly features @ W_L
    batch_mean: np.ndarray  # the statistics the normalisation used
    batch_var: np.ndarray


@dataclass
class TinyModel:
    W1: np.ndarray          # (d_in, d_feat)
    b1: np.ndarray          # (d_feat,)
    bn: BatchNormState
    W_L: np.ndarray         # (d_feat, K), held fixed during adaptation
    activation: str = "relu"

    def __post_init__(self):
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        d_feat = self.W1.shape[1]
        for name, arr, shape in [
            ("b1", self.b1, (d_feat,)),
            ("gamma", self.bn.gamma, (d_feat,)),
            ("beta", self.bn.beta, (d_feat,)),
            ("running_mean", self.bn.running_mean, (d_feat,)),
            ("running_var", self.bn.running_var, (d_feat,)),
        ]:
            if arr.shape != shape:
                raise ContractError(f"{name} must have shape {shape}, got {arr.shape}")
        if self.W_L.shape[0] != d_feat:
            raise ContractError("W_L rows must match the feature dimension")

    @property
    def d_in(self):
        return self.W1.shape[0]

    @property
    def d_feat(self):
        return self.W1.shape[1]

    @property
    def n_classes(self):
        return self.W_L.shape[1]

    @classmethod
    def create(cls, d_in=32, d_feat=16, n_classes=4, seed=0, support=8):
        """Fresh model with receptive-field connectivity.

        Each hidden channel reads a contiguous (circular) block of `support`
        input coordinates, so channels are input-localized rather than dense
        random mixtures; per-channel scale/shift updates can then act on
        distinct parts of the input space.
        """
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        support = min(support, d_in)
        stride = max(d_in // d_feat, 1)
        W1 = np.zeros((d_in, d_feat))
        for j in range(d_feat):
            idx = (np.arange(support) + j * stride) % d_in
            W1[idx, j] = rng.standard_normal(support) / np.sqrt(support)
        W_L = rng.standard_normal((d_feat, n_classes)) / np.sqrt(d_feat)
        bn = BatchNormState(
            gamma=np.ones(d_feat),
            beta=np.zeros(d_feat),
            running_mean=np.zeros(d_feat),
            running_var=np.ones(d_feat),
        )
        return cls(W1=W1, b1=np.zeros(d_feat), bn=bn, W_L=W_L)

    def clone(self):
        bn = BatchNormState(
            gamma=self.bn.gamma.copy(),
            beta=self.bn.beta.copy(),
            running_mean=self.bn.running_mean.copy(),
            running_var=self.bn.running_var.copy(),
            eps=self.bn.eps,
        )
        return TinyModel(
            W1=self.W1.copy(), b1=self.b1.copy(), bn=bn, W_L=self.W_L.copy(),
            activation=self.activation,
        )

    def trainable_parameters(self):
        """Flat copy of the adaptable parameters: gamma then beta."""
        return np.concatenate([self.bn.gamma, self.bn.beta])

    def set_trainable_parameters(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (2 * self.d_feat,):
            raise ContractError(f"expected {2 * self.d_feat} scalars, got shape {flat.shape}")
        self.bn.gamma = flat[: self.d_feat].copy()
        self.bn.beta = flat[self.d_feat:].copy()

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(
                fh,
                version=np.array(CHECKPOINT_VERSION),
                W1=self.W1, b1=self.b1,
                gamma=self.bn.gamma, beta=self.bn.beta,
                running_mean=self.bn.running_mean, running_var=self.bn.running_var,
                eps=np.array(self.bn.eps),
                W_L=self.W_L,
                activation=np.array(self.activation),
            )

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = np.load(fh, allow_pickle=False)
            version = int(data["version"])
            if version != CHECKPOINT_VERSION:
                raise ContractError(f"unsupported checkpoint version {version}")
            bn = BatchNormState(
                gamma=data["gamma"], beta=data["beta"],
                running_mean=data["running_mean"], running_var=data["running_var"],
                eps=float(data["eps"]),
            )
            return cls(
                W1=data["W1"], b1=data["b1"], bn=bn, W_L=data["W_L"],
                activation=str(data["activation"]),
            )


def forward_cache(model, batch, stat_mode):
    """Forward pass keeping every intermediate needed by the backward pass.

    Does not mutate the model; `forward` is the mutating public entry point.
    """
    batch = require_finite(batch, "batch")
    if batch.ndim != 2 or batch.shape[1] != model.d_in:
        raise ContractError(f"batch must be (B, {model.d_in}), got {batch.shape}")
    if stat_mode not in _STAT_MODES:
        raise ContractError(f"stat_mode must be one of {_STAT_MODES}")
    z = batch @ model.W1 + model.b1
    if stat_mode == "batch":
        mu = z.mean(axis=0)
        var = z.var(axis=0)  # population variance; eps guards zero-variance features
    else:
        mu = model.bn.running_mean
        var = model.bn.running_var
    inv_std = 1.0 / np.sqrt(var + model.bn.eps)
    xhat = (z - mu) * inv_std
    u = model.bn.gamma * xhat + model.bn.beta
    a = np.maximum(u, 0.0)
    logits = a @ model.W_L
    if not np.all(np.isfinite(logits)):
        raise NumericError("forward pass produced non-finite logits")
    return {
        "x": batch, "z": z, "mu": mu, "var": var, "inv_std": inv_std,
        "xhat": xhat, "u": u, "a": a, "logits": logits, "stat_mode": stat_mode,
    }


def forward(model, batch, stat_mode="running"):
    cache = forward_cache(model, batch, stat_mode)
    if stat_mode == "batch":
        model.bn.running_mean = cache["mu"].copy()
        model.bn.running_var = cache["var"].copy()
    return ForwardOutput(
        features=cache["a"],
        logits=cache["logits"],
        batch_mean=np.array(cache["mu"], copy=True),
        batch_var=np.array(cache["var"], copy=True),
    )


def backward_from_cache(model, cache, dfeatures=None, dlogits=None):
    """Parameter gradients of a scalar loss given upstream gradients on the
    features and/or logits of a cached forward pass.

    In batch statistics mode the gradient through the normaliser includes the
    dependence of the batch mean/variance on the pre-BN activations, which is
    what pretraining needs; gamma/beta gradients do not involve that path
    because the statistics are taken before the affine map.
    """
    a = cache["a"]
    B = a.shape[0]
    da = np.zeros_like(a)
    dW_L = np.zeros_like(model.W_L)
    if dlogits is not None:
        da += dlogits @ model.W_L.T
        dW_L = a.T @ dlogits
    if dfeatures is not None:
        da += dfeatures
    du = da * (cache["u"] > 0.0)
    dgamma = (du * cache["xhat"]).sum(axis=0)
    dbeta = du.sum(axis=0)
    dxhat = du * model.bn.gamma
    if cache["stat_mode"] == "batch":
        s1 = dxhat.sum(axis=0)
        s2 = (dxhat * cache["xhat"]).sum(axis=0)
        dz = cache["inv_std"] / B * (B * dxhat - s1 - cache["xhat"] * s2)
    else:
        dz = dxhat * cache["inv_std"]
    dW1 = cache["x"].T @ dz
    db1 = dz.sum(axis=0)
    grads = {"W1": dW1, "b1": db1, "gamma": dgamma, "beta": dbeta, "W_L": dW_L}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return grads


def pretrain(model, clean_dataset, epochs=200, lr=0.1):
    """Full-parameter gradient descent on cross-entropy over the clean set.

    Full-batch updates; running BN statistics are set from the training data
    at the end. Returns the per-epoch training log; a non-decreasing loss
    between consecutive epochs is recorded as a warning, not a failure.
    With epochs == 0 the model is left untouched and the log is empty.
    """
    if epochs == 0:
        return []
    X = np.vstack([b.inputs for b in clean_dataset])
    y = np.concatenate([b.true_class for b in clean_dataset])
    if any(b.is_ood.any() for b in clean_dataset):
        raise ContractError("pretraining data must not contain csOOD samples")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ContractError("pretraining labels must be valid known-class indices")
    n = len(y)
    onehot = np.zeros((n, model.n_classes))
    onehot[np.arange(n), y] = 1.0

    log = []
    prev_ce = None
    for epoch in range(epochs):
        cache = forward_cache(model, X, "batch")
        p = softmax(cache["logits"])
        ce = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))
        acc = float(np.mean(cache["logits"].argmax(axis=1) == y))
        entry = {"epoch": epoch, "cross_entropy": ce, "accuracy": acc}
        if prev_ce is not None and ce >= prev_ce:
            entry["warning"] = "loss did not decrease"
        log.append(entry)
        prev_ce = ce

        grads = backward_from_cache(model, cache, dlogits=(p - onehot) / n)
        model.W1 -= lr * grads["W1"]
        model.b1 -= lr * grads["b1"]
        model.bn.gamma -= lr * grads["gamma"]
        model.bn.beta -= lr * grads["beta"]
        model.W_L -= lr * grads["W_L"]

    # Freeze running statistics to the training-set statistics and report the
    # final state of the trained model.
    fo = forward(model, X, "batch")
    p = softmax(fo.logits)
    ce = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))
    acc = float(np.mean(fo.logits.argmax(axis=1) == y))
    log.append({"epoch": epochs, "cross_entropy": ce, "accuracy": acc, "final": True})
    return log
