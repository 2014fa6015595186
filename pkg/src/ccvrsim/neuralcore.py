"""Dense ReLU network split into a feature extractor and a linear classifier.

Everything up to the penultimate representation ``z`` is the extractor;
the last linear map is the classifier, one weight row per class.  Two
classifier heads exist:

* ``plain``: ``softmax(W z + b)``
* ``weight_normalized``: ``softmax_i(w_i . z / ||w_i||)`` with no bias,
  applied during both training and inference.

Gradients are written out by hand; there is no autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, NumericError
from .transform import TransformCfg, transform_features

HEADS = ("plain", "weight_normalized")
ACTIVATIONS = ("relu", "linear")
CHECKPOINT_FORMAT = "ccvrsim.model"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Parameters of the decomposed model.

    Weights are stored ``(out, in)``.  ``classifier_bias`` is ``None`` for
    the weight-normalized head.  ``transform`` is set on calibrated models
    whose classifier expects transformed features at inference.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray | None
    activations: list[str] = field(default_factory=list)
    head: str = "plain"
    transform: TransformCfg | None = None

    def __post_init__(self) -> None:
        if not self.activations:
            self.activations = ["relu"] * len(self.weights)
        if self.head not in HEADS:
            raise ArgumentError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ArgumentError("weights, biases and activations must have equal length")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ArgumentError(f"unknown activation {a!r}")
        width = self.weights[0].shape[1] if self.weights else self.classifier_weight.shape[1]
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or W.shape[1] != width or b.shape != (W.shape[0],):
                raise ArgumentError("extractor layer shapes do not chain")
            width = W.shape[0]
        if self.classifier_weight.shape[1] != width:
            raise ArgumentError("classifier input does not match feature dimension")
        if self.classifier_bias is not None and self.classifier_bias.shape != (self.classifier_weight.shape[0],):
            raise ArgumentError("classifier bias shape mismatch")

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[1] if self.weights else self.classifier_weight.shape[1])

    @property
    def feature_dim(self) -> int:
        return int(self.classifier_weight.shape[1])

    @property
    def class_count(self) -> int:
        return int(self.classifier_weight.shape[0])

    def tensors(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order, classifier last."""
        out: list[np.ndarray] = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        out.append(self.classifier_weight)
        if self.classifier_bias is not None:
            out.append(self.classifier_bias)
        return out

    def classifier_indices(self) -> list[int]:
        n = 2 * len(self.weights)
        return [n, n + 1] if self.classifier_bias is not None else [n]

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "ModelParams":
        tensors = list(tensors)
        n = len(self.weights)
        if len(tensors) != len(self.tensors()):
            raise ArgumentError("tensor count mismatch")
        return replace(
            self,
            weights=tensors[0 : 2 * n : 2],
            biases=tensors[1 : 2 * n : 2],
            classifier_weight=tensors[2 * n],
            classifier_bias=tensors[2 * n + 1] if self.classifier_bias is not None else None,
            activations=list(self.activations),
        )

    def copy(self) -> "ModelParams":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def zeros_like(self) -> "ModelParams":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def extractor_only(self) -> "ModelParams":
        """Copy with the classifier zeroed, as broadcast to clients for feature extraction."""
        m = self.copy()
        m.classifier_weight[...] = 0.0
        if m.classifier_bias is not None:
            m.classifier_bias[...] = 0.0
        return m


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list[np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ArgumentError("learning_rate must be nonnegative")


@dataclass(frozen=True)
class LossConfig:
    """Which regularizers accompany cross-entropy.

    ``prox_mu`` penalizes every parameter's distance to ``anchor`` (FedProx);
    ``cls_prox_mu`` penalizes only the classifier's distance (clsprox).
    """

    head: str = "plain"
    prox_mu: float = 0.0
    cls_prox_mu: float = 0.0
    anchor: ModelParams | None = None

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.prox_mu < 0 or self.cls_prox_mu < 0:
            raise ConfigError("proximal coefficients must be nonnegative")
        if (self.prox_mu > 0 or self.cls_prox_mu > 0) and self.anchor is None:
            raise ConfigError("a proximal term is active but no anchor parameters were given")


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_model(
    input_dim: int,
    class_count: int,
    hidden: Sequence[int] = (64, 32),
    feature_dim: int = 16,
    head: str = "plain",
    seed: int = 0,
) -> ModelParams:
    """Glorot-uniform MLP ``input -> hidden... -> feature_dim -> class_count``, zero biases."""
    if head not in HEADS:
        raise ArgumentError(f"unknown head {head!r}")
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, feature_dim]
    weights = [_glorot(rng, o, i) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    cw = _glorot(rng, class_count, feature_dim)
    cb = np.zeros(class_count) if head == "plain" else None
    return ModelParams(weights, biases, cw, cb, ["relu"] * len(weights), head)


def _check_input(m: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ArgumentError(f"expected input of shape (n, {m.input_dim}), got {x.shape}")
    return x


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(a, 0.0) if kind == "relu" else a


def forward_features(m: ModelParams, x: np.ndarray) -> np.ndarray:
    """Extractor output ``z = f(x)``."""
    h = _check_input(m, x)
    for W, b, kind in zip(m.weights, m.biases, m.activations):
        h = _act(h @ W.T + b, kind)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite feature values")
    return h


def logits(m: ModelParams, z: np.ndarray, head: str | None = None) -> np.ndarray:
    head = m.head if head is None else head
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != m.feature_dim:
        raise ArgumentError(f"expected features of shape (n, {m.feature_dim}), got {z.shape}")
    if head == "plain":
        out = z @ m.classifier_weight.T
        if m.classifier_bias is not None:
            out = out + m.classifier_bias
        return out
    if head == "weight_normalized":
        norms = np.linalg.norm(m.classifier_weight, axis=1)
        if np.any(norms == 0):
            raise NumericError("zero-norm classifier row under the weight-normalized head")
        return z @ (m.classifier_weight / norms[:, None]).T
    raise ArgumentError(f"unknown head {head!r}")


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def classify(m: ModelParams, z: np.ndarray, head: str | None = None) -> np.ndarray:
    """Class probabilities for a batch of features."""
    return softmax(logits(m, z, head))


def layer_activations(m: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Output of every extractor layer followed by the classifier logits."""
    h = _check_input(m, x)
    outs = []
    for W, b, kind in zip(m.weights, m.biases, m.activations):
        h = _act(h @ W.T + b, kind)
        outs.append(h)
    z = h if m.transform is None else transform_features(h, m.transform)
    outs.append(logits(m, z))
    return outs


def predict_proba(m: ModelParams, x: np.ndarray) -> np.ndarray:
    """Full inference path, applying the calibrated feature transform if present."""
    z = forward_features(m, x)
    if m.transform is not None:
        z = transform_features(z, m.transform)
    return classify(m, z)


def predict(m: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(m, x), axis=1)


def _classifier_backward(
    m: ModelParams, z: np.ndarray, y: np.ndarray, head: str
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Cross-entropy, classifier grads and ``dL/dz`` for a feature batch."""
    n = z.shape[0]
    if head == "weight_normalized":
        norms = np.linalg.norm(m.classifier_weight, axis=1)
        if np.any(norms == 0):
            raise NumericError("zero-norm classifier row under the weight-normalized head")
        unit = m.classifier_weight / norms[:, None]
        scores = z @ unit.T
    else:
        scores = z @ m.classifier_weight.T
        if m.classifier_bias is not None:
            scores = scores + m.classifier_bias
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), y]))

    g = np.exp(shifted - lse[:, None])
    g[np.arange(n), y] -= 1.0
    g /= n
    if head == "weight_normalized":
        d_unit = g.T @ z
        radial = np.sum(d_unit * unit, axis=1, keepdims=True)
        grads = [(d_unit - radial * unit) / norms[:, None]]
        dz = g @ unit
    else:
        grads = [g.T @ z]
        if m.classifier_bias is not None:
            grads.append(g.sum(axis=0))
        dz = g @ m.classifier_weight
    return loss, grads, dz


def _check_labels(m: ModelParams, y: np.ndarray, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ArgumentError("label batch does not match input batch")
    if n == 0:
        raise ArgumentError("empty batch")
    if y.min() < 0 or y.max() >= m.class_count:
        raise ArgumentError("label outside [0, C)")
    return y


def _add_proximal(m: ModelParams, cfg: LossConfig, loss: float, grads: list[np.ndarray]) -> float:
    if cfg.prox_mu == 0 and cfg.cls_prox_mu == 0:
        return loss
    params = m.tensors()
    anchor = cfg.anchor.tensors()
    if len(anchor) != len(params) or any(a.shape != p.shape for a, p in zip(anchor, params)):
        raise ConfigError("anchor parameters do not match the model")
    cls_idx = set(m.classifier_indices())
    for i, (p, a) in enumerate(zip(params, anchor)):
        mu = cfg.prox_mu + (cfg.cls_prox_mu if i in cls_idx else 0.0)
        if mu == 0:
            continue
        diff = p - a
        loss += 0.5 * mu * float(np.sum(diff * diff))
        grads[i] = grads[i] + mu * diff
    return loss


def loss_and_grads(
    m: ModelParams, x: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None
) -> tuple[float, ModelParams]:
    """Mean cross-entropy plus active proximal terms, with exact gradients.

    The gradient container is a ModelParams with the same shapes as ``m``.
    """
    cfg = cfg or LossConfig(head=m.head)
    x = _check_input(m, x)
    y = _check_labels(m, y, x.shape[0])

    pre: list[np.ndarray] = []
    inputs: list[np.ndarray] = []
    h = x
    for W, b, kind in zip(m.weights, m.biases, m.activations):
        inputs.append(h)
        a = h @ W.T + b
        pre.append(a)
        h = _act(a, kind)

    loss, cls_grads, dh = _classifier_backward(m, h, y, cfg.head)
    layer_grads: list[np.ndarray] = []
    for W, a, h_in, kind in zip(reversed(m.weights), reversed(pre), reversed(inputs), reversed(m.activations)):
        da = dh * (a > 0) if kind == "relu" else dh
        layer_grads.append(da.sum(axis=0))
        layer_grads.append(da.T @ h_in)
        dh = da @ W
    grads = layer_grads[::-1] + cls_grads
    if m.classifier_bias is not None and len(cls_grads) == 1:
        grads.append(np.zeros_like(m.classifier_bias))

    loss = _add_proximal(m, cfg, loss, grads)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, m.with_tensors(grads)


def sgd_step(
    m: ModelParams, grads: ModelParams, opt: OptimizerState, trainable: Sequence[int] | None = None
) -> ModelParams:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``g <- g + wd * w; v <- momentum * v + g; w <- w - lr * v``.  Only the
    tensors listed in ``trainable`` (all by default) are touched.
    """
    params = m.tensors()
    g_all = grads.tensors()
    if len(params) != len(g_all) or any(p.shape != g.shape for p, g in zip(params, g_all)):
        raise ArgumentError("gradient shapes do not match parameters")
    if opt.velocity is None:
        opt.velocity = [np.zeros_like(p) for p in params]
    idx = range(len(params)) if trainable is None else trainable
    new = list(params)
    for i in idx:
        g = g_all[i] + opt.weight_decay * params[i] if opt.weight_decay else g_all[i]
        opt.velocity[i] = opt.momentum * opt.velocity[i] + g if opt.momentum else g
        new[i] = params[i] - opt.learning_rate * opt.velocity[i]
    return m.with_tensors(new)


def classifier_retrain_step(
    m: ModelParams, z: np.ndarray, y: np.ndarray, opt: OptimizerState, head: str | None = None
) -> tuple[float, ModelParams]:
    """One SGD step on the classifier alone, features given directly.

    Extractor tensors are passed through untouched (same arrays).
    """
    head = m.head if head is None else head
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != m.feature_dim:
        raise ArgumentError(f"expected features of shape (n, {m.feature_dim}), got {z.shape}")
    y = _check_labels(m, y, z.shape[0])
    loss, cls_grads, _ = _classifier_backward(m, z, y, head)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss during classifier retraining")
    grads = [np.zeros_like(t) for t in m.tensors()]
    for i, g in zip(m.classifier_indices(), cls_grads):
        grads[i] = g
    return loss, sgd_step(m, m.with_tensors(grads), opt, trainable=m.classifier_indices())


def retrain_classifier(
    m: ModelParams,
    z: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    momentum: float,
    weight_decay: float,
    seed: int,
) -> ModelParams:
    """Minibatch SGD on the classifier starting from its current weights."""
    if epochs < 0 or batch_size < 1:
        raise ArgumentError("epochs must be >= 0 and batch_size >= 1")
    n = len(y)
    if epochs == 0 or n == 0:
        return m
    opt = OptimizerState(learning_rate, momentum, weight_decay)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            _, m = classifier_retrain_step(m, z[sel], y[sel], opt)
    return m


def model_to_dict(m: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "head": m.head,
        "extractor": [
            {
                "activation": kind,
                "shape": list(W.shape),
                "weight": W.ravel().tolist(),
                "bias": b.tolist(),
            }
            for W, b, kind in zip(m.weights, m.biases, m.activations)
        ],
        "classifier": {
            "shape": list(m.classifier_weight.shape),
            "weight": m.classifier_weight.ravel().tolist(),
            "bias": None if m.classifier_bias is None else m.classifier_bias.tolist(),
        },
        "transform": None if m.transform is None else m.transform.to_dict(),
    }


def model_from_dict(payload: dict) -> ModelParams:
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ArgumentError("not a supported model checkpoint")
    weights, biases, acts = [], [], []
    for layer in payload["extractor"]:
        weights.append(np.asarray(layer["weight"], dtype=np.float64).reshape(layer["shape"]))
        biases.append(np.asarray(layer["bias"], dtype=np.float64))
        acts.append(layer["activation"])
    cls = payload["classifier"]
    cw = np.asarray(cls["weight"], dtype=np.float64).reshape(cls["shape"])
    cb = None if cls["bias"] is None else np.asarray(cls["bias"], dtype=np.float64)
    tr = payload.get("transform")
    transform = None if tr is None else TransformCfg(bool(tr["apply_relu"]), float(tr["tukey_lambda"]))
    return ModelParams(weights, biases, cw, cb, acts, payload["head"], transform)


def save_model(path: str | Path, m: ModelParams) -> None:
    # float repr round-trips exactly through json
    Path(path).write_text(json.dumps(model_to_dict(m), sort_keys=True))


def load_model(path: str | Path) -> ModelParams:
    return model_from_dict(json.loads(Path(path).read_text()))
