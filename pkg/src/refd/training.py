"""Training loops for the three regimes (RE / FD / one-stage).

Everything is plain numpy with hand-written backprop. Adam uses decoupled
weight decay; the learning rate at epoch k is lr * 2**(-(k // halve_every)).
Model selection keeps the epoch-end checkpoint with the best dev metric:
real-class F1 at the configured gate for RE, macro-F1 over the trained
classes otherwise. Fixed (seed, config, data) gives a bit-identical
parameter trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .containers import FeatureMatrix
from .errors import ConfigError, DataError, NumericalError
from .losses import (
    OcSoftmaxParams,
    RegMixupParams,
    cross_entropy,
    mixup_batch,
    oc_softmax_loss,
    one_hot,
    regmixup_loss,
)
from .metrics import f1_per_class, macro_f1
from .mlp import MlpModel, forward


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3  # desk-scale MLP default; large backbones want ~1e-5
    lr_halve_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    hidden_dim: int = 64
    feature_dim: int = 16
    # one-class loss (RE stage)
    oc_alpha: float = 20.0
    oc_m0: float = 0.9
    oc_m1: float = 0.2
    oc_dev_gate: float = 0.98  # gate used for dev real-class F1 selection
    # mixup regularizer (FD / one-stage); eta = 0 turns it off entirely
    mix_eta: float = 1.0
    mix_beta_a: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or self.lr_halve_every < 1:
            raise ConfigError("lr must be positive and lr_halve_every >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive, weight_decay nonnegative")
        if self.hidden_dim < 1 or self.feature_dim < 1:
            raise ConfigError("layer dims must be positive")
        if self.mix_eta < 0 or self.mix_beta_a <= 0:
            raise ConfigError("mix_eta must be >= 0 and mix_beta_a > 0")


def effective_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * 2.0 ** (-(epoch // cfg.lr_halve_every))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam_state(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig,
              lr: float | None = None):
    """One bias-corrected Adam update with decoupled weight decay.

    Functional: returns (new_params, new_state) without mutating inputs.
    """
    if lr is None:
        lr = cfg.lr
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k!r}")
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_p[k] = p - step - lr * cfg.weight_decay * p
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(m=new_m, v=new_v, t=t)


def _init_params(rng: np.random.Generator, d_raw: int, cfg: TrainConfig,
                 head: str, n_classes: int = 0) -> dict:
    params = {
        "W1": rng.normal(size=(d_raw, cfg.hidden_dim)) * np.sqrt(2.0 / d_raw),
        "b1": np.zeros(cfg.hidden_dim),
        "W2": rng.normal(size=(cfg.hidden_dim, cfg.feature_dim))
        * np.sqrt(1.0 / cfg.hidden_dim),
        "b2": np.zeros(cfg.feature_dim),
    }
    if head == "direction":
        params["w0"] = rng.normal(size=cfg.feature_dim)
    else:
        params["Wh"] = rng.normal(size=(cfg.feature_dim, n_classes)) * np.sqrt(
            1.0 / cfg.feature_dim
        )
        params["bh"] = np.zeros(n_classes)
    return params


def _trunk_forward(params: dict, x: np.ndarray):
    z1 = x @ params["W1"] + params["b1"]
    h = np.maximum(z1, 0.0)
    f = h @ params["W2"] + params["b2"]
    return z1, h, f


def _trunk_backward(params: dict, x, z1, h, grad_f) -> dict:
    grad_W2 = h.T @ grad_f
    grad_b2 = grad_f.sum(axis=0)
    grad_h = grad_f @ params["W2"].T
    grad_z1 = np.where(z1 > 0, grad_h, 0.0)
    return {
        "W1": x.T @ grad_z1,
        "b1": grad_z1.sum(axis=0),
        "W2": grad_W2,
        "b2": grad_b2,
    }


def _add_grads(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


def _as_xy(features, labels):
    x = features.data if isinstance(features, FeatureMatrix) else np.asarray(
        features, dtype=np.float64
    )
    y = np.asarray(labels, dtype=np.int64).ravel()
    if x.ndim != 2 or y.shape[0] != x.shape[0]:
        raise DataError(f"features {x.shape} do not align with labels {y.shape}")
    return x, y


def _batches(rng: np.random.Generator, n: int, batch_size: int, min_size: int):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo:lo + batch_size]
        if idx.shape[0] >= min_size:
            yield idx


def _model_from_params(stage: str, params: dict, class_ids: tuple) -> MlpModel:
    kw = {}
    if stage == "RE":
        kw["head_w0"] = params["w0"]
    else:
        kw["head_W"] = params["Wh"]
        kw["head_b"] = params["bh"]
    return MlpModel(stage=stage, W1=params["W1"], b1=params["b1"],
                    W2=params["W2"], b2=params["b2"], class_ids=class_ids, **kw)


def _snapshot(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def train_real_emphasis(train_features, train_labels, dev_features, dev_labels,
                        cfg: TrainConfig, callback=None) -> MlpModel:
    """One-class training: real (0) pulled toward w0, fake (1) pushed away.

    Returns the epoch-end checkpoint with the best dev real-class F1, with
    real predicted whenever the cosine score clears cfg.oc_dev_gate.
    """
    x, y = _as_xy(train_features, train_labels)
    xd, yd = _as_xy(dev_features, dev_labels)
    if not np.all(np.isin(y, (0, 1))) or not np.all(np.isin(yd, (0, 1))):
        raise DataError("RE labels must be collapsed to {0 real, 1 fake}")
    if not np.any(y == 0):
        raise DataError("no real samples in training data")

    rng = np.random.default_rng(cfg.seed)
    params = _init_params(rng, x.shape[1], cfg, head="direction")
    state = init_adam_state(params)
    best_metric, best_params, best_epoch = -np.inf, _snapshot(params), -1

    for epoch in range(cfg.epochs):
        lr = effective_lr(cfg, epoch)
        losses = []
        for idx in _batches(rng, x.shape[0], cfg.batch_size, min_size=1):
            xb, yb = x[idx], y[idx]
            z1, h, f = _trunk_forward(params, xb)
            p = OcSoftmaxParams(w0=params["w0"], alpha=cfg.oc_alpha,
                                m0=cfg.oc_m0, m1=cfg.oc_m1)
            loss, grad_f, grad_w0 = oc_softmax_loss(f, yb, p)
            grads = _trunk_backward(params, xb, z1, h, grad_f)
            grads["w0"] = grad_w0
            params, state = adam_step(params, grads, state, cfg, lr=lr)
            losses.append(loss)

        model = _model_from_params("RE", params, ())
        scores = forward(model, xd).oc_scores
        preds = np.where(scores >= cfg.oc_dev_gate, 0, 1)
        metric = f1_per_class(preds, yd, class_set=[0])[0]
        # >= as in the classifier loop: ties go to the most-trained epoch
        if metric >= best_metric:
            best_metric, best_params, best_epoch = metric, _snapshot(params), epoch
        if callback is not None:
            callback(stage="RE", epoch=epoch, lr=lr,
                     train_loss=float(np.mean(losses)), dev_metric=metric)

    return _model_from_params("RE", best_params, ())


def _train_classifier(stage: str, x, y, xd, yd, cfg: TrainConfig,
                      class_ids: tuple, callback=None) -> MlpModel:
    index_of = {c: i for i, c in enumerate(class_ids)}
    y_idx = np.array([index_of[v] for v in y], dtype=np.int64)
    n_classes = len(class_ids)
    use_mixup = cfg.mix_eta > 0
    if use_mixup and cfg.batch_size < 2:
        raise ConfigError("mixup needs batch_size >= 2 (or set mix_eta=0)")

    rng = np.random.default_rng(cfg.seed)
    params = _init_params(rng, x.shape[1], cfg, head="linear", n_classes=n_classes)
    state = init_adam_state(params)
    best_metric, best_params, best_epoch = -np.inf, _snapshot(params), -1
    mix = RegMixupParams(eta=cfg.mix_eta if use_mixup else 0.0,
                         beta_a=cfg.mix_beta_a)

    for epoch in range(cfg.epochs):
        lr = effective_lr(cfg, epoch)
        losses = []
        for idx in _batches(rng, x.shape[0], cfg.batch_size,
                            min_size=2 if use_mixup else 1):
            xb = x[idx]
            tb = one_hot(y_idx[idx], n_classes)
            z1, h, f = _trunk_forward(params, xb)
            logits = f @ params["Wh"] + params["bh"]

            if use_mixup:
                # mixup happens in input space; the mixed batch gets its own
                # full forward/backward pass through shared weights
                step_seed = int(rng.integers(2 ** 63))
                xm, tm, _ = mixup_batch(xb, tb, cfg.mix_beta_a, step_seed)
                z1m, hm, fm = _trunk_forward(params, xm)
                logits_m = fm @ params["Wh"] + params["bh"]
                loss, gc, gm = regmixup_loss(logits, tb, logits_m, tm, mix)
                grads = _trunk_backward(params, xb, z1, h, gc @ params["Wh"].T)
                grads_m = _trunk_backward(params, xm, z1m, hm, gm @ params["Wh"].T)
                grads = _add_grads(grads, grads_m)
                grads["Wh"] = f.T @ gc + fm.T @ gm
                grads["bh"] = gc.sum(axis=0) + gm.sum(axis=0)
            else:
                loss, gc = cross_entropy(logits, tb)
                grads = _trunk_backward(params, xb, z1, h, gc @ params["Wh"].T)
                grads["Wh"] = f.T @ gc
                grads["bh"] = gc.sum(axis=0)

            params, state = adam_step(params, grads, state, cfg, lr=lr)
            losses.append(loss)

        model = _model_from_params(stage, params, class_ids)
        dev_logits = forward(model, xd).logits.data
        preds = np.asarray(class_ids)[np.argmax(dev_logits, axis=1)]
        metric = macro_f1(f1_per_class(preds, yd, class_set=class_ids))
        # >= so dev-metric ties resolve to the most-trained checkpoint;
        # an easy dev split saturates early and would otherwise freeze
        # the run at a barely-trained epoch
        if metric >= best_metric:
            best_metric, best_params, best_epoch = metric, _snapshot(params), epoch
        if callback is not None:
            callback(stage=stage, epoch=epoch, lr=lr,
                     train_loss=float(np.mean(losses)), dev_metric=metric)

    return _model_from_params(stage, best_params, class_ids)


def train_fake_dispersion(train_features, train_labels, dev_features,
                          dev_labels, cfg: TrainConfig,
                          callback=None) -> MlpModel:
    """6-way fake-algorithm classifier (labels 1..6) with the mixup term."""
    x, y = _as_xy(train_features, train_labels)
    xd, yd = _as_xy(dev_features, dev_labels)
    for name, arr in (("train", y), ("dev", yd)):
        if not np.all((arr >= 1) & (arr <= 6)):
            raise DataError(f"{name} labels must lie in 1..6 for fake dispersion")
    return _train_classifier("FD", x, y, xd, yd, cfg,
                             class_ids=(1, 2, 3, 4, 5, 6), callback=callback)


def train_one_stage(train_features, train_labels, dev_features, dev_labels,
                    cfg: TrainConfig, callback=None) -> MlpModel:
    """7-way baseline classifier over labels 0..6 (real is just a class)."""
    x, y = _as_xy(train_features, train_labels)
    xd, yd = _as_xy(dev_features, dev_labels)
    for name, arr in (("train", y), ("dev", yd)):
        if not np.all((arr >= 0) & (arr <= 6)):
            raise DataError(f"{name} labels must lie in 0..6 for one-stage")
    return _train_classifier("one-stage", x, y, xd, yd, cfg,
                             class_ids=(0, 1, 2, 3, 4, 5, 6), callback=callback)
