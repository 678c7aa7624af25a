"""Training losses.

One-class softmax: a learned direction w0 for the real class with two
angular margins,

    L = (1/N) sum_i log(1 + exp(alpha * (m_{y_i} - w0_hat . x_hat_i) * (-1)^{y_i}))

where y=0 is real (pulled inside the m0 cone) and y=1 is fake (pushed
outside the m1 cone). Gradients are exact analytic derivatives, including
the chain through both L2 normalizations.

RegMixup: CE(clean) + eta * CE(mixed), where the mixed batch interpolates
each sample with a partner drawn from one random permutation of the batch
and lambda ~ Beta(a, a).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .containers import FeatureMatrix
from .errors import DataError, NumericalError
from .numerics import l2_normalize_rows


@dataclass(frozen=True)
class OcSoftmaxParams:
    w0: np.ndarray
    alpha: float = 20.0
    m0: float = 0.9
    m1: float = 0.2

    def __post_init__(self):
        w = np.asarray(self.w0, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)) or np.linalg.norm(w) == 0.0:
            raise DataError("w0 must be finite and nonzero")
        if self.alpha <= 0:
            raise DataError(f"alpha must be positive, got {self.alpha}")
        if not (-1.0 < self.m0 <= 1.0) or not (-1.0 <= self.m1 < 1.0):
            raise DataError(f"margins out of range: m0={self.m0}, m1={self.m1}")
        if self.m0 <= self.m1:
            raise DataError(
                f"need m0 > m1 (real cone inside fake exclusion cone), "
                f"got m0={self.m0} <= m1={self.m1}"
            )
        object.__setattr__(self, "w0", w)


@dataclass(frozen=True)
class MixupDraw:
    partner_index: int
    lam: float  # the interpolation weight lambda


@dataclass(frozen=True)
class RegMixupParams:
    eta: float = 1.0
    beta_a: float = 10.0

    def __post_init__(self):
        if self.eta < 0:
            raise DataError(f"eta must be nonnegative, got {self.eta}")
        if self.beta_a <= 0:
            raise DataError(f"beta_a must be positive, got {self.beta_a}")


def _softplus(u: np.ndarray) -> np.ndarray:
    # stable in both tails; softplus(0) = log1p(1) = ln 2 exactly
    return np.where(u > 0, u + np.log1p(np.exp(-np.abs(u))),
                    np.log1p(np.exp(np.minimum(u, 0.0))))


def _sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return np.asarray(x.data, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def oc_score(feature, p: OcSoftmaxParams) -> float:
    """Cosine between the (normalized) feature and the real-class direction."""
    f = np.asarray(feature, dtype=np.float64).ravel()
    fhat = l2_normalize_rows(f[None, :])[0]
    what = p.w0 / np.linalg.norm(p.w0)
    return float(fhat @ what)


def oc_scores(features, p: OcSoftmaxParams) -> np.ndarray:
    """Row-wise oc_score."""
    x = _as_array(features)
    xhat = l2_normalize_rows(x)
    what = p.w0 / np.linalg.norm(p.w0)
    return xhat @ what


def oc_softmax_loss(features, labels, p: OcSoftmaxParams):
    """Returns (loss, grad_features, grad_w0).

    Gradients flow through both normalizations: with s = w0_hat . x_hat,
    ds/dx = (w0_hat - s*x_hat)/|x| and ds/dw0 = (x_hat - s*w0_hat)/|w0|.
    """
    x = _as_array(features)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DataError(f"features {x.shape} vs labels {y.shape}")
    if not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be 0 (real) or 1 (fake)")
    y = y.astype(np.int64)

    n = x.shape[0]
    xnorm = np.linalg.norm(x, axis=1)
    if np.any(xnorm < 1e-30):
        raise DataError("zero feature row")
    xhat = x / xnorm[:, None]
    wnorm = np.linalg.norm(p.w0)
    what = p.w0 / wnorm

    s = xhat @ what
    sign = np.where(y == 0, 1.0, -1.0)  # (-1)^y
    margin = np.where(y == 0, p.m0, p.m1)
    u = p.alpha * (margin - s) * sign
    loss = float(np.mean(_softplus(u)))

    # dL/ds_i = (1/N) sigmoid(u_i) * alpha * (-sign_i)
    dl_ds = _sigmoid(u) * p.alpha * (-sign) / n
    grad_x = dl_ds[:, None] * (what[None, :] - s[:, None] * xhat) / xnorm[:, None]
    grad_w0 = (dl_ds[:, None] * (xhat - s[:, None] * what[None, :])).sum(0) / wnorm
    return loss, grad_x, grad_w0


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def cross_entropy(logits, targets):
    """Soft-target cross-entropy; returns (loss, grad_logits)."""
    l = _as_array(logits)
    t = np.asarray(targets, dtype=np.float64)
    if l.shape != t.shape or l.ndim != 2:
        raise DataError(f"logits {l.shape} vs targets {t.shape}")
    if np.any(t < -1e-12):
        raise DataError("targets must be nonnegative")
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise DataError(f"target row {bad} sums to {sums[bad]!r}, not 1")
    n = l.shape[0]
    logp = _log_softmax(l)
    loss = float(-np.sum(t * logp) / n)
    grad = (np.exp(logp) - t) / n
    return loss, grad


def one_hot(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise DataError(f"labels outside 0..{num_classes - 1}")
    out = np.zeros((y.shape[0], num_classes), dtype=np.float64)
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def mixup_batch(x, y_onehot, beta_a: float, seed: int, lam=None):
    """Interpolate each sample with a partner from one random permutation.

    Returns (x_mixed, y_mixed, draws). ``lam`` overrides the Beta(a, a)
    draw (used by tests and lambda ablations).
    """
    xa = _as_array(x)
    ya = np.asarray(y_onehot, dtype=np.float64)
    n = xa.shape[0]
    if n < 2:
        raise DataError("mixup needs a batch of at least 2")
    if ya.shape[0] != n:
        raise DataError(f"x has {n} rows, y_onehot has {ya.shape[0]}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if lam is None:
        lam = rng.beta(beta_a, beta_a, size=n)
    else:
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != (n,) or np.any(lam < 0) or np.any(lam > 1):
            raise DataError("lam must be n values in [0, 1]")
    xm = lam[:, None] * xa + (1.0 - lam[:, None]) * xa[perm]
    ym = lam[:, None] * ya + (1.0 - lam[:, None]) * ya[perm]
    draws = [MixupDraw(int(perm[i]), float(lam[i])) for i in range(n)]
    if isinstance(x, FeatureMatrix):
        xm = FeatureMatrix(xm, role=x.role)
    return xm, ym, draws


def regmixup_loss(logits_clean, targets_clean, logits_mixed, targets_mixed,
                  p: RegMixupParams):
    """CE(clean) + eta * CE(mixed); returns (loss, grad_clean, grad_mixed)."""
    lc, lm = _as_array(logits_clean), _as_array(logits_mixed)
    if lc.shape != lm.shape:
        raise DataError(f"clean logits {lc.shape} vs mixed logits {lm.shape}")
    loss_c, grad_c = cross_entropy(lc, targets_clean)
    loss_m, grad_m = cross_entropy(lm, targets_mixed)
    return loss_c + p.eta * loss_m, grad_c, p.eta * grad_m


def grad_check(loss_fn, params: dict, epsilon: float = 1e-5) -> float:
    """Max relative error between loss_fn's analytic gradients and central
    finite differences.

    loss_fn(params) -> (loss, {name: grad}); params is {name: array}.
    Relative error per entry: |a - n| / max(1e-8, |a| + |n|).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DataError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    _, grads = loss_fn(params)
    worst = 0.0
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise DataError(f"gradient shape mismatch for {name!r}")
        flat = theta.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up, _ = loss_fn(params)
            flat[idx] = orig - epsilon
            dn, _ = loss_fn(params)
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(dn)):
                raise NumericalError(
                    f"non-finite loss while perturbing {name}[{idx}]"
                )
            numeric = (up - dn) / (2.0 * epsilon)
            analytic = g.ravel()[idx]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst
