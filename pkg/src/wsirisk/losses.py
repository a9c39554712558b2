"""Training objectives for the cancer gate and the risk head.

Loss functions take class probabilities (not logits) and return batch means.
Each has a ``*_grad`` companion returning the gradient w.r.t. its
probability/embedding input; chain through :func:`nn_core.softmax_backward`
to reach logits. Confidence scores are treated as constants throughout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PROB_EPS = 1e-12
NORMALISATION_TOL = 1e-6
REJECT_MODES = ("literal", "inverted")


@dataclass
class LossHyperparams:
    alpha: float = 0.5
    lam: float = 0.5
    tau: float = 0.1
    alpha_pos: float = 0.5
    alpha_neg: float = 0.5
    warmup_epochs: int = 10
    reject_mode: str = "literal"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha_pos < 0 or self.alpha_neg < 0:
            raise ValueError("alpha_pos and alpha_neg must be nonnegative")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if self.reject_mode not in REJECT_MODES:
            raise ValueError(f"reject_mode must be one of {REJECT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


def one_hot(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y.astype(int)] = 1.0
    return out


def _prep(y, p) -> tuple[np.ndarray, np.ndarray]:
    p_in = np.asarray(p, dtype=np.float64)
    p = np.atleast_2d(p_in)
    if np.any(np.abs(p.sum(axis=1) - 1.0) > NORMALISATION_TOL) or np.any(p < 0):
        raise ValueError("probability rows must be nonnegative and sum to 1")
    y = np.asarray(y)
    if p_in.ndim == 1 and y.ndim == 1:
        y = y[None, :]  # a single one-hot vector
    y = one_hot(np.atleast_1d(y), p.shape[1])
    if y.shape != p.shape:
        raise ValueError(f"label shape {y.shape} does not match probabilities {p.shape}")
    return y, p


def per_sample_cross_entropy(y, p) -> np.ndarray:
    y, p = _prep(y, p)
    return -(y * np.log(np.maximum(p, PROB_EPS))).sum(axis=1)


def _per_sample_ce_grad(y: np.ndarray, p: np.ndarray) -> np.ndarray:
    # clamped entries are constant in p, so their derivative is zero
    return np.where(p > PROB_EPS, -y / np.maximum(p, PROB_EPS), 0.0)


def cross_entropy(y, p) -> float:
    """Categorical cross-entropy averaged over the batch."""
    return float(per_sample_cross_entropy(y, p).mean())


def cross_entropy_grad(y, p) -> np.ndarray:
    y, p = _prep(y, p)
    return _per_sample_ce_grad(y, p) / p.shape[0]


def binary_cross_entropy(y, y_hat) -> float:
    """Two-class form: mean of -(y log y_hat + (1 - y) log(1 - y_hat))."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    pos = np.log(np.maximum(y_hat, PROB_EPS))
    neg = np.log(np.maximum(1.0 - y_hat, PROB_EPS))
    return float(np.mean(-(y * pos + (1.0 - y) * neg)))


def binary_cross_entropy_grad(y, y_hat) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    n = y_hat.size
    return (-y / np.maximum(y_hat, PROB_EPS) + (1.0 - y) / np.maximum(1.0 - y_hat, PROB_EPS)) / n


def confidence_score(p) -> np.ndarray | float:
    """Max class probability; scalar for a single vector."""
    p = np.asarray(p, dtype=np.float64)
    cf = p.max(axis=-1)
    return float(cf) if cf.ndim == 0 else cf


def confidence_weighted_ce(y, p, cf) -> float:
    return float((per_sample_cross_entropy(y, p) * np.asarray(cf, dtype=np.float64)).mean())


def confidence_weighted_ce_grad(y, p, cf) -> np.ndarray:
    y, p = _prep(y, p)
    cf = np.broadcast_to(np.asarray(cf, dtype=np.float64), (p.shape[0],))
    return _per_sample_ce_grad(y, p) * cf[:, None] / p.shape[0]


def _reject_weights(cf: np.ndarray, alpha: float, lam: float, mode: str) -> np.ndarray:
    if mode == "literal":
        active = cf <= lam
    elif mode == "inverted":
        active = cf > lam
    else:
        raise ValueError(f"unknown reject_mode {mode!r}")
    # alpha * l_ce * cf + (1 - alpha) * l_ce on active patches, zero elsewhere
    return np.where(active, alpha * cf + (1.0 - alpha), 0.0)


def reject_loss(y, p, cf, alpha: float = 0.5, lam: float = 0.5, mode: str = "literal") -> float:
    """Confidence-gated mix of weighted and plain cross-entropy, batch mean.

    ``literal`` trains on patches with ``cf <= lam``; ``inverted`` on ``cf > lam``.
    """
    ce = per_sample_cross_entropy(y, p)
    cf = np.broadcast_to(np.asarray(cf, dtype=np.float64), ce.shape)
    return float((_reject_weights(cf, alpha, lam, mode) * ce).mean())


def reject_loss_grad(y, p, cf, alpha: float = 0.5, lam: float = 0.5, mode: str = "literal") -> np.ndarray:
    y, p = _prep(y, p)
    cf = np.broadcast_to(np.asarray(cf, dtype=np.float64), (p.shape[0],))
    w = _reject_weights(cf, alpha, lam, mode)
    return _per_sample_ce_grad(y, p) * w[:, None] / p.shape[0]


def default_partners(n_views: int) -> np.ndarray:
    """Views laid out as [view_a of N patches, view_b of N patches]."""
    half = n_views // 2
    return (np.arange(n_views) + half) % n_views


def _logsumexp_rows(s: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked row-wise log-sum-exp and the matching softmax weights."""
    neg_inf = np.where(mask, s, -np.inf)
    m = np.max(neg_inf, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(s - m), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    safe = np.where(tot > 0, tot, 1.0)
    return (np.log(safe) + m)[:, 0], e / safe


def _contrastive(z, labels, wsi_ids, tau, alpha_pos, alpha_neg, partners, want_grad):
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    if m < 4 or m % 2:
        raise ValueError("need 2N views with N >= 2")
    labels = np.asarray(labels)
    wsi_ids = np.asarray(wsi_ids)
    partners = default_partners(m) if partners is None else np.asarray(partners)
    s = z @ z.T / tau
    rows = np.arange(m)
    not_self = ~np.eye(m, dtype=bool)

    # NT-Xent anchor term against each view's augmentation partner
    lse, soft = _logsumexp_rows(s, not_self)
    anchor = lse - s[rows, partners]
    loss = anchor.mean()
    g = None
    if want_grad:
        g = soft.copy()
        g[rows, partners] -= 1.0
        g /= m

    # attraction: same label and same slide; offset 1/tau keeps it >= 0
    same_label = labels[:, None] == labels[None, :]
    pos = not_self & same_label & (wsi_ids[:, None] == wsi_ids[None, :])
    n_pos = pos.sum()
    if alpha_pos and n_pos:
        loss += alpha_pos * (1.0 / tau - s[pos]).sum() / n_pos
        if want_grad:
            g -= alpha_pos * pos / n_pos

    # repulsion: log-mean-exp over different-label views, offset 1/tau keeps it >= 0
    neg = not_self & ~same_label
    n_neg = neg.sum(axis=1)
    has_neg = n_neg > 0
    if alpha_neg and has_neg.any():
        lse_neg, soft_neg = _logsumexp_rows(s, neg)
        rep = lse_neg[has_neg] - np.log(n_neg[has_neg]) + 1.0 / tau
        loss += alpha_neg * rep.mean()
        if want_grad:
            g += alpha_neg * soft_neg * has_neg[:, None] / has_neg.sum()

    if not want_grad:
        return float(loss)
    return float(loss), (g + g.T) @ z / tau


def wsi_contrastive(z, labels, wsi_ids, tau: float = 0.1, alpha_pos: float = 0.5,
                    alpha_neg: float = 0.5, partners=None) -> float:
    """Slide-aware contrastive loss over ``2N`` L2-normalised views.

    Sum of three nonnegative terms:

    * NT-Xent for each view against its augmentation partner;
    * ``alpha_pos`` times the mean of ``(1 - z_i.z_k) / tau`` over pairs sharing
      both label and slide;
    * ``alpha_neg`` times, per anchor, ``log mean exp(z_i.z_k / tau) + 1 / tau``
      over views with a different label.
    """
    return _contrastive(z, labels, wsi_ids, tau, alpha_pos, alpha_neg, partners, False)


def wsi_contrastive_grad(z, labels, wsi_ids, tau: float = 0.1, alpha_pos: float = 0.5,
                         alpha_neg: float = 0.5, partners=None) -> tuple[float, np.ndarray]:
    """Loss value and gradient w.r.t. ``z``."""
    return _contrastive(z, labels, wsi_ids, tau, alpha_pos, alpha_neg, partners, True)


def psi_schedule(epoch: float, warmup_epochs: float) -> float:
    """Contrastive weight: 0 at epoch 0, linear ramp to 1 at ``warmup_epochs``."""
    if warmup_epochs <= 0:
        return 1.0
    return float(min(1.0, max(0.0, epoch / warmup_epochs)))


def total_loss(reject: float, contrastive: float, psi: float) -> float:
    return reject + psi * contrastive
