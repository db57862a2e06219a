"""Attack and defense objectives.

Two flavours live here. The plain-array functions (``loss_*``) evaluate a
single objective exactly as stated, for inspection and tests. The tape
builders in :data:`OBJECTIVES` take a batch of embeddings and return the
per-image quantity an optimizer *ascends*; e.g. the cross-modal builder
returns ``-<z, a_y>`` because that attack minimizes the cosine.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

LOG_GUARD = 1e-12


# ---------------------------------------------------------------------------
# plain-array objectives


def loss_ce_untargeted(probs, y: int) -> float:
    return float(-np.log(np.asarray(probs)[..., y] + LOG_GUARD))


def loss_ce_targeted(probs, y_target: int) -> float:
    """-log p(target); the attack ascends its negation."""
    return float(-np.log(np.asarray(probs)[..., y_target] + LOG_GUARD))


def loss_dlr_targeted(logits, y: int, y_target: int) -> float:
    """-(s_y - s_t) / (s_pi1 - (s_pi3 + s_pi4) / 2), pi = descending order."""
    s = np.asarray(logits, dtype=np.float64)
    if s.shape[-1] < 4:
        raise ValueError("targeted DLR needs at least 4 classes")
    srt = np.sort(s)[::-1]
    denom = srt[0] - 0.5 * (srt[2] + srt[3])
    if abs(denom) < 1e-12:
        raise ZeroDivisionError("targeted DLR denominator is zero")
    return float(-(s[y] - s[y_target]) / denom)


def loss_cross_modal(z, anchor_y) -> float:
    return float(np.dot(z, anchor_y))


def loss_label_free(z, z_orig) -> float:
    return float(np.dot(z, z_orig))


def rectification_loss(z_cur, z_tgt, z_adv, lam: float = 1.0) -> float:
    """cos(z', z_low) - lam * cos(z', z); inputs are unit vectors."""
    return float(np.dot(z_cur, z_tgt) - lam * np.dot(z_cur, z_adv))


# ---------------------------------------------------------------------------
# tape objectives (per-image, ascended)


def _onehot(idx, k, dtype) -> np.ndarray:
    idx = np.asarray(idx).reshape(-1)
    out = np.zeros((idx.size, k), dtype=dtype)
    out[np.arange(idx.size), idx] = 1
    return out


def _const(x, like: ad.Tensor) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape)


def cosine_logits(z: ad.Tensor, anchor_vectors) -> ad.Tensor:
    a = ad.as_tensor(anchor_vectors, like=z)
    return ad.matmul(z, ad.transpose(a))


def cross_entropy(z: ad.Tensor, anchor_vectors, tau: float, labels) -> ad.Tensor:
    """Per-image -log softmax(tau * s)[label]."""
    s = ad.scale(cosine_logits(z, anchor_vectors), tau)
    return ad.softmax_cross_entropy(s, labels)


def ce_untargeted(z, anchors, labels):
    return cross_entropy(z, anchors.vectors, anchors.tau, labels)


def ce_targeted(z, anchors, targets, labels=None):
    return ad.scale(cross_entropy(z, anchors.vectors, anchors.tau, targets), -1.0)


def dlr_targeted(z, anchors, labels, targets):
    s = cosine_logits(z, anchors.vectors)
    k = s.shape[-1]
    if k < 4:
        raise ValueError("targeted DLR needs at least 4 classes")
    order = np.argsort(-s.data, axis=-1, kind="stable")

    def pick(idx):
        return ad.reduce_sum(ad.multiply(s, _onehot(idx, k, s.dtype)), axis=-1)

    num = ad.subtract(pick(labels), pick(targets))
    den = ad.subtract(pick(order[:, 0]), ad.scale(ad.add(pick(order[:, 2]), pick(order[:, 3])), 0.5))
    if np.any(np.abs(den.data) < 1e-12):
        raise ZeroDivisionError("targeted DLR denominator is zero")
    return ad.scale(ad.divide(num, den), -1.0)


def cross_modal(z, anchors, labels):
    return ad.scale(ad.dot(z, _const(anchors.vectors[np.asarray(labels)], z)), -1.0)


def label_free(z, anchors, z_orig):
    return ad.scale(ad.dot(z, _const(z_orig, z)), -1.0)


def feature_drift(z, anchors, z_orig):
    """1 - cos(f(x), f(x')), the band-attack objective."""
    ones = np.ones(z.shape[0], dtype=z.dtype)
    return ad.subtract(ones, ad.dot(z, _const(z_orig, z)))


def rectification(z, anchors, z_tgt, z_adv, attraction: float = 1.0, repulsion: float = 1.0):
    """attraction * cos(z', z_low) - repulsion * cos(z', z_adv)."""
    pull = ad.scale(ad.dot(z, _const(z_tgt, z)), attraction)
    push = ad.scale(ad.dot(z, _const(z_adv, z)), repulsion)
    return ad.subtract(pull, push)


def constant(z, anchors, **_):
    return ad.scale(ad.reduce_sum(z, axis=-1), 0.0)


OBJECTIVES = {
    "ce-untargeted": ce_untargeted,
    "ce-targeted": ce_targeted,
    "dlr-targeted": dlr_targeted,
    "cross-modal": cross_modal,
    "label-free": label_free,
    "feature-drift": feature_drift,
    "rectification": rectification,
    "constant": constant,
}


def get_objective(kind: str):
    try:
        return OBJECTIVES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(OBJECTIVES)}") from None
