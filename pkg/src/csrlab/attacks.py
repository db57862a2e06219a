"""L-infinity gradient attacks on the zero-shot classifier.

All attacks work on a batch ``(B, H, W, C)`` of float images in [0, 1] and
ascend a per-image objective from :mod:`csrlab.losses`. Every evaluated
iterate is a candidate; the best one per image is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses, spectral
from .model import ClassAnchors, Encoder, classify, counters, loss_and_input_grad

LOSS_KINDS = ("ce-untargeted", "ce-targeted", "dlr-targeted", "cross-modal", "label-free")
VARIANTS = ("pgd", "apgd-lite")
TARGETED = ("ce-targeted", "dlr-targeted")


@dataclass
class AttackConfig:
    epsilon: float = 4 / 255
    step_size: float | None = None  # defaults to epsilon / 4
    steps: int = 10
    restarts: int = 1
    seed: int = 0
    loss_kind: str = "ce-untargeted"
    variant: str = "pgd"
    random_init: bool | None = None  # None: only for label-free
    momentum: float = 0.75
    checkpoint_fraction: float = 0.22
    halving: bool = True

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def validate(self) -> "AttackConfig":
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.epsilon > 0 and not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"need 0 < step_size <= epsilon, got {self.alpha} vs {self.epsilon}")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        return self

    @property
    def window(self) -> int:
        return max(int(np.ceil(self.checkpoint_fraction * self.steps)), 1)

    def starts_random(self, restart: int) -> bool:
        if restart > 0:
            return True
        if self.random_init is None:
            return self.loss_kind == "label-free"
        return self.random_init


@dataclass
class AdversarialResult:
    adversarial: np.ndarray
    delta: np.ndarray
    loss_trace: np.ndarray  # (evaluations, B), every evaluated iterate in order
    best_loss: np.ndarray
    success: np.ndarray
    predictions: np.ndarray
    targets: np.ndarray | None = None
    step_sizes: np.ndarray | None = None  # (steps, B) per restart, concatenated

    def __len__(self):
        return len(self.best_loss)


def pick_targets(labels, num_classes: int, seed: int) -> np.ndarray:
    """A uniformly random wrong label per image."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 7])
    offsets = rng.integers(1, num_classes, size=labels.shape)
    return (labels + offsets) % num_classes


def objective_args(encoder: Encoder, anchors: ClassAnchors, images, labels, cfg: AttackConfig,
                   targets=None) -> dict:
    kind = cfg.loss_kind
    if kind == "ce-untargeted" or kind == "cross-modal":
        return {"labels": labels}
    if kind == "ce-targeted":
        return {"targets": targets}
    if kind == "dlr-targeted":
        return {"labels": labels, "targets": targets}
    if kind == "label-free":
        return {"z_orig": encoder.embed(images)}
    raise ValueError(f"unknown loss_kind {kind!r}")


def objective_values(encoder, anchors, images, kind: str, **kwargs) -> np.ndarray:
    """Per-image objective without recording a tape (one forward pass)."""
    z = encoder.forward(images)
    return losses.get_objective(kind)(z, anchors, **kwargs).data.copy()


def _project(x0, x, eps):
    return np.clip(x0 + np.clip(x - x0, -eps, eps), 0.0, 1.0).astype(x0.dtype)


def _success(preds, labels, targets, kind):
    if kind in TARGETED:
        return preds == targets
    return preds != labels


def _engine(encoder, anchors, images, labels, cfg: AttackConfig, momentum: float,
            halving: bool) -> AdversarialResult:
    cfg.validate()
    x0 = np.asarray(images, dtype=encoder.dtype)
    labels = np.asarray(labels)
    b = x0.shape[0]
    targets = pick_targets(labels, anchors.num_classes, cfg.seed) if cfg.loss_kind in TARGETED else None
    kwargs = objective_args(encoder, anchors, x0, labels, cfg, targets)
    kind = cfg.loss_kind

    if cfg.epsilon == 0:
        loss = objective_values(encoder, anchors, x0, kind, **kwargs)
        preds = classify(encoder.embed(x0), anchors)
        return AdversarialResult(x0.copy(), np.zeros_like(x0), loss[None], loss,
                                 _success(preds, labels, targets, kind), preds, targets)

    eps = np.float32(cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    best_x = x0.copy()
    best = np.full(b, -np.inf)
    trace, sizes = [], []
    rows = np.arange(b)
    window = cfg.window

    def consider(x, loss):
        nonlocal best_x
        better = loss > best
        best[better] = loss[better]
        best_x[better] = x[better]

    for restart in range(cfg.restarts):
        if cfg.starts_random(restart):
            start = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape).astype(x0.dtype)
        else:
            start = np.zeros_like(x0)
        x = _project(x0, x0 + start, eps)
        x_prev = x
        eta = np.full(b, cfg.alpha, dtype=np.float64)
        run_best = np.full(b, -np.inf)
        run_best_x = x.copy()
        last_ckpt_best = np.full(b, -np.inf)
        loss, g = loss_and_input_grad(encoder, anchors, x, kind, **kwargs)
        for t in range(cfg.steps):
            trace.append(loss)
            consider(x, loss)
            improved = loss > run_best
            run_best[improved] = loss[improved]
            run_best_x[improved] = x[improved]
            sizes.append(eta.copy())

            step = (eta[:, None, None, None] * np.sign(g)).astype(x0.dtype)
            z = _project(x0, x + step, eps)
            if momentum > 0 and t > 0:
                m = x0.dtype.type(momentum)
                z = _project(x0, x + (1 - m) * (z - x) + m * (x - x_prev), eps)
            x_prev, x = x, z

            if halving and (t + 1) % window == 0:
                stalled = run_best <= last_ckpt_best
                eta[stalled] /= 2
                x[stalled] = run_best_x[stalled]
                x_prev = np.where(stalled[:, None, None, None], x, x_prev)
                last_ckpt_best = run_best.copy()

            if t + 1 < cfg.steps:
                loss, g = loss_and_input_grad(encoder, anchors, x, kind, **kwargs)
        loss = objective_values(encoder, anchors, x, kind, **kwargs)
        trace.append(loss)
        consider(x, loss)

    preds = classify(encoder.embed(best_x), anchors)
    return AdversarialResult(
        adversarial=best_x,
        delta=best_x - x0,
        loss_trace=np.stack(trace),
        best_loss=best,
        success=_success(preds, labels, targets, kind),
        predictions=preds,
        targets=targets,
        step_sizes=np.stack(sizes),
    )


def pgd_attack(encoder: Encoder, anchors: ClassAnchors, images, labels, cfg: AttackConfig) -> AdversarialResult:
    """Signed-gradient ascent with projection onto the eps-ball and [0, 1]."""
    return _engine(encoder, anchors, images, labels, cfg, momentum=0.0, halving=False)


def apgd_lite_attack(encoder: Encoder, anchors: ClassAnchors, images, labels,
                     cfg: AttackConfig) -> AdversarialResult:
    """PGD plus momentum and step halving at checkpoints when the best loss stalls.

    On halving, the iterate is reset to the best point found so far.
    """
    return _engine(encoder, anchors, images, labels, cfg, momentum=cfg.momentum, halving=cfg.halving)


def run_attack(encoder, anchors, images, labels, cfg: AttackConfig) -> AdversarialResult:
    fn = apgd_lite_attack if cfg.variant == "apgd-lite" else pgd_attack
    return fn(encoder, anchors, images, labels, cfg)


# ---------------------------------------------------------------------------
# band-restricted feature-drift attack


def feature_drift(z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
    """1 - cosine between matching rows of two unit-embedding batches."""
    cos = np.sum(np.asarray(z_a, np.float64) * np.asarray(z_b, np.float64), axis=-1)
    return np.clip(1.0 - cos, 0.0, 2.0)


def band_restricted_attack(encoder: Encoder, images, mask: np.ndarray,
                           cfg: AttackConfig) -> tuple[AdversarialResult, np.ndarray]:
    """Maximize 1 - cos(f(x), f(x + band_project(delta))) with ||delta||_inf <= eps.

    The budget applies to the raw ``delta`` before projection, so the applied
    in-band perturbation can exceed eps pointwise. ``result.delta`` holds the
    raw perturbation; ``result.adversarial`` the clamped perturbed image.
    Iterates start from a seeded uniform draw since the drift has zero
    gradient at delta = 0.
    """
    mask = np.asarray(mask)
    if not spectral.is_binary(mask):
        raise ValueError("band_restricted_attack needs a binary mask")
    x0 = np.asarray(images, dtype=encoder.dtype)
    b = x0.shape[0]
    z0 = encoder.embed(x0)
    eps = float(cfg.epsilon)

    def evaluate(delta, with_grad):
        d = ad.Tensor(delta, requires_grad=with_grad)
        with ad.Tape() as tape:
            x_eff = ad.clamp(ad.add(spectral.band_project(d, mask), x0), 0.0, 1.0)
            drift = losses.feature_drift(encoder.forward(x_eff), None, z0)
            total = ad.reduce_sum(drift)
        g = None
        if with_grad:
            g = ad.backward(tape, total)[d]
            counters.backwards += b
        return x_eff.data, drift.data.astype(np.float64), g

    if eps == 0 or not mask.any():
        zeros = np.zeros(b)
        res = AdversarialResult(x0.copy(), np.zeros_like(x0), zeros[None], zeros, np.zeros(b, bool),
                                np.full(b, -1))
        return res, zeros

    rng = np.random.default_rng(cfg.seed)
    alpha = np.float32(cfg.alpha)
    best = np.full(b, -np.inf)
    best_x = x0.copy()
    best_d = np.zeros_like(x0)
    trace = []
    for restart in range(cfg.restarts):
        delta = rng.uniform(-eps, eps, size=x0.shape).astype(x0.dtype)
        for t in range(cfg.steps + 1):
            last = t == cfg.steps
            x_eff, drift, g = evaluate(delta, not last)
            trace.append(drift)
            better = drift > best
            best[better] = drift[better]
            best_x[better] = x_eff[better]
            best_d[better] = delta[better]
            if not last:
                delta = np.clip(delta + alpha * np.sign(g), -eps, eps).astype(x0.dtype)
    res = AdversarialResult(best_x, best_d, np.stack(trace), best, np.zeros(b, bool), np.full(b, -1))
    return res, best
