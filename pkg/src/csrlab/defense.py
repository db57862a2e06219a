"""Spectral-consistency gating and few-step contrastive rectification.

A test image is compared with its Gaussian low-passed copy in embedding
space. If the two embeddings agree (cosine >= tau) the image is passed
through untouched. Otherwise a short signed-gradient search inside an
L-infinity ball pulls the embedding toward the low-pass embedding and away
from the original one, and the best candidate seen is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import spectral
from .model import ClassAnchors, Encoder, classify, counters, loss_and_input_grad

ABLATIONS = ("full", "attraction-only", "repulsion-only", "no-greedy")


@dataclass
class DefenseConfig:
    radius: float | None = None  # None: default_radius(image side)
    tau: float = 0.85
    epsilon: float = 4 / 255
    step_size: float = 2 / 255
    steps: int = 3
    lam: float = 1.0
    ablation: str = "full"

    def validate(self) -> "DefenseConfig":
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.step_size <= self.epsilon:
            raise ValueError(f"need 0 < step_size <= epsilon, got {self.step_size}, {self.epsilon}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.radius is not None and self.radius <= 0:
            raise ValueError("radius must be > 0")
        return self

    def radius_for(self, side: int) -> float:
        return spectral.default_radius(side) if self.radius is None else self.radius

    @property
    def weights(self) -> tuple[float, float]:
        """(attraction, repulsion) coefficients for the active ablation."""
        if self.ablation == "attraction-only":
            return 1.0, 0.0
        if self.ablation == "repulsion-only":
            return 0.0, self.lam
        return 1.0, self.lam


@dataclass
class GateDecision:
    score: np.ndarray  # (B,) cosine in [-1, 1]
    is_adversarial: np.ndarray  # (B,) bool

    def __len__(self):
        return len(self.score)


@dataclass
class RectificationTrace:
    losses: np.ndarray  # (N, B); row t evaluated before update t, row 0 at delta = 0
    best_step: np.ndarray  # (B,)
    rectified: np.ndarray
    final_iterate: np.ndarray
    final_loss: np.ndarray = field(default=None)  # L_rec at the final iterate, if evaluated
    embeddings: np.ndarray = field(default=None)  # f(rectified), reused for classification

    @property
    def best_loss(self) -> np.ndarray:
        return self.losses[self.best_step, np.arange(self.losses.shape[1])]


def _batch(images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C) images, got shape {x.shape}")
    return x, False


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    c = np.sum(np.asarray(a, np.float64) * np.asarray(b, np.float64), axis=-1)
    return np.clip(c, -1.0, 1.0)


def paired_embeddings(encoder: Encoder, images: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """(f(x), f(G_r x)) from one stacked forward pass over 2B images."""
    x = np.asarray(images, dtype=encoder.dtype)
    low = spectral.apply_lowpass(x, radius)
    z = encoder.forward(np.concatenate([x, low])).data
    return z[: len(x)], z[len(x):]


def spectral_consistency(encoder: Encoder, images, radius: float | None = None) -> np.ndarray:
    """Cosine between the embeddings of x and its low-passed copy, per image."""
    x, single = _batch(images)
    r = spectral.default_radius(x.shape[1]) if radius is None else radius
    z, z_low = paired_embeddings(encoder, x, r)
    score = _cos(z, z_low)
    return score[0] if single else score


def gate(score, tau: float) -> np.ndarray:
    """True where the score falls below tau; score == tau counts as benign."""
    return np.asarray(score) < tau


def detect(encoder: Encoder, images, cfg: DefenseConfig = DefenseConfig()) -> GateDecision:
    x, _ = _batch(images)
    score = np.atleast_1d(spectral_consistency(encoder, x, cfg.radius_for(x.shape[1])))
    return GateDecision(score, gate(score, cfg.tau))


def rectify(encoder: Encoder, images, cfg: DefenseConfig = DefenseConfig(),
            anchors: tuple[np.ndarray, np.ndarray] | None = None,
            evaluate_final: bool = False) -> tuple[np.ndarray, RectificationTrace]:
    """Few-step rectification of a batch.

    ``anchors`` optionally supplies precomputed ``(z_adv, z_tgt)`` so the
    gate's forward pass is reused. Exactly ``cfg.steps`` forward and backward
    passes run per image, plus one more forward if ``evaluate_final``.
    """
    cfg.validate()
    x, single = _batch(images)
    x = np.asarray(x, dtype=encoder.dtype)
    if anchors is None:
        z_adv, z_tgt = paired_embeddings(encoder, x, cfg.radius_for(x.shape[1]))
    else:
        z_adv, z_tgt = anchors
    pull, push = cfg.weights
    args = dict(z_tgt=z_tgt, z_adv=z_adv, attraction=pull, repulsion=push)
    eps = x.dtype.type(cfg.epsilon)
    alpha = x.dtype.type(cfg.step_size)
    b = len(x)

    delta = np.zeros_like(x)
    best = np.full(b, -np.inf)
    best_step = np.zeros(b, dtype=np.int64)
    best_x = x.copy()
    best_z = np.array(z_adv, copy=True)
    trace = []
    for t in range(cfg.steps):
        cur = np.clip(x + delta, 0.0, 1.0)
        loss, g, z = loss_and_input_grad(encoder, None, cur, "rectification", with_embedding=True, **args)
        trace.append(loss)
        better = loss > best
        best[better] = loss[better]
        best_step[better] = t
        best_x[better] = cur[better]
        best_z[better] = z[better]
        delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
    final = np.clip(x + delta, 0.0, 1.0)

    final_loss = final_z = None
    if evaluate_final or cfg.ablation == "no-greedy":
        from .losses import rectification

        zf = encoder.forward(final)
        final_z = zf.data.copy()
        final_loss = rectification(zf, None, **args).data.astype(np.float64)

    if cfg.ablation == "no-greedy":
        out, out_z = final, final_z
    else:
        out, out_z = best_x, best_z
    tr = RectificationTrace(np.stack(trace), best_step, out, final, final_loss, out_z)
    return (out[0] if single else out), tr


@dataclass
class DefenseOutput:
    images: np.ndarray
    decision: GateDecision
    trace: RectificationTrace | None  # covers only the flagged images
    embeddings: np.ndarray  # f(output image), taken from passes already run


def csr_defend(encoder: Encoder, images, cfg: DefenseConfig = DefenseConfig(),
               full_output: bool = False):
    """Gate each image; rectify only the ones flagged as adversarial.

    Benign-gated images come back bitwise identical. Cost per image is two
    forward passes on the gate, plus ``steps`` forward/backward passes when
    rectified.
    """
    cfg.validate()
    x, single = _batch(images)
    xf = np.asarray(x, dtype=encoder.dtype)
    z, z_low = paired_embeddings(encoder, xf, cfg.radius_for(x.shape[1]))
    score = _cos(z, z_low)
    flagged = gate(score, cfg.tau)
    out = np.array(x, copy=True)
    emb = np.array(z, copy=True)
    trace = None
    if flagged.any():
        rect, trace = rectify(encoder, xf[flagged], cfg, anchors=(z[flagged], z_low[flagged]))
        out[flagged] = rect.astype(out.dtype)
        emb[flagged] = trace.embeddings
    decision = GateDecision(score, flagged)
    if full_output:
        if single:
            return DefenseOutput(out[0], decision, trace, emb[0])
        return DefenseOutput(out, decision, trace, emb)
    return out[0] if single else out


def csr_classify(encoder: Encoder, anchors: ClassAnchors, images, cfg: DefenseConfig = DefenseConfig()):
    """Defended zero-shot predictions without an extra classification pass.

    Benign-gated images are classified from the gate's own embedding, and
    rectified ones from the embedding computed while selecting the best
    iterate: 2 forwards per benign image, 2 + steps per rectified one.
    """
    res = csr_defend(encoder, images, cfg, full_output=True)
    emb = np.atleast_2d(res.embeddings)
    return classify(emb, anchors), res


def lpf_baseline(images, radius: float | None = None) -> np.ndarray:
    """Passive low-pass filtering of every input (clamped to [0, 1])."""
    x = np.asarray(images)
    side = x.shape[-3]
    r = spectral.default_radius(side) if radius is None else radius
    return spectral.apply_lowpass(x, r)


def defended_predictions(encoder: Encoder, anchors: ClassAnchors, images, mode: str,
                         cfg: DefenseConfig = DefenseConfig(), batch: int = 100) -> dict:
    """Predictions under a defense mode: none, lpf, csr or any ablation name.

    Returns predictions plus gate statistics when a gate was used.
    """
    x = np.asarray(images, dtype=encoder.dtype)
    preds, flagged, steps = [], [], []
    for s in range(0, len(x), batch):
        chunk = x[s:s + batch]
        if mode == "none":
            out, flags = chunk, np.zeros(len(chunk), bool)
        elif mode == "lpf":
            out, flags = lpf_baseline(chunk, cfg.radius_for(x.shape[1])), np.ones(len(chunk), bool)
        else:
            c = cfg if mode == "csr" else replace(cfg, ablation=mode)
            p, res = csr_classify(encoder, anchors, chunk, c)
            preds.append(p)
            flagged.append(res.decision.is_adversarial)
            continue
        preds.append(classify(encoder.embed(out), anchors))
        flagged.append(flags)
    flagged = np.concatenate(flagged) if flagged else np.zeros(0, bool)
    n_steps = 0 if mode in ("none", "lpf") else cfg.steps
    return {
        "predictions": np.concatenate(preds) if preds else np.zeros(0, np.int64),
        "flagged": flagged,
        "steps": np.where(flagged, n_steps, 0),
    }
