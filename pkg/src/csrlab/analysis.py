"""Diagnostics: consistency curves, spectral gradient maps, band sweeps,
gradient conflict, ROC analysis and robust-accuracy tables."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import spectral
from .attacks import AttackConfig, band_restricted_attack, run_attack
from .defense import DefenseConfig, _cos, csr_defend, defended_predictions, lpf_baseline
from .model import ClassAnchors, Encoder, classify, counters, loss_and_input_grad

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# consistency curves


@dataclass
class ConsistencyCurve:
    population: str
    radii: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def rows(self):
        for r, m, s in zip(self.radii, self.mean, self.std):
            yield self.population, float(r), float(m), float(s)


def default_radii(side: int, count: int = 8) -> np.ndarray:
    """Geometric grid from Nyquist/16 up to Nyquist."""
    top = spectral.nyquist(side, side)
    return np.geomspace(top / 16, top, count)


def consistency_scores(encoder: Encoder, images, radius: float, batch: int = 150) -> np.ndarray:
    x = np.asarray(images, dtype=encoder.dtype)
    out = []
    for s in range(0, len(x), batch):
        chunk = x[s:s + batch]
        low = spectral.apply_lowpass(chunk, radius)
        out.append(_cos(encoder.embed(chunk), encoder.embed(low)))
    return np.concatenate(out)


def consistency_curve(encoder: Encoder, populations: dict, radii) -> list[ConsistencyCurve]:
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be positive and strictly increasing")
    curves = []
    for name, images in populations.items():
        if len(images) == 0:
            raise ValueError(f"population {name!r} is empty")
        scores = [consistency_scores(encoder, images, r) for r in radii]
        curves.append(ConsistencyCurve(name, radii, np.array([s.mean() for s in scores]),
                                       np.array([s.std() for s in scores])))
    return curves


def gaussian_noise(images, epsilon: float, seed: int = 0) -> np.ndarray:
    """Clamped Gaussian noise with sigma = eps / sqrt(3), the std of U(-eps, eps)."""
    x = np.asarray(images)
    rng = np.random.default_rng([seed, 3])
    noise = rng.standard_normal(x.shape) * (epsilon / np.sqrt(3))
    return np.clip(x + noise, 0.0, 1.0).astype(x.dtype)


# ---------------------------------------------------------------------------
# spectral gradient magnitude


@dataclass
class SgmGrid:
    values: np.ndarray  # (H, W), DC at (H // 2, W // 2)
    count: int

    def mirrored(self) -> np.ndarray:
        """The grid at (-u, -v) for every (u, v)."""
        h, w = self.values.shape
        return self.values[(h - np.arange(h)) % h][:, (w - np.arange(w)) % w]

    def mass_outside(self, fraction: float = 0.25) -> float:
        h, w = self.values.shape
        d = spectral.frequency_distance(h, w)
        total = self.values.sum()
        if total == 0:
            return 0.0
        return float(self.values[d > fraction * spectral.nyquist(h, w)].sum() / total)


def amplitude_gradient(image: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """dL/dA per (u, v, c) given the pixel gradient, with A, phi the polar spectrum of the image."""
    spec = spectral.dft2(np.asarray(image, np.float64))
    phase = np.exp(1j * np.angle(spec))
    return np.real(np.conj(phase) * spectral.dft2(np.asarray(grad, np.float64)))


def sgm_heatmap(encoder: Encoder, anchors: ClassAnchors, images, labels,
                loss_kind: str = "ce-untargeted", batch: int = 100) -> SgmGrid:
    """Mean over images of the channel-norm of |dL/dA(u, v)|."""
    x = np.asarray(images, dtype=encoder.dtype)
    if len(x) == 0:
        raise ValueError("sgm_heatmap needs at least one image")
    labels = np.asarray(labels)
    acc = np.zeros(x.shape[1:3])
    for s in range(0, len(x), batch):
        chunk = x[s:s + batch]
        args = {"labels": labels[s:s + batch]} if loss_kind != "constant" else {}
        _, g = loss_and_input_grad(encoder, anchors, chunk, loss_kind, **args)
        for img, gi in zip(chunk, g):
            acc += np.linalg.norm(amplitude_gradient(img, gi), axis=-1)
    return SgmGrid(acc / len(x), len(x))


def amplitude_finite_difference(loss_fn, image: np.ndarray, coords, step: float = 1e-4) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. single amplitude bins (u, v, c).

    Only the one bin is perturbed; the image is rebuilt as the real part of
    the inverse transform, which is also what the analytic gradient assumes.
    """
    spec = spectral.dft2(np.asarray(image, np.float64))
    amp, phase = np.abs(spec), np.exp(1j * np.angle(spec))
    out = []
    for u, v, c in coords:
        vals = []
        for sgn in (1, -1):
            a = amp.copy()
            a[u, v, c] += sgn * step
            x = np.real(np.fft.ifft2(np.fft.ifftshift(a * phase, axes=spectral.SPATIAL),
                                     axes=spectral.SPATIAL, norm="ortho"))
            vals.append(loss_fn(x))
        out.append((vals[0] - vals[1]) / (2 * step))
    return np.array(out)


# ---------------------------------------------------------------------------
# band sweeps


DEFAULT_BAND_EDGES = (0, 8, 16, 24, 32)


def band_drift_sweep(encoder: Encoder, images, band_edges=DEFAULT_BAND_EDGES,
                     epsilons=(0, 1 / 255, 2 / 255, 4 / 255), cfg: AttackConfig = AttackConfig(steps=10)
                     ) -> np.ndarray:
    """Mean worst-case drift per (band, epsilon); shape (bands, epsilons)."""
    edges = np.asarray(band_edges, dtype=np.float64)
    eps = np.asarray(epsilons, dtype=np.float64)
    if np.any(np.diff(edges) <= 0) or edges[0] < 0:
        raise ValueError("band edges must be non-negative and strictly increasing")
    if np.any(np.diff(eps) < 0):
        raise ValueError("epsilons must be sorted ascending")
    x = np.asarray(images, dtype=encoder.dtype)
    h, w = x.shape[1:3]
    table = np.zeros((len(edges) - 1, len(eps)))
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        mask = spectral.band_mask(h, w, lo, hi)
        for j, e in enumerate(eps):
            if e == 0:
                continue
            step = e / 4 if cfg.step_size is None else min(cfg.step_size, e)
            c = replace(cfg, epsilon=float(e), step_size=step)
            _, drift = band_restricted_attack(encoder, x, mask, c)
            table[i, j] = drift.mean()
    return table


# ---------------------------------------------------------------------------
# gradient conflict


def similarity_gradient(encoder: Encoder, images, radius: float) -> np.ndarray:
    """Pixel gradient of 0.5 * ||f(x) - f(G x)||^2 through both branches (G unclamped)."""
    x = ad.Tensor(np.asarray(images, dtype=encoder.dtype), requires_grad=True)
    with ad.Tape() as tape:
        z = encoder.forward(x)
        z_low = encoder.forward(spectral.lowpass_unclamped(x, radius))
        diff = ad.subtract(z, z_low)
        total = ad.scale(ad.reduce_sum(ad.multiply(diff, diff)), 0.5)
    counters.backwards += x.shape[0]
    return ad.backward(tape, total)[x]


def gradient_conflict(encoder: Encoder, clean, delta, radius: float) -> np.ndarray:
    """cos(-grad L_sim(clean + delta), delta) per image."""
    clean = np.asarray(clean, dtype=encoder.dtype)
    delta = np.asarray(delta, dtype=encoder.dtype)
    single = clean.ndim == 3
    if single:
        clean, delta = clean[None], delta[None]
    g = similarity_gradient(encoder, clean + delta, radius).reshape(len(clean), -1).astype(np.float64)
    d = delta.reshape(len(delta), -1).astype(np.float64)
    gn, dn = np.linalg.norm(g, axis=1), np.linalg.norm(d, axis=1)
    if np.any(dn == 0):
        raise ValueError("gradient_conflict: delta has zero norm")
    if np.any(gn == 0):
        raise ValueError("gradient_conflict: similarity gradient has zero norm")
    cos = np.clip(np.sum(-g * d, axis=1) / (gn * dn), -1.0, 1.0)
    return cos[0] if single else cos


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    thresholds: np.ndarray  # ascending, with -inf and +inf sentinels
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _rates(benign, adversarial):
    b = np.sort(np.asarray(benign, dtype=np.float64))
    a = np.sort(np.asarray(adversarial, dtype=np.float64))
    if b.size == 0 or a.size == 0:
        raise ValueError("roc needs non-empty benign and adversarial score lists")
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([a, b])), [np.inf]])
    # flagged when score < t, so the count is the left insertion point
    tp = np.searchsorted(a, thr, side="left")
    fp = np.searchsorted(b, thr, side="left")
    return thr, tp, fp, a.size, b.size


def roc_auc(benign_scores, adversarial_scores) -> RocCurve:
    """Adversarial is positive; a sample is flagged when its score < threshold.

    The trapezoid area is accumulated in integers, so it equals the pairwise
    statistic P(adv < benign) + P(tie) / 2 exactly.
    """
    thr, tp, fp, na, nb = _rates(benign_scores, adversarial_scores)
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return RocCurve(thr, fp / nb, tp / na, area2 / (2 * na * nb))


def pairwise_auc(benign_scores, adversarial_scores) -> float:
    """Exhaustive O(n*m) pair count, used as an oracle."""
    b = np.asarray(benign_scores, dtype=np.float64)
    a = np.asarray(adversarial_scores, dtype=np.float64)
    if b.size == 0 or a.size == 0:
        raise ValueError("need non-empty score lists")
    less = int(np.sum(a[:, None] < b[None, :]))
    ties = int(np.sum(a[:, None] == b[None, :]))
    return (2 * less + ties) / (2 * a.size * b.size)


@dataclass
class TauCalibration:
    tau: float
    youden: float
    tpr: float
    fpr: float
    roc: RocCurve
    degenerate: bool = False


def calibrate_tau(benign_scores, adversarial_scores, bounds=(1e-6, 1 - 1e-6)) -> TauCalibration:
    """Threshold maximizing TPR - FPR; ties go to the smaller threshold.

    Candidates are midpoints between consecutive distinct observed scores,
    so the chosen tau never coincides with a sample. Results are clipped to
    ``bounds`` because the defense requires 0 < tau < 1.
    """
    roc = roc_auc(benign_scores, adversarial_scores)
    b = np.asarray(benign_scores, np.float64)
    a = np.asarray(adversarial_scores, np.float64)
    uniq = np.unique(np.concatenate([a, b]))
    if uniq.size == 1:
        log.warning("calibrate_tau: all scores equal (%g); using it as tau", uniq[0])
        tau = float(np.clip(uniq[0], *bounds))
        return TauCalibration(tau, 0.0, float(np.mean(a < tau)), float(np.mean(b < tau)), roc, True)
    cands = np.clip((uniq[:-1] + uniq[1:]) / 2, *bounds)
    tpr = np.array([np.mean(a < t) for t in cands])
    fpr = np.array([np.mean(b < t) for t in cands])
    j = tpr - fpr
    best = int(np.flatnonzero(j == j.max())[0])  # candidates ascend, so first is smallest
    degenerate = bool(np.all(j == 0))
    if degenerate:
        log.warning("calibrate_tau: populations are indistinguishable (J = 0 everywhere)")
    return TauCalibration(float(cands[best]), float(j[best]), float(tpr[best]), float(fpr[best]),
                          roc, degenerate)


# ---------------------------------------------------------------------------
# robust accuracy


DEFENSE_MODES = ("none", "lpf", "csr", "attraction-only", "repulsion-only", "no-greedy")
METRIC_COLUMNS = ("mode", "clean_acc", "robust_acc", "gate_tpr", "gate_fpr", "mean_steps", "ms_per_image")


def apply_defense(encoder: Encoder, images, mode: str, cfg: DefenseConfig, batch: int = 100):
    """Defended images plus the per-image gate flags and rectification step counts."""
    if mode not in DEFENSE_MODES:
        raise ValueError(f"unknown defense mode {mode!r}; expected one of {DEFENSE_MODES}")
    x = np.asarray(images, dtype=encoder.dtype)
    if mode == "none":
        return x, np.zeros(len(x), bool), np.zeros(len(x), np.int64)
    if mode == "lpf":
        return lpf_baseline(x, cfg.radius_for(x.shape[1])), np.ones(len(x), bool), np.zeros(len(x), np.int64)
    c = cfg if mode == "csr" else replace(cfg, ablation=mode)
    outs, flags = [], []
    for s in range(0, len(x), batch):
        res = csr_defend(encoder, x[s:s + batch], c, full_output=True)
        outs.append(res.images)
        flags.append(res.decision.is_adversarial)
    flags = np.concatenate(flags)
    return np.concatenate(outs), flags, np.where(flags, c.steps, 0)


@dataclass
class RobustRecord:
    mode: str
    clean_acc: float
    robust_acc: float
    gate_tpr: float
    gate_fpr: float
    mean_steps: float
    ms_per_image: float
    extra: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.mode, self.clean_acc, self.robust_acc, self.gate_tpr, self.gate_fpr,
                self.mean_steps, self.ms_per_image]


def robust_accuracy_eval(encoder: Encoder, anchors: ClassAnchors, mode: str, clean, adversarial, labels,
                         cfg: DefenseConfig = DefenseConfig()) -> RobustRecord:
    """Clean and robust accuracy with a defense active on both populations.

    ``adversarial`` holds the precomputed attacked images. Gate rates are
    NaN for modes without a gate. Timing is per image over both populations.
    """
    if mode not in DEFENSE_MODES:
        raise ValueError(f"unknown defense mode {mode!r}; expected one of {DEFENSE_MODES}")
    labels = np.asarray(labels)
    t0 = time.perf_counter()
    c = defended_predictions(encoder, anchors, clean, mode, cfg)
    t1 = time.perf_counter()
    a = defended_predictions(encoder, anchors, adversarial, mode, cfg)
    t2 = time.perf_counter()
    clean_acc = float(np.mean(c["predictions"] == labels))
    robust_acc = float(np.mean(a["predictions"] == labels))
    clean_flags, adv_flags = c["flagged"], a["flagged"]
    clean_steps, adv_steps = c["steps"], a["steps"]
    gated = mode not in ("none", "lpf")
    n = len(labels)
    return RobustRecord(
        mode=mode,
        clean_acc=clean_acc,
        robust_acc=robust_acc,
        gate_tpr=float(adv_flags.mean()) if gated else float("nan"),
        gate_fpr=float(clean_flags.mean()) if gated else float("nan"),
        mean_steps=float(np.concatenate([clean_steps, adv_steps]).mean()),
        ms_per_image=1000 * (t2 - t0) / (2 * n),
        extra={"clean_ms": 1000 * (t1 - t0) / n, "adv_ms": 1000 * (t2 - t1) / n},
    )


def attack_set(encoder: Encoder, anchors: ClassAnchors, images, labels, cfg: AttackConfig,
               batch: int = 100):
    """Run an attack in batches; returns the concatenated AdversarialResult fields."""
    x = np.asarray(images, dtype=encoder.dtype)
    labels = np.asarray(labels)
    parts = [run_attack(encoder, anchors, x[s:s + batch], labels[s:s + batch], cfg)
             for s in range(0, len(x), batch)]
    adv = np.concatenate([p.adversarial for p in parts])
    return adv, np.concatenate([p.best_loss for p in parts]), np.concatenate([p.success for p in parts])
