"""Patch-MLP image encoder with learned class anchors (a zero-shot style classifier).

Architecture: 8x8 patches -> linear embed (128) + fixed sinusoidal positions ->
two residual relu blocks (128 -> 256 -> 128) -> mean over patches -> linear
(64) -> l2-normalize. Class anchors are a K x 64 table of unit vectors; class
probabilities are the softmax of temperature-scaled cosines.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "csrlab-checkpoint/1"
DEFAULT_TAU = 10.0


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"training diverged at step {step} (loss={value})")


class CheckpointError(ValueError):
    pass


@dataclass
class Counters:
    """Images pushed through the encoder / through a backward pass."""

    forwards: int = 0
    backwards: int = 0

    def reset(self):
        self.forwards = 0
        self.backwards = 0


counters = Counters()


@dataclass(frozen=True)
class Architecture:
    image_size: int = 64
    channels: int = 3
    patch: int = 8
    hidden: int = 128
    mid: int = 256
    embed_dim: int = 64
    blocks: int = 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def digest(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in asdict(self).items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def param_shapes(self) -> dict:
        shapes = {"w_embed": (self.patch_dim, self.hidden)}
        for b in range(self.blocks):
            shapes[f"block{b}.w1"] = (self.hidden, self.mid)
            shapes[f"block{b}.b1"] = (self.mid,)
            shapes[f"block{b}.w2"] = (self.mid, self.hidden)
            shapes[f"block{b}.b2"] = (self.hidden,)
        shapes["w_out"] = (self.hidden, self.embed_dim)
        return shapes


def sinusoidal_positions(arch: Architecture, amplitude: float = 0.5) -> np.ndarray:
    """Fixed 2D table: first half of the channels encodes the patch row, second half the column."""
    g, h = arch.grid, arch.hidden
    quarter = h // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    rows, cols = np.divmod(np.arange(g * g), g)
    table = np.zeros((g * g, h))
    for k, coord in enumerate((rows, cols)):
        ang = coord[:, None] * freqs[None, :]
        base = k * 2 * quarter
        table[:, base:base + quarter] = np.sin(ang)
        table[:, base + quarter:base + 2 * quarter] = np.cos(ang)
    return (amplitude * table).astype(np.float32)


@dataclass
class ClassAnchors:
    vectors: np.ndarray  # (K, d), unit rows
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise ValueError("anchors must be a (K, d) table")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("anchors must have unit l2 norm")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    def astype(self, dtype) -> "ClassAnchors":
        return ClassAnchors(self.vectors.astype(dtype), self.tau)


class Encoder:
    """Parameters plus the forward pass ``f``; outputs are unit-norm embeddings."""

    def __init__(self, arch: Architecture, params: dict):
        self.arch = arch
        shapes = arch.param_shapes()
        if set(params) != set(shapes):
            raise ValueError(f"parameter names {sorted(params)} do not match architecture")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = {k: np.ascontiguousarray(params[k]) for k in shapes}
        self.dtype = self.params["w_embed"].dtype
        self.positions = sinusoidal_positions(arch).astype(self.dtype)
        self.center = np.full(arch.patch_dim, -0.5, dtype=self.dtype)

    @classmethod
    def initialize(cls, arch: Architecture = Architecture(), seed: int = 0) -> "Encoder":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.param_shapes().items():
            if len(shape) == 1:
                params[name] = np.zeros(shape, np.float32)
                continue
            fan_in = shape[0]
            gain = {"w1": 2.0, "w2": 0.25}.get(name.rsplit(".", 1)[-1], 1.0)
            params[name] = (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(np.float32)
        return cls(arch, params)

    def astype(self, dtype) -> "Encoder":
        return Encoder(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Encoder":
        return Encoder(self.arch, {k: v.copy() for k, v in self.params.items()})

    def _check(self, shape):
        a = self.arch
        if len(shape) != 4:
            raise ValueError(f"expected a (B, H, W, C) batch, got {shape}")
        _, h, w, c = shape
        if h % a.patch or w % a.patch:
            raise ValueError(f"image size {h}x{w} not divisible by patch size {a.patch}")
        if (h, w, c) != (a.image_size, a.image_size, a.channels):
            raise ValueError(f"image shape {(h, w, c)} does not match architecture")

    def forward(self, images, weights: dict | None = None) -> ad.Tensor:
        """Embeddings of a (B, H, W, C) batch as a tape tensor of shape (B, d)."""
        x = ad.as_tensor(images) if isinstance(images, ad.Tensor) else ad.Tensor(images, dtype=self.dtype)
        self._check(x.shape)
        if weights is None:
            weights = {k: ad.Tensor(v) for k, v in self.params.items()}
        a = self.arch
        b, g, p, c = x.shape[0], a.grid, a.patch, a.channels
        counters.forwards += b

        t = ad.reshape(x, (b, g, p, g, p, c))
        t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
        t = ad.reshape(t, (b, g * g, p * p * c))
        t = ad.add(t, self.center)
        h = ad.add(ad.matmul(t, weights["w_embed"]), self.positions)
        for k in range(a.blocks):
            u = ad.relu(ad.add(ad.matmul(h, weights[f"block{k}.w1"]), weights[f"block{k}.b1"]))
            h = ad.add(h, ad.add(ad.matmul(u, weights[f"block{k}.w2"]), weights[f"block{k}.b2"]))
        pooled = ad.reduce_mean(h, axis=1)
        return ad.l2_normalize(ad.matmul(pooled, weights["w_out"]))

    def embed(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Unit embeddings as a plain array; single images get a leading axis added."""
        x = np.asarray(images)
        single = x.ndim == 3
        if single:
            x = x[None]
        out = [self.forward(x[i:i + batch]).data for i in range(0, len(x), batch)]
        z = np.concatenate(out) if out else np.zeros((0, self.arch.embed_dim), self.dtype)
        return z[0] if single else z


# ---------------------------------------------------------------------------
# zero-shot head


def zero_shot_probs(z: np.ndarray, anchors: ClassAnchors) -> np.ndarray:
    """softmax(tau * <z, a_i>) over the K anchors; works on (d,) or (B, d)."""
    s = anchors.tau * (np.asarray(z, dtype=np.float64) @ anchors.vectors.T.astype(np.float64))
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def classify(z: np.ndarray, anchors: ClassAnchors) -> np.ndarray:
    """Argmax class; ties resolve to the lowest index."""
    logits = anchors.tau * (np.asarray(z, dtype=np.float64) @ anchors.vectors.T.astype(np.float64))
    return np.argmax(logits, axis=-1)


def predict(encoder: Encoder, anchors: ClassAnchors, images: np.ndarray) -> np.ndarray:
    return classify(encoder.embed(images), anchors)


def accuracy(encoder: Encoder, anchors: ClassAnchors, images: np.ndarray, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(encoder, anchors, images) == np.asarray(labels)))


def loss_and_input_grad(encoder: Encoder, anchors: ClassAnchors, images: np.ndarray,
                        loss_kind: str, with_embedding: bool = False, **loss_args):
    """Per-image objective values and their gradient w.r.t. the input pixels.

    One forward and one backward pass over the batch. Parameters are held
    constant. ``loss_kind`` names an entry of :data:`losses.OBJECTIVES`.
    With ``with_embedding`` the embeddings of the batch are returned as a
    third element.
    """
    builder = losses.get_objective(loss_kind)
    x = ad.Tensor(images, requires_grad=True, dtype=encoder.dtype)
    with ad.Tape() as tape:
        z = encoder.forward(x)
        per_image = builder(z, anchors, **loss_args)
        total = ad.reduce_sum(per_image)
    grads = ad.backward(tape, total)
    counters.backwards += x.shape[0]
    if with_embedding:
        return per_image.data.copy(), grads[x], z.data.copy()
    return per_image.data.copy(), grads[x]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 160
    batch: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    tau: float = DEFAULT_TAU
    cosine_decay: bool = True
    weight_decay: float = 0.0
    augment: bool = True  # random mirror and small wrap-around shifts
    max_shift: int = 4


@dataclass
class TrainHistory:
    step_loss: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, train_acc, test_acc, seconds


def init_anchors(num_classes: int, dim: int, seed: int, tau: float = DEFAULT_TAU) -> ClassAnchors:
    rng = np.random.default_rng([seed, 1])
    a = rng.standard_normal((num_classes, dim))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    return ClassAnchors(a.astype(np.float32), tau)


def augment_batch(images: np.ndarray, rng: np.random.Generator, max_shift: int) -> np.ndarray:
    out = np.empty_like(images)
    flips = rng.random(len(images)) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(images), 2))
    for i, img in enumerate(images):
        img = img[:, ::-1] if flips[i] else img
        out[i] = np.roll(img, tuple(shifts[i]), axis=(0, 1))
    return out


def _renormalize(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a.astype(np.float64), axis=1, keepdims=True)
    drifted = np.abs(norms - 1.0) > 1e-7
    return np.where(drifted, a / norms, a).astype(a.dtype)


def train(images: np.ndarray, labels, config: TrainConfig = TrainConfig(),
          arch: Architecture = Architecture(), test: tuple | None = None
          ) -> tuple[Encoder, ClassAnchors, TrainHistory]:
    """Mini-batch SGD with momentum on the zero-shot cross-entropy.

    ``images`` are floats in [0, 1]. Anchors are renormalized after each
    update. Deterministic for a given seed.
    """
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k)
    if k < 2 or counts.min() < 50:
        raise ValueError(f"training needs >= 2 classes with >= 50 images each, got counts {counts.tolist()}")
    encoder = Encoder.initialize(arch, config.seed)
    anchors = init_anchors(k, arch.embed_dim, config.seed, config.tau)
    params = dict(encoder.params)
    params["anchors"] = anchors.vectors
    velocity = {n: np.zeros_like(v) for n, v in params.items()}
    rng = np.random.default_rng([config.seed, 2])
    mom = np.float32(config.momentum)
    history = TrainHistory()
    step = 0
    n = len(labels)
    total_steps = config.epochs * -(-n // config.batch)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        correct = 0
        epoch_loss = 0.0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            batch = images[idx]
            if config.augment:
                batch = augment_batch(batch, rng, config.max_shift)
            weights = {name: ad.Tensor(v, requires_grad=True) for name, v in params.items()}
            with ad.Tape() as tape:
                z = encoder.forward(batch, {kk: weights[kk] for kk in encoder.params})
                ce = losses.cross_entropy(z, weights["anchors"], config.tau, labels[idx])
                loss = ad.reduce_mean(ce)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            grads = ad.backward(tape, loss)
            lr = np.float32(config.lr)
            if config.cosine_decay:
                lr = np.float32(0.5 * config.lr * (1 + np.cos(np.pi * step / total_steps)))
            for name, w in weights.items():
                g = grads[w]
                if config.weight_decay and name != "anchors":
                    g = g + np.float32(config.weight_decay) * w.data
                velocity[name] = mom * velocity[name] + g
                params[name] = params[name] - lr * velocity[name]
                if not np.all(np.isfinite(params[name])):
                    raise DivergenceError(step, float("nan"))
            params["anchors"] = _renormalize(params["anchors"])
            logits = z.data @ weights["anchors"].data.T
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
            epoch_loss += value * len(idx)
            history.step_loss.append(value)
            step += 1
        encoder = Encoder(arch, {kk: params[kk] for kk in encoder.params})
        anchors = ClassAnchors(params["anchors"], config.tau)
        row = {"epoch": epoch + 1, "loss": epoch_loss / n, "train_acc": correct / n,
               "test_acc": float("nan"), "seconds": time.perf_counter() - t0}
        if test is not None:
            row["test_acc"] = accuracy(encoder, anchors, test[0], test[1])
        history.epochs.append(row)
        log.info("epoch %d loss %.4f train %.3f test %.3f", row["epoch"], row["loss"],
                 row["train_acc"], row["test_acc"])
    return encoder, anchors, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, encoder: Encoder, anchors: ClassAnchors, meta: dict | None = None) -> None:
    """Text manifest (``key: value`` lines, blank line) then length-prefixed float32 blobs."""
    arch = encoder.arch
    blobs = [(name, encoder.params[name]) for name in arch.param_shapes()]
    blobs.append(("anchors", anchors.vectors))
    lines = {"format": CHECKPOINT_FORMAT, "arch_hash": arch.digest()}
    lines.update({f"arch.{k}": v for k, v in asdict(arch).items()})
    lines["tau"] = repr(float(anchors.tau))
    lines["num_classes"] = anchors.num_classes
    lines["params"] = ",".join(name for name, _ in blobs)
    for name, arr in blobs:
        lines[f"shape.{name}"] = "x".join(str(s) for s in arr.shape)
    for k, v in sorted((meta or {}).items()):
        lines[f"meta.{k}"] = v
    header = "".join(f"{k}: {v}\n" for k, v in lines.items()) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        for _, arr in blobs:
            data = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<Q", data.size))
            f.write(data.tobytes())


def load_checkpoint(path) -> tuple[Encoder, ClassAnchors, dict]:
    buf = Path(path).read_bytes()
    end = buf.find(b"\n\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing manifest terminator")
    manifest = {}
    for line in buf[:end].decode("utf-8").splitlines():
        key, _, value = line.partition(": ")
        manifest[key] = value
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
    fields = {k.split(".", 1)[1]: int(v) for k, v in manifest.items() if k.startswith("arch.")}
    arch = Architecture(**fields)
    if arch.digest() != manifest.get("arch_hash"):
        raise CheckpointError(f"{path}: architecture hash mismatch")
    pos = end + 2
    arrays = {}
    for name in manifest["params"].split(","):
        shape = tuple(int(s) for s in manifest[f"shape.{name}"].split("x"))
        (count,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if count != int(np.prod(shape)):
            raise CheckpointError(f"{path}: blob {name} has {count} values, expected shape {shape}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    anchors = ClassAnchors(arrays.pop("anchors"), float(manifest["tau"]))
    meta = {k[5:]: v for k, v in manifest.items() if k.startswith("meta.")}
    return Encoder(arch, arrays), anchors, meta
