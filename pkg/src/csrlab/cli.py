"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure or
training divergence, 3 I/O error (missing or unreadable inputs, unwritable
outputs).

Layout under ``--out``::

    data/train, data/test     gen-data
    model.ckpt                train
    train_metrics.csv         train
    attack/, attack.csv       attack
    defend.csv                defend
    calibration.json          calibrate-tau (read back by defend)
    calibration_roc.csv       calibrate-tau
    <analysis>.csv / .svg     analyze
    bench.csv                 bench
    manifest-<command>.json   every command
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import struct
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, attacks, config, data, defense, model, plotting, spectral

log = logging.getLogger("csrlab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
ANALYSES = ("curves", "sgm", "bands", "conflict", "roc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run context


class Run:
    """Resolved config plus output paths and shared loaders for one command."""

    def __init__(self, cfg: config.RunConfig, out: Path, workers: int, command: str):
        self.cfg = cfg
        self.out = out
        self.workers = workers
        self.command = command
        self.inputs: dict = {}
        self.outputs: list = []
        self.timings: dict = {}
        self._cache: dict = {}

    # paths
    @property
    def data_dir(self) -> Path:
        return Path(self.cfg.dataset.dir) if self.cfg.dataset.dir else self.out / "data"

    @property
    def checkpoint(self) -> Path:
        return Path(self.cfg.model.checkpoint) if self.cfg.model.checkpoint else self.out / "model.ckpt"

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    # loaders
    def split(self, name: str) -> data.Dataset:
        if name not in self._cache:
            d = self.data_dir / name
            ds = data.load_dataset(d)
            self.inputs[f"dataset.{name}"] = ds.fingerprint()
            self._cache[name] = ds
        return self._cache[name]

    def model(self):
        if "model" not in self._cache:
            p = self.checkpoint
            if not p.exists():
                raise FileNotFoundError(f"checkpoint not found: {p} (run `train` first)")
            self.inputs["checkpoint"] = sha256(p)
            self._cache["model"] = model.load_checkpoint(p)
        return self._cache["model"]

    def attack_config(self, **changes) -> attacks.AttackConfig:
        a = self.cfg.attack
        cfg = attacks.AttackConfig(
            epsilon=a.epsilon, step_size=a.step_size, steps=a.steps, restarts=a.restarts, seed=a.seed,
            loss_kind=a.loss_kind, variant=a.variant, random_init=a.random_init, momentum=a.momentum,
            checkpoint_fraction=a.checkpoint_fraction, halving=a.halving,
        )
        return replace(cfg, **changes).validate()

    def calibration(self) -> dict | None:
        p = self.out / "calibration.json"
        if not p.exists():
            return None
        self.inputs["calibration"] = sha256(p)
        return json.loads(p.read_text())

    def defense_config(self, use_calibration: bool = True) -> defense.DefenseConfig:
        d = self.cfg.defense
        cfg = defense.DefenseConfig(radius=d.radius, tau=d.tau, epsilon=d.epsilon, step_size=d.step_size,
                                    steps=d.steps, lam=d.lam, ablation=d.ablation)
        cal = self.calibration() if use_calibration and d.use_calibration else None
        if cal is not None:
            cfg = replace(cfg, tau=cal["tau"], radius=cal["radius"])
            log.info("using calibrated tau=%.6f radius=%.4f", cfg.tau, cfg.radius)
        return cfg.validate()

    def sample(self, ds: data.Dataset, count: int) -> data.Dataset:
        return ds.subset(np.arange(min(count, len(ds))))

    def attacked(self, images, labels, cfg: attacks.AttackConfig, batch: int = 100) -> np.ndarray:
        enc, anchors, _ = self.model()
        x = np.asarray(images, np.float32)
        chunks = [(x[s:s + batch], labels[s:s + batch]) for s in range(0, len(x), batch)]

        def one(chunk):
            return attacks.run_attack(enc, anchors, chunk[0], chunk[1], cfg).adversarial

        if self.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(one, chunks))
        else:
            parts = [one(c) for c in chunks]
        return np.concatenate(parts) if parts else x[:0]

    def write_manifest(self, extra: dict | None = None) -> None:
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "config": self.cfg.flat(),
            "inputs": self.inputs,
            "outputs": {str(p.relative_to(self.out)): sha256(p) for p in self.outputs if p.is_file()},
            "timings_s": {k: round(v, 4) for k, v in self.timings.items()},
        }
        if extra:
            manifest.update(extra)
        (self.out / f"manifest-{self.command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.6f}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run, args) -> dict:
    d = run.cfg.dataset
    root = Path(args.data) if args.data else run.out / "data"
    if not d.classes or not 2 <= d.classes <= len(data.CLASS_NAMES):
        raise UsageError(f"dataset.classes must be in [2, {len(data.CLASS_NAMES)}]")
    out = {}
    for split, per_class in (("train", d.train_per_class), ("test", d.test_per_class)):
        ds = data.generate(per_class, d.size, d.seed, d.classes, split)
        data.save_dataset(ds, root / split)
        run.outputs.append(root / split / "labels.csv")
        out[split] = len(ds)
    print(f"wrote {out['train']} train and {out['test']} test images to {root}")
    return out


def cmd_train(run: Run, args) -> dict:
    m = run.cfg.model
    tr, te = run.split("train"), run.split("test")
    arch = model.Architecture(image_size=tr.images.shape[1], patch=m.patch, hidden=m.hidden, mid=m.mid,
                              embed_dim=m.embed_dim, blocks=m.blocks)
    tc = model.TrainConfig(epochs=m.epochs, batch=m.batch, lr=m.lr, momentum=m.momentum, seed=m.seed,
                           tau=m.temperature, weight_decay=m.weight_decay, augment=m.augment,
                           max_shift=m.max_shift)
    t0 = time.perf_counter()
    enc, anchors, hist = model.train(tr.floats(), tr.labels, tc, arch, test=(te.floats(), te.labels))
    run.timings["train"] = time.perf_counter() - t0
    model.save_checkpoint(run.checkpoint, enc, anchors,
                          {"train_fingerprint": tr.fingerprint(), "seed": m.seed, "epochs": m.epochs})
    run.outputs.append(run.checkpoint)
    write_csv(run.path("train_metrics.csv"), ["epoch", "loss", "train_acc", "test_acc"],
              [[r["epoch"], r["loss"], r["train_acc"], r["test_acc"]] for r in hist.epochs])
    final = hist.epochs[-1]
    print(f"train acc {final['train_acc']:.4f}  held-out acc {final['test_acc']:.4f}  -> {run.checkpoint}")
    return {"train_acc": final["train_acc"], "test_acc": final["test_acc"]}


def cmd_attack(run: Run, args) -> dict:
    enc, anchors, _ = run.model()
    te = run.sample(run.split("test"), run.cfg.attack.count)
    cfg = run.attack_config()
    x = te.floats()
    t0 = time.perf_counter()
    res = [attacks.run_attack(enc, anchors, x[s:s + 100], te.labels[s:s + 100], cfg) for s in range(0, len(x), 100)]
    run.timings["attack"] = time.perf_counter() - t0
    adv = np.concatenate([r.adversarial for r in res]) if res else x[:0]
    adv_u8 = quantize_adversarial(te.images, adv, cfg.epsilon)
    adv_ds = data.Dataset(adv_u8, te.labels, te.names)
    adv_dir = run.out / "attack"
    data.save_dataset(adv_ds, adv_dir)
    run.outputs.append(adv_dir / "labels.csv")
    # report on the saved 8-bit images, which is what downstream commands read
    adv_f = data.to_float(adv_u8)
    preds = model.predict(enc, anchors, adv_f)
    targets = np.concatenate([r.targets for r in res]) if res and res[0].targets is not None else None
    success = (preds == targets) if targets is not None else (preds != te.labels)
    losses = np.concatenate([r.best_loss for r in res]) if res else np.zeros(0)
    linf = np.abs(adv_u8.astype(np.float64) - te.images.astype(np.float64)).reshape(len(te), -1).max(axis=1) / 255
    write_csv(run.path("attack.csv"), ["filename", "label", "prediction", "loss", "success", "linf"],
              [[n, int(y), int(p), l, int(s), d] for n, y, p, l, s, d in
               zip(te.names, te.labels, preds, losses, success, linf)])
    robust = float(np.mean(preds == te.labels)) if len(te) else float("nan")
    print(f"attacked {len(te)} images: success rate {success.mean():.4f}, robust accuracy {robust:.4f}")
    return {"success_rate": float(success.mean()), "robust_acc": robust}


def quantize_adversarial(clean_u8: np.ndarray, adv: np.ndarray, epsilon: float) -> np.ndarray:
    """Round to 8 bits without leaving the eps-ball around the clean image."""
    q = data.to_uint8(adv).astype(np.int64)
    budget = int(np.floor(255 * epsilon + 1e-6))
    c = clean_u8.astype(np.int64)
    return np.clip(q, c - budget, c + budget).clip(0, 255).astype(np.uint8)


def cmd_defend(run: Run, args) -> dict:
    enc, anchors, _ = run.model()
    adv_dir = Path(args.adversarial) if args.adversarial else run.out / "attack"
    adv = data.load_dataset(adv_dir)
    run.inputs["adversarial"] = adv.fingerprint()
    te = run.split("test")
    index = {n: i for i, n in enumerate(te.names)}
    try:
        clean = te.subset([index[n] for n in adv.names])
    except KeyError as e:
        raise FileNotFoundError(f"adversarial image {e} has no clean counterpart in {run.data_dir / 'test'}")
    cfg = run.defense_config()
    rows = []
    for mode in run.cfg.defense.modes:
        rec = analysis.robust_accuracy_eval(enc, anchors, mode, clean.floats(), adv.floats(), clean.labels, cfg)
        rows.append(rec.row())
        log.info("%s: clean %.4f robust %.4f", mode, rec.clean_acc, rec.robust_acc)
    write_csv(run.path("defend.csv"), analysis.METRIC_COLUMNS, rows)
    for row in rows:
        print("  ".join(f"{k}={fmt(v)}" for k, v in zip(analysis.METRIC_COLUMNS, row)))
    return {"tau": cfg.tau, "radius": cfg.radius_for(clean.images.shape[1])}


def _populations(run: Run, split: str, count: int):
    ds = run.sample(run.split(split), count)
    x = ds.floats()
    return ds, x, run.attacked(x, ds.labels, run.attack_config())


def _scores(run: Run, split: str, count: int, radius: float):
    enc, _, _ = run.model()
    ds, x, adv = _populations(run, split, count)
    return (analysis.consistency_scores(enc, x, radius), analysis.consistency_scores(enc, adv, radius))


def cmd_calibrate_tau(run: Run, args) -> dict:
    enc, _, _ = run.model()
    side = run.split(args.split).images.shape[1]
    radius = run.defense_config(use_calibration=False).radius_for(side)
    benign, adv = _scores(run, args.split, run.cfg.analysis.calibration_images, radius)
    cal = analysis.calibrate_tau(benign, adv)
    write_roc(run, "calibration_roc", cal.roc, plot=False)
    result = {"tau": cal.tau, "radius": radius, "auc": cal.roc.auc, "youden": cal.youden,
              "tpr": cal.tpr, "fpr": cal.fpr, "split": args.split, "degenerate": cal.degenerate}
    p = run.path("calibration.json")
    p.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"tau={cal.tau:.6f} (J={cal.youden:.4f}, TPR={cal.tpr:.4f}, FPR={cal.fpr:.4f}) AUC={cal.roc.auc:.6f}")
    return result


def write_roc(run: Run, stem: str, roc: analysis.RocCurve, plot: bool) -> None:
    rows = [[t, f, p] for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr)]
    rows.append(["auc", roc.auc, ""])
    write_csv(run.path(f"{stem}.csv"), ["threshold", "fpr", "tpr"], rows)
    if plot:
        plotting.line_chart(run.path(f"{stem}.svg"), {f"AUC={roc.auc:.4f}": (roc.fpr, roc.tpr)},
                            "ROC", "false positive rate", "true positive rate")


def cmd_analyze(run: Run, args) -> dict:
    which = args.which
    enc, anchors, _ = run.model()
    an = run.cfg.analysis
    plots = run.cfg.output.plots
    split = getattr(args, "split", "test")
    side = run.split(split).images.shape[1]
    radius = run.defense_config().radius_for(side)

    if which == "curves":
        ds, x, adv = _populations(run, split, an.curve_images)
        eps = run.cfg.attack.epsilon
        apgd = run.attacked(x, ds.labels, run.attack_config(variant="apgd-lite"))
        pops = {"benign": x, "gaussian": analysis.gaussian_noise(x, eps, run.cfg.attack.seed), "pgd": adv,
                "apgd": apgd}
        radii = np.asarray(an.radii, float) if an.radii else analysis.default_radii(side)
        curves = analysis.consistency_curve(enc, pops, radii)
        write_csv(run.path("curves.csv"), ["population", "radius", "mean", "std"],
                  [row for c in curves for row in c.rows()])
        if plots:
            plotting.line_chart(run.path("curves.svg"), {c.population: (c.radii, c.mean) for c in curves},
                                "consistency vs radius", "radius", "mean cosine", logx=True)
        return {c.population: float(np.interp(radius, c.radii, c.mean)) for c in curves}

    if which == "sgm":
        ds = run.sample(run.split(split), an.sgm_images)
        grid = analysis.sgm_heatmap(enc, anchors, ds.floats(), ds.labels)
        h, w = grid.values.shape
        write_csv(run.path("sgm.csv"), ["u", "v", "value"],
                  [[i - h // 2, j - w // 2, grid.values[i, j]] for i in range(h) for j in range(w)])
        if plots:
            ext = (-(w // 2) - 0.5, w - w // 2 - 0.5, -(h // 2) - 0.5, h - h // 2 - 0.5)
            plotting.heatmap(run.path("sgm.svg"), grid.values, "spectral gradient magnitude", ext)
        return {"mass_outside_quarter_nyquist": grid.mass_outside(0.25)}

    if which == "bands":
        ds = run.sample(run.split(split), an.band_images)
        acfg = run.attack_config(steps=an.band_steps, loss_kind="label-free")
        table = analysis.band_drift_sweep(enc, ds.floats(), an.band_edges, an.band_epsilons, acfg)
        edges = an.band_edges
        write_csv(run.path("bands.csv"), ["band_lo", "band_hi", "epsilon", "drift"],
                  [[edges[i], edges[i + 1], e, table[i, j]] for i in range(len(edges) - 1)
                   for j, e in enumerate(an.band_epsilons)])
        if plots:
            series = {f"[{edges[i]:g}, {edges[i + 1]:g})": (np.asarray(an.band_epsilons) * 255, table[i])
                      for i in range(len(edges) - 1)}
            plotting.line_chart(run.path("bands.svg"), series, "band-restricted drift", "epsilon x 255",
                                "mean drift")
        return {"top_minus_bottom": float(table[-1, -1] - table[0, -1])}

    if which == "conflict":
        ds, x, adv = _populations(run, split, an.conflict_images)
        delta = adv - x
        keep = np.abs(delta).reshape(len(x), -1).max(axis=1) > 0
        cos = np.full(len(x), np.nan)
        for s in range(0, len(x), 100):
            idx = np.flatnonzero(keep[s:s + 100]) + s
            if idx.size:
                cos[idx] = analysis.gradient_conflict(enc, x[idx], delta[idx], radius)
        write_csv(run.path("conflict.csv"), ["filename", "cosine"], list(zip(ds.names, cos)))
        frac = float(np.mean(cos[keep] < 0)) if keep.any() else float("nan")
        print(f"negative cosine on {frac:.4f} of {int(keep.sum())} perturbations")
        return {"negative_fraction": frac}

    if which == "roc":
        benign, adv = _scores(run, split, an.roc_images, radius)
        roc = analysis.roc_auc(benign, adv)
        write_roc(run, "roc", roc, plots)
        print(f"AUC={roc.auc:.6f} at radius {radius:.4f}")
        return {"auc": roc.auc, "radius": radius}
    raise UsageError(f"unknown analysis {which!r}")


def cmd_bench(run: Run, args) -> dict:
    enc, anchors, _ = run.model()
    an = run.cfg.analysis
    ds = run.split("test")
    x = ds.floats()[:1]
    cfg = run.defense_config()
    benign_cfg = replace(cfg, tau=1e-6)  # every score >= tau: gate says benign
    rect_cfg = replace(cfg, tau=1 - 1e-6)  # every score < 1 is flagged
    paths = {
        "plain": lambda: model.predict(enc, anchors, x),
        "gated-benign": lambda: defense.csr_classify(enc, anchors, x, benign_cfg)[0],
        "rectified": lambda: defense.csr_classify(enc, anchors, x, rect_cfg)[0],
    }
    rows, out = [], {}
    for name, fn in paths.items():
        model.counters.reset()
        fn()
        fwd, bwd = model.counters.forwards, model.counters.backwards
        for _ in range(an.bench_warmup):
            fn()
        times = []
        for _ in range(an.bench_iterations):
            t0 = time.perf_counter()
            fn()
            times.append(1000 * (time.perf_counter() - t0))
        rows.append([name, float(np.mean(times)), float(np.median(times)), an.bench_iterations, fwd, bwd])
        out[name] = float(np.median(times))
    write_csv(run.path("bench.csv"), ["path", "mean_ms", "median_ms", "iterations", "forwards",
                                      "backwards"], rows)
    for r in rows:
        print(f"{r[0]:>13}: mean {r[1]:.3f} ms  median {r[2]:.3f} ms  forwards {r[4]}  backwards {r[5]}")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "analyze": cmd_analyze,
    "calibrate-tau": cmd_calibrate_tau,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="flat section.key = value file")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory (default: runs)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for data, training and attacks")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="threads for attack batches")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS,
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="csrlab", description="Spectral-consistency defense experiments on a toy encoder.",
                parents=[common])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic shapes dataset")
    g.add_argument("--data", metavar="DIR", help="dataset root (default: <out>/data)")
    sub.add_parser("train", parents=[common], help="train the encoder and class anchors")
    sub.add_parser("attack", parents=[common], help="attack held-out images, save PPMs and a CSV")
    d = sub.add_parser("defend", parents=[common], help="evaluate defense modes on clean and attacked sets")
    d.add_argument("--adversarial", metavar="DIR", help="attacked image directory (default: <out>/attack)")
    a = sub.add_parser("analyze", parents=[common], help="run one diagnostic study")
    a.add_argument("which", choices=ANALYSES)
    a.add_argument("--split", choices=("train", "test"), default="test")
    c = sub.add_parser("calibrate-tau", parents=[common], help="pick tau by Youden's J on a ROC sweep")
    c.add_argument("--split", choices=("train", "test"), default="train")
    sub.add_parser("bench", parents=[common], help="per-image timing of the inference paths")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.load(getattr(args, "config", None), getattr(args, "set", []) or [], getattr(args, "seed", None))
        workers = getattr(args, "workers", 1)
        if workers < 1:
            raise UsageError("--workers must be >= 1")
    except (config.ConfigError, UsageError) as e:
        print(f"csrlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"csrlab: error: {e}", file=sys.stderr)
        return EXIT_IO

    out = Path(getattr(args, "out", "runs"))
    run = Run(cfg, out, workers, args.command)
    try:
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        result = COMMANDS[args.command](run, args)
        run.timings["total"] = time.perf_counter() - t0
        run.write_manifest({"result": result} if result else None)
    except UsageError as e:
        print(f"csrlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, model.CheckpointError, struct.error) as e:
        print(f"csrlab: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except model.DivergenceError as e:
        print(f"csrlab: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, FloatingPointError, ArithmeticError) as e:
        print(f"csrlab: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
