import csv
import json

import numpy as np
import pytest

from csrlab import analysis, cli, data

# a small run: 4 classes, few epochs, light analyses
FAST = [
    "dataset.classes=4", "dataset.train_per_class=50", "dataset.test_per_class=6", "dataset.size=32",
    "model.epochs=2", "model.hidden=32", "model.mid=64", "model.embed_dim=16", "model.blocks=1",
    "attack.steps=3", "attack.count=12", "analysis.curve_images=8", "analysis.sgm_images=4",
    "analysis.band_images=4", "analysis.band_steps=2", "analysis.conflict_images=6", "analysis.roc_images=12",
    "analysis.calibration_images=12", "analysis.bench_iterations=3", "analysis.bench_warmup=1",
    "analysis.band_edges=0,4,8,16",
]


def run(out, *args, extra=()):
    argv = list(args) + ["--out", str(out)]
    for s in FAST + list(extra):
        argv += ["--set", s]
    return cli.main(argv)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(out, "gen-data") == 0
    assert run(out, "train") == 0
    return out


def test_gen_data_counts_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "gen-data") == 0 and run(b, "gen-data") == 0
    for split, n in (("train", 200), ("test", 24)):
        files = sorted(p.name for p in (a / "data" / split).iterdir())
        assert len([f for f in files if f.endswith(".ppm")]) == n
        assert len(read_csv(a / "data" / split / "labels.csv")) == n + 1
        for f in files:
            assert (a / "data" / split / f).read_bytes() == (b / "data" / split / f).read_bytes()


def test_gen_data_rejects_bad_class_count(tmp_path):
    assert run(tmp_path, "gen-data", extra=["dataset.classes=1"]) == 1


def test_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "gen-data", extra=["attack.bogus=1"]) == 1
    assert not (tmp_path / "data").exists()  # strict parsing aborts before any output
    with pytest.raises(SystemExit) as e:
        cli.main(["analyze", "everything", "--out", str(tmp_path)])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 1


def test_missing_checkpoint_is_io_error(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    assert run(tmp_path, "attack") == 3


def test_divergence_exit_code(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    with np.errstate(all="ignore"):
        assert run(tmp_path, "train", extra=["model.lr=1e30"]) == 2


def test_train_outputs(trained):
    rows = read_csv(trained / "train_metrics.csv")
    assert rows[0] == ["epoch", "loss", "train_acc", "test_acc"] and len(rows) == 3
    manifest = json.loads((trained / "manifest-train.json").read_text())
    assert manifest["config"]["model.epochs"] == 2 and "model.ckpt" in manifest["outputs"]


def test_attack_csv_budget_and_determinism(trained):
    assert run(trained, "attack") == 0
    first = (trained / "attack.csv").read_bytes()
    rows = read_csv(trained / "attack.csv")
    assert rows[0] == ["filename", "label", "prediction", "loss", "success", "linf"]
    assert all(float(r[5]) <= 4 / 255 + 1e-9 for r in rows[1:])
    assert run(trained, "attack") == 0
    assert (trained / "attack.csv").read_bytes() == first


def test_attack_zero_budget_success_is_misclassification(trained, tmp_path):
    out = tmp_path / "z"
    for name in ("data", "model.ckpt"):
        (out / name).parent.mkdir(parents=True, exist_ok=True)
    extra = [f"dataset.dir={trained / 'data'}", f"model.checkpoint={trained / 'model.ckpt'}", "attack.epsilon=0"]
    assert run(out, "attack", extra=extra) == 0
    rows = read_csv(out / "attack.csv")[1:]
    assert all(r[4] == str(int(r[1] != r[2])) for r in rows)
    assert all(float(r[5]) == 0 for r in rows)


def test_defend_schema(trained):
    assert run(trained, "attack") == 0
    assert run(trained, "defend", extra=["defense.modes=none,lpf,csr,no-greedy"]) == 0
    rows = read_csv(trained / "defend.csv")
    assert rows[0] == list(analysis.METRIC_COLUMNS)
    assert [r[0] for r in rows[1:]] == ["none", "lpf", "csr", "no-greedy"]


def test_analyze_outputs(trained):
    for which in ("curves", "sgm", "bands", "conflict", "roc"):
        assert run(trained, "analyze", which) == 0, which
    curves = read_csv(trained / "curves.csv")
    assert curves[0] == ["population", "radius", "mean", "std"] and len(curves) == 1 + 4 * 8
    sgm = read_csv(trained / "sgm.csv")
    assert sgm[0] == ["u", "v", "value"] and len(sgm) == 1 + 32 * 32
    assert sgm[1][:2] == ["-16", "-16"] and sgm[2][:2] == ["-16", "-15"]
    roc = read_csv(trained / "roc.csv")
    assert roc[0] == ["threshold", "fpr", "tpr"] and roc[-1][0] == "auc"
    assert len(read_csv(trained / "bands.csv")) == 1 + 3 * 4


def test_svg_deterministic(trained):
    assert run(trained, "analyze", "sgm") == 0
    a = (trained / "sgm.svg").read_bytes()
    assert run(trained, "analyze", "sgm") == 0
    assert (trained / "sgm.svg").read_bytes() == a
    assert a.lstrip().startswith(b"<?xml")


def test_calibration_reproduces_roc_auc(trained):
    try:
        assert run(trained, "calibrate-tau", "--split", "test") == 0
        cal = json.loads((trained / "calibration.json").read_text())
        assert 0 < cal["tau"] < 1
        assert run(trained, "analyze", "roc", extra=["defense.use_calibration=false"]) == 0
        assert read_csv(trained / "roc.csv")[-1] == read_csv(trained / "calibration_roc.csv")[-1]
        assert read_csv(trained / "roc.csv") == read_csv(trained / "calibration_roc.csv")
    finally:
        (trained / "calibration.json").unlink(missing_ok=True)


def test_bench_counters(trained):
    assert run(trained, "bench", extra=["defense.steps=3"]) == 0
    rows = {r[0]: r for r in read_csv(trained / "bench.csv")[1:]}
    assert (rows["plain"][4], rows["plain"][5]) == ("1", "0")
    assert (rows["gated-benign"][4], rows["gated-benign"][5]) == ("2", "0")
    assert (rows["rectified"][4], rows["rectified"][5]) == ("5", "3")
