import json
import re
import subprocess
import sys

import numpy as np
import pytest

from emgdiag.cli import derive_seed, main
from emgdiag.signal_io import read_manifest, read_report


def run(*argv):
    return main([str(a) for a in argv])


def test_simulate_myopathic_ten(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--class", "myopathic", "--n", 10, "--seed", 7, "--duration", 2, "--out", out) == 0
    assert len(list(out.glob("myopathic_???.txt"))) == 10
    assert len(list(out.glob("*.truth.txt"))) == 10
    m = read_manifest(out / "manifest.csv")
    assert len(m) == 10
    assert {e.label.value for e in m} == {"myopathic"}


def test_simulate_zero(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--class", "healthy", "--n", 0, "--out", out) == 0
    assert len(read_manifest(out / "manifest.csv")) == 0


def test_simulate_rerun_identical(tmp_path):
    for name in ("a", "b"):
        run("simulate", "--class", "neuropathic", "--n", 2, "--seed", 3, "--duration", 2, "--out", tmp_path / name)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_bad_arguments(tmp_path, capsys):
    assert run("simulate", "--class", "sick", "--n", 1, "--out", tmp_path) == 1
    assert run("simulate", "--class", "healthy", "--units", -1, "--n", 1, "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err
    assert run("decompose", "--out", tmp_path / "d") == 1
    assert run("eval", "--model", tmp_path / "missing.json", "--features", tmp_path / "f.csv") == 1


def test_derive_seed():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(1, k) for k in range(20)}) == 20
    assert derive_seed(1, 2) != derive_seed(2, 2)


def test_decompose_then_match(tmp_path, capsys):
    sim = tmp_path / "sim"
    # three units at 20 dB over 20 s, the configuration the decomposer is validated against
    run("simulate", "--class", "healthy", "--units", 3, "--n", 1, "--seed", 4, "--out", sim)
    assert run("decompose", sim / "healthy_000.txt", "--out", tmp_path / "dec") == 0
    assert (tmp_path / "dec" / "healthy_000.ann.txt").exists()
    assert (tmp_path / "dec" / "healthy_000.templates.csv").exists()
    capsys.readouterr()
    assert run("match", "--truth", sim / "healthy_000.truth.txt", "--estimate",
               tmp_path / "dec" / "healthy_000.ann.txt") == 0
    min_f1 = float(re.search(r"min F1 ([0-9.]+)", capsys.readouterr().out).group(1))
    assert min_f1 >= 0.95


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    for label in ("healthy", "myopathic", "neuropathic"):
        run("simulate", "--class", label, "--n", 4, "--seed", 2, "--duration", 4, "--out", root / label)
    lines = ["path,label,muscle"]
    for label in ("healthy", "myopathic", "neuropathic"):
        lines += [f"{label}/{line}" for line in (root / label / "manifest.csv").read_text().splitlines()[1:]]
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    assert run("decompose", "--manifest", root / "manifest.csv", "--out", root / "dec") == 0
    assert run("features", "--manifest", root / "manifest.csv", "--decomp", root / "dec",
               "--out", root / "features.csv") == 0
    return root


def test_stage_chain(cohort, capsys):
    assert run("split", "--features", cohort / "features.csv", "--seed", 1, "--out", cohort / "split") == 0
    header = (cohort / "features.csv").read_text().splitlines()[0].split(",")
    assert len(header) >= 22
    for kind in ("lda", "svm", "bt"):
        model = cohort / f"{kind}.json"
        assert run("train", "--features", cohort / "split" / "train.csv", "--model", kind, "--out", model) == 0
        capsys.readouterr()
        assert run("eval", "--model", model, "--features", cohort / "split" / "test.csv",
                   "--out", cohort / f"{kind}.report.json") == 0
        assert "accuracy: " in capsys.readouterr().out
        report = read_report(cohort / f"{kind}.report.json")
        assert report.confusion.shape == (3, 3)
        assert report.confusion.sum() == 3
        assert report.predict_time_s is not None


def test_eval_no_timing(cohort):
    run("split", "--features", cohort / "features.csv", "--out", cohort / "s2")
    run("train", "--features", cohort / "s2" / "train.csv", "--model", "lda", "--out", cohort / "m.json")
    run("eval", "--model", cohort / "m.json", "--features", cohort / "s2" / "test.csv",
        "--out", cohort / "r.json", "--no-timing")
    assert read_report(cohort / "r.json").predict_time_s is None


def test_pipeline_rerun_identical(tmp_path, capsys):
    args = ["pipeline", "--synthetic", "4,4,4", "--seed", 5, "--duration", 4]
    for name in ("a", "b"):
        assert run(*args, "--out", tmp_path / name) == 0
    out = capsys.readouterr().out
    assert "Method" in out and "LDA" in out
    for rel in ("summary.json", "features.csv", "train.csv", "test.csv", "models/lda.json", "models/svm.json",
                "models/bt.json", "reports/lda.json", "reports/svm.json", "reports/bt.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["n_test"] == 3 and summary["n_train"] == 9
    for kind in ("lda", "svm", "bt"):
        r = read_report(tmp_path / "a" / "reports" / f"{kind}.json")
        assert summary["accuracy"][kind] == np.trace(r.confusion) / r.confusion.sum()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "emgdiag", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "emgdiag" in res.stdout


def test_report_prints_two_decimal_percent():
    from emgdiag.classify import report_from_predictions
    from emgdiag.cli import format_report
    from emgdiag.signal_io import CLASSES

    truth = [CLASSES[i % 3] for i in range(12)]
    pred = [t if i < 8 else CLASSES[(t.index + 1) % 3] for i, t in enumerate(truth)]
    text = format_report(report_from_predictions(truth, pred, kind="lda"))
    assert "accuracy: 66.67% (8/12)" in text
