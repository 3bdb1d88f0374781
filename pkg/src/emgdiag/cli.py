"""
Command-line interface.

    emgdiag simulate --class myopathic --n 10 --seed 7 --out data/
    emgdiag decompose --manifest data/manifest.csv --out decomp/
    emgdiag features --manifest data/manifest.csv --decomp decomp/ --out features.csv
    emgdiag split --features features.csv --test-fraction 0.3 --seed 1 --out split/
    emgdiag train --features split/train.csv --model lda --out lda.json
    emgdiag eval --model lda.json --features split/test.csv --out report.json
    emgdiag pipeline --synthetic 16,10,14 --seed 1 --out run/
    emgdiag match --truth a.txt --estimate b.txt

Every command is deterministic in its inputs and ``--seed``. Errors from
the library surface as a one-line diagnostic and exit status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .classify import (KIND_NAMES, KINDS, ClassifierConfig, ClassifierError, EvalReport, LabeledVector,
                       evaluate, format_percent, split_dataset, train)
from .decompose import (DecomposeConfig, Decomposition, DecompositionError, MuapTemplate, decompose,
                        match_events)
from .features import FEATURE_NAMES, SELECTED_NAMES, FeatureError, aggregate, muap_features
from .signal_io import (CLASSES, DEFAULT_RATE_HZ, DatasetManifest, FiringAnnotation, Label,
                        ManifestEntry, SignalIOError, read_annotation, read_features_table,
                        read_manifest, read_model, read_signal, read_templates, resolve_entry_path,
                        write_annotation, write_features_table, write_manifest, write_model,
                        write_report, write_signal, write_templates)
from .simulate import SimConfig, SimulationError, simulate

logger = logging.getLogger("emgdiag")

# muscles recorded per class in the reference cohort, with counts
COHORT_MUSCLES = {
    Label.HEALTHY: (("vastus_lateralis", 7), ("tibialis_anterior", 9)),
    Label.MYOPATHIC: (("splenius", 5), ("trapezius", 5)),
    Label.NEUROPATHIC: (("vastus_lateralis", 5), ("tibialis_anterior", 9)),
}

# stage keys mixed into the global seed
_SIM, _SPLIT, _TRAIN = 1, 2, 3

ERRORS = (SignalIOError, DecompositionError, FeatureError, ClassifierError, SimulationError, OSError)


class CliError(RuntimeError):
    pass


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for one pipeline stage."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def cohort_muscle(label: Label, i: int, n: int) -> str:
    """Muscle for the ``i``-th of ``n`` tracings, in the reference cohort's proportions."""
    muscles = COHORT_MUSCLES[label]
    total = sum(c for _, c in muscles)
    edge = 0.0
    for name, count in muscles:
        edge += count / total
        if i < round(edge * n):
            return name
    return muscles[-1][0]


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run depends on; one global seed derives all stage seeds."""

    out: Path
    seed: int = 0
    rate_hz: float = DEFAULT_RATE_HZ
    manifest: Optional[Path] = None
    synthetic: Optional[tuple[int, int, int]] = None   # healthy, myopathic, neuropathic
    test_fraction: float = 0.30
    decompose: DecomposeConfig = DecomposeConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    kinds: tuple[str, ...] = KINDS
    sim_duration_s: float = 20.0
    sim_snr_db: float = 20.0
    jobs: int = 1
    plot: bool = False

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise CliError("give exactly one of --manifest or --synthetic")
        if self.manifest is not None and not Path(self.manifest).is_file():
            raise CliError(f"manifest {self.manifest} does not exist")


# ---------------------------------------------------------------------------
# stages

def simulate_cohort(label: Label, n: int, seed: int, out: Path, rate: float = DEFAULT_RATE_HZ,
                    duration_s: float = 20.0, snr_db: float = 20.0, muscle: Optional[str] = None,
                    plot: bool = False, n_units: Optional[int] = None) -> list[tuple[ManifestEntry, dict]]:
    """
    Write ``n`` tracings of one class with truth files; returns manifest rows and truth records.

    ``n_units`` fixes the number of active units instead of drawing it from the class range.
    """
    extra = {} if n_units is None else {"n_units": (n_units, n_units)}
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        sim_seed = derive_seed(seed, _SIM, label.index, i)
        sim = simulate(SimConfig.for_label(label, seed=sim_seed, rate_hz=rate, duration_s=duration_s,
                                           snr_db=snr_db, **extra))
        stem = f"{label.value}_{i:03d}"
        write_signal(sim.signal, out / f"{stem}.txt")
        write_annotation(sim.truth, out / f"{stem}.truth.txt")
        write_templates([sim.true_templates[k] for k in sorted(sim.true_templates)],
                        out / f"{stem}.truth_templates.csv")
        if plot:
            _plot(out / f"{stem}.truth.png", sim.true_templates, sim.truth, rate, stem)
        entry = ManifestEntry(f"{stem}.txt", label, muscle or cohort_muscle(label, i, n))
        rows.append((entry, {"path": entry.path, "truth": f"{stem}.truth.txt", "label": label.value,
                             "seed": sim_seed, "n_units": len(sim.true_templates)}))
    return rows


def write_truth_table(records: Sequence[dict], path: Path) -> None:
    keys = ("path", "truth", "label", "seed", "n_units")
    lines = [",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _decomp_paths(out: Path, stem: str) -> tuple[Path, Path]:
    return out / f"{stem}.ann.txt", out / f"{stem}.templates.csv"


def decompose_file(signal_path: Path, out: Path, rate: float, config: DecomposeConfig,
                   plot: bool = False) -> dict:
    """Decompose one file and write its annotation and template dump."""
    signal = read_signal(signal_path, rate)
    try:
        dec = decompose(signal, config)
    except DecompositionError as exc:
        raise DecompositionError(f"{signal_path}: {exc}") from None
    ann_path, tpl_path = _decomp_paths(out, signal.id)
    write_annotation(dec.annotation, ann_path)
    write_templates([t.waveform for t in dec.templates], tpl_path)
    if plot:
        _plot(out / f"{signal.id}.png", dec.waveforms(), dec.annotation, rate, signal.id)
    return {"signal": signal.id, "n_units": dec.n_units, "n_events": len(dec.annotation),
            "residual": dec.residual_energy_fraction}


def _decompose_job(args) -> dict:
    return decompose_file(*args)


def decompose_many(paths: Sequence[Path], out: Path, rate: float, config: DecomposeConfig,
                   jobs: int = 1, plot: bool = False) -> list[dict]:
    """Decompose files in manifest order; ``jobs > 1`` fans out to worker processes."""
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(Path(p), out, rate, config, plot) for p in paths]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_decompose_job, tasks))
    return [_decompose_job(t) for t in tasks]


def load_decomposition(out: Path, stem: str, rate: float) -> Decomposition:
    ann_path, tpl_path = _decomp_paths(out, stem)
    annotation = read_annotation(ann_path)
    waveforms = read_templates(tpl_path) if tpl_path.stat().st_size else []
    unknown = set(annotation.units) - set(range(1, len(waveforms) + 1))
    if unknown:
        raise SignalIOError(f"{ann_path}: unit ids {sorted(unknown)} have no template")
    templates = tuple(MuapTemplate(k, w, len(annotation.times_for(k))) for k, w in enumerate(waveforms, start=1))
    return Decomposition(templates, annotation, float("nan"), rate)


def features_for(stem: str, decomp_dir: Path, rate: float) -> np.ndarray:
    dec = load_decomposition(decomp_dir, stem, rate)
    try:
        per_muap = [muap_features(t.waveform, dec.annotation.times_for(t.unit_id), rate) for t in dec.templates]
        return aggregate(per_muap, stem).values
    except FeatureError as exc:
        raise FeatureError(f"{stem}: {exc}") from None


def features_table(manifest: DatasetManifest, decomp_dir: Path, rate: float) -> list[tuple[str, Label, np.ndarray]]:
    return [(Path(e.path).stem, e.label, features_for(Path(e.path).stem, decomp_dir, rate)) for e in manifest]


def load_vectors(path: Path) -> list[LabeledVector]:
    """Read a features table and keep the classifier's 18 columns."""
    columns, rows = read_features_table(path)
    missing = [c for c in SELECTED_NAMES if c not in columns]
    if missing:
        raise SignalIOError(f"{path}: missing feature columns {missing}")
    idx = [columns.index(c) for c in SELECTED_NAMES]
    out = []
    for sid, label, values in rows:
        if label is None:
            raise SignalIOError(f"{path}: row {sid!r} has no label")
        out.append(LabeledVector(values[idx], label, sid))
    return out


def _write_vectors_subset(src: Path, ids: set[str], dst: Path) -> None:
    columns, rows = read_features_table(src)
    write_features_table([r for r in rows if r[0] in ids], columns, dst)


def results_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'Method':<8}{'Accuracy':>10}{'Time':>12}"]
    for r in reports:
        t = "" if r.predict_time_s is None else f"{r.predict_time_s * 1000:.2f} ms"
        lines.append(f"{KIND_NAMES.get(r.kind, r.kind):<8}{format_percent(r.accuracy):>10}{t:>12}")
    return "\n".join(lines)


def format_report(report: EvalReport) -> str:
    width = max(len(c.value) for c in CLASSES)
    lines = [f"model: {KIND_NAMES.get(report.kind, report.kind)}",
             f"accuracy: {format_percent(report.accuracy)} ({report.n_correct}/{report.n_test})"]
    if report.predict_time_s is not None:
        lines.append(f"predict time: {report.predict_time_s * 1000:.2f} ms")
    lines.append("confusion (rows true, columns predicted):")
    lines.append(" " * (width + 2) + " ".join(f"{c.value[:4]:>5}" for c in CLASSES))
    for c, row in zip(CLASSES, report.confusion):
        lines.append(f"  {c.value:<{width}}" + " ".join(f"{int(v):>5}" for v in row))
    return "\n".join(lines)


def run_pipeline(cfg: PipelineConfig) -> list[EvalReport]:
    """
    Simulate (optionally), decompose, featurize, split, train every kind and evaluate.

    Writes under ``cfg.out``: ``signals/`` (synthetic only), ``decomp/``,
    ``features.csv``, ``train.csv``, ``test.csv``, ``models/``,
    ``reports/`` and ``summary.json``. Reports and summary omit wall-clock
    timing so reruns are byte-identical; timing goes to the printed table.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.synthetic is not None:
        sig_dir = out / "signals"
        rows = []
        for label, n in zip(CLASSES, cfg.synthetic):
            rows += simulate_cohort(label, n, cfg.seed, sig_dir, cfg.rate_hz, cfg.sim_duration_s,
                                    cfg.sim_snr_db, plot=cfg.plot)
        manifest_path = sig_dir / "manifest.csv"
        write_manifest(DatasetManifest(tuple(e for e, _ in rows)), manifest_path)
        write_truth_table([t for _, t in rows], sig_dir / "truth.csv")
    else:
        manifest_path = Path(cfg.manifest)
    manifest = read_manifest(manifest_path)
    stems = [Path(e.path).stem for e in manifest]
    if len(set(stems)) != len(stems):
        raise CliError("manifest file names must have distinct stems")

    decomp_dir = out / "decomp"
    t0 = time.perf_counter()
    decompose_many([resolve_entry_path(manifest_path, e) for e in manifest], decomp_dir, cfg.rate_hz,
                   cfg.decompose, cfg.jobs, cfg.plot)
    logger.info("decomposed %d signals in %.1f s", len(manifest), time.perf_counter() - t0)

    table = features_table(manifest, decomp_dir, cfg.rate_hz)
    write_features_table(table, FEATURE_NAMES, out / "features.csv")
    vectors = load_vectors(out / "features.csv")
    train_set, test_set = split_dataset(vectors, cfg.test_fraction, derive_seed(cfg.seed, _SPLIT))
    _write_vectors_subset(out / "features.csv", {v.signal_id for v in train_set}, out / "train.csv")
    _write_vectors_subset(out / "features.csv", {v.signal_id for v in test_set}, out / "test.csv")

    (out / "models").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    reports = []
    for kind in cfg.kinds:
        model = train(kind, train_set, cfg.classifier, derive_seed(cfg.seed, _TRAIN))
        write_model(model, out / "models" / f"{kind}.json")
        report = evaluate(model, test_set)
        write_report(report, out / "reports" / f"{kind}.json", include_timing=False)
        reports.append(report)

    counts = lambda vs: {c.value: sum(v.label is c for v in vs) for c in CLASSES}  # noqa: E731
    summary = {"seed": cfg.seed, "n_signals": len(vectors), "n_train": len(train_set), "n_test": len(test_set),
               "train_counts": counts(train_set), "test_counts": counts(test_set),
               "accuracy": {r.kind: r.accuracy for r in reports},
               "n_correct": {r.kind: r.n_correct for r in reports}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return reports


def _plot(path: Path, waveforms: dict, annotation: FiringAnnotation, rate: float, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for k in sorted(waveforms):
        w = waveforms[k]
        ax1.plot(np.arange(w.size) * 1000.0 / rate, w, label=f"unit {k}")
        t = annotation.times_for(k)
        ax2.vlines(t, k - 0.4, k + 0.4, linewidth=0.5)
    ax1.set_xlabel("ms")
    ax1.set_ylabel("µV")
    ax2.set_xlabel("s")
    ax2.set_ylabel("unit")
    if waveforms:
        ax1.legend(fontsize=7)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands

def _decompose_config(args) -> DecomposeConfig:
    return DecomposeConfig(detect_k=args.detect_k, match_threshold=args.match_threshold,
                           merge_corr=args.merge_corr, min_occurrences=args.min_occurrences,
                           peel_off=not args.no_peel_off)


def cmd_simulate(args) -> int:
    label = Label.parse(args.cls)
    if args.n < 0:
        raise CliError("--n must be nonnegative")
    out = Path(args.out)
    if args.units is not None and args.units < 0:
        raise CliError("--units must be nonnegative")
    rows = simulate_cohort(label, args.n, args.seed, out, args.rate, args.duration, args.snr, args.muscle, args.plot,
                           args.units)
    write_manifest(DatasetManifest(tuple(e for e, _ in rows)), out / "manifest.csv")
    write_truth_table([t for _, t in rows], out / "truth.csv")
    print(f"wrote {len(rows)} {label.value} signal(s) to {out}")
    return 0


def _signal_paths(args) -> list[Path]:
    paths = [Path(p) for p in args.signals]
    if args.manifest:
        m = read_manifest(args.manifest)
        paths += [resolve_entry_path(args.manifest, e) for e in m]
    if not paths:
        raise CliError("no input signals; pass files or --manifest")
    return paths


def cmd_decompose(args) -> int:
    results = decompose_many(_signal_paths(args), Path(args.out), args.rate, _decompose_config(args),
                             args.jobs, args.plot)
    for r in results:
        print(f"{r['signal']}: {r['n_units']} units, {r['n_events']} events, "
              f"residual {100 * r['residual']:.1f}%")
    return 0


def cmd_features(args) -> int:
    manifest = read_manifest(args.manifest)
    table = features_table(manifest, Path(args.decomp), args.rate)
    write_features_table(table, FEATURE_NAMES, args.out)
    print(f"wrote {len(table)} feature row(s) to {args.out}")
    return 0


def cmd_split(args) -> int:
    vectors = load_vectors(Path(args.features))
    train_set, test_set = split_dataset(vectors, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_vectors_subset(Path(args.features), {v.signal_id for v in train_set}, out / "train.csv")
    _write_vectors_subset(Path(args.features), {v.signal_id for v in test_set}, out / "test.csv")
    print(f"train {len(train_set)} / test {len(test_set)}")
    return 0


def cmd_train(args) -> int:
    config = ClassifierConfig(lda_shrinkage=args.shrinkage, svm_c=args.svm_c, n_trees=args.n_trees)
    model = train(args.model, load_vectors(Path(args.features)), config, args.seed)
    write_model(model, args.out)
    print(f"trained {KIND_NAMES[model.kind]} on {len(load_vectors(Path(args.features)))} vectors -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = read_model(args.model)
    report = evaluate(model, load_vectors(Path(args.features)))
    if args.out:
        write_report(report, args.out, include_timing=not args.no_timing)
    print(format_report(report))
    return 0


def _parse_counts(text: str) -> tuple[int, int, int]:
    try:
        counts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected three integers: healthy,myopathic,neuropathic") from None
    if len(counts) != 3 or min(counts) < 0:
        raise argparse.ArgumentTypeError("expected three nonnegative integers: healthy,myopathic,neuropathic")
    return counts  # type: ignore[return-value]


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig(out=Path(args.out), seed=args.seed, rate_hz=args.rate,
                         manifest=Path(args.manifest) if args.manifest else None, synthetic=args.synthetic,
                         test_fraction=args.test_fraction, decompose=_decompose_config(args),
                         sim_duration_s=args.duration, sim_snr_db=args.snr, jobs=args.jobs, plot=args.plot)
    start = time.perf_counter()
    reports = run_pipeline(cfg)
    n_test = reports[0].n_test if reports else 0
    summary = json.loads((cfg.out / "summary.json").read_text(encoding="utf-8"))
    print(f"signals: {summary['n_signals']}  train: {summary['n_train']}  test: {n_test}")
    print("test composition: " + ", ".join(f"{k} {v}" for k, v in summary["test_counts"].items()))
    print(results_table(reports))
    logger.info("pipeline finished in %.1f s", time.perf_counter() - start)
    return 0


def cmd_match(args) -> int:
    res = match_events(read_annotation(args.truth), read_annotation(args.estimate), args.tol_ms / 1000.0)
    for true_id, est_id in res.pairs.items():
        print(f"truth unit {true_id} <-> estimate unit {est_id if est_id is not None else '-'}: "
              f"F1 {res.f1[true_id]:.4f}")
    print(f"min F1 {res.min_f1:.4f}; spurious estimate units {res.n_spurious_units}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    common.add_argument("--rate", type=float, default=DEFAULT_RATE_HZ, help="sample rate in Hz (default 24000)")
    common.add_argument("-v", "--verbose", action="store_true")

    dec = argparse.ArgumentParser(add_help=False)
    d = DecomposeConfig()
    dec.add_argument("--detect-k", type=float, default=d.detect_k)
    dec.add_argument("--match-threshold", type=float, default=d.match_threshold)
    dec.add_argument("--merge-corr", type=float, default=d.merge_corr)
    dec.add_argument("--min-occurrences", type=int, default=d.min_occurrences)
    dec.add_argument("--no-peel-off", action="store_true")
    dec.add_argument("--jobs", type=int, default=1, help="worker processes for per-signal stages")
    dec.add_argument("--plot", action="store_true", help="write a PNG of templates and firing raster per signal")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--duration", type=float, default=20.0, help="synthetic signal length in s")
    sim.add_argument("--snr", type=float, default=20.0, help="synthetic SNR in dB")

    p = argparse.ArgumentParser(prog="emgdiag", description="Intramuscular EMG decomposition and diagnosis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common, sim], help="generate labeled synthetic signals")
    s.add_argument("--class", dest="cls", required=True, help="healthy, myopathic or neuropathic")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--muscle", default=None)
    s.add_argument("--units", type=int, default=None, help="fixed number of active units (default: class range)")
    s.add_argument("--plot", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("decompose", parents=[common, dec], help="decompose signals into MUAP trains")
    s.add_argument("signals", nargs="*")
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("features", parents=[common], help="build the features table from decompositions")
    s.add_argument("--manifest", required=True)
    s.add_argument("--decomp", required=True, help="directory written by 'decompose'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("split", parents=[common], help="stratified train/test split of a features table")
    s.add_argument("--features", required=True)
    s.add_argument("--test-fraction", type=float, default=0.30)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    c = ClassifierConfig()
    s = sub.add_parser("train", parents=[common], help="train one classifier")
    s.add_argument("--features", required=True)
    s.add_argument("--model", required=True, choices=KINDS)
    s.add_argument("--shrinkage", type=float, default=c.lda_shrinkage)
    s.add_argument("--svm-c", type=float, default=c.svm_c)
    s.add_argument("--n-trees", type=int, default=c.n_trees)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a model on a features table")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out")
    s.add_argument("--no-timing", action="store_true", help="omit wall-clock time from the report file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common, dec, sim], help="run every stage and print the results table")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--synthetic", type=_parse_counts, metavar="H,M,N",
                     help="simulate H healthy, M myopathic and N neuropathic signals")
    s.add_argument("--test-fraction", type=float, default=0.30)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("match", parents=[common], help="compare an estimated annotation with the truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--estimate", required=True)
    s.add_argument("--tol-ms", type=float, default=0.5)
    s.set_defaults(func=cmd_match)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (*ERRORS, CliError) as exc:
        print(f"emgdiag {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
