"""Acceptance suite: one PASS/FAIL line per criterion.

    pytest tests/test_acceptance.py -s          # lines also appear without -s

Set SSVEP_REAL_MANIFEST to a manifest of recorded trials to run the optional
real-data smoke check (criterion 11); it is skipped otherwise.
"""

import math
import os
import threading
import time

import numpy as np
import pytest

from conftest import band_limited, tone
from ssvep_cstl.cli import main as cli_main
from ssvep_cstl.cstl import frequency_exchange, harmonic_set, reconstruct_target, spectral_pcc
from ssvep_cstl.emd import sift
from ssvep_cstl.evaluation import (ExperimentConfig, TransferCache, accuracy, fit_fuzzy, itr, rule_sweep,
                                   run_experiment)
from ssvep_cstl.fuzzy import TrainConfig, grad_check, init_model
from ssvep_cstl.signal_core import (Dataset, FrequencyTable, StimulusSpec, dominant_freq, generate_ssvep,
                                    load_manifest, synthetic_dataset, write_dataset)
from ssvep_cstl.stream import DecodeService, FeedbackListener, expected_labels, offline_predict, stream_producer

FS = 250.0


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail}")
        assert ok, f"criterion {n} {name}: {detail}"
    return emit


def bin_energy(x, f, fs=FS):
    spec = np.fft.rfft(x)
    k = int(np.argmin(np.abs(np.fft.rfftfreq(x.size, 1 / fs) - f)))
    return float(abs(spec[k]) ** 2)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def bench_dataset(noise=0.3, seed=7):
    table = FrequencyTable.from_freqs([float(f) for f in range(8, 16)])
    return Dataset(table, synthetic_dataset(table, 6, FS, 4.0, 4, noise, seed=seed), FS)


def test_c01_emd_completeness(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        x = band_limited(seed, n=1000, fs=FS)
        s = sift(x, FS)
        worst = max(worst, float(np.max(np.abs(x - s.reconstruct())) / np.max(np.abs(x))))
    dt = time.perf_counter() - t0
    report(1, "EMD completeness", worst <= 1e-8 and dt < 30, f"max rel err {worst:.2e} (<= 1e-8), {dt:.1f} s (< 30)")


def test_c02_two_tone_separation(report):
    s = sift(tone(10.0) + tone(40.0), FS)
    f1 = dominant_freq(s.imfs[0], FS, 0.25)
    f2 = dominant_freq(s.imfs[1], FS, 0.25) if s.K > 1 else float("nan")
    report(2, "two-tone separation", f1 == 40.0 and f2 == 10.0, f"IMF-1 peak {f1} Hz, IMF-2 peak {f2} Hz")


def test_c03_frequency_exchange(report):
    x = tone(11.0)
    ident = frequency_exchange(x, FS, harmonic_set(11.0, 1), harmonic_set(11.0, 1))
    e_ident = rms(ident - x) / rms(x)
    y = frequency_exchange(x, FS, harmonic_set(11.0, 1), harmonic_set(8.0, 1))
    resid = bin_energy(y, 11.0) / bin_energy(x, 11.0)
    peak = dominant_freq(y, FS, 0.25)
    ok = e_ident <= 0.01 and resid <= 0.01 and peak == 8.0
    report(3, "frequency exchange", ok,
           f"identity rms err {e_ident:.2e} (<= 1%), 11 Hz residual {resid:.2e} (<= 1%), peak {peak} Hz")


def test_c04_reconstruction_fidelity(report):
    freqs = [float(f) for f in range(8, 16)]
    rng = np.random.default_rng(4)
    pccs = []
    for i in range(30):
        fs_src, f_tgt = rng.choice(freqs, size=2, replace=False)
        src = generate_ssvep(StimulusSpec(float(fs_src), 0.0, 0), [1.0, 0.5], FS, 4.0, 4, 0.2, seed=i)
        true = generate_ssvep(StimulusSpec(float(f_tgt), 0.0, 1), [1.0, 0.5], FS, 4.0, 4, 0.2, seed=1000 + i)
        pccs.append(spectral_pcc(reconstruct_target(src, true.stimulus), true))
    m = float(np.mean(pccs))
    report(4, "reconstruction fidelity", m >= 0.9, f"mean spectral PCC {m:.4f} over 30 pairs (>= 0.9)")


def test_c05_gradient_correctness(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = init_model(12, 4, 3, 5, 6, 8, seed=seed)
        m.log_lambda = rng.normal(0, 0.3, 5)
        m.b1 = rng.normal(0, 0.1, 8)
        m.b2 = rng.normal(0, 0.1, 4)
        worst = max(worst, grad_check(m, (rng.normal(size=(5, 12)), seed % 4)))
    dt = time.perf_counter() - t0
    report(5, "gradient correctness", worst <= 1e-4 and dt < 60, f"max rel err {worst:.2e} (<= 1e-4), {dt:.1f} s (< 60)")


def test_c06_metric_oracles(report):
    zeros = {n: itr(1.0 / n, n, 1.5) for n in (2, 6, 12, 40)}
    v = itr(1.0, 40, 2.0)
    rng = np.random.default_rng(6)
    acc_ok = True
    for _ in range(20):
        n = int(rng.integers(1, 50))
        truth = rng.integers(0, 5, n).tolist()
        preds = rng.integers(0, 5, n).tolist()
        hits = 0
        for p, t in zip(preds, truth):
            hits += p == t
        acc_ok &= accuracy(preds, truth) == hits / n
    ok = all(z == 0.0 for z in zeros.values()) and abs(v - 159.66) <= 0.01 and acc_ok
    report(6, "metric oracles", ok, f"ITR at chance {list(zeros.values())}, ITR(1,40,2s) {v:.4f}, accuracy fixtures {acc_ok}")


@pytest.mark.slow
def test_c07_end_to_end_cstl(report):
    ds = bench_dataset()
    t0 = time.perf_counter()
    _, fz = run_experiment(ds, ExperimentConfig(method="fuzzy", n_source=4, window_s=1.0, repeats=10, seed=1,
                                                train=TrainConfig(rules=5)))
    _, fb = run_experiment(ds, ExperimentConfig(method="fbcca", n_source=4, window_s=1.0, repeats=10, seed=1))
    dt = time.perf_counter() - t0
    ok = fz.acc_mean >= 0.90 and fb.acc_mean >= 0.80 and dt < 600
    report(7, "end-to-end CSTL", ok,
           f"fuzzy {fz.acc_mean:.4f} (>= 0.90), FBCCA {fb.acc_mean:.4f} (>= 0.80), {dt:.0f} s (< 600)")


@pytest.mark.slow
def test_c08_rule_ablation(report):
    # hard setting (short windows, heavy noise) so accuracies differ between splits and every t-test is defined
    ds = bench_dataset(noise=2.0)
    cfg = ExperimentConfig(method="fuzzy", repeats=4, seed=2, window_s=0.5, stride_s=0.25,
                           train=TrainConfig(epochs_max=20))
    res = rule_sweep(ds, cfg, (3, 5, 10))
    pairs = {(r["a"], r["b"]) for r in res.ttests}
    complete = all(len(res.accuracies[R]) == 4 for R in (3, 5, 10))
    emitted = all(math.isfinite(r["t"]) and 0 <= r["p"] <= 1 for r in res.ttests)
    ok = pairs == {(3, 5), (3, 10), (5, 10)} and complete and emitted
    detail = ", ".join(f"R{r['a']}vR{r['b']} p={r['p']:.3f}{' ' + r['note'] if r['note'] else ''}" for r in res.ttests)
    report(8, "rule-count ablation", ok, detail)


def test_c09_streaming_parity(report, tmp_path):
    fs = 500.0
    table = FrequencyTable.from_freqs([7.0, 7.5, 8.0, 8.5, 9.0, 11.0])
    train_ds = Dataset(table, synthetic_dataset(table, 4, fs, 3.0, 4, 0.3, seed=5), fs)
    cfg = ExperimentConfig(method="fuzzy", window_s=2.5, stride_s=0.1, seed=5, train=TrainConfig(epochs_max=30))
    model = fit_fuzzy(train_ds, cfg, TransferCache(train_ds, cfg), [(c, k) for c in (0, 2, 4) for k in range(4)], 5)

    stored = load_manifest(write_dataset(synthetic_dataset(table, 4, fs, 3.0, 4, 0.3, seed=77), tmp_path, table, fs))
    epochs = sorted(stored.all_epochs(), key=lambda e: e.trial_id)
    listener = FeedbackListener()
    svc = DecodeService(model, table, ("127.0.0.1", 0), listener.address).start()
    out = {}
    t = threading.Thread(target=lambda: out.update(s=listener.collect(expected_labels(epochs), 10.0)))
    t.start()
    stats = stream_producer(epochs, svc.address)
    svc.join(60)
    t.join(60)
    summary = out["s"]

    parity = len(summary.received) == len(epochs) and all(
        svc.results[e.trial_id][0].class_index == offline_predict(model, e)[0]
        and np.array_equal(svc.results[e.trial_id][1], offline_predict(model, e)[2]) for e in epochs)
    lost = stats.frames - svc.frames_received
    worst_ms = max((m.inference_ms for m in summary.received), default=float("inf"))
    ok = len(epochs) == 24 and parity and lost == 0 and not summary.missed and worst_ms < 100
    report(9, "streaming parity", ok,
           f"{len(epochs)} trials, parity {parity}, frames lost {lost}, max inference {worst_ms:.1f} ms (< 100)")


def test_c10_determinism(report, tmp_path):
    assert cli_main(["generate", "--seed", "4", "--out", str(tmp_path / "data"), "--trials", "3",
                     "--freqs", "8", "9", "10", "11", "--duration", "2"]) == 0
    manifest = str(tmp_path / "data" / "manifest.json")
    same = {}
    for method in ("fuzzy", "fbcca"):
        argv = ["evaluate", "--seed", "13", "--manifest", manifest, "--method", method, "--n-source", "2",
                "--repeats", "2", "--epochs", "5", "--out", str(tmp_path / method)]
        runs = []
        for _ in range(2):
            assert cli_main(argv) == 0
            runs.append({n: (tmp_path / method / n).read_bytes() for n in ("trials.csv", "summary.csv")})
        same[method] = runs[0] == runs[1]
    report(10, "determinism", all(same.values()), f"byte-identical report CSVs: {same}")


def test_c11_real_data_smoke(report, capsys):
    path = os.environ.get("SSVEP_REAL_MANIFEST")
    if not path:
        with capsys.disabled():
            print("\n[SKIP] criterion 11 real-data smoke: set SSVEP_REAL_MANIFEST to run")
        pytest.skip("no real-data manifest supplied")
    ds = load_manifest(path)
    _, summary = run_experiment(ds, ExperimentConfig(method="fuzzy", n_source=8, window_s=1.0, repeats=1, seed=0))
    report(11, "real-data smoke", math.isfinite(summary.acc_mean),
           f"{len(ds.table)} classes, accuracy {summary.acc_mean:.4f} (no threshold)")
