"""Source/target splits, ACC/ITR, repeated experiments and paired t-tests."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines as bl
from .cstl import Decomposition, ExchangeConfig, decompose_epoch, reconstruct_from_decomposition
from .fuzzy import DecoderConfig, FuzzyModel, TrainConfig, feature_tensor, logits, predict_logits, train
from .signal_core import Dataset, Epoch, FrequencyTable, PreprocessConfig, discard_head, filter_epoch, \
    first_window, rng_for, sliding_windows

log = logging.getLogger(__name__)

METHODS = ("fuzzy", "cca", "fbcca", "ecca", "emd-ecca")
REPORT_SCHEMA = "ssvep-report/1"


# --------------------------------------------------------------------------- metrics

def accuracy(preds: Sequence[int], truth: Sequence[int]) -> float:
    if len(preds) != len(truth):
        raise ValueError("predictions and labels differ in length")
    if not preds:
        raise ValueError("no trials")
    return sum(int(p) == int(t) for p, t in zip(preds, truth)) / len(preds)


def _xlog2x(p: float) -> float:
    return 0.0 if p == 0 else p * math.log2(p)


def itr(p_acc: float, n_classes: int, t_total_s: float) -> float:
    """Wolpaw information transfer rate in bits/min.

    Below chance the formula goes negative and is returned as is.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= p_acc <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    if t_total_s <= 0:
        raise ValueError("trial time must be positive")
    n = n_classes
    if abs(p_acc * n - 1.0) <= 4 * np.finfo(float).eps * n:
        return 0.0
    wrong = 1.0 - p_acc
    bits = math.log2(n) + _xlog2x(p_acc) + (0.0 if wrong == 0 else wrong * math.log2(wrong / (n - 1)))
    return 60.0 / t_total_s * bits


# --------------------------------------------------------------------------- statistics

def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    t2 = t * t
    y = t2 / (dof + t2)
    if y < 0.5:
        # near t = 0 the direct argument dof / (dof + t^2) loses its digits to rounding
        return 1.0 - betainc_reg(0.5, dof / 2.0, y)
    return betainc_reg(dof / 2.0, 0.5, dof / (dof + t2))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t, p)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length 1-D sequences")
    if a.size < 3:
        raise ValueError("need at least three pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise ValueError("differences have zero variance")
    n = d.size
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return t, student_t_two_sided_p(t, n - 1)


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitPlan:
    P: tuple[int, ...]
    Q: tuple[int, ...]
    held_out: dict[int, int]   # source class -> index of the held-out trial within that class
    seed: int


def split_source_target(table: FrequencyTable, n_p: int, n_trials: int, seed: int) -> SplitPlan:
    n = len(table)
    if not 1 <= n_p < n:
        raise ValueError(f"n_p must be in [1, {n - 1}], got {n_p}")
    if n_trials < 2:
        raise ValueError("need at least two trials per class")
    rng = rng_for(seed, "split")
    P = tuple(sorted(int(c) for c in rng.choice(n, size=n_p, replace=False)))
    Q = tuple(c for c in range(n) if c not in P)
    held = {c: int(rng.integers(n_trials)) for c in P}
    return SplitPlan(P, Q, held, seed)


# --------------------------------------------------------------------------- experiment

@dataclass
class ExperimentConfig:
    method: str = "fuzzy"
    n_source: int = 4
    window_s: float = 1.0
    stride_s: float = 0.1
    repeats: int = 30
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    exchange: ExchangeConfig = field(default_factory=ExchangeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    f_lo: float = 6.0
    f_hi: float = 64.0
    resolution_hz: float = 0.25
    n_ref_harmonics: int = 5
    subbands: bl.SubbandSpec = field(default_factory=bl.SubbandSpec)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")


@dataclass
class TrialRecord:
    trial_id: int
    true: int
    predicted: int
    domain: str
    latency_s: float


@dataclass
class ExperimentReport:
    repeat: int
    seed: int
    method: str
    source_classes: list[int]
    target_classes: list[int]
    trials: list[TrialRecord]
    acc: float
    itr_bits_per_min: float
    t_total_s: float
    wall_time_s: float
    n_classes: int
    error: str | None = None

    def recomputed_acc(self) -> float:
        return accuracy([t.predicted for t in self.trials], [t.true for t in self.trials])


class TransferCache:
    """Per-experiment memo of filtered trials, decompositions and reconstructions.

    Transfer runs on filtered trials that still start at stimulus onset, so the
    injected target phases line up with real trials; the head is discarded
    afterwards, identically for real and reconstructed data.
    """

    def __init__(self, ds: Dataset, cfg: ExperimentConfig):
        self.ds = ds
        self.cfg = cfg
        self.filtered = {c: [filter_epoch(e, cfg.preprocess) for e in trials] for c, trials in ds.trials.items()}
        self.pre = {c: [self.trim(e) for e in trials] for c, trials in self.filtered.items()}
        self.decomp: dict[int, Decomposition] = {}
        self.recon: dict[tuple[int, int], Epoch] = {}

    def trim(self, e: Epoch) -> Epoch:
        return discard_head(e, self.cfg.preprocess.discard_s) if self.cfg.preprocess.discard_s > 0 else e

    def reconstruction(self, e: Epoch, target: int) -> Epoch:
        key = (e.trial_id, target)
        if key not in self.recon:
            if e.trial_id not in self.decomp:
                self.decomp[e.trial_id] = decompose_epoch(e)
            rec = reconstruct_from_decomposition(self.decomp[e.trial_id], self.ds.table[target],
                                                 self.cfg.exchange, self.ds.table)
            self.recon[key] = self.trim(rec)
        return self.recon[key]

    def training_set(self, source: list[tuple[int, int]]) -> list[Epoch]:
        """Real and reconstructed trimmed epochs for (class, index) source trials."""
        out = []
        for c, k in sorted(source, key=lambda ck: (self.filtered[ck[0]][ck[1]].trial_id, ck[0])):
            raw = self.filtered[c][k]
            for target in self.ds.table:
                j = target.class_index
                out.append(self.pre[c][k] if j == c else self.reconstruction(raw, j))
        return out


def _decoder_config(ds: Dataset, cfg: ExperimentConfig) -> DecoderConfig:
    return DecoderConfig(ds.fs_hz, cfg.window_s, cfg.f_lo, cfg.f_hi, cfg.resolution_hz, cfg.preprocess)


def fit_fuzzy(ds: Dataset, cfg: ExperimentConfig, cache: TransferCache, source: list[tuple[int, int]],
              seed: int) -> FuzzyModel:
    """Train the fuzzy decoder on real plus reconstructed windows of the given source trials."""
    return fit_fuzzy_on(cache.training_set(source), ds, cfg, seed)


def fit_fuzzy_on(epochs: Sequence[Epoch], ds: Dataset, cfg: ExperimentConfig, seed: int) -> FuzzyModel:
    """Train on sliding windows of already preprocessed epochs."""
    wins = [w for e in epochs for w in sliding_windows(e, cfg.window_s, cfg.stride_s)]
    X = feature_tensor(wins, cfg.f_lo, cfg.f_hi, cfg.resolution_hz)
    y = np.array([w.label for w in wins])
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed, "n_classes": len(ds.table),
                          "batch_size": min(cfg.train.batch_size, len(y))})
    return train((X, y), tcfg, decoder=_decoder_config(ds, cfg))


def run_repeat(ds: Dataset, cfg: ExperimentConfig, repeat: int, cache: TransferCache | None = None) -> ExperimentReport:
    cache = cache or TransferCache(ds, cfg)
    seed = cfg.seed + repeat
    t_start = time.perf_counter()
    n_classes = len(ds.table)
    plan = split_source_target(ds.table, cfg.n_source, ds.n_trials, seed)
    train_src, test = [], []
    for c in plan.P:
        for k, e in enumerate(cache.pre[c]):
            if k == plan.held_out[c]:
                test.append((e, "source"))
            else:
                train_src.append((c, k))
    for c in plan.Q:
        test.extend((e, "target") for e in cache.pre[c])
    windows = [first_window(e, cfg.window_s) for e, _ in test]

    if cfg.method == "fuzzy":
        model = fit_fuzzy(ds, cfg, cache, train_src, seed)

        def classify(w: Epoch) -> int:
            tokens = feature_tensor([w], cfg.f_lo, cfg.f_hi, cfg.resolution_hz)[0]
            return predict_logits(model, logits(tokens, model))[0]
    else:
        n_h = bl.max_harmonics(ds.table, ds.fs_hz, cfg.n_ref_harmonics)
        refs = bl.build_references(ds.table, n_h, ds.fs_hz, windows[0].n_samples)
        if cfg.method == "cca":
            def classify(w: Epoch) -> int:
                return bl.cca_classify(w, refs)
        elif cfg.method == "fbcca":
            def classify(w: Epoch) -> int:
                return bl.fbcca_classify(w, refs, cfg.subbands)
        else:
            if cfg.method == "ecca":
                src = [first_window(cache.pre[c][k], cfg.window_s) for c, k in train_src]
                templates = bl.class_templates(src, n_classes, windows[0].data.shape, fill_missing=True)
            else:
                src = [first_window(e, cfg.window_s) for e in cache.training_set(train_src)]
                templates = bl.class_templates(src, n_classes)

            def classify(w: Epoch) -> int:
                return bl.ecca_classify(w, templates, refs)

    records = []
    for (e, domain), w in zip(test, windows):
        t0 = time.perf_counter()
        pred = classify(w)
        records.append(TrialRecord(e.trial_id, e.label, int(pred), domain, time.perf_counter() - t0))
    acc = accuracy([r.predicted for r in records], [r.true for r in records])
    t_total = cfg.window_s + statistics.median(r.latency_s for r in records)
    return ExperimentReport(repeat, seed, cfg.method, list(plan.P), list(plan.Q), records, acc,
                            itr(acc, n_classes, t_total), t_total, time.perf_counter() - t_start, n_classes)


@dataclass
class Summary:
    method: str
    repeats: int
    failures: int
    acc_mean: float
    acc_std: float
    itr_mean: float
    itr_std: float


def summarize(reports: Sequence[ExperimentReport], method: str, failures: int = 0) -> Summary:
    ok = sorted((r for r in reports if r.error is None), key=lambda r: r.repeat)
    accs = [r.acc for r in ok]
    itrs = [r.itr_bits_per_min for r in ok]
    sd = lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    mean = lambda v: float(np.mean(v)) if v else float("nan")
    return Summary(method, len(reports), failures, mean(accs), sd(accs), mean(itrs), sd(itrs))


def run_experiment(ds: Dataset, cfg: ExperimentConfig) -> tuple[list[ExperimentReport], Summary]:
    """Repeat split -> (reconstruct -> train) -> test ``cfg.repeats`` times.

    A failing repeat is logged and recorded with its error; the run continues.
    """
    if len(ds.table) < 2:
        raise ValueError("need at least two classes")
    cache = TransferCache(ds, cfg)
    reports, failures = [], 0
    for r in range(cfg.repeats):
        try:
            reports.append(run_repeat(ds, cfg, r, cache))
            log.info("repeat %d/%d: acc=%.4f", r + 1, cfg.repeats, reports[-1].acc)
        except Exception as exc:  # one bad repeat must not sink the experiment
            failures += 1
            log.error("repeat %d failed: %s", r, exc)
            reports.append(ExperimentReport(r, cfg.seed + r, cfg.method, [], [], [], float("nan"), float("nan"),
                                            float("nan"), 0.0, len(ds.table), error=f"{type(exc).__name__}: {exc}"))
    return reports, summarize(reports, cfg.method, failures)


# --------------------------------------------------------------------------- report files

def trials_csv(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repeat", "seed", "trial_id", "domain", "true", "predicted", "correct"])
    for r in sorted(reports, key=lambda r: r.repeat):
        for t in r.trials:
            w.writerow([r.repeat, r.seed, t.trial_id, t.domain, t.true, t.predicted, int(t.true == t.predicted)])
    return buf.getvalue()


def summary_csv(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repeat", "seed", "method", "source_classes", "n_test", "acc", "error"])
    for r in sorted(reports, key=lambda r: r.repeat):
        w.writerow([r.repeat, r.seed, r.method, " ".join(map(str, r.source_classes)), len(r.trials),
                    f"{r.acc:.10f}", r.error or ""])
    return buf.getvalue()


def report_dict(reports: Sequence[ExperimentReport], summary: Summary, config: dict | None = None) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "config": config or {},
        "summary": asdict(summary),
        "repeats": [
            {**{k: v for k, v in asdict(r).items() if k != "trials"},
             "trials": [asdict(t) for t in r.trials]}
            for r in sorted(reports, key=lambda r: r.repeat)
        ],
    }


def write_report(out_dir, reports: Sequence[ExperimentReport], summary: Summary, config: dict | None = None) -> Path:
    """report.json (timings included) plus trials.csv and summary.csv, which hold no timing fields."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trials.csv").write_text(trials_csv(reports))
    (out / "summary.csv").write_text(summary_csv(reports))
    path = out / "report.json"
    path.write_text(json.dumps(report_dict(reports, summary, config), indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_report_accuracies(path) -> list[float]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path} is not a {REPORT_SCHEMA} file")
    return [r["acc"] for r in doc["repeats"] if r.get("error") is None]


# --------------------------------------------------------------------------- ablation

@dataclass
class SweepResult:
    values: list[int]
    accuracies: dict[int, list[float]]
    ttests: list[dict]


def rule_sweep(ds: Dataset, cfg: ExperimentConfig, rules: Sequence[int] = (3, 5, 10)) -> SweepResult:
    """Run the fuzzy experiment once per rule count on identical splits and t-test every pair."""
    if cfg.method != "fuzzy":
        raise ValueError("rule sweep applies to the fuzzy decoder only")
    accs: dict[int, list[float]] = {}
    for R in rules:
        run_cfg = ExperimentConfig(**{**cfg.__dict__, "train": replace(cfg.train, rules=int(R))})
        reports, _ = run_experiment(ds, run_cfg)
        accs[int(R)] = [r.acc for r in sorted(reports, key=lambda r: r.repeat)]
    tests = []
    for i, a in enumerate(rules):
        for b in rules[i + 1:]:
            pairs = [(x, y) for x, y in zip(accs[a], accs[b]) if math.isfinite(x) and math.isfinite(y)]
            row = {"a": int(a), "b": int(b), "n": len(pairs), "t": float("nan"), "p": float("nan"), "note": ""}
            try:
                row["t"], row["p"] = paired_ttest([x for x, _ in pairs], [y for _, y in pairs])
            except ValueError as exc:   # e.g. identical accuracies on every split
                row["note"] = str(exc)
            tests.append(row)
    return SweepResult([int(R) for R in rules], accs, tests)
