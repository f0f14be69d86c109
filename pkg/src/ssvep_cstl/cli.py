"""Command-line entry point: ``ssvep-cstl <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (JSON). Keys are flag names with
dashes or underscores, either at the top level or inside a section named after
the subcommand; explicit flags override file values. Each run writes its
resolved configuration (``config.json``) and a reproducibility record
(``run_manifest.json``) into ``--out``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .cstl import ExchangeConfig, decompose_epoch, reconstruct_from_decomposition
from .emd import sift
from .evaluation import (METHODS, ExperimentConfig, TransferCache, fit_fuzzy, fit_fuzzy_on, load_report_accuracies,
                         paired_ttest, run_experiment, write_report)
from .fuzzy import TrainConfig, load_model, save_model, write_centers, write_loss_curve
from .signal_core import (Dataset, FrequencyTable, PreprocessConfig, dominant_freq, filter_epoch, load_manifest,
                          preprocess, synthetic_dataset, write_dataset, write_epoch_file)

log = logging.getLogger("ssvep_cstl")

ONLINE_FREQS = (7.0, 7.5, 8.0, 8.5, 9.0, 11.0)
ONLINE_SOURCE_FREQS = (7.0, 8.0, 9.0)
STOCHASTIC = {"generate", "train", "evaluate", "baseline"}
REQUIRED = {
    "generate": ("out",),
    "preprocess": ("manifest", "out"),
    "emd": ("manifest", "out"),
    "reconstruct": ("manifest", "source_classes", "out"),
    "train": ("manifest", "out"),
    "evaluate": ("manifest", "out"),
    "baseline": ("manifest", "out"),
    "stream": ("manifest", "endpoint"),
    "serve": ("model", "endpoint"),
    "listen": ("endpoint", "manifest"),
    "ttest": ("a", "b"),
}


class UsageError(Exception):
    """Bad flags, config keys or missing inputs; exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- run records

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def input_hashes(paths: Iterable) -> dict[str, str]:
    return {str(p): sha256_file(p) for p in paths}


def dataset_inputs(manifest: Path, ds: Dataset) -> list[Path]:
    return [manifest, *ds.source_paths]


def write_run_manifest(out_dir, config: dict, version: str, hashes: dict[str, str], command: str = "") -> Path:
    """Reproducibility record: resolved config, input content hashes and tool version (no timestamps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"tool": "ssvep-cstl", "version": version, "command": command, "config": config,
           "inputs": dict(sorted(hashes.items()))}
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_run_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("tool") != "ssvep-cstl" or not {"version", "config", "inputs"} <= doc.keys():
        raise ValueError(f"{path} is not a run manifest")
    return doc


def _finish(args, config: dict, hashes: dict[str, str]):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, config, __version__, hashes, args.command)


# --------------------------------------------------------------------------- parser

def _endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"endpoint must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _add_common(p: argparse.ArgumentParser, seed: bool = False, out: bool = True):
    p.add_argument("--config", type=Path, help="JSON file of flag values (flags win)")
    if out:
        p.add_argument("--out", type=Path, help="output directory")
    if seed:
        p.add_argument("--seed", type=int, help="master seed (required)")


def _add_experiment(p: argparse.ArgumentParser, methods: Sequence[str], default: str):
    p.add_argument("--manifest", type=Path)
    p.add_argument("--method", choices=methods, default=default)
    p.add_argument("--n-source", type=int, default=4, help="number of source classes per repeat")
    p.add_argument("--window-s", type=float, default=1.0)
    p.add_argument("--stride-s", type=float, default=0.1)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--n-ref-harmonics", type=int, default=5)
    _add_transfer(p)
    _add_training(p)


def _add_transfer(p: argparse.ArgumentParser):
    p.add_argument("--g-source", type=float, default=0.0)
    p.add_argument("--g-target", type=float, default=1.0)
    p.add_argument("--n-harmonics", type=int, default=4)
    p.add_argument("--imf-range", type=int, nargs=2, default=[1, 3], metavar=("K_LO", "K_HI"))


def _add_training(p: argparse.ArgumentParser):
    p.add_argument("--rules", type=int, default=5)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssvep-cstl", description="SSVEP cross-stimulus transfer toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic SSVEP dataset")
    _add_common(p, seed=True)
    p.add_argument("--freqs", type=float, nargs="+", default=[float(f) for f in range(8, 16)])
    p.add_argument("--phases", type=float, nargs="+", help="per-class phase in radians (default 0)")
    p.add_argument("--trials", type=int, default=6)
    p.add_argument("--fs", type=float, default=250.0)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--harmonic-amps", type=float, nargs="+", help="amplitude per harmonic (default 1/h, 4 terms)")

    p = sub.add_parser("preprocess", help="band-pass, notch and discard the response-latency head")
    _add_common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--lo", type=float, default=7.0)
    p.add_argument("--hi", type=float, default=70.0)
    p.add_argument("--no-notch", action="store_true")
    p.add_argument("--discard-s", type=float, default=0.14)

    p = sub.add_parser("emd", help="dump the IMFs of every trial")
    _add_common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--max-imfs", type=int, default=8)
    p.add_argument("--sd-stop", type=float, default=0.2)

    p = sub.add_parser("reconstruct", help="synthesize target-class trials from source-class trials")
    _add_common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--source-classes", type=int, nargs="+")
    p.add_argument("--no-filter", action="store_true", help="input is already band-passed")
    _add_transfer(p)

    p = sub.add_parser("train", help="train the fuzzy decoder")
    _add_common(p, seed=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--source-classes", type=int, nargs="+",
                   help="train with reconstruction from these classes only (default: every class, no transfer)")
    p.add_argument("--window-s", type=float, default=1.0)
    p.add_argument("--stride-s", type=float, default=0.1)
    p.add_argument("--out-model", type=Path, help="checkpoint path (default <out>/model.fzm)")
    _add_transfer(p)
    _add_training(p)

    p = sub.add_parser("evaluate", help="repeated cross-stimulus evaluation")
    _add_common(p, seed=True)
    _add_experiment(p, METHODS, "fuzzy")

    p = sub.add_parser("baseline", help="repeated evaluation of a reference decoder")
    _add_common(p, seed=True)
    _add_experiment(p, [m for m in METHODS if m != "fuzzy"], "fbcca")

    p = sub.add_parser("stream", help="stream stored trials to a decode service")
    _add_common(p, out=False)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--endpoint", type=_endpoint)
    p.add_argument("--fs", type=float, help="expected sampling rate of the stored trials")
    p.add_argument("--chunk-ms", type=int, default=40)
    p.add_argument("--realtime", action="store_true")
    p.add_argument("--cue-s", type=float, default=0.0)
    p.add_argument("--rest-s", type=float, default=0.0)

    p = sub.add_parser("serve", help="decode streamed trials and send feedback datagrams")
    _add_common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--endpoint", type=_endpoint, help="listen address")
    p.add_argument("--feedback", type=_endpoint, help="feedback datagram destination")
    p.add_argument("--window-s", type=float, help="must match the model's window when given")
    p.add_argument("--freqs", type=float, nargs="+", default=list(ONLINE_FREQS))

    p = sub.add_parser("listen", help="collect feedback datagrams and score them")
    _add_common(p)
    p.add_argument("--endpoint", type=_endpoint)
    p.add_argument("--manifest", type=Path, help="trials whose labels are expected")
    p.add_argument("--timeout", type=float, default=10.0)

    p = sub.add_parser("ttest", help="paired t-test between two accuracy series")
    _add_common(p)
    p.add_argument("--a", type=Path, help="report.json or one number per line")
    p.add_argument("--b", type=Path)
    return parser


def _dests(p: argparse.ArgumentParser) -> set[str]:
    return {a.dest for a in p._actions if a.dest not in ("help", "config", "version")}


def load_config(path: Path, command: str, known: set[str], commands: Iterable[str]) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold an object")
    commands = set(commands)
    flat: dict = {}
    for key, value in doc.items():
        if key in commands:
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be an object")
            if key == command:
                flat.update({k.replace("-", "_"): v for k, v in value.items()})
            continue
        flat[key.replace("-", "_")] = value
    for key in flat:
        if key not in known:
            raise UsageError(f"unknown config key {key!r} for {command}")
    return flat


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        values = load_config(args.config, args.command, _dests(sub), REQUIRED)
        for action in sub._actions:
            if action.dest in values and action.type is not None and values[action.dest] is not None:
                v = values[action.dest]
                values[action.dest] = [action.type(x) for x in v] if isinstance(v, list) else action.type(v)
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    for key in REQUIRED[args.command]:
        if getattr(args, key, None) is None:
            raise UsageError(f"missing required input --{key.replace('_', '-')}")
    if args.command in STOCHASTIC and args.seed is None:
        raise UsageError(f"--seed is required for {args.command}")
    return args


def resolved_config(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("config", "command"):
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = f"{v[0]}:{v[1]}"
        out[k] = v
    return out


# --------------------------------------------------------------------------- commands

def _load(path: Path) -> Dataset:
    if not Path(path).is_file():
        raise UsageError(f"missing required input {path}")
    return load_manifest(path)


def _exchange(args) -> ExchangeConfig:
    return ExchangeConfig(g_source=args.g_source, g_target=args.g_target, n_harmonics=args.n_harmonics,
                          k_range=tuple(args.imf_range))


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(epochs_max=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                       rules=args.rules)


def cmd_generate(args) -> int:
    table = FrequencyTable.from_freqs(args.freqs, args.phases)
    trials = synthetic_dataset(table, args.trials, args.fs, args.duration, args.channels, args.noise,
                               args.harmonic_amps, seed=args.seed)
    config = resolved_config(args)
    write_dataset(trials, args.out, table, args.fs, extra={"generator": config})
    _finish(args, config, {})
    print(f"wrote {len(table) * args.trials} trials to {args.out / 'manifest.json'}")
    return 0


def cmd_preprocess(args) -> int:
    ds = _load(args.manifest)
    cfg = PreprocessConfig(lo_hz=args.lo, hi_hz=args.hi, notch=not args.no_notch, discard_s=args.discard_s)
    trials = {c: [preprocess(e, cfg) for e in es] for c, es in ds.trials.items()}
    write_dataset(trials, args.out, ds.table, ds.fs_hz, extra={"preprocess": asdict(cfg)})
    _finish(args, resolved_config(args), input_hashes(dataset_inputs(args.manifest, ds)))
    return 0


def cmd_emd(args) -> int:
    """IMF k of trial t is written as an epoch with trial_id = 100*t + k; k = 0 holds the residue."""
    ds = _load(args.manifest)
    out = Path(args.out)
    (out / "imfs").mkdir(parents=True, exist_ok=True)
    rows = []
    for e in ds.all_epochs():
        sets = [sift(ch, e.fs_hz, max_imfs=args.max_imfs, sd_stop=args.sd_stop) for ch in e.data]
        K = max(s.K for s in sets)
        for k in range(K + 1):
            data = np.zeros_like(e.data)
            for c, s in enumerate(sets):
                if k == 0:
                    data[c] = s.residue
                elif k <= s.K:
                    data[c] = s.imfs[k - 1]
            tid = 100 * e.trial_id + k
            write_epoch_file(e.with_data(data, trial_id=tid), out / "imfs" / f"t{e.trial_id:05d}_k{k:02d}.epo")
            for c, s in enumerate(sets):
                if k == 0 or k <= s.K:
                    peak = dominant_freq(data[c], e.fs_hz, 0.25) if np.any(data[c]) else 0.0
                    rows.append([e.trial_id, e.label, c, k, f"{peak:.2f}", f"{np.sqrt(np.mean(data[c] ** 2)):.6g}"])
    with (out / "imfs.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "class", "channel", "k", "dominant_hz", "rms"])
        w.writerows(rows)
    _finish(args, resolved_config(args), input_hashes(dataset_inputs(args.manifest, ds)))
    return 0


def cmd_reconstruct(args) -> int:
    ds = _load(args.manifest)
    bad = [c for c in args.source_classes if c not in ds.trials]
    if bad:
        raise UsageError(f"source classes {bad} have no trials in {args.manifest}")
    cfg = _exchange(args)
    pre = PreprocessConfig(discard_s=0.0)
    trials: dict[int, list] = {s.class_index: [] for s in ds.table if s.class_index not in args.source_classes}
    rows = []
    next_id = 0
    for c in sorted(args.source_classes):
        for e in ds.trials[c]:
            src = e if args.no_filter else filter_epoch(e, pre)
            dec = decompose_epoch(src)
            for target in sorted(trials):
                rec = reconstruct_from_decomposition(dec, ds.table[target], cfg, ds.table)
                trials[target].append(rec.with_data(rec.data, trial_id=next_id))
                rows.append([next_id, e.trial_id, c, target])
                next_id += 1
    write_dataset(trials, args.out, ds.table, ds.fs_hz, extra={"exchange": asdict(cfg)})
    with (Path(args.out) / "reconstructions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "source_trial_id", "source_class", "target_class"])
        w.writerows(rows)
    _finish(args, resolved_config(args), input_hashes(dataset_inputs(args.manifest, ds)))
    return 0


def cmd_train(args) -> int:
    ds = _load(args.manifest)
    cfg = ExperimentConfig(method="fuzzy", window_s=args.window_s, stride_s=args.stride_s, seed=args.seed,
                           exchange=_exchange(args), train=_train_cfg(args))
    cache = TransferCache(ds, cfg)
    if args.source_classes:
        bad = [c for c in args.source_classes if c not in ds.trials]
        if bad:
            raise UsageError(f"source classes {bad} have no trials in {args.manifest}")
        source = [(c, k) for c in sorted(args.source_classes) for k in range(len(ds.trials[c]))]
        model = fit_fuzzy(ds, cfg, cache, source, args.seed)
    else:
        if len(ds.trials) != len(ds.table):
            raise UsageError("manifest lacks some classes; pass --source-classes to train with transfer")
        model = fit_fuzzy_on([e for c in sorted(cache.pre) for e in cache.pre[c]], ds, cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = args.out_model or out / "model.fzm"
    save_model(model, model_path)
    write_loss_curve(model, out / "loss.csv")
    write_centers(model, out / "centers.csv")
    _finish(args, resolved_config(args), input_hashes(dataset_inputs(args.manifest, ds)))
    print(f"final loss {model.loss_curve[-1]:.6f}; model written to {model_path}")
    return 0


def cmd_evaluate(args) -> int:
    ds = _load(args.manifest)
    cfg = ExperimentConfig(method=args.method, n_source=args.n_source, window_s=args.window_s, stride_s=args.stride_s,
                           repeats=args.repeats, seed=args.seed, exchange=_exchange(args), train=_train_cfg(args),
                           n_ref_harmonics=args.n_ref_harmonics)
    if not 1 <= cfg.n_source < len(ds.table):
        raise UsageError(f"--n-source must be in [1, {len(ds.table) - 1}]")
    reports, summary = run_experiment(ds, cfg)
    config = resolved_config(args)
    write_report(args.out, reports, summary, config)
    _finish(args, config, input_hashes(dataset_inputs(args.manifest, ds)))
    print(f"{summary.method}: acc {summary.acc_mean:.4f} +/- {summary.acc_std:.4f}, "
          f"itr {summary.itr_mean:.2f} +/- {summary.itr_std:.2f} bits/min over {summary.repeats} repeats "
          f"({summary.failures} failed)")
    return 1 if summary.failures == summary.repeats else 0


def cmd_stream(args) -> int:
    from .stream import StreamError, stream_producer

    ds = _load(args.manifest)
    if args.fs is not None and args.fs != ds.fs_hz:
        raise UsageError(f"--fs {args.fs} does not match the dataset rate {ds.fs_hz}")
    epochs = sorted(ds.all_epochs(), key=lambda e: e.trial_id)
    try:
        stats = stream_producer(epochs, args.endpoint, args.chunk_ms, args.realtime, args.cue_s, args.rest_s)
    except StreamError as exc:
        raise RuntimeError(str(exc)) from None
    print(json.dumps(asdict(stats)))
    return 0


def cmd_serve(args) -> int:
    from .stream import DecodeService, StreamError

    if not Path(args.model).is_file():
        raise UsageError(f"missing required input {args.model}")
    model = load_model(args.model)
    table = FrequencyTable.from_freqs(args.freqs)
    try:
        svc = DecodeService(model, table, args.endpoint, args.feedback, args.window_s)
    except StreamError as exc:
        raise UsageError(str(exc)) from None
    log.info("serving on %s:%d", *svc.address)
    svc.run()
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "online.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial_id", "class_index", "confidence", "inference_ms"])
            for tid in sorted(svc.results):
                m = svc.results[tid][0]
                w.writerow([m.trial_id, m.class_index, f"{m.confidence:.4f}", f"{m.inference_ms:.2f}"])
        _finish(args, resolved_config(args), input_hashes([args.model]))
    print(json.dumps({"trials": len(svc.results), "frames": svc.frames_received, "malformed": svc.malformed}))
    return 0


def cmd_listen(args) -> int:
    from .stream import expected_labels, feedback_listener

    ds = _load(args.manifest)
    summary = feedback_listener(args.endpoint, expected_labels(ds.all_epochs()), args.timeout)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "listen.json").write_text(json.dumps(
            {"accuracy": summary.accuracy, "missed": summary.missed,
             "received": [asdict(m) for m in summary.received]}, indent=2) + "\n")
    print(f"online accuracy {summary.accuracy:.4f} ({len(summary.received)} received, {len(summary.missed)} missed)")
    return 0


def _read_series(path: Path) -> list[float]:
    if not Path(path).is_file():
        raise UsageError(f"missing required input {path}")
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return load_report_accuracies(path)
    return [float(v) for v in text.replace(",", " ").split()]


def cmd_ttest(args) -> int:
    a, b = _read_series(args.a), _read_series(args.b)
    if len(a) != len(b):
        raise UsageError(f"series lengths differ: {len(a)} vs {len(b)}")
    t, p = paired_ttest(a, b)
    line = {"n": len(a), "mean_diff": float(np.mean(np.subtract(a, b))), "t": t, "p": p}
    print(json.dumps(line))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ttest.json").write_text(json.dumps(line, indent=2) + "\n")
        _finish(args, resolved_config(args), input_hashes([args.a, args.b]))
    return 0


COMMANDS = {
    "generate": cmd_generate, "preprocess": cmd_preprocess, "emd": cmd_emd, "reconstruct": cmd_reconstruct,
    "train": cmd_train, "evaluate": cmd_evaluate, "baseline": cmd_evaluate, "stream": cmd_stream,
    "serve": cmd_serve, "listen": cmd_listen, "ttest": cmd_ttest,
}


def _setup_logging():
    level = os.environ.get("SSVEP_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:     # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
