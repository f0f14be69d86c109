"""Simulated online session in one process: producer -> decode service -> feedback listener.

Six stimuli {7, 7.5, 8, 8.5, 9, 11} Hz at 500 Hz sampling; the decoder is
trained on 7/8/9 Hz trials plus reconstructions for the other three and
decodes one 2.5 s window per trial.

    python scripts/online_demo.py --noise 0.3
"""

import argparse
import threading

import numpy as np

from ssvep_cstl.evaluation import ExperimentConfig, TransferCache, fit_fuzzy
from ssvep_cstl.fuzzy import TrainConfig
from ssvep_cstl.signal_core import Dataset, FrequencyTable, synthetic_dataset
from ssvep_cstl.stream import DecodeService, FeedbackListener, expected_labels, offline_predict, stream_producer

FREQS = [7.0, 7.5, 8.0, 8.5, 9.0, 11.0]
SOURCE = [0, 2, 4]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--train-trials", type=int, default=4)
    ap.add_argument("--test-trials", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--realtime", action="store_true")
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    table = FrequencyTable.from_freqs(FREQS)
    fs = 500.0
    train_ds = Dataset(table, synthetic_dataset(table, args.train_trials, fs, 3.0, 4, args.noise, seed=args.seed), fs)
    cfg = ExperimentConfig(method="fuzzy", window_s=2.5, stride_s=0.05, seed=args.seed,
                           train=TrainConfig(epochs_max=args.epochs))
    source = [(c, k) for c in SOURCE for k in range(args.train_trials)]
    model = fit_fuzzy(train_ds, cfg, TransferCache(train_ds, cfg), source, args.seed)
    print(f"trained on {len(source)} source trials, final loss {model.loss_curve[-1]:.4f}")

    session = synthetic_dataset(table, args.test_trials, fs, 3.0, 4, args.noise, seed=args.seed + 1000)
    epochs = sorted((e for es in session.values() for e in es), key=lambda e: e.trial_id)

    listener = FeedbackListener()
    svc = DecodeService(model, table, ("127.0.0.1", 0), listener.address).start()
    result = {}
    t = threading.Thread(target=lambda: result.update(s=listener.collect(expected_labels(epochs), 10.0)))
    t.start()
    stats = stream_producer(epochs, svc.address, 40, realtime=args.realtime)
    svc.join()
    t.join()
    summary = result["s"]

    parity = all(np.array_equal(svc.results[e.trial_id][1], offline_predict(model, e)[2]) for e in epochs)
    ms = [m.inference_ms for m in summary.received]
    print(f"frames sent {stats.frames}, received {svc.frames_received}; bytes {stats.bytes}")
    print(f"online accuracy {summary.accuracy:.4f} ({len(summary.missed)} missed); offline parity {parity}")
    print(f"inference ms: median {np.median(ms):.1f}, max {np.max(ms):.1f}")


if __name__ == "__main__":
    main()
