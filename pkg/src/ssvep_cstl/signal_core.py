"""Epoch data model, synthetic SSVEP generation, filtering, FFT helpers and file I/O."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

EPOCH_MAGIC = b"SSVEPE01"
_EPOCH_HEADER = struct.Struct("<8sIIfffII")
MANIFEST_FORMAT = "ssvep-manifest/1"


class SignalError(ValueError):
    """Invalid signal, filter design, or window request."""


class EpochFormatError(ValueError):
    """Malformed epoch file or manifest."""


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Independent random stream named by ``purpose``.

    The stream depends only on (seed, purpose), never on how many draws
    other parts of the program have made.
    """
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")])


@dataclass(frozen=True)
class StimulusSpec:
    freq_hz: float
    phase_rad: float
    class_index: int

    def __post_init__(self):
        if not (math.isfinite(self.freq_hz) and self.freq_hz > 0):
            raise SignalError(f"stimulus frequency must be finite and positive, got {self.freq_hz}")
        if not math.isfinite(self.phase_rad):
            raise SignalError("stimulus phase must be finite")
        if self.class_index < 0:
            raise SignalError("class_index must be >= 0")


@dataclass(frozen=True)
class FrequencyTable:
    entries: tuple[StimulusSpec, ...]

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda s: s.class_index))
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise SignalError("frequency table is empty")
        if [s.class_index for s in entries] != list(range(len(entries))):
            raise SignalError("class indices must be 0..N-1 without gaps or duplicates")
        freqs = [s.freq_hz for s in entries]
        if len(set(freqs)) != len(freqs):
            raise SignalError("stimulus frequencies must be pairwise distinct")

    @classmethod
    def from_freqs(cls, freqs: Sequence[float], phases: Sequence[float] | None = None) -> "FrequencyTable":
        phases = [0.0] * len(freqs) if phases is None else phases
        return cls(tuple(StimulusSpec(float(f), float(p), i) for i, (f, p) in enumerate(zip(freqs, phases))))

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, class_index: int) -> StimulusSpec:
        return self.entries[class_index]

    def __iter__(self):
        return iter(self.entries)

    @property
    def freqs(self) -> np.ndarray:
        return np.array([s.freq_hz for s in self.entries])

    def to_dict(self) -> list[dict]:
        return [{"class_index": s.class_index, "freq_hz": s.freq_hz, "phase_rad": s.phase_rad} for s in self.entries]

    @classmethod
    def from_dict(cls, rows: Iterable[dict]) -> "FrequencyTable":
        return cls(tuple(StimulusSpec(float(r["freq_hz"]), float(r.get("phase_rad", 0.0)), int(r["class_index"]))
                         for r in rows))


@dataclass(frozen=True, eq=False)
class Epoch:
    data: np.ndarray
    fs_hz: float
    stimulus: StimulusSpec
    trial_id: int = 0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 2:
            raise SignalError(f"epoch data must be channels x samples with >=1 channel and >=2 samples, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise SignalError("epoch contains non-finite samples")
        if not (math.isfinite(self.fs_hz) and self.fs_hz > 0):
            raise SignalError("sampling rate must be finite and positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs_hz

    @property
    def label(self) -> int:
        return self.stimulus.class_index

    def with_data(self, data: np.ndarray, **changes) -> "Epoch":
        return replace(self, data=data, **changes)

    def same_as(self, other: "Epoch") -> bool:
        return (self.fs_hz == other.fs_hz and self.stimulus == other.stimulus and self.trial_id == other.trial_id
                and self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data)))


# --------------------------------------------------------------------------- generation

def default_harmonic_amps(n_harmonics: int) -> list[float]:
    return [1.0 / h for h in range(1, n_harmonics + 1)]


def generate_ssvep(spec: StimulusSpec, harmonic_amps: Sequence[float] | None = None, fs_hz: float = 250.0,
                   duration_s: float = 4.0, n_channels: int = 1, noise_sigma: float = 0.0,
                   channel_gains: Sequence[float] | None = None, seed: int = 0, trial_id: int = 0) -> Epoch:
    """Synthetic SSVEP trial: per-channel gain times a harmonic sine sum plus white noise.

    Harmonic ``h`` has frequency ``h * f`` and phase ``h * phase``.
    """
    amps = np.asarray(default_harmonic_amps(4) if harmonic_amps is None else harmonic_amps, dtype=float)
    if amps.size == 0:
        raise SignalError("harmonic_amps must be non-empty")
    gains = np.ones(n_channels) if channel_gains is None else np.asarray(channel_gains, dtype=float)
    for name, value in (("fs_hz", fs_hz), ("duration_s", duration_s), ("noise_sigma", noise_sigma)):
        if not math.isfinite(value):
            raise SignalError(f"{name} must be finite")
    if not (np.all(np.isfinite(amps)) and np.all(np.isfinite(gains))):
        raise SignalError("amplitudes and gains must be finite")
    if n_channels < 1:
        raise SignalError("need at least one channel")
    if gains.shape != (n_channels,):
        raise SignalError("channel_gains length must equal n_channels")
    if noise_sigma < 0:
        raise SignalError("noise_sigma must be >= 0")
    n = int(round(duration_s * fs_hz))
    if n < 2:
        raise SignalError("duration_s * fs_hz must be >= 2")
    if fs_hz < 2 * amps.size * spec.freq_hz:
        raise SignalError(f"Nyquist violation: harmonic {amps.size} of {spec.freq_hz} Hz needs fs >= "
                          f"{2 * amps.size * spec.freq_hz} Hz")

    t = np.arange(n) / fs_hz
    h = np.arange(1, amps.size + 1)[:, None]
    clean = (amps[:, None] * np.sin(2 * np.pi * h * spec.freq_hz * t + h * spec.phase_rad)).sum(axis=0)
    data = gains[:, None] * clean[None, :]
    if noise_sigma > 0:
        rng = rng_for(seed, f"generate_ssvep/{trial_id}")
        data = data + rng.normal(0.0, noise_sigma, size=data.shape)
    return Epoch(data, fs_hz, spec, trial_id)


def synthetic_dataset(table: FrequencyTable, n_trials: int, fs_hz: float = 250.0, duration_s: float = 4.0,
                      n_channels: int = 4, noise_sigma: float = 0.3, harmonic_amps: Sequence[float] | None = None,
                      channel_gains: Sequence[float] | None = None, seed: int = 0) -> dict[int, list[Epoch]]:
    """Trials per class; trial ids are unique across the whole dataset."""
    if channel_gains is None:
        channel_gains = np.linspace(1.0, 0.55, n_channels)
    out: dict[int, list[Epoch]] = {}
    for spec in table:
        trials = []
        for t in range(n_trials):
            tid = spec.class_index * n_trials + t
            trials.append(generate_ssvep(spec, harmonic_amps, fs_hz, duration_s, n_channels, noise_sigma,
                                         channel_gains, seed, tid))
        out[spec.class_index] = trials
    return out


# --------------------------------------------------------------------------- filtering

def _check_bandpass_edges(fs: float, lo_hz: float, hi_hz: float):
    if not (0 < lo_hz < hi_hz < fs / 2):
        raise SignalError(f"bandpass edges must satisfy 0 < lo < hi < fs/2 (got {lo_hz}, {hi_hz}, fs={fs})")


def chebyshev_sos(fs: float, lo_hz: float = 7.0, hi_hz: float = 70.0, gstop_db: float = 40.0,
                  gpass_db: float = 0.5, lo_margin_hz: float = 2.0, hi_margin_hz: float = 10.0) -> np.ndarray:
    """Minimum-order type-I Chebyshev bandpass as second-order sections."""
    _check_bandpass_edges(fs, lo_hz, hi_hz)
    nyq = fs / 2
    ws_lo = lo_hz - lo_margin_hz
    ws_hi = min(hi_hz + hi_margin_hz, 0.5 * (hi_hz + nyq))
    if ws_lo <= 0:
        ws_lo = lo_hz / 2
    try:
        order, wn = sps.cheb1ord([lo_hz, hi_hz], [ws_lo, ws_hi], gpass_db, gstop_db, fs=fs)
        sos = sps.cheby1(order, gpass_db, wn, btype="bandpass", output="sos", fs=fs)
    except (ValueError, ZeroDivisionError) as exc:
        raise SignalError(f"Chebyshev design infeasible for fs={fs}, band=({lo_hz}, {hi_hz}): {exc}") from exc
    if not np.all(np.isfinite(sos)):
        raise SignalError("Chebyshev design produced non-finite coefficients")
    return sos


def _filtfilt_sos(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    padlen = min(3 * (2 * len(sos) + 1), x.shape[-1] - 1)
    return sps.sosfiltfilt(sos, x, axis=-1, padlen=padlen)


def chebyshev_bandpass(e: Epoch, lo_hz: float = 7.0, hi_hz: float = 70.0, gstop_db: float = 40.0) -> Epoch:
    """Zero-phase Chebyshev type-I bandpass applied per channel."""
    sos = chebyshev_sos(e.fs_hz, lo_hz, hi_hz, gstop_db)
    return e.with_data(_filtfilt_sos(sos, e.data))


def notch_50hz(e: Epoch, q: float = 35.0) -> Epoch:
    if e.fs_hz <= 100:
        raise SignalError("50 Hz notch needs fs > 100 Hz")
    b, a = sps.iirnotch(50.0, q, fs=e.fs_hz)
    padlen = min(3 * max(len(a), len(b)), e.n_samples - 1)
    return e.with_data(sps.filtfilt(b, a, e.data, axis=-1, padlen=padlen))


def discard_head(e: Epoch, t_discard_s: float) -> Epoch:
    n_drop = int(math.floor(t_discard_s * e.fs_hz + 1e-9))
    if n_drop < 0 or n_drop >= e.n_samples:
        raise SignalError(f"cannot discard {n_drop} of {e.n_samples} samples")
    return e.with_data(e.data[:, n_drop:])


@dataclass(frozen=True)
class PreprocessConfig:
    lo_hz: float = 7.0
    hi_hz: float = 70.0
    gstop_db: float = 40.0
    notch: bool = True
    notch_q: float = 35.0
    discard_s: float = 0.14


def filter_epoch(e: Epoch, cfg: PreprocessConfig = PreprocessConfig()) -> Epoch:
    """Bandpass and notch, keeping every sample (time zero stays at stimulus onset)."""
    out = chebyshev_bandpass(e, cfg.lo_hz, cfg.hi_hz, cfg.gstop_db)
    if cfg.notch and e.fs_hz > 100:
        out = notch_50hz(out, cfg.notch_q)
    return out


def preprocess(e: Epoch, cfg: PreprocessConfig = PreprocessConfig()) -> Epoch:
    out = filter_epoch(e, cfg)
    if cfg.discard_s > 0:
        out = discard_head(out, cfg.discard_s)
    return out


# --------------------------------------------------------------------------- spectra

@dataclass(frozen=True, eq=False)
class ComplexSpectrum:
    """Half spectrum of a real signal; bin k sits at k * fs_hz / n_time."""

    bins: np.ndarray
    fs_hz: float
    n_time: int

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.bins.size) * self.fs_hz / self.n_time

    @property
    def resolution_hz(self) -> float:
        return self.fs_hz / self.n_time

    def bin_of(self, freq_hz: float) -> int:
        return int(round(freq_hz * self.n_time / self.fs_hz))


def fft_forward(x: np.ndarray, pad_to: int | None = None, fs_hz: float = 1.0) -> ComplexSpectrum:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise SignalError("cannot transform an empty signal")
    n = x.size if pad_to is None else int(pad_to)
    if n < x.size:
        raise SignalError("pad_to must be >= signal length")
    return ComplexSpectrum(np.fft.rfft(x, n=n), float(fs_hz), n)


def full_spectrum(s: ComplexSpectrum) -> np.ndarray:
    """Two-sided spectrum rebuilt from the half spectrum by conjugate symmetry."""
    n = s.n_time
    tail = np.conj(s.bins[1:(n + 1) // 2][::-1])
    return np.concatenate([s.bins, tail])


def ifft_inverse(s: ComplexSpectrum, imag_tol: float = 1e-9) -> np.ndarray:
    """Real signal of length ``n_time``; raises if the spectrum is not that of a real signal."""
    full = np.fft.ifft(full_spectrum(s))
    scale = max(float(np.max(np.abs(full.real), initial=0.0)), 1.0)
    if np.max(np.abs(full.imag), initial=0.0) > imag_tol * scale:
        raise SignalError("spectrum is not conjugate-symmetric: inverse has an imaginary residue")
    return full.real


def padded_length(n: int, fs_hz: float, resolution_hz: float = 0.25) -> int:
    """Smallest multiple of fs/resolution that holds ``n`` samples."""
    base = int(round(fs_hz / resolution_hz))
    return base * max(1, math.ceil(n / base))


def amplitude_spectrum(x: np.ndarray, fs_hz: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[-1]
    return np.fft.rfftfreq(n, 1.0 / fs_hz), np.abs(np.fft.rfft(x, axis=-1)) * 2.0 / n


def dominant_freq(x: np.ndarray, fs_hz: float, resolution_hz: float | None = None) -> float:
    """Frequency of the largest non-DC amplitude bin."""
    x = np.asarray(x, dtype=float)
    n = x.size if resolution_hz is None else padded_length(x.size, fs_hz, resolution_hz)
    spec = np.abs(np.fft.rfft(x, n=n))
    spec[0] = 0.0
    return float(np.argmax(spec) * fs_hz / n)


# --------------------------------------------------------------------------- windows

def sliding_windows(e: Epoch, win_s: float, stride_s: float = 0.1) -> list[Epoch]:
    if stride_s <= 0:
        raise SignalError("stride must be positive")
    win_n = int(round(win_s * e.fs_hz))
    stride_n = max(1, int(round(stride_s * e.fs_hz)))
    if win_n < 2 or win_n > e.n_samples:
        raise SignalError(f"window of {win_n} samples does not fit a {e.n_samples}-sample epoch")
    count = (e.n_samples - win_n) // stride_n + 1
    return [e.with_data(e.data[:, i * stride_n:i * stride_n + win_n]) for i in range(count)]


def first_window(e: Epoch, win_s: float) -> Epoch:
    return sliding_windows(e, win_s, stride_s=max(win_s, 1.0 / e.fs_hz))[0]


# --------------------------------------------------------------------------- file I/O

def epoch_to_bytes(e: Epoch) -> bytes:
    s = e.stimulus
    header = _EPOCH_HEADER.pack(EPOCH_MAGIC, e.n_channels, e.n_samples, e.fs_hz, s.freq_hz, s.phase_rad,
                                s.class_index, e.trial_id)
    return header + e.data.astype("<f4").tobytes(order="C")


def epoch_from_bytes(raw: bytes) -> Epoch:
    if len(raw) < _EPOCH_HEADER.size:
        raise EpochFormatError("truncated header")
    magic, n_ch, n_s, fs, freq, phase, cls, tid = _EPOCH_HEADER.unpack_from(raw)
    if magic != EPOCH_MAGIC:
        raise EpochFormatError(f"bad magic {magic!r}")
    expected = _EPOCH_HEADER.size + 4 * n_ch * n_s
    if len(raw) != expected:
        raise EpochFormatError(f"payload size {len(raw)} does not match header ({expected} bytes expected)")
    data = np.frombuffer(raw, dtype="<f4", offset=_EPOCH_HEADER.size).reshape(n_ch, n_s)
    if not np.all(np.isfinite(data)):
        raise EpochFormatError("non-finite samples in payload")
    try:
        return Epoch(data.astype(np.float64), float(fs), StimulusSpec(float(freq), float(phase), int(cls)), int(tid))
    except SignalError as exc:
        raise EpochFormatError(str(exc)) from exc


def write_epoch_file(e: Epoch, path) -> Path:
    path = Path(path)
    path.write_bytes(epoch_to_bytes(e))
    return path


def read_epoch_file(path) -> Epoch:
    return epoch_from_bytes(Path(path).read_bytes())


def as_float32(e: Epoch) -> Epoch:
    """Epoch rounded through the on-disk/wire sample precision."""
    return e.with_data(e.data.astype(np.float32).astype(np.float64))


# --------------------------------------------------------------------------- datasets

@dataclass
class Dataset:
    table: FrequencyTable
    trials: dict[int, list[Epoch]]
    fs_hz: float
    source_paths: list[Path] = field(default_factory=list)

    def all_epochs(self) -> list[Epoch]:
        return [e for c in sorted(self.trials) for e in self.trials[c]]

    @property
    def n_trials(self) -> int:
        return min(len(v) for v in self.trials.values())


def read_csv_epoch(path, fs_hz: float, stimulus: StimulusSpec, trial_id: int) -> Epoch:
    """One row per sample, one column per channel; a non-numeric first row is treated as a header."""
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(v) for v in first.strip().split(",") if v.strip()]
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    return Epoch(data.T, fs_hz, stimulus, trial_id)


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise EpochFormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise EpochFormatError(f"manifest format must be {MANIFEST_FORMAT!r}")
    table = FrequencyTable.from_dict(doc["classes"])
    fs = float(doc["fs_hz"])
    root = path.parent
    trials: dict[int, list[Epoch]] = {}
    paths: list[Path] = []
    seen: set[int] = set()
    next_id = 0
    for key in sorted(doc["trials"], key=int):
        c = int(key)
        if c >= len(table):
            raise EpochFormatError(f"trials listed for unknown class {c}")
        trials[c] = []
        for rel in doc["trials"][key]:
            p = root / rel
            paths.append(p)
            if p.suffix.lower() == ".csv":
                e = read_csv_epoch(p, fs, table[c], next_id)
            else:
                e = read_epoch_file(p)
                if e.stimulus.class_index != c:
                    raise EpochFormatError(f"{p} is labelled class {e.stimulus.class_index}, listed under {c}")
                if e.fs_hz != np.float32(fs):
                    raise EpochFormatError(f"{p} sampled at {e.fs_hz} Hz, manifest says {fs}")
                e = replace(e, fs_hz=fs, stimulus=table[c])
            if e.trial_id in seen:
                # trial ids key caches downstream; renumber collisions past every id seen so far
                e = replace(e, trial_id=max(max(seen) + 1, next_id))
            seen.add(e.trial_id)
            trials[c].append(e)
            next_id = max(next_id, e.trial_id) + 1
    return Dataset(table, trials, fs, paths)


def write_dataset(ds: Dataset | dict[int, list[Epoch]], out_dir, table: FrequencyTable | None = None,
                  fs_hz: float | None = None, extra: dict | None = None) -> Path:
    """Write epoch files plus a manifest; returns the manifest path."""
    if isinstance(ds, Dataset):
        trials, table, fs_hz = ds.trials, ds.table, ds.fs_hz
    else:
        trials = ds
    if table is None or fs_hz is None:
        raise ValueError("table and fs_hz are required when writing a bare trial mapping")
    out_dir = Path(out_dir)
    (out_dir / "trials").mkdir(parents=True, exist_ok=True)
    listing: dict[str, list[str]] = {}
    for c in sorted(trials):
        listing[str(c)] = []
        for k, e in enumerate(trials[c]):
            rel = f"trials/c{c:03d}_t{k:04d}.epo"
            write_epoch_file(e, out_dir / rel)
            listing[str(c)].append(rel)
    doc = {"format": MANIFEST_FORMAT, "fs_hz": fs_hz, "classes": table.to_dict(), "trials": listing}
    if extra:
        doc["meta"] = extra
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest
