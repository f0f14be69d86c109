"""Cross-stimulus transfer: move harmonic spectral content of source IMFs onto target frequencies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .emd import IMFSet, sift
from .signal_core import (ComplexSpectrum, Epoch, FrequencyTable, StimulusSpec, dominant_freq, fft_forward,
                          ifft_inverse, padded_length)


class ExchangeError(ValueError):
    pass


@dataclass(frozen=True)
class HarmonicSet:
    base_hz: float
    members: tuple[float, ...]
    phases: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.members:
            raise ExchangeError(f"no harmonics of {self.base_hz} Hz fall inside the band")
        if any(b <= a for a, b in zip(self.members, self.members[1:])):
            raise ExchangeError("harmonic members must be strictly increasing")
        if self.phases is not None and len(self.phases) != len(self.members):
            raise ExchangeError("one phase per harmonic member is required")

    def __len__(self):
        return len(self.members)

    def truncated(self, n: int) -> "HarmonicSet":
        phases = None if self.phases is None else self.phases[:n]
        return HarmonicSet(self.base_hz, self.members[:n], phases)


@dataclass(frozen=True)
class ExchangeConfig:
    g_source: float = 0.0
    g_target: float = 1.0
    bin_halfwidth_hz: float = 0.5
    k_range: tuple[int, int] = (1, 3)
    band: tuple[float, float] = (7.0, 70.0)
    n_harmonics: int = 4
    imf_peak_band: tuple[float, float] = (6.0, 70.0)
    resolution_hz: float = 0.25
    average_imfs: bool = False

    def __post_init__(self):
        if self.g_source < 0 or self.g_target < 0:
            raise ExchangeError("gains must be >= 0")
        if self.bin_halfwidth_hz <= 0:
            raise ExchangeError("bin half-width must be positive")
        lo, hi = self.k_range
        if not 1 <= lo <= hi:
            raise ExchangeError(f"bad IMF range {self.k_range}")


def _table_phase(table: FrequencyTable | None, base_hz: float) -> float | None:
    if table is None:
        return None
    for s in table:
        if np.isclose(s.freq_hz, base_hz):
            return s.phase_rad
    return None


def harmonic_set(base_hz: float, n_h: int, band: tuple[float, float] = (7.0, 70.0),
                 phase_table: FrequencyTable | None = None) -> HarmonicSet:
    lo, hi = band
    if n_h < 1:
        raise ExchangeError("n_h must be >= 1")
    if not lo <= base_hz <= hi:
        raise ExchangeError(f"base frequency {base_hz} Hz outside band {band}")
    members = tuple(h * base_hz for h in range(1, n_h + 1) if h * base_hz <= hi + 1e-9)
    theta = _table_phase(phase_table, base_hz)
    phases = None if theta is None else tuple((i + 1) * theta for i in range(len(members)))
    return HarmonicSet(float(base_hz), members, phases)


def extract_harmonic_bins(spec: ComplexSpectrum, hs: HarmonicSet, halfwidth_hz: float = 0.5,
                          n_signal: int | None = None) -> list[tuple[float, complex]]:
    """Complex amplitude at each harmonic, read from the nearest bin.

    Scaled by 2/n_signal so a noiseless tone ``A cos(2 pi f t + phi)`` reads
    back as ``A exp(i phi)``; ``n_signal`` defaults to the transform length.
    """
    n_signal = spec.n_time if n_signal is None else n_signal
    nyq = spec.fs_hz / 2
    out = []
    for f in hs.members:
        if f >= nyq:
            raise ExchangeError(f"harmonic {f} Hz is at or above Nyquist ({nyq} Hz)")
        k = spec.bin_of(f)
        if abs(k * spec.resolution_hz - f) > halfwidth_hz:
            raise ExchangeError(f"no bin within {halfwidth_hz} Hz of {f} Hz")
        out.append((f, complex(spec.bins[k]) * 2.0 / n_signal))
    return out


def _band_bins(spec: ComplexSpectrum, f: float, halfwidth_hz: float) -> slice:
    res = spec.resolution_hz
    lo = max(1, int(np.ceil((f - halfwidth_hz) / res - 1e-9)))
    hi = min(spec.bins.size - 1, int(np.floor((f + halfwidth_hz) / res + 1e-9)))
    return slice(lo, hi + 1)


def _check_spacing(hs: HarmonicSet, halfwidth_hz: float, role: str):
    gaps = np.diff(hs.members)
    if gaps.size and np.min(gaps) <= halfwidth_hz:
        raise ExchangeError(f"{role} harmonics {hs.members} are closer than the bin half-width {halfwidth_hz} Hz")


def frequency_exchange(imf: np.ndarray, fs_hz: float, src: HarmonicSet, tgt: HarmonicSet,
                       cfg: ExchangeConfig = ExchangeConfig()) -> np.ndarray:
    """Replace source-harmonic content of one IMF by the same amplitudes at the target harmonics.

    Bins within ``bin_halfwidth_hz`` of each source harmonic are scaled by
    ``g_source``; harmonic ``i`` of the target receives a single-bin
    component of amplitude ``g_target * |A_src[i]|`` and phase
    ``tgt.phases[i]`` (sine phase at t=0), or the source phase when the target
    carries none. Every other bin is left as is.
    """
    imf = np.asarray(imf, dtype=float)
    if len(src) != len(tgt):
        raise ExchangeError(f"source has {len(src)} harmonics, target has {len(tgt)}")
    hw = cfg.bin_halfwidth_hz
    _check_spacing(src, hw, "source")
    _check_spacing(tgt, hw, "target")
    n = imf.size
    L = padded_length(n, fs_hz, cfg.resolution_hz)
    spec = fft_forward(imf, L, fs_hz)
    readout = extract_harmonic_bins(spec, src, hw, n_signal=n)
    for f in tgt.members:
        if f >= fs_hz / 2:
            raise ExchangeError(f"target harmonic {f} Hz is at or above Nyquist")

    bins = spec.bins.copy()
    for f in src.members:
        bins[_band_bins(spec, f, hw)] *= cfg.g_source
    for i, (f_t, (_, a)) in enumerate(zip(tgt.members, readout)):
        k = spec.bin_of(f_t)
        if k <= 0 or k >= L / 2:
            raise ExchangeError(f"target harmonic {f_t} Hz maps to DC or Nyquist bin")
        if tgt.phases is not None:
            # sin(wt + theta) = cos(wt + theta - pi/2)
            cos_phase = tgt.phases[i] - np.pi / 2
        else:
            cos_phase = float(np.angle(a))
        bins[k] += cfg.g_target * abs(a) * (L / 2) * np.exp(1j * cos_phase)
    out = ifft_inverse(ComplexSpectrum(bins, fs_hz, L))
    return out[:n]


# --------------------------------------------------------------------------- reconstruction

@dataclass(frozen=True, eq=False)
class Decomposition:
    """Per-channel IMF sets of one source epoch, reusable across targets."""

    epoch: Epoch
    channels: list[IMFSet]


def decompose_epoch(e: Epoch, **sift_kwargs) -> Decomposition:
    return Decomposition(e, [sift(ch, e.fs_hz, **sift_kwargs) for ch in e.data])


def _selected_imfs(s: IMFSet, cfg: ExchangeConfig) -> list[np.ndarray]:
    lo, hi = cfg.k_range
    f_lo, f_hi = cfg.imf_peak_band
    chosen = []
    for k in range(lo, min(hi, s.K) + 1):
        d = s.imfs[k - 1]
        peak = dominant_freq(d, s.fs_hz, cfg.resolution_hz)
        if f_lo <= peak <= f_hi:
            chosen.append(d)
    return chosen


def paired_harmonics(source: StimulusSpec, target: StimulusSpec, cfg: ExchangeConfig,
                     phase_table: FrequencyTable | None, n_h: int | None = None) -> tuple[HarmonicSet, HarmonicSet]:
    n_h = cfg.n_harmonics if n_h is None else n_h
    src = harmonic_set(source.freq_hz, n_h, cfg.band, phase_table)
    tgt = harmonic_set(target.freq_hz, n_h, cfg.band, phase_table)
    n = min(len(src), len(tgt))
    return src.truncated(n), tgt.truncated(n)


def reconstruct_from_decomposition(dec: Decomposition, target: StimulusSpec, cfg: ExchangeConfig = ExchangeConfig(),
                                   phase_table: FrequencyTable | None = None, n_h: int | None = None) -> Epoch:
    e = dec.epoch
    src, tgt = paired_harmonics(e.stimulus, target, cfg, phase_table, n_h)
    out = np.zeros_like(e.data)
    for c, s in enumerate(dec.channels):
        chosen = _selected_imfs(s, cfg)
        for d in chosen:
            out[c] += frequency_exchange(d, e.fs_hz, src, tgt, cfg)
        if cfg.average_imfs and chosen:
            out[c] /= len(chosen)
    return e.with_data(out, stimulus=target)


def reconstruct_target(e: Epoch, target: StimulusSpec, cfg: ExchangeConfig = ExchangeConfig(),
                       phase_table: FrequencyTable | None = None, n_h: int | None = None) -> Epoch:
    """Synthesize an epoch of stimulus ``target`` from source epoch ``e``.

    Each channel is decomposed independently; IMFs in ``cfg.k_range`` whose
    dominant peak lies in ``cfg.imf_peak_band`` are frequency-exchanged and
    summed.
    """
    return reconstruct_from_decomposition(decompose_epoch(e), target, cfg, phase_table, n_h)


def build_training_set(source_epochs: Sequence[Epoch], table: FrequencyTable, P: Iterable[int],
                       cfg: ExchangeConfig = ExchangeConfig(), n_h: int | None = None) -> list[Epoch]:
    """Source epochs plus one reconstruction per source epoch and every other class.

    Ordered by (source trial id, target class); the source epoch itself
    occupies its own class slot.
    """
    P = set(P)
    if not source_epochs:
        raise ExchangeError("no source epochs")
    for e in source_epochs:
        if e.label not in P:
            raise ExchangeError(f"epoch {e.trial_id} has class {e.label}, which is not a source class")
    out = []
    for e in sorted(source_epochs, key=lambda e: (e.trial_id, e.label)):
        dec = decompose_epoch(e)
        for target in table:
            if target.class_index == e.label:
                out.append(e)
            else:
                out.append(reconstruct_from_decomposition(dec, target, cfg, table, n_h))
    return out


# --------------------------------------------------------------------------- fidelity

def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-variance input to Pearson correlation")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def band_amplitude_spectra(e: Epoch, band: tuple[float, float]) -> np.ndarray:
    n = e.n_samples
    freqs = np.fft.rfftfreq(n, 1.0 / e.fs_hz)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    return (np.abs(np.fft.rfft(e.data, axis=-1)) * 2.0 / n)[:, mask]


def spectral_pcc(a: Epoch, b: Epoch, band: tuple[float, float] = (7.0, 70.0)) -> float:
    """Pearson correlation of the concatenated per-channel amplitude spectra inside ``band``."""
    if a.fs_hz != b.fs_hz or a.data.shape != b.data.shape:
        raise ValueError("epochs must share sampling rate, channel count and length")
    return pearson(band_amplitude_spectra(a, band), band_amplitude_spectra(b, band))
