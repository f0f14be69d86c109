"""Training-free and template-based reference decoders: CCA, FBCCA and extended CCA."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .signal_core import Epoch, FrequencyTable, SignalError, _filtfilt_sos, chebyshev_sos

RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class ReferenceSignals:
    """Per class, 2*n_h x L sine/cosine rows with unit L2 norm."""

    matrices: tuple[np.ndarray, ...]
    freqs: tuple[float, ...]
    n_harmonics: int
    fs_hz: float

    def __len__(self):
        return len(self.matrices)

    @property
    def n_samples(self) -> int:
        return self.matrices[0].shape[1]

    def cropped(self, n: int) -> "ReferenceSignals":
        mats = tuple(_unit_rows(m[:, :n]) for m in self.matrices)
        return ReferenceSignals(mats, self.freqs, self.n_harmonics, self.fs_hz)


@dataclass(frozen=True)
class SubbandSpec:
    n_subbands: int = 5
    a: float = 1.25
    b: float = 0.25
    first_lo_hz: float = 8.0
    step_hz: float = 8.0
    hi_hz: float = 88.0
    margin_hz: float = 2.0

    def __post_init__(self):
        if self.n_subbands < 1:
            raise ValueError("need at least one sub-band")

    @property
    def weights(self) -> np.ndarray:
        m = np.arange(1, self.n_subbands + 1)
        return m ** (-self.a) + self.b

    def band(self, m: int) -> tuple[float, float]:
        """Passband of sub-band m (1-based)."""
        return self.first_lo_hz + (m - 1) * self.step_hz, self.hi_hz


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


def _cov_whitener(C: np.ndarray) -> np.ndarray:
    n = C.shape[0]
    scale = np.trace(C) / n
    C = C + RIDGE * (scale if scale > 0 else 1.0) * np.eye(n)
    return linalg.cholesky(C, lower=True)


def _cca(X: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ValueError("X and Y need the same number of samples")
    if X.shape[1] <= X.shape[0] + Y.shape[0]:
        raise ValueError("need more samples than the combined row count")
    Xc = X - X.mean(axis=1, keepdims=True)
    Yc = Y - Y.mean(axis=1, keepdims=True)
    Lx = _cov_whitener(Xc @ Xc.T)
    Ly = _cov_whitener(Yc @ Yc.T)
    M = linalg.solve_triangular(Lx, Xc @ Yc.T, lower=True)
    M = linalg.solve_triangular(Ly, M.T, lower=True).T
    U, s, Vt = np.linalg.svd(M)
    wx = linalg.solve_triangular(Lx.T, U[:, 0], lower=False)
    wy = linalg.solve_triangular(Ly.T, Vt[0], lower=False)
    return float(np.clip(s[0], 0.0, 1.0)), wx, wy


def cca_corr(X: np.ndarray, Y: np.ndarray) -> float:
    """Largest canonical correlation between the rows of X and the rows of Y."""
    return _cca(X, Y)[0]


def cca_weights(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spatial filters of the first canonical pair."""
    _, wx, wy = _cca(X, Y)
    return wx, wy


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(np.dot(a, b) / den) if den > 0 else 0.0


def build_references(table: FrequencyTable, n_h: int, fs: float, L: int) -> ReferenceSignals:
    if n_h < 1:
        raise ValueError("n_h must be >= 1")
    if n_h * max(table.freqs) >= fs / 2:
        raise SignalError(f"reference harmonic {n_h} x {max(table.freqs)} Hz violates Nyquist at fs={fs}")
    t = np.arange(L) / fs
    mats = []
    for s in table:
        rows = []
        for h in range(1, n_h + 1):
            rows.append(np.sin(2 * np.pi * h * s.freq_hz * t))
            rows.append(np.cos(2 * np.pi * h * s.freq_hz * t))
        mats.append(_unit_rows(np.array(rows)))
    return ReferenceSignals(tuple(mats), tuple(table.freqs), n_h, fs)


def max_harmonics(table: FrequencyTable, fs: float, wanted: int = 5) -> int:
    return max(1, min(wanted, int(np.ceil(fs / 2 / max(table.freqs))) - 1))


def cca_classify(e: Epoch, refs: ReferenceSignals) -> int:
    refs = refs.cropped(e.n_samples) if refs.n_samples != e.n_samples else refs
    rho = np.array([cca_corr(e.data, Y) for Y in refs.matrices])
    return int(np.argmax(rho))


def subband_data(e: Epoch, sb: SubbandSpec, m: int) -> np.ndarray:
    lo, hi = sb.band(m)
    nyq = e.fs_hz / 2
    hi = min(hi, 0.8 * nyq)
    sos = chebyshev_sos(e.fs_hz, lo, hi, 40.0, gpass_db=0.5, lo_margin_hz=sb.margin_hz,
                        hi_margin_hz=min(10.0, 0.5 * (nyq - hi)))
    return _filtfilt_sos(sos, e.data)


def fbcca_scores(e: Epoch, refs: ReferenceSignals, sb: SubbandSpec = SubbandSpec()) -> np.ndarray:
    if e.duration_s < 0.25:
        raise SignalError("FBCCA needs at least 0.25 s of data")
    refs = refs.cropped(e.n_samples) if refs.n_samples != e.n_samples else refs
    w = sb.weights
    scores = np.zeros(len(refs))
    for m in range(1, sb.n_subbands + 1):
        X = subband_data(e, sb, m)
        rho = np.array([cca_corr(X, Y) for Y in refs.matrices])
        scores += w[m - 1] * rho ** 2
    return scores


def fbcca_classify(e: Epoch, refs: ReferenceSignals, sb: SubbandSpec = SubbandSpec()) -> int:
    """argmax over classes of the weighted sum of squared sub-band canonical correlations."""
    return int(np.argmax(fbcca_scores(e, refs, sb)))


def ecca_scores(e: Epoch, templates: Mapping[int, Epoch] | Sequence[Epoch], refs: ReferenceSignals) -> np.ndarray:
    """Four-correlation extended-CCA score per class, each term entering as sign(r) r^2.

    r1: test vs references; r2: test vs template under the test-template
    filter; r3: test vs template under the test-reference filter; r4: test vs
    template under the template-reference filter.
    """
    refs = refs.cropped(e.n_samples) if refs.n_samples != e.n_samples else refs
    X = e.data
    scores = np.zeros(len(refs))
    for j, Y in enumerate(refs.matrices):
        try:
            T = templates[j]
        except (KeyError, IndexError):
            raise KeyError(f"no template for class {j}") from None
        Tm = T.data if isinstance(T, Epoch) else np.asarray(T)
        if Tm.shape != X.shape:
            raise ValueError(f"template for class {j} has shape {Tm.shape}, epoch has {X.shape}")
        r1, _, _ = _cca(X, Y)
        w_xt, _ = cca_weights(X, Tm)
        w_xy, _ = cca_weights(X, Y)
        w_ty, _ = cca_weights(Tm, Y)
        r2 = _corr(w_xt @ X, w_xt @ Tm)
        r3 = _corr(w_xy @ X, w_xy @ Tm)
        r4 = _corr(w_ty @ X, w_ty @ Tm)
        scores[j] = sum(np.sign(r) * r * r for r in (r1, r2, r3, r4))
    return scores


def ecca_classify(e: Epoch, templates, refs: ReferenceSignals) -> int:
    return int(np.argmax(ecca_scores(e, templates, refs)))


def class_templates(epochs: Sequence[Epoch], n_classes: int, shape: tuple[int, int] | None = None,
                    fill_missing: bool = False) -> list[np.ndarray]:
    """Mean epoch per class; classes without data get zeros when ``fill_missing``."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for e in epochs:
        sums[e.label] = sums.get(e.label, 0) + e.data
        counts[e.label] = counts.get(e.label, 0) + 1
    if shape is None:
        shape = epochs[0].data.shape
    out = []
    for c in range(n_classes):
        if c in sums:
            out.append(sums[c] / counts[c])
        elif fill_missing:
            out.append(np.zeros(shape))
        else:
            raise KeyError(f"no epochs for class {c}")
    return out
