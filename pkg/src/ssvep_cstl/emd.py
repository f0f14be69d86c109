"""Empirical mode decomposition by cubic-spline envelope sifting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline


class EnvelopeError(ValueError):
    """Not enough extrema to build envelopes; sifting stops here."""


@dataclass(frozen=True, eq=False)
class IMFSet:
    imfs: list[np.ndarray]
    residue: np.ndarray
    fs_hz: float
    sift_iters: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.imfs)

    def reconstruct(self) -> np.ndarray:
        out = self.residue.copy()
        for d in self.imfs:
            out = out + d
        return out


def find_extrema(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of local maxima and minima; flat runs report their middle sample."""
    x = np.asarray(x, dtype=float)
    dx = np.diff(x)
    nz = np.flatnonzero(dx != 0)
    if nz.size < 2:
        return np.empty(0, int), np.empty(0, int)
    s = np.sign(dx[nz])
    turn = np.flatnonzero(s[1:] != s[:-1])
    # between a rising step nz[t] and falling step nz[t+1] the peak spans nz[t]+1 .. nz[t+1]
    left = nz[turn] + 1
    right = nz[turn + 1]
    mid = (left + right) // 2
    rising = s[turn] > 0
    return mid[rising], mid[~rising]


def zero_crossings(x: np.ndarray) -> int:
    s = np.sign(x)
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def _mirror(idx: np.ndarray, vals: np.ndarray, n: int, n_mirror: int) -> tuple[np.ndarray, np.ndarray]:
    """Reflect up to ``n_mirror`` extrema about each signal end."""
    k = min(n_mirror, idx.size)
    left_t = -idx[:k][::-1].astype(float)
    right_t = 2.0 * (n - 1) - idx[::-1][:k].astype(float)
    t = np.concatenate([left_t, idx.astype(float), right_t])
    v = np.concatenate([vals[:k][::-1], vals, vals[::-1][:k]])
    # a reflected point landing on the original endpoint (extremum at index 0 or n-1) is dropped
    keep = np.concatenate([[True], np.diff(t) > 0])
    return t[keep], v[keep]


def compute_envelopes(x: np.ndarray, n_mirror: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Upper and lower natural-cubic-spline envelopes through mirrored extrema."""
    x = np.asarray(x, dtype=float)
    maxima, minima = find_extrema(x)
    if maxima.size < 2 or minima.size < 2:
        raise EnvelopeError(f"too few extrema ({maxima.size} maxima, {minima.size} minima)")
    n = x.size
    t = np.arange(n, dtype=float)
    tu, vu = _mirror(maxima, x[maxima], n, n_mirror)
    tl, vl = _mirror(minima, x[minima], n, n_mirror)
    upper = CubicSpline(tu, vu, bc_type="natural")(t)
    lower = CubicSpline(tl, vl, bc_type="natural")(t)
    return upper, lower


def _is_imf(h: np.ndarray) -> bool:
    maxima, minima = find_extrema(h)
    return abs(maxima.size + minima.size - zero_crossings(h)) <= 1


def sift(x: np.ndarray, fs_hz: float = 1.0, max_imfs: int = 8, sd_stop: float = 0.2,
         max_sift_iters: int = 50, rel_floor: float = 1e-10) -> IMFSet:
    """Decompose ``x`` into IMFs (highest frequency first) and a residue.

    The residue is computed as ``x`` minus the sum of IMFs, so the
    decomposition is complete to rounding error.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 16:
        raise ValueError("sift needs a 1-D signal of at least 16 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    imfs: list[np.ndarray] = []
    iters: list[int] = []
    residue = x.copy()
    floor = rel_floor * float(np.max(np.abs(x), initial=0.0))
    while len(imfs) < max_imfs:
        maxima, minima = find_extrema(residue)
        if maxima.size < 2 or minima.size < 2:
            break
        # what is left is rounding noise
        if float(np.max(np.abs(residue))) <= floor:
            break
        h = residue.copy()
        n_iter = 0
        for n_iter in range(1, max_sift_iters + 1):
            try:
                upper, lower = compute_envelopes(h)
            except EnvelopeError:
                break
            h_new = h - 0.5 * (upper + lower)
            denom = float(np.dot(h, h))
            sd = float(np.sum((h - h_new) ** 2)) / denom if denom > 0 else 0.0
            h = h_new
            if sd < sd_stop and _is_imf(h):
                break
        if not np.any(h):
            break
        imfs.append(h)
        iters.append(n_iter)
        residue = x - np.sum(imfs, axis=0)
    residue = x - np.sum(imfs, axis=0) if imfs else x.copy()
    return IMFSet(imfs, residue, float(fs_hz), iters)


def reconstruct_from_imfs(s: IMFSet, k_lo: int = 1, k_hi: int | None = None) -> np.ndarray:
    """Sum of IMFs ``k_lo..k_hi`` (1-based, inclusive); ``k_hi = K + 1`` also adds the residue."""
    K = s.K
    k_hi = K if k_hi is None else k_hi
    if not (1 <= k_lo <= k_hi <= K + 1) or k_lo > K:
        raise IndexError(f"IMF range {k_lo}..{k_hi} invalid for K={K}")
    out = np.zeros_like(s.residue)
    for k in range(k_lo, min(k_hi, K) + 1):
        out = out + s.imfs[k - 1]
    if k_hi == K + 1:
        out = out + s.residue
    return out


def sift_channels(data: np.ndarray, fs_hz: float, **kwargs) -> list[IMFSet]:
    return [sift(ch, fs_hz, **kwargs) for ch in np.atleast_2d(data)]
