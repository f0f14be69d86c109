"""FFT features and the fuzzy-attention decoder (Modified-Laplace TSK rules + MLP head).

Forward and backward passes are written out by hand in numpy; ``grad_check``
compares them against central finite differences.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .signal_core import Epoch, PreprocessConfig, first_window, padded_length, preprocess, rng_for

log = logging.getLogger(__name__)

MODEL_MAGIC = b"FUZZM001"
PARAM_ORDER = ("centers", "log_lambda", "W_query", "W_value", "W1", "b1", "W2", "b2")


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- features

@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Rows are (Re ch0, Im ch0, Re ch1, Im ch1, ...); columns are frequency bins."""

    rows: np.ndarray
    bin_freqs: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] % 2:
            raise ValueError("feature matrix needs an even number of rows")
        if self.rows.shape[1] != self.bin_freqs.size:
            raise ValueError("one bin frequency per column is required")

    @property
    def n_tokens(self) -> int:
        return self.rows.shape[0]

    @property
    def n_bins(self) -> int:
        return self.rows.shape[1]


def feature_bins(fs_hz: float, n_samples: int, f_lo: float, f_hi: float, resolution_hz: float,
                 duration_s: float | None = None) -> tuple[int, np.ndarray]:
    """Transform length and the kept bin indices."""
    duration_s = n_samples / fs_hz if duration_s is None else duration_s
    if f_hi >= fs_hz / 2:
        raise ValueError(f"f_hi={f_hi} Hz must be below Nyquist ({fs_hz / 2} Hz)")
    if resolution_hz < 1.0 / (10.0 * duration_s):
        raise ValueError(f"resolution {resolution_hz} Hz is finer than 1/(10 x {duration_s} s)")
    L = max(int(math.ceil(fs_hz / resolution_hz - 1e-9)), 1)
    if L < n_samples:
        L = padded_length(n_samples, fs_hz, resolution_hz)
    freqs = np.arange(L // 2 + 1) * fs_hz / L
    keep = np.flatnonzero((freqs >= f_lo - 1e-9) & (freqs <= f_hi + 1e-9))
    return L, keep


def fft_features(e: Epoch, f_lo: float = 6.0, f_hi: float = 64.0, resolution_hz: float = 0.25) -> FeatureMatrix:
    L, keep = feature_bins(e.fs_hz, e.n_samples, f_lo, f_hi, resolution_hz)
    spec = np.fft.rfft(e.data, n=L, axis=-1)[:, keep]
    rows = np.empty((2 * e.n_channels, keep.size))
    rows[0::2] = spec.real
    rows[1::2] = spec.imag
    return FeatureMatrix(rows, keep * e.fs_hz / L)


def normalize_tokens(X: np.ndarray) -> np.ndarray:
    """Scale each feature matrix (last two axes) to unit RMS."""
    rms = np.sqrt(np.mean(X ** 2, axis=(-2, -1), keepdims=True))
    return X / np.where(rms > 0, rms, 1.0)


def feature_tensor(epochs: Sequence[Epoch], f_lo: float = 6.0, f_hi: float = 64.0,
                   resolution_hz: float = 0.25) -> np.ndarray:
    """Stacked, normalized feature matrices, shape (n_epochs, 2 * channels, n_bins)."""
    if not epochs:
        raise ValueError("no epochs")
    e0 = epochs[0]
    L, keep = feature_bins(e0.fs_hz, e0.n_samples, f_lo, f_hi, resolution_hz)
    data = np.stack([e.data for e in epochs])
    spec = np.fft.rfft(data, n=L, axis=-1)[:, :, keep]
    X = np.empty((len(epochs), 2 * e0.n_channels, keep.size))
    X[:, 0::2] = spec.real
    X[:, 1::2] = spec.imag
    return normalize_tokens(X)


@dataclass(frozen=True)
class DecoderConfig:
    """Everything needed to turn a raw trial into model input."""

    fs_hz: float = 250.0
    window_s: float = 1.0
    f_lo: float = 6.0
    f_hi: float = 64.0
    resolution_hz: float = 0.25
    preprocess: PreprocessConfig = PreprocessConfig()

    @property
    def segment_samples(self) -> int:
        """Raw samples consumed per decode: discarded head plus one window."""
        return int(math.floor(self.preprocess.discard_s * self.fs_hz + 1e-9)) + int(round(self.window_s * self.fs_hz))


def decode_input(e: Epoch, dc: DecoderConfig) -> np.ndarray:
    """Preprocess, take the first window and build normalized tokens, shape (tokens, bins)."""
    w = first_window(preprocess(e, dc.preprocess), dc.window_s)
    return feature_tensor([w], dc.f_lo, dc.f_hi, dc.resolution_hz)[0]


# --------------------------------------------------------------------------- model

@dataclass
class FuzzyModel:
    centers: np.ndarray      # (R, D)
    log_lambda: np.ndarray   # (D,)
    W_query: np.ndarray      # (n_in, D)
    W_value: np.ndarray      # (R, n_in, D_v)
    W1: np.ndarray           # (D_v, H)
    b1: np.ndarray           # (H,)
    W2: np.ndarray           # (H, C)
    b2: np.ndarray           # (C,)
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss_curve: list[float] = field(default_factory=list)

    @property
    def n_rules(self) -> int:
        return self.centers.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_query.shape[0]

    @property
    def n_classes(self) -> int:
        return self.b2.size

    @property
    def dims(self) -> dict:
        return {"R": self.n_rules, "D": self.centers.shape[1], "D_v": self.W_value.shape[2],
                "D_hidden": self.b1.size, "n_in": self.n_in, "n_classes": self.n_classes}

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_ORDER}

    def with_params(self, params: dict[str, np.ndarray]) -> "FuzzyModel":
        return replace(self, **params, loss_curve=list(self.loss_curve))

    def copy(self) -> "FuzzyModel":
        return self.with_params({k: v.copy() for k, v in self.params().items()})


def init_model(n_in: int, n_classes: int, n_rules: int = 5, D: int = 32, D_v: int = 32, D_hidden: int = 128,
               seed: int = 0, decoder: DecoderConfig | None = None) -> FuzzyModel:
    if n_rules < 1:
        raise ValueError("need at least one rule")
    rng = rng_for(seed, "fuzzy/init")

    def fan_in(shape, fan):
        bound = 1.0 / math.sqrt(fan)
        return rng.uniform(-bound, bound, size=shape)

    return FuzzyModel(
        centers=0.1 * rng.standard_normal((n_rules, D)),
        log_lambda=np.zeros(D),
        W_query=fan_in((n_in, D), n_in),
        W_value=fan_in((n_rules, n_in, D_v), n_in),
        W1=fan_in((D_v, D_hidden), D_v),
        b1=np.zeros(D_hidden),
        W2=fan_in((D_hidden, n_classes), D_hidden),
        b2=np.zeros(n_classes),
        seed=seed,
        decoder=decoder or DecoderConfig(),
    )


def membership(x, m, lam):
    """Modified-Laplace membership exp(-lam |x - m|)."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("lambda must be >= 0")
    return np.exp(-np.asarray(lam) * np.abs(np.asarray(x) - np.asarray(m)))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _as_tokens(X) -> np.ndarray:
    return X.rows if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)


def rule_logits(tokens: np.ndarray, model: FuzzyModel) -> np.ndarray:
    """-sum_d lambda_d |q_d - m_rd| for every token and rule; shape (..., R)."""
    tokens = _as_tokens(tokens)
    if tokens.shape[-1] != model.n_in:
        raise ValueError(f"token dimension {tokens.shape[-1]} does not match model input {model.n_in}")
    q = tokens @ model.W_query
    lam = np.exp(model.log_lambda)
    return -(np.abs(q[..., None, :] - model.centers) * lam).sum(axis=-1)


def firing_strengths(tokens, model: FuzzyModel) -> np.ndarray:
    """Normalized firing strength of each rule for each token; rows sum to one."""
    return _softmax(rule_logits(tokens, model))


def fuzzy_aic_forward(X, model: FuzzyModel) -> np.ndarray:
    """Sum over rules of log firing strength times the rule's value projection, mean over tokens."""
    tokens = _as_tokens(X)
    z = rule_logits(tokens, model)
    ls = z - logsumexp(z, axis=-1, keepdims=True)
    V = np.einsum("...tn,rnv->...trv", tokens, model.W_value)
    return (ls[..., None] * V).sum(axis=-2).mean(axis=-2)


def mlp_forward(y: np.ndarray, model: FuzzyModel) -> np.ndarray:
    return np.maximum(y @ model.W1 + model.b1, 0.0) @ model.W2 + model.b2


def logits(X, model: FuzzyModel) -> np.ndarray:
    return mlp_forward(fuzzy_aic_forward(X, model), model)


def predict_logits(model: FuzzyModel, logit_vec: np.ndarray) -> tuple[int, float]:
    p = _softmax(np.asarray(logit_vec, dtype=float))
    k = int(np.argmax(p))
    return k, float(p[k])


def predict(model: FuzzyModel, X) -> tuple[int, float]:
    """Most likely class (lowest index on ties) and its softmax probability."""
    return predict_logits(model, logits(X, model))


def predict_batch(model: FuzzyModel, X: np.ndarray) -> np.ndarray:
    return np.argmax(logits(X, model), axis=-1)


# --------------------------------------------------------------------------- loss and gradients

def loss_and_grads(model: FuzzyModel, X: np.ndarray, y: np.ndarray,
                   need_grads: bool = True) -> tuple[float, dict[str, np.ndarray] | None]:
    """Mean cross-entropy over a batch and its gradient for every parameter.

    X has shape (B, T, n_in); y holds integer labels. Arithmetic runs in the
    dtype of X (float32 for training, float64 for gradient checks).
    """
    X = np.asarray(X)
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float64)
    y = np.asarray(y, dtype=int)
    B, T, n_in = X.shape
    R, D = model.centers.shape
    D_v = model.W_value.shape[2]

    lam = np.exp(model.log_lambda)
    Q = X @ model.W_query                                   # (B,T,D)
    diff = Q[:, :, None, :] - model.centers                 # (B,T,R,D)
    adiff = np.abs(diff)
    z = -(adiff @ lam)                                      # (B,T,R)
    ls = z - logsumexp(z, axis=-1, keepdims=True)
    # sum_t sum_r ls[t,r] W_r^T x_t == sum_r W_r^T (sum_t ls[t,r] x_t): pool tokens per rule first
    S = ls.transpose(0, 2, 1) @ X                           # (B,R,n_in)
    Wv = model.W_value.reshape(R * n_in, D_v)
    o = S.reshape(B, R * n_in) @ Wv / T                     # (B,D_v)
    a1 = o @ model.W1 + model.b1
    h = np.maximum(a1, 0.0)
    out = h @ model.W2 + model.b2
    lse = logsumexp(out, axis=-1)
    loss = float(np.mean(lse - out[np.arange(B), y]))
    if not need_grads:
        return loss, None

    dout = np.exp(out - lse[:, None])
    dout[np.arange(B), y] -= 1.0
    dout /= B
    g = {"W2": h.T @ dout, "b2": dout.sum(axis=0)}
    da1 = (dout @ model.W2.T) * (a1 > 0)
    g["W1"] = o.T @ da1
    g["b1"] = da1.sum(axis=0)
    do = (da1 @ model.W1.T) / T                             # (B,D_v)
    g["W_value"] = (S.reshape(B, R * n_in).T @ do).reshape(R, n_in, D_v)
    dS = (do @ Wv.T).reshape(B, R, n_in)
    dls = X @ dS.transpose(0, 2, 1)                         # (B,T,R)
    dz = dls - np.exp(ls) * dls.sum(axis=-1, keepdims=True)
    sgn = np.sign(diff)
    g["centers"] = (dz.reshape(-1, R).T[:, None, :] @ sgn.reshape(-1, R, D).transpose(1, 0, 2))[:, 0] * lam
    dQ = -(dz[:, :, None, :] @ sgn)[:, :, 0] * lam          # (B,T,D)
    g["W_query"] = X.reshape(B * T, n_in).T @ dQ.reshape(B * T, D)
    g["log_lambda"] = -(dz.reshape(1, -1) @ adiff.reshape(-1, D))[0] * lam
    return loss, g


def _kink_signature(model: FuzzyModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Q = X @ model.W_query
    diff = Q[:, :, None, :] - model.centers
    o = fuzzy_aic_forward(X, model)
    return np.sign(diff), o @ model.W1 + model.b1 > 0


def grad_check(model: FuzzyModel, sample, h: float = 1e-5, n_coords: int = 200, seed: int = 0,
               kink_tol: float = 1e-8) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``sample`` is (tokens, label). Up to ``n_coords`` coordinates per parameter
    group are checked. Pairs with both magnitudes below 1e-12 (or below the
    difference quotient's rounding resolution) count as exact;
    coordinates whose perturbation moves an |q - m| or ReLU argument across
    zero (or within ``kink_tol`` of it) are skipped.
    """
    tokens, label = sample
    X = _as_tokens(tokens)[None].astype(float)
    y = np.array([int(label)])
    _, grads = loss_and_grads(model, X, y)
    rng = rng_for(seed, "grad_check")
    worst = 0.0
    for name in PARAM_ORDER:
        p = getattr(model, name)
        flat_n = p.size
        picks = np.arange(flat_n) if flat_n <= n_coords else rng.choice(flat_n, size=n_coords, replace=False)
        for idx in picks:
            coord = np.unravel_index(idx, p.shape)
            analytic = grads[name][coord]
            vals = []
            sigs = []
            orig = p[coord]
            for step in (h, -h):
                p[coord] = orig + step
                vals.append(loss_and_grads(model, X, y, need_grads=False)[0])
                sigs.append(_kink_signature(model, X))
            p[coord] = orig
            base = _kink_signature(model, X)
            near = _near_kink(model, X, kink_tol)
            if near or any(not (np.array_equal(s[0], base[0]) and np.array_equal(s[1], base[1])) for s in sigs):
                continue
            numeric = (vals[0] - vals[1]) / (2 * h)
            # smallest derivative a central difference can resolve: a few ulps of the loss over 2h
            resolution = max(1e-12, 4 * np.spacing(max(abs(vals[0]), abs(vals[1]))) / (2 * h))
            scale = max(abs(analytic), abs(numeric))
            if scale < resolution:
                continue
            worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def _near_kink(model: FuzzyModel, X: np.ndarray, tol: float) -> bool:
    Q = X @ model.W_query
    diff = Q[:, :, None, :] - model.centers
    a1 = fuzzy_aic_forward(X, model) @ model.W1 + model.b1
    return bool(np.any(np.abs(diff) < tol) or np.any(np.abs(a1) < tol))


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 64
    seed: int = 0
    rules: int = 5
    D: int = 32
    D_v: int = 32
    D_hidden: int = 128
    n_classes: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.epochs_max < 1 or self.batch_size < 1 or self.rules < 1:
            raise ValueError("epochs_max, batch_size and rules must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("lr and weight_decay must be >= 0, eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay:
                p *= 1 - c.lr * c.weight_decay
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def _stack_dataset(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        X, y = dataset
        return np.asarray(X, dtype=float), np.asarray(y, dtype=int)
    X = np.stack([_as_tokens(f) for f, _ in dataset])
    y = np.array([int(c) for _, c in dataset])
    return X, y


def train(dataset, cfg: TrainConfig = TrainConfig(), model: FuzzyModel | None = None,
          decoder: DecoderConfig | None = None) -> FuzzyModel:
    """Mini-batch AdamW on cross-entropy.

    ``dataset`` is either a list of (FeatureMatrix or token array, class) or a
    pre-stacked (X, y) pair with X of shape (N, tokens, bins).
    """
    X, y = _stack_dataset(dataset)
    if not np.all(np.isfinite(X)):
        raise TrainingError("training features contain non-finite values")
    if np.unique(y).size < 2:
        raise TrainingError("training data must cover at least two classes")
    if cfg.batch_size > len(y):
        raise TrainingError(f"batch size {cfg.batch_size} exceeds dataset size {len(y)}")
    n_classes = cfg.n_classes or int(y.max()) + 1
    if model is None:
        model = init_model(X.shape[2], n_classes, cfg.rules, cfg.D, cfg.D_v, cfg.D_hidden, cfg.seed, decoder)
    dtype = np.dtype(cfg.dtype)
    model = model.with_params({k: v.astype(dtype, copy=True) for k, v in model.params().items()})
    X = X.astype(dtype, copy=False)
    params = model.params()
    opt = AdamW(params, cfg)
    n = len(y)
    curve = []
    for epoch in range(cfg.epochs_max):
        order = rng_for(cfg.seed, f"train/shuffle/{epoch}").permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch + 1}, batch starting {start}")
            opt.step(params, grads)
            total += loss * idx.size
        curve.append(total / n)
        log.debug("epoch %d loss %.5f", epoch + 1, curve[-1])
    model.loss_curve = curve
    return model


def accuracy_on(model: FuzzyModel, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_batch(model, X) == np.asarray(y)))


# --------------------------------------------------------------------------- checkpoint

_DIMS = struct.Struct("<7I")
_DECODER = struct.Struct("<5f5fI")


def model_to_bytes(model: FuzzyModel) -> bytes:
    d = model.dims
    dc = model.decoder
    pp = dc.preprocess
    head = MODEL_MAGIC + _DIMS.pack(d["n_in"], d["D"], d["D_v"], d["R"], d["D_hidden"], d["n_classes"],
                                    model.seed & 0xFFFFFFFF)
    head += _DECODER.pack(dc.fs_hz, dc.window_s, dc.f_lo, dc.f_hi, dc.resolution_hz,
                          pp.lo_hz, pp.hi_hz, pp.gstop_db, pp.notch_q, pp.discard_s, int(pp.notch))
    body = b"".join(getattr(model, k).astype("<f4").tobytes() for k in PARAM_ORDER)
    return head + body


def model_from_bytes(raw: bytes) -> FuzzyModel:
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"bad model magic {raw[:8]!r}")
    off = 8
    n_in, D, D_v, R, H, C, seed = _DIMS.unpack_from(raw, off)
    off += _DIMS.size
    fs, win, f_lo, f_hi, res, lo, hi, gstop, q, disc, notch = _DECODER.unpack_from(raw, off)
    off += _DECODER.size
    shapes = {"centers": (R, D), "log_lambda": (D,), "W_query": (n_in, D), "W_value": (R, n_in, D_v),
              "W1": (D_v, H), "b1": (H,), "W2": (H, C), "b2": (C,)}
    params = {}
    for k in PARAM_ORDER:
        count = int(np.prod(shapes[k]))
        if off + 4 * count > len(raw):
            raise ValueError("truncated model file")
        params[k] = np.frombuffer(raw, "<f4", count, off).astype(np.float64).reshape(shapes[k])
        off += 4 * count
    if off != len(raw):
        raise ValueError("trailing bytes in model file")
    # float32 header fields are rounded back to the decimal values they were written from
    r = lambda v: float(np.format_float_positional(np.float32(v), unique=True))
    decoder = DecoderConfig(r(fs), r(win), r(f_lo), r(f_hi), r(res),
                            PreprocessConfig(r(lo), r(hi), r(gstop), bool(notch), r(q), r(disc)))
    return FuzzyModel(**params, seed=seed, decoder=decoder)


def save_model(model: FuzzyModel, path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path) -> FuzzyModel:
    return model_from_bytes(Path(path).read_bytes())


def write_loss_curve(model: FuzzyModel, path) -> None:
    lines = ["epoch,loss"] + [f"{i + 1},{v:.10g}" for i, v in enumerate(model.loss_curve)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_centers(model: FuzzyModel, path) -> None:
    R, D = model.centers.shape
    lines = ["rule," + ",".join(f"d{j}" for j in range(D))]
    lines += [f"{r}," + ",".join(f"{v:.8g}" for v in model.centers[r]) for r in range(R)]
    lines.append("lambda," + ",".join(f"{v:.8g}" for v in np.exp(model.log_lambda)))
    Path(path).write_text("\n".join(lines) + "\n")


def config_dict(cfg) -> dict:
    return asdict(cfg)
