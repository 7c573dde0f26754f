"""Per-agent load forecasting: a from-scratch two-layer LSTM trained online
with Adam on mean squared error, plus periodic federated averaging of the
parameter sets and a perfect-prediction oracle.

Inputs per window: the preceding three matching periods as
(time-of-day fraction, normalized consumption, normalized production);
outputs: normalized (consumption, production) for the upcoming period.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .data import LoadDataset, SECONDS_PER_DAY

WINDOW_STEPS = 3
INPUT_DIM = 3
OUTPUT_DIM = 2
HIDDEN_SIZE = 32
GENESIS_INIT_SCALE = 0.08
TRAIN_BATCH_MAX = 32

CHECKPOINT_MAGIC = b"EVMKLSTM"
CHECKPOINT_FORMAT = 1

#: Array attribute order for checkpoints, hashing and flat views. Gate blocks
#: inside each 4H axis are [input, forget, candidate, output].
PARAM_FIELDS = ("wx1", "wh1", "b1", "wx2", "wh2", "b2", "w_out", "b_out")


class ForecastError(ValueError):
    pass


@dataclass
class LstmParams:
    """Weights for two stacked LSTM layers and a linear output head."""

    wx1: np.ndarray  # (input_dim, 4H)
    wh1: np.ndarray  # (H, 4H)
    b1: np.ndarray   # (4H,)
    wx2: np.ndarray  # (H, 4H)
    wh2: np.ndarray  # (H, 4H)
    b2: np.ndarray   # (4H,)
    w_out: np.ndarray  # (H, output_dim)
    b_out: np.ndarray  # (output_dim,)
    version: int = 0

    @property
    def hidden_size(self) -> int:
        return self.wh1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.wx1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w_out.shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in PARAM_FIELDS)

    def copy(self) -> "LstmParams":
        return LstmParams(*(a.copy() for a in self.arrays()), version=self.version)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def same_shapes(self, other: "LstmParams") -> bool:
        return all(a.shape == b.shape for a, b in zip(self.arrays(), other.arrays()))


def init_params(seed: int, hidden_size: int = HIDDEN_SIZE, input_dim: int = INPUT_DIM,
                output_dim: int = OUTPUT_DIM, version: int = 0) -> LstmParams:
    """Seeded uniform initialization in [-GENESIS_INIT_SCALE, +GENESIS_INIT_SCALE]."""
    rng = np.random.default_rng(seed)
    h = hidden_size

    def u(*shape: int) -> np.ndarray:
        return rng.uniform(-GENESIS_INIT_SCALE, GENESIS_INIT_SCALE, shape)

    return LstmParams(u(input_dim, 4 * h), u(h, 4 * h), u(4 * h),
                      u(h, 4 * h), u(h, 4 * h), u(4 * h),
                      u(h, output_dim), u(output_dim), version=version)


def zeros_like_params(params: LstmParams) -> LstmParams:
    return LstmParams(*(np.zeros_like(a) for a in params.arrays()), version=params.version)


@dataclass(frozen=True)
class WindowSample:
    """One training sample: three input periods and the following period's target."""

    inputs: np.ndarray  # (WINDOW_STEPS, INPUT_DIM)
    target: np.ndarray  # (OUTPUT_DIM,)

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != WINDOW_STEPS:
            raise ForecastError(f"window needs exactly {WINDOW_STEPS} input steps")


@dataclass
class AdamState:
    """First/second moment accumulators matching the parameter shapes."""

    m: LstmParams
    v: LstmParams
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: LstmParams, **kwargs) -> "AdamState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params), **kwargs)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _cell_forward(x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
                  wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
    hs = wh.shape[0]
    z = x @ wx + h_prev @ wh + b
    i = _sigmoid(z[:, :hs])
    f = _sigmoid(z[:, hs:2 * hs])
    g = np.tanh(z[:, 2 * hs:3 * hs])
    o = _sigmoid(z[:, 3 * hs:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, i, f, g, o, tc)
    return h, c, cache


def _cell_backward(dh: np.ndarray, dc: np.ndarray, cache, wx: np.ndarray, wh: np.ndarray):
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                         dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1)
    dwx = x.T @ dz
    dwh = h_prev.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ wx.T
    dh_prev = dz @ wh.T
    return dx, dh_prev, dc_prev, dwx, dwh, db


def _forward_batch(params: LstmParams, x: np.ndarray):
    """Run the stacked recurrence on a batch; returns (y, caches, h2_final)."""
    bsz, steps, _ = x.shape
    h = params.hidden_size
    h1 = np.zeros((bsz, h))
    c1 = np.zeros((bsz, h))
    h2 = np.zeros((bsz, h))
    c2 = np.zeros((bsz, h))
    caches1, caches2 = [], []
    for t in range(steps):
        h1, c1, cache1 = _cell_forward(x[:, t], h1, c1, params.wx1, params.wh1, params.b1)
        h2, c2, cache2 = _cell_forward(h1, h2, c2, params.wx2, params.wh2, params.b2)
        caches1.append(cache1)
        caches2.append(cache2)
    y = h2 @ params.w_out + params.b_out
    return y, caches1, caches2, h2


def lstm_forward(params: LstmParams, window_inputs: np.ndarray) -> tuple[float, float]:
    """Deterministic prediction for one window: (consumption, production),
    in normalized units. Hidden and cell states start at zero per window."""
    if not params.all_finite():
        raise ForecastError("non-finite parameters rejected")
    x = np.asarray(window_inputs, dtype=np.float64)
    if x.shape != (WINDOW_STEPS, params.input_dim):
        raise ForecastError(f"window shape {x.shape} != ({WINDOW_STEPS}, {params.input_dim})")
    y, _, _, _ = _forward_batch(params, x[None, :, :])
    return float(y[0, 0]), float(y[0, 1])


def mse_and_gradient(params: LstmParams, batch: list[WindowSample]):
    """Mean squared error over the batch and its exact BPTT gradient."""
    x = np.stack([s.inputs for s in batch]).astype(np.float64)
    targets = np.stack([s.target for s in batch]).astype(np.float64)
    bsz, steps, _ = x.shape

    y, caches1, caches2, h2_final = _forward_batch(params, x)
    err = y - targets
    mse = float(np.mean(err * err))

    grads = zeros_like_params(params)
    dy = 2.0 * err / err.size
    grads.w_out = h2_final.T @ dy
    grads.b_out = dy.sum(axis=0)

    dh1_next = np.zeros((bsz, params.hidden_size))
    dc1_next = np.zeros_like(dh1_next)
    dh2_next = np.zeros_like(dh1_next)
    dc2_next = np.zeros_like(dh1_next)
    for t in range(steps - 1, -1, -1):
        dh2 = dh2_next + (dy @ params.w_out.T if t == steps - 1 else 0.0)
        dx2, dh2_next, dc2_next, dwx2, dwh2, db2 = _cell_backward(
            dh2, dc2_next, caches2[t], params.wx2, params.wh2)
        grads.wx2 += dwx2
        grads.wh2 += dwh2
        grads.b2 += db2

        dh1 = dh1_next + dx2
        _, dh1_next, dc1_next, dwx1, dwh1, db1 = _cell_backward(
            dh1, dc1_next, caches1[t], params.wx1, params.wh1)
        grads.wx1 += dwx1
        grads.wh1 += dwh1
        grads.b1 += db1
    return mse, grads


@dataclass(frozen=True)
class TrainResult:
    params: LstmParams
    adam: AdamState
    mse: float
    rejected: bool = False


def train_step(params: LstmParams, adam: AdamState, batch: list[WindowSample]) -> TrainResult:
    """One Adam update from the exact batch-MSE gradient.

    The reported mse is pre-update. A non-finite gradient rejects the step,
    leaving parameters and optimizer state unchanged but flagged.
    """
    if not batch:
        raise ForecastError("empty training batch")
    mse, grads = mse_and_gradient(params, batch)
    if not grads.all_finite() or not np.isfinite(mse):
        return TrainResult(params, adam, mse, rejected=True)

    t = adam.step_count + 1
    bc1 = 1.0 - adam.beta1 ** t
    bc2 = 1.0 - adam.beta2 ** t
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), adam.m.arrays(), adam.v.arrays()):
        m = adam.beta1 * m + (1.0 - adam.beta1) * g
        v = adam.beta2 * v + (1.0 - adam.beta2) * (g * g)
        update = adam.lr * (m / bc1) / (np.sqrt(v / bc2) + adam.epsilon)
        new_arrays.append(p - update)
        new_m.append(m)
        new_v.append(v)
    new_params = LstmParams(*new_arrays, version=params.version)
    new_adam = replace(adam,
                       m=LstmParams(*new_m, version=params.version),
                       v=LstmParams(*new_v, version=params.version),
                       step_count=t)
    return TrainResult(new_params, new_adam, mse, rejected=False)


def federated_aggregate(models: list[LstmParams]) -> LstmParams:
    """Element-wise arithmetic mean; version becomes max(inputs) + 1.

    Inputs are canonicalized by content hash before the fixed-order reduction,
    so the result is bitwise independent of argument order, and the mean is
    computed as base + mean(deltas) so aggregating identical parameter sets is
    exactly idempotent.
    """
    if not models:
        raise ForecastError("nothing to aggregate")
    first = models[0]
    for m in models[1:]:
        if not first.same_shapes(m):
            raise ForecastError("aggregation refused: parameter shape mismatch")
    ordered = sorted(models, key=param_hash)
    base = ordered[0]
    k = len(ordered)
    out = []
    for idx in range(len(PARAM_FIELDS)):
        deltas = np.stack([m.arrays()[idx] - base.arrays()[idx] for m in ordered])
        out.append(base.arrays()[idx] + deltas.sum(axis=0) / k)
    return LstmParams(*out, version=max(m.version for m in models) + 1)


# --- checkpoint encoding -----------------------------------------------------

def params_to_bytes(params: LstmParams) -> bytes:
    """Versioned flat binary: magic, format, model version, dims, then all
    arrays as little-endian float64 in PARAM_FIELDS order (C layout)."""
    head = CHECKPOINT_MAGIC + struct.pack(
        "<IqIII", CHECKPOINT_FORMAT, params.version,
        params.input_dim, params.hidden_size, params.output_dim)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    return head + body


def params_from_bytes(blob: bytes) -> LstmParams:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ForecastError("bad checkpoint magic")
    fmt, version, input_dim, h, output_dim = struct.unpack_from("<IqIII", blob, 8)
    if fmt != CHECKPOINT_FORMAT:
        raise ForecastError(f"unsupported checkpoint format {fmt}")
    shapes = [(input_dim, 4 * h), (h, 4 * h), (4 * h,),
              (h, 4 * h), (h, 4 * h), (4 * h,),
              (h, output_dim), (output_dim,)]
    offset = 8 + struct.calcsize("<IqIII")
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays.append(arr.astype(np.float64))
        offset += count * 8
    if offset != len(blob):
        raise ForecastError("checkpoint length mismatch")
    return LstmParams(*arrays, version=version)


def param_hash(params: LstmParams) -> str:
    return hashlib.sha256(params_to_bytes(params)).hexdigest()


class ParamRegistry:
    """The shared global model: genesis is seeded, updates must be sequential.

    An EV joining mid-simulation pulls the current head as its starting point.
    """

    def __init__(self, genesis_seed: int, hidden_size: int = HIDDEN_SIZE):
        self._params = init_params(genesis_seed, hidden_size=hidden_size, version=0)

    @property
    def version(self) -> int:
        return self._params.version

    def update(self, params: LstmParams) -> LstmParams:
        if params.version != self._params.version + 1:
            raise ForecastError(f"version gap: have {self._params.version}, got {params.version}")
        self._params = params.copy()
        return self._params

    def head_hash(self) -> str:
        return param_hash(self._params)


def pull_global(registry: ParamRegistry) -> LstmParams:
    """Current global parameters (a private copy)."""
    return registry._params.copy()


# --- normalization and the online trainer -----------------------------------

class MinMaxNormalizer:
    """Running min-max scaling with the affine transform frozen at the first
    moment a positive range is observed (no retroactive rescaling, no
    lookahead). Before freezing, values normalize to 0 and denormalize to the
    running minimum (the constant seen so far)."""

    def __init__(self) -> None:
        self.lo = float("inf")
        self.hi = float("-inf")
        self.frozen_lo: float | None = None
        self.frozen_range: float | None = None

    def update(self, value: float) -> None:
        self.lo = min(self.lo, value)
        self.hi = max(self.hi, value)
        if self.frozen_range is None and self.hi > self.lo:
            self.frozen_lo = self.lo
            self.frozen_range = self.hi - self.lo

    def normalize(self, value: float) -> float:
        if self.frozen_range is None:
            return 0.0
        return (value - self.frozen_lo) / self.frozen_range

    def denormalize(self, value: float) -> float:
        if self.frozen_range is None:
            return self.lo if self.lo != float("inf") else 0.0
        return self.frozen_lo + value * self.frozen_range


class OnlineTrainer:
    """Per-agent forecasting state: history, normalizers, local parameters.

    One train_step per matching period on the most recent TRAIN_BATCH_MAX
    windows. Windows are (re)normalized with the current statistics when a
    batch is assembled, never with stale ones.
    """

    def __init__(self, agent_id: str, params: LstmParams, period_s: int,
                 adam: AdamState | None = None):
        self.agent_id = agent_id
        self.params = params
        self.adam = adam if adam is not None else AdamState.for_params(params)
        self.period_s = period_s
        self.history: list[tuple[int, float, float]] = []  # (period_start_s, cons, prod)
        self.norm_cons = MinMaxNormalizer()
        self.norm_prod = MinMaxNormalizer()
        self.last_mse: float | None = None
        self.rejected_steps = 0

    def observe_period(self, period_index: int, consumption_kwh: float,
                       production_kwh: float) -> None:
        self.history.append((period_index * self.period_s, consumption_kwh, production_kwh))
        self.norm_cons.update(consumption_kwh)
        self.norm_prod.update(production_kwh)

    def _features(self, start_s: float, cons: float, prod: float) -> list[float]:
        return [(start_s % SECONDS_PER_DAY) / SECONDS_PER_DAY,
                self.norm_cons.normalize(cons), self.norm_prod.normalize(prod)]

    def _window_at(self, end: int) -> WindowSample:
        """Sample whose inputs are history[end-3:end] and target history[end]."""
        rows = [self._features(*self.history[k]) for k in range(end - WINDOW_STEPS, end)]
        _, cons, prod = self.history[end]
        target = np.array([self.norm_cons.normalize(cons), self.norm_prod.normalize(prod)])
        return WindowSample(np.array(rows), target)

    def predict_next(self) -> tuple[float, float] | None:
        """Forecast (consumption, production) in kWh for the period after the
        last observed one; None until three periods of history exist."""
        n = len(self.history)
        if n < WINDOW_STEPS:
            return None
        rows = [self._features(*self.history[k]) for k in range(n - WINDOW_STEPS, n)]
        c_norm, p_norm = lstm_forward(self.params, np.array(rows))
        return self.norm_cons.denormalize(c_norm), self.norm_prod.denormalize(p_norm)

    def train_once(self) -> None:
        n = len(self.history)
        if n < WINDOW_STEPS + 1:
            return
        first = max(WINDOW_STEPS, n - TRAIN_BATCH_MAX)
        batch = [self._window_at(end) for end in range(first, n)]
        result = train_step(self.params, self.adam, batch)
        if result.rejected:
            self.rejected_steps += 1
        else:
            self.params = result.params
            self.adam = result.adam
        self.last_mse = result.mse

    def adopt(self, params: LstmParams) -> None:
        """Replace the local model (after a federated aggregation or a pull)."""
        self.params = params.copy()


def perfect_forecast(dataset: LoadDataset, agent_id: str, period_index: int,
                     period_s: int = 60) -> tuple[float, float]:
    """Exact (consumption, production) sums for the given matching period."""
    steps = period_s // dataset.resolution_s
    n_periods = dataset.n_steps // steps
    if not 0 <= period_index < n_periods:
        raise ForecastError(f"period {period_index} outside horizon (0..{n_periods - 1})")
    series = dataset.agents[agent_id]
    lo, hi = period_index * steps, (period_index + 1) * steps
    return (float(series.consumption_kwh[lo:hi].sum()),
            float(series.production_kwh[lo:hi].sum()))
