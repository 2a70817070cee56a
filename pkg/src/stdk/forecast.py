"""Quantile ConvLSTM forecaster over gridded fields, plus the grid-stack format.

A sample is three consecutive frames ``t, t+1, t+2`` and the target frame
``t+5``. The ConvLSTM is unrolled over the input frames, its final hidden
state goes through a 1x1 convolution to three raw channels, and the same
non-crossing activation as the interpolation network is applied per pixel.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError, InsufficientDataError, InvalidArgumentError, MissingInputError, NumericError, ShapeError
from .net import DEFAULT_QUANTILES, output_activation, pinball_loss

log = logging.getLogger(__name__)

N_INPUTS = 3
TARGET_OFFSET = 5


@dataclass(frozen=True)
class ImageSequenceSample:
    inputs: np.ndarray = field(repr=False)  # [n_inputs, 1, H, W]
    target: np.ndarray = field(repr=False)  # [H, W], NaN = missing
    start: int = 0


@dataclass
class ConvLstmState:
    hidden: ad.Tensor
    cell: ad.Tensor


@dataclass(frozen=True)
class ForecastConfig:
    hidden_channels: int = 16
    kernel: int = 3
    quantiles: tuple[float, float, float] = DEFAULT_QUANTILES
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-2

    def __post_init__(self):
        if self.hidden_channels < 1 or self.kernel < 1 or self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidArgumentError(f"invalid forecast config {self}")


def build_sequences(grids, n_inputs: int = N_INPUTS, target_offset: int = TARGET_OFFSET, stride: int = 1):
    """Slide a window over time-ordered grids: inputs ``t..t+n_inputs-1``, target ``t+target_offset``."""
    grids = [np.asarray(g, dtype=np.float64) for g in grids]
    if target_offset < n_inputs or n_inputs < 1 or stride < 1:
        raise InvalidArgumentError("need n_inputs >= 1, target_offset >= n_inputs and stride >= 1")
    if len(grids) < target_offset + 1:
        raise InsufficientDataError(f"need at least {target_offset + 1} grids, got {len(grids)}")
    shape = grids[0].shape
    if any(g.shape != shape or g.ndim != 2 for g in grids):
        raise ShapeError("all grids must share one 2-D shape")
    samples = []
    for t in range(0, len(grids) - target_offset, stride):
        inputs = np.stack(grids[t : t + n_inputs])[:, None]
        samples.append(ImageSequenceSample(inputs, grids[t + target_offset].copy(), t))
    return samples


def zero_state(batch_shape, hidden_channels: int, height: int, width: int) -> ConvLstmState:
    shape = tuple(batch_shape) + (hidden_channels, height, width)
    return ConvLstmState(ad.Tensor(np.zeros(shape)), ad.Tensor(np.zeros(shape)))


def convlstm_cell(x, state: ConvLstmState, weight, bias) -> ConvLstmState:
    """One step of a peephole-free ConvLSTM with same-padded convolutions.

    ``weight`` is ``[4C, C_in + C, k, k]`` with gate blocks ordered
    input, forget, output, candidate; ``bias`` is ``[4C]``.
    """
    x = ad.as_tensor(x)
    channels = state.hidden.shape[-3]
    if weight.shape[0] != 4 * channels or weight.shape[1] != x.shape[-3] + channels:
        raise ShapeError(
            f"cell weight {weight.shape} does not fit input {x.shape} with {channels} hidden channels"
        )
    if x.shape[:-3] != state.hidden.shape[:-3] or x.shape[-2:] != state.hidden.shape[-2:]:
        raise ShapeError(f"input {x.shape} and hidden state {state.hidden.shape} disagree")
    axis = x.ndim - 3
    z = ad.conv2d(ad.concat([x, state.hidden], axis=axis), weight, bias)

    def gate(k):
        index = [slice(None)] * z.ndim
        index[axis] = slice(k * channels, (k + 1) * channels)
        return z[tuple(index)]

    i = ad.sigmoid(gate(0))
    f = ad.sigmoid(gate(1))
    o = ad.sigmoid(gate(2))
    g = ad.tanh(gate(3))
    cell = f * state.cell + i * g
    hidden = o * ad.tanh(cell)
    return ConvLstmState(hidden, cell)


class ConvLstmForecaster:
    def __init__(self, in_channels: int = 1, hidden_channels: int = 16, kernel: int = 3, seed: int = 0):
        self.in_channels = int(in_channels)
        self.hidden_channels = int(hidden_channels)
        self.kernel = int(kernel)
        rng = np.random.default_rng(seed)
        c, k = self.hidden_channels, self.kernel
        fan_in = (self.in_channels + c) * k * k
        self._params = {
            "cell.weight": ad.Parameter(ad.glorot_uniform(rng, (4 * c, self.in_channels + c, k, k), fan_in, 4 * c * k * k)),
            "cell.bias": ad.Parameter(np.zeros(4 * c)),
            "head.weight": ad.Parameter(ad.glorot_uniform(rng, (3, c, 1, 1), c, 3)),
            "head.bias": ad.Parameter(np.zeros(3)),
        }

    def parameters(self) -> dict:
        return self._params

    def _frames(self, inputs) -> ad.Tensor:
        return ad.as_tensor(inputs)

    def __call__(self, inputs) -> ad.Tensor:
        """Raw head output: ``[3, H, W]`` or ``[N, 3, H, W]`` for batched input."""
        x = self._frames(inputs)
        if x.ndim not in (4, 5) or x.shape[-3] != self.in_channels:
            raise ShapeError(
                f"expected frames [T, {self.in_channels}, H, W] or [N, T, {self.in_channels}, H, W], got {x.shape}"
            )
        time_axis = x.ndim - 4
        batch_shape = x.shape[:time_axis]
        state = zero_state(batch_shape, self.hidden_channels, x.shape[-2], x.shape[-1])
        for t in range(x.shape[time_axis]):
            frame = x[(slice(None),) * time_axis + (t,)]
            state = convlstm_cell(frame, state, self._params["cell.weight"], self._params["cell.bias"])
        return ad.conv2d(state.hidden, self._params["head.weight"], self._params["head.bias"])

    def quantiles(self, inputs):
        raw = self(inputs)
        return output_activation(raw, axis=raw.ndim - 3)

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self._params):
            raise ShapeError(f"state blocks {sorted(state)} do not match model blocks {sorted(self._params)}")
        for name, p in self._params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


class StdkForecaster(ConvLstmForecaster):
    """ConvLSTM whose every input frame is stacked with fixed spatial basis rasters.

    ``basis_channels`` is ``[K, H, W]``; with ``K = 0`` this is exactly the
    plain forecaster.
    """

    def __init__(self, basis_channels, hidden_channels: int = 16, kernel: int = 3, seed: int = 0):
        self.basis_channels = np.asarray(basis_channels, dtype=np.float64)
        if self.basis_channels.ndim != 3:
            raise ShapeError(f"basis channels must be [K, H, W], got {self.basis_channels.shape}")
        super().__init__(1 + len(self.basis_channels), hidden_channels, kernel, seed)

    def _frames(self, inputs) -> ad.Tensor:
        x = ad.as_tensor(inputs)
        if x.ndim not in (4, 5) or x.shape[-3] != 1:
            raise ShapeError(f"expected single-channel frames, got {x.shape}")
        if x.shape[-2:] != self.basis_channels.shape[-2:]:
            raise ShapeError(f"frames {x.shape[-2:]} vs basis rasters {self.basis_channels.shape[-2:]}")
        extra = np.broadcast_to(self.basis_channels, x.shape[:-3] + self.basis_channels.shape)
        return ad.concat([x, ad.Tensor(extra)], axis=x.ndim - 3)


def forecast_model(inputs, params) -> tuple:
    """Functional form: ``params`` is the dict from ``model.parameters()``."""
    weight = params["cell.weight"]
    model = ConvLstmForecaster(weight.shape[1] - weight.shape[0] // 4, weight.shape[0] // 4, weight.shape[2])
    model._params = params
    return model.quantiles(inputs)


def stdk_forecaster(inputs, basis_channels, params) -> tuple:
    weight = params["cell.weight"]
    model = StdkForecaster(basis_channels, weight.shape[0] // 4, weight.shape[2])
    if weight.shape[1] != model.in_channels + model.hidden_channels:
        raise ShapeError(f"cell weight {weight.shape} does not fit {len(basis_channels)} basis channels")
    model._params = params
    return model.quantiles(inputs)


def stack_samples(samples):
    """Batch arrays: inputs ``[N, T, 1, H, W]`` with NaN -> 0, targets, observed mask."""
    inputs = np.stack([s.inputs for s in samples])
    targets = np.stack([s.target for s in samples])
    return np.nan_to_num(inputs, nan=0.0), targets, ~np.isnan(targets)


def train_forecaster(samples, config: ForecastConfig = ForecastConfig(), seed: int = 0, model=None, basis_channels=None):
    """Adam on the mean pixelwise pinball loss; missing target pixels are masked out.

    Missing input pixels are filled with 0, the standardized mean.
    """
    if not samples:
        raise InsufficientDataError("no training samples")
    if model is None:
        if basis_channels is None:
            model = ConvLstmForecaster(1, config.hidden_channels, config.kernel, seed)
        else:
            model = StdkForecaster(basis_channels, config.hidden_channels, config.kernel, seed)
    inputs, targets, observed = stack_samples(samples)
    params = list(model.parameters().values())
    rng = np.random.default_rng(seed)
    n = len(samples)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, weight = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss = pinball_loss(model.quantiles(inputs[idx]), targets[idx], config.quantiles, mask=observed[idx])
            value = loss.item()
            if not math.isfinite(value):
                worst = max(float(np.max(np.abs(p.data))) for p in params)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}; max |param| = {worst:.3e}")
            ad.backward(loss, params)
            ad.adam_step(params, config.lr)
            total += value * len(idx)
            weight += len(idx)
        history.append(total / weight)
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return model, history


def predict_fields(model, samples, chunk: int = 16) -> np.ndarray:
    """Quantile maps ``[N, 3, H, W]`` ordered (lower, median, upper)."""
    if not samples:
        return np.zeros((0, 3, 0, 0))
    inputs, _, _ = stack_samples(samples)
    out = []
    with ad.no_grad():
        for start in range(0, len(inputs), chunk):
            lower, median, upper = model.quantiles(inputs[start : start + chunk])
            out.append(np.stack([lower.data, median.data, upper.data], axis=1))
    return np.concatenate(out)


GRID_MAGIC = b"GRDS"
GRID_VERSION = 1


def write_grid_stack(path, stack) -> None:
    """Write ``[T, H, W]`` or ``[T, C, H, W]`` float64 frames; NaN marks missing.

    Layout: ``GRDS``, then little-endian u32 version, C, T, H, W, then
    ``T*C*H*W`` little-endian float64 values in that order.
    """
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ShapeError(f"grid stack must be [T, H, W] or [T, C, H, W], got {arr.shape}")
    t, c, h, w = arr.shape
    header = GRID_MAGIC + struct.pack("<5I", GRID_VERSION, c, t, h, w)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_grid_stack(path) -> np.ndarray:
    """Return a ``[T, C, H, W]`` array."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"grid stack not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != GRID_MAGIC or len(buf) < 24:
        raise FormatError(f"{path}: not a grid stack")
    version, c, t, h, w = struct.unpack_from("<5I", buf, 4)
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid stack version {version}")
    count = t * c * h * w
    if len(buf) != 24 + 8 * count:
        raise FormatError(f"{path}: expected {count} values, file holds {(len(buf) - 24) / 8:g}")
    return np.frombuffer(buf, dtype="<f8", offset=24).reshape(t, c, h, w).astype(np.float64)
